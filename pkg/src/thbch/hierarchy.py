"""Hierarchical meshes and (truncated) hierarchical B-spline spaces.

A mesh stores, per level, a boolean array of active cells.  Refinement is
always dyadic, so the children of cell (i, j) of level l are the cells
(2i + a, 2j + b), a, b in {0, 1}, of level l + 1.

The basis is represented through one sparse matrix per level k,
``space.level_matrix(k)`` (ndof x dim of level-k tensor space), holding the
coefficients of every active function of level <= k with respect to the
level-k tensor B-splines.  Truncation is applied while walking up the levels.
Per active cell, the rows that touch the cell's (p+1)^2 local B-splines give
the local extraction table used by evaluation and assembly.
"""

from __future__ import annotations

from collections import namedtuple
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .errors import DomainError, StructureError
from .splines import TensorSpace, dyadic_refine, tensor_space, two_scale

FieldEval = namedtuple("FieldEval", ["value", "grad", "laplacian"])


class LevelStack:
    """Nested tensor-product spaces of levels 0..nlevels-1 and their two-scale operators."""

    def __init__(self, base: TensorSpace, nlevels: int):
        if nlevels < 1:
            raise StructureError("need at least one level")
        self.base = base
        self.nlevels = int(nlevels)
        spaces = [base]
        for _ in range(1, nlevels):
            spaces.append(dyadic_refine(spaces[-1]))
        self.spaces = spaces
        self._ops = {}

    @property
    def degree(self):
        return self.base.degree

    @property
    def box(self):
        return self.base.box

    @property
    def area(self) -> float:
        sx, sy = self.base.scale
        return float(sx * sy)

    def op(self, level: int):
        """Sparse two-scale matrix from ``level`` to ``level + 1``."""
        if level not in self._ops:
            self._ops[level] = two_scale(self.spaces[level], self.spaces[level + 1]).matrix
        return self._ops[level]

    def cell_size(self, level: int) -> np.ndarray:
        nx, ny = self.spaces[level].nel_shape
        sx, sy = self.base.scale
        return np.array([sx / nx, sy / ny])


def _children_all(mask: np.ndarray) -> np.ndarray:
    """Coarse mask: True where all four children are True."""
    return mask[0::2, 0::2] & mask[1::2, 0::2] & mask[0::2, 1::2] & mask[1::2, 1::2]


def _upsample(mask: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(mask, 2, axis=0), 2, axis=1)


def _support_inside(cells: np.ndarray, p: int) -> np.ndarray:
    """Per function of a level: support (cells i-p..i) lies entirely in ``cells``."""
    nx, ny = cells.shape
    csum = np.zeros((nx + 1, ny + 1), dtype=np.int64)
    csum[1:, 1:] = np.cumsum(np.cumsum(cells.astype(np.int64), axis=0), axis=1)
    i = np.arange(nx + p)
    j = np.arange(ny + p)
    i0, i1 = np.maximum(i - p, 0), np.minimum(i, nx - 1) + 1
    j0, j1 = np.maximum(j - p, 0), np.minimum(j, ny - 1) + 1
    count = (
        csum[i1[:, None], j1[None, :]]
        - csum[i0[:, None], j1[None, :]]
        - csum[i1[:, None], j0[None, :]]
        + csum[i0[:, None], j0[None, :]]
    )
    size = (i1 - i0)[:, None] * (j1 - j0)[None, :]
    return count == size


class HierarchicalMesh:
    """Active cells per level over a :class:`LevelStack`.

    Instances are treated as immutable: refine/coarsen return new meshes.
    """

    def __init__(self, stack: LevelStack, active):
        self.stack = stack
        self.active = [np.asarray(a, dtype=bool).copy() for a in active]
        if len(self.active) != stack.nlevels:
            raise StructureError("one active-cell array per level required")
        for lev, a in enumerate(self.active):
            if a.shape != stack.spaces[lev].nel_shape:
                raise StructureError(f"level {lev}: wrong active array shape {a.shape}")
            a.setflags(write=False)

    @classmethod
    def uniform(cls, stack: LevelStack, level: int = 0) -> "HierarchicalMesh":
        active = [np.zeros(s.nel_shape, dtype=bool) for s in stack.spaces]
        active[level][:] = True
        return cls(stack, active)

    @property
    def nlevels(self) -> int:
        return self.stack.nlevels

    @property
    def degree(self) -> int:
        return self.stack.degree

    @cached_property
    def domains(self):
        """Per level l: level-l cells contained in the region Omega^l."""
        dom = [None] * self.nlevels
        dom[-1] = self.active[-1].copy()
        for lev in range(self.nlevels - 2, -1, -1):
            dom[lev] = self.active[lev] | _children_all(dom[lev + 1])
        return dom

    @cached_property
    def deactivated(self):
        """Per level l: level-l cells that have been refined (contained in Omega^{l+1})."""
        out = []
        for lev in range(self.nlevels):
            if lev + 1 < self.nlevels:
                out.append(_children_all(self.domains[lev + 1]))
            else:
                out.append(np.zeros_like(self.active[lev]))
        return out

    @property
    def num_active(self) -> int:
        return int(sum(a.sum() for a in self.active))

    def active_counts(self):
        return [int(a.sum()) for a in self.active]

    @property
    def max_active_level(self) -> int:
        levels = [lev for lev, a in enumerate(self.active) if a.any()]
        return max(levels) if levels else 0

    def active_cells(self):
        """Active cells as (level, i, j) tuples, ordered by level then (i, j)."""
        out = []
        for lev, a in enumerate(self.active):
            ii, jj = np.nonzero(a)
            out.extend((lev, int(i), int(j)) for i, j in zip(ii, jj))
        return out

    def cell_arrays(self):
        """(level, i, j) integer arrays of the active cells in canonical order."""
        levs, iis, jjs = [], [], []
        for lev, a in enumerate(self.active):
            ii, jj = np.nonzero(a)
            levs.append(np.full(ii.size, lev, dtype=np.intp))
            iis.append(ii.astype(np.intp))
            jjs.append(jj.astype(np.intp))
        return np.concatenate(levs), np.concatenate(iis), np.concatenate(jjs)

    def is_active(self, level, i, j) -> bool:
        a = self.active[level]
        return 0 <= i < a.shape[0] and 0 <= j < a.shape[1] and bool(a[i, j])

    def cell_area(self, level: int) -> float:
        h = self.stack.cell_size(level)
        return float(h[0] * h[1])

    def covered_area(self) -> float:
        return float(sum(a.sum() * self.cell_area(lev) for lev, a in enumerate(self.active)))

    def coverage_at_finest(self) -> np.ndarray:
        """Number of active cells covering each finest-level cell (1 everywhere when valid)."""
        top = self.nlevels - 1
        cover = np.zeros(self.stack.spaces[top].nel_shape, dtype=np.int64)
        for lev, a in enumerate(self.active):
            f = 2 ** (top - lev)
            cover += np.repeat(np.repeat(a.astype(np.int64), f, axis=0), f, axis=1)
        return cover

    def validate(self):
        """Raise StructureError unless the active cells tile the domain without overlap."""
        if not np.all(self.coverage_at_finest() == 1):
            raise StructureError("active cells do not tile the domain")

    def with_active(self, active) -> "HierarchicalMesh":
        return HierarchicalMesh(self.stack, active)

    def refine_cells(self, level: int, mask: np.ndarray) -> "HierarchicalMesh":
        """Replace active cells of ``level`` selected by ``mask`` by their children."""
        mask = np.asarray(mask, dtype=bool)
        if np.any(mask & ~self.active[level]):
            raise StructureError("cannot refine non-active cells")
        if level + 1 >= self.nlevels and mask.any():
            raise StructureError("cannot refine cells of the finest level")
        active = [a.copy() for a in self.active]
        active[level] &= ~mask
        if mask.any():
            active[level + 1] |= _upsample(mask)
        return self.with_active(active)

    def reactivate_cells(self, level: int, mask: np.ndarray) -> "HierarchicalMesh":
        """Activate cells of ``level`` whose four children are all active; remove the children."""
        mask = np.asarray(mask, dtype=bool)
        if level + 1 >= self.nlevels:
            raise StructureError("finest-level cells have no children")
        if np.any(mask & ~_children_all(self.active[level + 1])):
            raise StructureError("children of a reactivated cell must all be active")
        active = [a.copy() for a in self.active]
        active[level] |= mask
        active[level + 1] &= ~_upsample(mask)
        return self.with_active(active)

    def dump(self) -> str:
        """Text dump: header comments then one 'level i j' line per active cell."""
        base = self.stack.base
        (x0, x1), (y0, y1) = base.box
        lines = [
            "# thbch mesh dump v1",
            f"# degree {base.degree}",
            f"# base {base.nel_shape[0]} {base.nel_shape[1]}",
            f"# levels {self.nlevels}",
            f"# box {x0!r} {x1!r} {y0!r} {y1!r}",
        ]
        lines.extend(f"{lev} {i} {j}" for lev, i, j in self.active_cells())
        return "\n".join(lines) + "\n"

    @classmethod
    def from_dump(cls, text: str, stack: LevelStack | None = None) -> "HierarchicalMesh":
        header = {}
        cells = []
        for raw in text.splitlines():
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                parts = line[1:].split()
                if parts:
                    header[parts[0]] = parts[1:]
                continue
            lev, i, j = (int(v) for v in line.split())
            cells.append((lev, i, j))
        if stack is None:
            try:
                p = int(header["degree"][0])
                nx, ny = (int(v) for v in header["base"])
                nlev = int(header["levels"][0])
                box = tuple(float(v) for v in header.get("box", ["0", "1", "0", "1"]))
            except (KeyError, IndexError, ValueError) as exc:
                raise StructureError("mesh dump lacks degree/base/levels header") from exc
            stack = LevelStack(tensor_space(p, (nx, ny), ((box[0], box[1]), (box[2], box[3]))), nlev)
        active = [np.zeros(s.nel_shape, dtype=bool) for s in stack.spaces]
        for lev, i, j in cells:
            if not (0 <= lev < stack.nlevels):
                raise StructureError(f"level {lev} out of range")
            active[lev][i, j] = True
        return cls(stack, active)

    def same_cells(self, other: "HierarchicalMesh") -> bool:
        return all(np.array_equal(a, b) for a, b in zip(self.active, other.active))


def never_refined_set(mesh: HierarchicalMesh, level: int):
    """Cells of levels <= ``level`` that have never been refined.

    A level-k cell qualifies when it is not contained in Omega^{k+1}: it is
    either active or was never activated.  Returned as a set of (k, i, j).
    """
    if not (0 <= level < mesh.nlevels):
        raise StructureError("level out of range")
    out = set()
    for k in range(level + 1):
        ii, jj = np.nonzero(~mesh.deactivated[k])
        out.update((k, int(i), int(j)) for i, j in zip(ii, jj))
    return out


class HierarchicalSpace:
    """Hierarchical (truncated by default) B-spline space on a mesh.

    Active functions are numbered level by level, row-major within a level.
    """

    def __init__(self, mesh: HierarchicalMesh, truncated: bool = True):
        self.mesh = mesh
        self.truncated = bool(truncated)
        stack = mesh.stack
        p = stack.degree
        self.degree = p
        self.nloc = (p + 1) ** 2

        self.fun_active = []
        self.fun_inside = []  # supp within Omega^l, used by truncation
        for lev in range(mesh.nlevels):
            inside = _support_inside(mesh.domains[lev], p)
            inside_next = _support_inside(mesh.deactivated[lev], p)
            self.fun_inside.append(inside)
            self.fun_active.append(inside & ~inside_next)

        counts = [int(f.sum()) for f in self.fun_active]
        self.level_offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.intp)
        self.ndof = int(self.level_offsets[-1])
        levs, flats = [], []
        self._dof_of = []
        for lev, f in enumerate(self.fun_active):
            flat = np.flatnonzero(f.ravel())
            levs.append(np.full(flat.size, lev, dtype=np.intp))
            flats.append(flat)
            lookup = np.full(f.size, -1, dtype=np.intp)
            lookup[flat] = self.level_offsets[lev] + np.arange(flat.size)
            self._dof_of.append(lookup)
        self.dof_level = np.concatenate(levs)
        self.dof_flat = np.concatenate(flats)
        self._level_mats = {}
        self._level_csc = {}
        self._build_cells()

    def __len__(self):
        return self.ndof

    @property
    def stack(self) -> LevelStack:
        return self.mesh.stack

    def dof_index(self, level: int, i: int, j: int) -> int:
        """Global index of the active function (i, j) of ``level``, or -1."""
        ny = self.stack.spaces[level].shape[1]
        return int(self._dof_of[level][i * ny + j])

    def level_matrix(self, k: int) -> sp.csr_matrix:
        """Coefficients of all active functions of level <= k w.r.t. level-k B-splines."""
        if k in self._level_mats:
            return self._level_mats[k]
        stack = self.stack
        dim_k = stack.spaces[k].dim
        if k == 0:
            prev = sp.csr_matrix((self.ndof, dim_k))
        else:
            prev = self.level_matrix(k - 1) @ stack.op(k - 1)
            if self.truncated:
                keep = (~self.fun_inside[k].ravel()).astype(float)
                prev = prev @ sp.diags(keep)
        lo, hi = self.level_offsets[k], self.level_offsets[k + 1]
        rows = np.arange(lo, hi)
        ident = sp.csr_matrix(
            (np.ones(hi - lo), (rows, self.dof_flat[lo:hi])), shape=(self.ndof, dim_k)
        )
        mat = (prev + ident).tocsr()
        mat.eliminate_zeros()
        mat.sort_indices()
        self._level_mats[k] = mat
        return mat

    def finest_matrix(self) -> sp.csr_matrix:
        return self.level_matrix(self.mesh.nlevels - 1)

    def local_extraction(self, level: int, ii, jj):
        """Local extraction for arbitrary level-``level`` cells.

        Returns ``(idx, ext)``: idx (ncell, nmax) global function indices
        (padding slots hold -1) and ext (ncell, nmax, (p+1)^2) coefficients of
        each function w.r.t. the cell's local tensor B-splines, ordered
        (a, b) -> a * (p+1) + b for functions (i+a, j+b).
        """
        ii = np.asarray(ii, dtype=np.intp)
        jj = np.asarray(jj, dtype=np.intp)
        p = self.degree
        nloc = self.nloc
        ncell = ii.size
        if ncell == 0:
            return np.zeros((0, 1), dtype=np.intp), np.zeros((0, 1, nloc))
        if level not in self._level_csc:
            self._level_csc[level] = self.level_matrix(level).tocsc()
        E = self._level_csc[level]
        ny = self.stack.spaces[level].shape[1]
        a = np.arange(p + 1)
        cols = ((ii[:, None, None] + a[None, :, None]) * ny + (jj[:, None, None] + a[None, None, :])).ravel()
        sub = E[:, cols].tocoo()
        cell = sub.col // nloc
        loc = sub.col % nloc
        key = cell.astype(np.int64) * self.ndof + sub.row
        ukey, inv = np.unique(key, return_inverse=True)
        ucell = ukey // max(self.ndof, 1)
        urow = ukey % max(self.ndof, 1)
        starts = np.searchsorted(ucell, np.arange(ncell))
        slot = np.arange(ukey.size) - starts[ucell]
        nmax = int(slot.max()) + 1 if slot.size else 1
        idx = np.full((ncell, nmax), -1, dtype=np.intp)
        idx[ucell, slot] = urow
        ext = np.zeros((ncell, nmax, nloc))
        ext[ucell[inv], slot[inv], loc] = sub.data
        return idx, ext

    def _build_cells(self):
        mesh = self.mesh
        lev, ii, jj = mesh.cell_arrays()
        self.cell_level, self.cell_i, self.cell_j = lev, ii, jj
        self.ncell = lev.size
        self._cell_id = []
        for k, a in enumerate(mesh.active):
            ids = np.full(a.shape, -1, dtype=np.intp)
            sel = np.flatnonzero(lev == k)
            ids[ii[sel], jj[sel]] = sel
            self._cell_id.append(ids)
        parts = []
        for k in range(mesh.nlevels):
            sel = np.flatnonzero(lev == k)
            if sel.size:
                parts.append((sel, *self.local_extraction(k, ii[sel], jj[sel])))
        nmax = max((idx.shape[1] for _, idx, _ in parts), default=1)
        self.cell_idx = np.full((self.ncell, nmax), -1, dtype=np.intp)
        self.cell_ext = np.zeros((self.ncell, nmax, self.nloc))
        for sel, idx, ext in parts:
            self.cell_idx[sel, : idx.shape[1]] = idx
            self.cell_ext[sel, : ext.shape[1]] = ext

    def cell_id(self, level, i, j):
        return self._cell_id[level][i, j]

    def locate(self, pts):
        """Active cell index containing each physical point."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        base = self.stack.base
        uv = base.to_param(pts)
        tol = 1e-12
        if np.any(uv < -tol) or np.any(uv > 1 + tol) or not np.all(np.isfinite(uv)):
            raise DomainError("evaluation point outside the domain")
        uv = np.clip(uv, 0.0, 1.0)
        cid = np.full(len(uv), -1, dtype=np.intp)
        for k, ids in enumerate(self._cell_id):
            nx, ny = ids.shape
            ix = np.minimum((uv[:, 0] * nx).astype(np.intp), nx - 1)
            iy = np.minimum((uv[:, 1] * ny).astype(np.intp), ny - 1)
            hit = ids[ix, iy]
            take = (cid < 0) & (hit >= 0)
            cid[take] = hit[take]
        if np.any(cid < 0):
            raise StructureError("mesh does not cover the evaluation points")
        return cid, uv

    def tensor_local(self, level, ii, jj, u, v, nders=0):
        """Local tensor B-spline tables on level-``level`` cells at parametric points.

        ii, jj: (ncell,); u, v: (ncell, npt).  Returns val (ncell, npt, nloc)
        and, for nders >= 1, grad (..., 2) in physical coordinates; for
        nders == 2 also the Laplacian.
        """
        ts = self.stack.spaces[level]
        p = self.degree
        ii = np.asarray(ii, dtype=np.intp)
        jj = np.asarray(jj, dtype=np.intp)
        u = np.asarray(u, dtype=float)
        v = np.asarray(v, dtype=float)
        nc, npt = u.shape
        sx = np.repeat(ii + p, npt)
        sy = np.repeat(jj + p, npt)
        _, tx = ts.kv_x.eval_basis(u.ravel(), nders, span=sx)
        _, ty = ts.kv_y.eval_basis(v.ravel(), nders, span=sy)
        tx = tx.reshape(nc, npt, p + 1, nders + 1)
        ty = ty.reshape(nc, npt, p + 1, nders + 1)
        val = np.einsum("cqa,cqb->cqab", tx[..., 0], ty[..., 0]).reshape(nc, npt, -1)
        if nders == 0:
            return val, None, None
        scx, scy = ts.scale
        gx = np.einsum("cqa,cqb->cqab", tx[..., 1], ty[..., 0]).reshape(nc, npt, -1) / scx
        gy = np.einsum("cqa,cqb->cqab", tx[..., 0], ty[..., 1]).reshape(nc, npt, -1) / scy
        grad = np.stack([gx, gy], axis=-1)
        lap = None
        if nders >= 2:
            lap = (
                np.einsum("cqa,cqb->cqab", tx[..., 2], ty[..., 0]).reshape(nc, npt, -1) / scx**2
                + np.einsum("cqa,cqb->cqab", tx[..., 0], ty[..., 2]).reshape(nc, npt, -1) / scy**2
            )
        return val, grad, lap

    def basis_at_points(self, pts, nders=0):
        """Nonzero active functions at physical points.

        Returns ``(idx, val, grad, lap)``: idx (npts, nmax) with -1 padding,
        val (npts, nmax), grad (npts, nmax, 2) and lap (npts, nmax) (None when
        not requested).
        """
        cid, uv = self.locate(pts)
        npts = len(cid)
        nmax = self.cell_idx.shape[1]
        idx = self.cell_idx[cid]
        val = np.zeros((npts, nmax))
        grad = np.zeros((npts, nmax, 2)) if nders >= 1 else None
        lap = np.zeros((npts, nmax)) if nders >= 2 else None
        for k in range(self.mesh.nlevels):
            sel = np.flatnonzero(self.cell_level[cid] == k)
            if sel.size == 0:
                continue
            c = cid[sel]
            tv, tg, tl = self.tensor_local(
                k, self.cell_i[c], self.cell_j[c], uv[sel, 0][:, None], uv[sel, 1][:, None], nders
            )
            ext = self.cell_ext[c]
            val[sel] = np.einsum("cml,cl->cm", ext, tv[:, 0])
            if nders >= 1:
                grad[sel] = np.einsum("cml,cld->cmd", ext, tg[:, 0])
            if nders >= 2:
                lap[sel] = np.einsum("cml,cl->cm", ext, tl[:, 0])
        return idx, val, grad, lap

    def incidence(self):
        """Map active cell (level, i, j) -> sorted list of (function index, function level)."""
        out = {}
        for c in range(self.ncell):
            funs = self.cell_idx[c][self.cell_idx[c] >= 0]
            key = (int(self.cell_level[c]), int(self.cell_i[c]), int(self.cell_j[c]))
            out[key] = [(int(f), int(self.dof_level[f])) for f in np.sort(funs)]
        return out

    def cell_function_levels(self):
        """(min, max) level of the functions not vanishing on each active cell."""
        lv = np.where(self.cell_idx >= 0, self.dof_level[np.maximum(self.cell_idx, 0)], -1)
        big = np.iinfo(np.intp).max
        lo = np.where(self.cell_idx >= 0, lv, big).min(axis=1)
        hi = lv.max(axis=1)
        return lo, hi


def build_space(mesh: HierarchicalMesh, truncated: bool = True) -> HierarchicalSpace:
    return HierarchicalSpace(mesh, truncated)


def cell_function_incidence(space: HierarchicalSpace):
    return space.incidence()


def eval_field(space: HierarchicalSpace, coeffs, points, nders: int = 0) -> FieldEval:
    """Evaluate the field sum_i coeffs[i] N_i at physical points."""
    coeffs = np.asarray(coeffs, dtype=float)
    if coeffs.shape != (space.ndof,):
        raise StructureError(f"coefficient vector has length {coeffs.shape}, expected {space.ndof}")
    idx, val, grad, lap = space.basis_at_points(points, nders)
    cl = np.where(idx >= 0, coeffs[np.maximum(idx, 0)], 0.0)
    value = np.einsum("pm,pm->p", cl, val)
    g = np.einsum("pm,pmd->pd", cl, grad) if nders >= 1 else None
    lp = np.einsum("pm,pm->p", cl, lap) if nders >= 2 else None
    return FieldEval(value, g, lp)
