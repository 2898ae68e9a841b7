"""Error indicators, marking, and graded refinement/coarsening of hierarchical meshes.

Grading follows the class-mu admissibility of truncated hierarchical
B-splines: every active cell sees nonvanishing functions of at most mu
consecutive levels.  Neighborhoods are built from support extensions:
S(Q, k) is the union of the supports of the level-k tensor B-splines that do
not vanish on Q.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .assembly import MaterialParams, QuadratureRule, field_at_quadrature
from .errors import ConfigError, StructureError
from .hierarchy import HierarchicalMesh, HierarchicalSpace, _children_all


class MarkSet:
    """Per-level boolean masks of marked cells."""

    def __init__(self, masks):
        self.masks = [np.asarray(m, dtype=bool).copy() for m in masks]

    @classmethod
    def empty(cls, mesh: HierarchicalMesh) -> "MarkSet":
        return cls([np.zeros_like(a) for a in mesh.active])

    @classmethod
    def from_cells(cls, mesh: HierarchicalMesh, cells) -> "MarkSet":
        ms = cls.empty(mesh)
        for lev, i, j in cells:
            ms.masks[lev][i, j] = True
        return ms

    def cells(self):
        out = []
        for lev, m in enumerate(self.masks):
            ii, jj = np.nonzero(m)
            out.extend((lev, int(i), int(j)) for i, j in zip(ii, jj))
        return out

    def __len__(self):
        return int(sum(m.sum() for m in self.masks))

    def is_empty(self) -> bool:
        return len(self) == 0

    def dump(self) -> str:
        return "".join(f"{lev} {i} {j}\n" for lev, i, j in self.cells())


@dataclass(eq=False)
class IndicatorField:
    """One indicator value per active cell of ``space`` (space cell order)."""

    space: HierarchicalSpace
    values: np.ndarray
    kind: str  # "field" or "gradient"


def indicator_field(space: HierarchicalSpace, u_hat, params: MaterialParams | None = None, quad=None) -> IndicatorField:
    """1 - |cell mean of u| / binodal value, per active cell."""
    u, _, vd = field_at_quadrature(space, u_hat, quad)
    binodal = params.binodal if params is not None else 1.0
    area = vd.w.sum(axis=1)
    mean = np.sum(vd.w * u, axis=1) / area
    return IndicatorField(space, 1.0 - np.abs(mean / binodal), "field")


def indicator_gradient(space: HierarchicalSpace, u_hat, quad=None) -> IndicatorField:
    """Cell mean of |grad u|, per active cell."""
    # |grad u| is not polynomial, so the mass-matrix rule is too coarse here
    quad = quad or QuadratureRule(2 * space.degree + 4)
    _, gu, vd = field_at_quadrature(space, u_hat, quad)
    area = vd.w.sum(axis=1)
    return IndicatorField(space, np.sum(vd.w * np.linalg.norm(gu, axis=-1), axis=1) / area, "gradient")


def mark(indicator: IndicatorField, threshold: float, mesh: HierarchicalMesh | None = None, nlevels: int | None = None):
    """Split active cells into refinement and coarsening mark sets.

    Cells above ``threshold`` and below the finest level nlevels-1 are marked
    for refinement; every other active cell of level >= 1 is marked for
    coarsening.
    """
    if threshold <= 0 or (indicator.kind == "field" and threshold >= 1):
        raise ConfigError(f"invalid marking threshold {threshold} for {indicator.kind} indicator")
    space = indicator.space
    mesh = mesh or space.mesh
    nlevels = nlevels or mesh.nlevels
    refine = MarkSet.empty(mesh)
    coarsen = MarkSet.empty(mesh)
    above = indicator.values > threshold
    lev, ii, jj = space.cell_level, space.cell_i, space.cell_j
    r = above & (lev < nlevels - 1)
    c = ~above & (lev >= 1)
    for k in range(mesh.nlevels):
        sel = lev == k
        refine.masks[k][ii[sel & r], jj[sel & r]] = True
        coarsen.masks[k][ii[sel & c], jj[sel & c]] = True
    return refine, coarsen


def _coarsen_any(mask: np.ndarray, times: int) -> np.ndarray:
    for _ in range(times):
        mask = mask[0::2, 0::2] | mask[1::2, 0::2] | mask[0::2, 1::2] | mask[1::2, 1::2]
    return mask


def _dilate(mask: np.ndarray, p: int) -> np.ndarray:
    return ndimage.binary_dilation(mask, structure=np.ones((2 * p + 1, 2 * p + 1), dtype=bool))


def _refine_neighborhood_mask(mesh: HierarchicalMesh, level: int, marked: np.ndarray, mu: int) -> np.ndarray | None:
    """Active cells of level level-mu+1 meeting S(Q, level-mu+2) for any marked Q."""
    target = level - mu + 1
    if target < 0:
        return None
    ext_level = target + 1
    anc = _coarsen_any(marked, level - ext_level)
    region = _dilate(anc, mesh.degree)
    return _coarsen_any(region, 1) & mesh.active[target]


def refine_neighborhood(mesh: HierarchicalMesh, cell, mu: int):
    """Cells of level l-mu+1 that must be refined along with ``cell`` = (l, i, j)."""
    if mu < 2:
        raise ConfigError("admissibility class mu must be >= 2")
    lev, i, j = cell
    m = np.zeros(mesh.active[lev].shape, dtype=bool)
    m[i, j] = True
    nb = _refine_neighborhood_mask(mesh, lev, m, mu)
    if nb is None:
        return set()
    ii, jj = np.nonzero(nb)
    return {(lev - mu + 1, int(a), int(b)) for a, b in zip(ii, jj)}


def _check_marks(mesh, marks: MarkSet, min_level=0):
    if len(marks.masks) != mesh.nlevels:
        raise StructureError("mark set has the wrong number of levels")
    for lev, (m, a) in enumerate(zip(marks.masks, mesh.active)):
        if m.shape != a.shape:
            raise StructureError(f"mark mask of level {lev} has the wrong shape")
        if np.any(m & ~a):
            raise StructureError(f"marked cell of level {lev} is not active")
        if lev < min_level and m.any():
            raise StructureError(f"cells of level {lev} cannot be marked")


def refine(mesh: HierarchicalMesh, marked: MarkSet, mu: int) -> HierarchicalMesh:
    """Admissible refinement: marked cells and their grading neighborhoods are bisected."""
    if mu < 2:
        raise ConfigError("admissibility class mu must be >= 2")
    _check_marks(mesh, marked)
    if marked.masks[-1].any():
        raise StructureError("cells of the finest level cannot be refined")
    marks = [m.copy() for m in marked.masks]
    for lev in range(mesh.nlevels - 1, -1, -1):
        if not marks[lev].any():
            continue
        nb = _refine_neighborhood_mask(mesh, lev, marks[lev], mu)
        if nb is not None:
            marks[lev - mu + 1] |= nb
        mesh = mesh.refine_cells(lev, marks[lev])
    return mesh


def _coarsen_blocked(mesh: HierarchicalMesh, level: int, mu: int) -> np.ndarray:
    """Level-(level-1) cells whose reactivation would break class-mu grading.

    A parent Q of level l-1 is blocked when an active cell of level l+mu-1
    meets S(Q, l+mu-2), the support extension of Q w.r.t. level-(l+mu-2)
    B-splines.
    """
    fine = level + mu - 1
    shape = mesh.active[level - 1].shape
    if fine >= mesh.nlevels:
        return np.zeros(shape, dtype=bool)
    ext = fine - 1
    occupied = _coarsen_any(mesh.active[fine], 1)
    return _coarsen_any(_dilate(occupied, mesh.degree), ext - level + 1)


def coarsen_neighborhood(mesh: HierarchicalMesh, cell, mu: int):
    """Active cells of level l+mu-1 that prevent reactivating ``cell`` = (l-1, i, j)."""
    if mu < 2:
        raise ConfigError("admissibility class mu must be >= 2")
    plev, i, j = cell
    level = plev + 1
    fine = level + mu - 1
    if level < 1 or fine >= mesh.nlevels:
        return set()
    p = mesh.degree
    ext = fine - 1
    nx, ny = mesh.active[ext].shape
    d = 2 ** (ext - plev)
    i0, i1 = max(i * d - p, 0), min((i + 1) * d - 1 + p, nx - 1)
    j0, j1 = max(j * d - p, 0), min((j + 1) * d - 1 + p, ny - 1)
    act = mesh.active[fine][2 * i0:2 * (i1 + 1), 2 * j0:2 * (j1 + 1)]
    ii, jj = np.nonzero(act)
    return {(fine, int(a + 2 * i0), int(b + 2 * j0)) for a, b in zip(ii, jj)}


def coarsen(mesh: HierarchicalMesh, marked: MarkSet, mu: int) -> HierarchicalMesh:
    """Conservative admissible coarsening.

    A parent is reactivated only when all four children are marked and no
    active cell of level l+mu-1 lies in its support extension.
    """
    if mu < 2:
        raise ConfigError("admissibility class mu must be >= 2")
    _check_marks(mesh, marked, min_level=1)
    for lev in range(mesh.nlevels - 1, 0, -1):
        m = marked.masks[lev] & mesh.active[lev]
        if not m.any():
            continue
        cand = _children_all(m)
        cand &= ~_coarsen_blocked(mesh, lev, mu)
        if cand.any():
            mesh = mesh.reactivate_cells(lev - 1, cand)
    return mesh


def check_admissible(space: HierarchicalSpace, mu: int):
    """(ok, offending cells): each active cell must see functions of at most mu levels."""
    lo, hi = space.cell_function_levels()
    bad = np.flatnonzero(hi - lo > mu - 1)
    cells = [
        (int(space.cell_level[c]), int(space.cell_i[c]), int(space.cell_j[c])) for c in bad
    ]
    return len(cells) == 0, cells
