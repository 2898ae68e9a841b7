"""Galerkin assembly of the Cahn-Hilliard operators on hierarchical spaces.

Every active cell is integrated with a tensor Gauss rule at its own level;
boundary terms use the same univariate rule on the boundary edges of active
cells.  Local blocks are scattered with a precomputed pattern and summed with
``np.bincount``, so results do not depend on anything but the cell order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import kernels
from .errors import ConfigError
from .hierarchy import HierarchicalSpace


@dataclass(frozen=True)
class QuadratureRule:
    """Gauss-Legendre rule with ``order`` points per direction on [0, 1]."""

    order: int

    @property
    def points(self) -> np.ndarray:
        x, _ = np.polynomial.legendre.leggauss(self.order)
        return 0.5 * (x + 1.0)

    @property
    def weights(self) -> np.ndarray:
        _, w = np.polynomial.legendre.leggauss(self.order)
        return 0.5 * w

    @classmethod
    def for_degree(cls, p: int) -> "QuadratureRule":
        return cls(p + 1)


@dataclass(frozen=True)
class MaterialParams:
    """Interface coefficient ``lam``, double-well coefficients and Nitsche constant.

    ``sigma = 0`` is accepted (linear model, used for testing).
    """

    lam: float
    sigma: float = 1.0
    nu: float = 1.0
    eps_n: float | None = None

    def __post_init__(self):
        if self.eps_n is None:
            object.__setattr__(self, "eps_n", 1.0e4 * self.lam)
        if self.lam <= 0 or self.nu <= 0 or self.sigma < 0 or self.eps_n <= 0:
            raise ConfigError("material parameters must be positive")

    @property
    def binodal(self) -> float:
        if self.sigma == 0:
            raise ConfigError("the linear model (sigma = 0) has no binodal points")
        return float(np.sqrt(self.nu / self.sigma))


def double_well(u, params: MaterialParams):
    """F, F', F'', F''' of F(u) = sigma/4 (u^2 - nu/sigma)^2.

    For sigma = 0 the (infinite) constant nu^2/(4 sigma) is dropped.
    """
    u = np.asarray(u, dtype=float)
    s, n = params.sigma, params.nu
    if s > 0:
        F = 0.25 * s * (u * u - n / s) ** 2
    else:
        F = -0.5 * n * u * u
    return F, s * u**3 - n * u, 3.0 * s * u * u - n, 6.0 * s * u


class Scatter:
    """Precomputed sparse pattern for scattering padded local blocks."""

    def __init__(self, idx: np.ndarray, n: int):
        self.n = n
        self.idx = idx
        valid = idx >= 0
        self.vmask = valid
        pair = valid[:, :, None] & valid[:, None, :]
        self.pmask = pair
        rows = np.broadcast_to(idx[:, :, None], pair.shape)[pair]
        cols = np.broadcast_to(idx[:, None, :], pair.shape)[pair]
        key = rows.astype(np.int64) * n + cols
        ukey, self.inv = np.unique(key, return_inverse=True)
        self.rows = (ukey // n).astype(np.intp)
        self.cols = (ukey % n).astype(np.intp)
        self.nnz = ukey.size
        indptr = np.zeros(n + 1, dtype=np.intp)
        np.add.at(indptr, self.rows + 1, 1)
        self.indptr = np.cumsum(indptr)

    def matrix(self, local: np.ndarray) -> sp.csr_matrix:
        data = np.bincount(self.inv, weights=local[self.pmask], minlength=self.nnz)
        return sp.csr_matrix((data, self.cols.copy(), self.indptr.copy()), shape=(self.n, self.n))

    def vector(self, local: np.ndarray) -> np.ndarray:
        return np.bincount(self.idx[self.vmask], weights=local[self.vmask], minlength=self.n)

    def gather(self, coeffs: np.ndarray) -> np.ndarray:
        return np.where(self.vmask, coeffs[np.maximum(self.idx, 0)], 0.0)


@dataclass(eq=False)
class VolumeData:
    idx: np.ndarray  # (nc, nm), -1 padded
    N: np.ndarray  # (nc, nm, nq)
    G: np.ndarray  # (nc, nm, nq, 2)
    L: np.ndarray  # (nc, nm, nq) Laplacian
    w: np.ndarray  # (nc, nq) weights incl. Jacobian
    pts: np.ndarray  # (nc, nq, 2) physical points
    scatter: Scatter = field(repr=False)


@dataclass(eq=False)
class BoundaryData:
    idx: np.ndarray  # (ne, nm)
    N: np.ndarray  # (ne, nm, nq)
    GN: np.ndarray  # (ne, nm, nq) normal derivative
    L: np.ndarray  # (ne, nm, nq)
    w: np.ndarray  # (ne, nq)
    h: np.ndarray  # (ne,) edge length
    pts: np.ndarray  # (ne, nq, 2)
    scatter: Scatter = field(repr=False)


def _hier_tables(space, level, ii, jj, u, v, nders):
    tv, tg, tl = space.tensor_local(level, ii, jj, u, v, nders)
    cid = space._cell_id[level][ii, jj]
    ext = space.cell_ext[cid]
    N = np.einsum("cml,cql->cmq", ext, tv)
    G = np.einsum("cml,cqld->cmqd", ext, tg) if tg is not None else None
    L = np.einsum("cml,cql->cmq", ext, tl) if tl is not None else None
    return cid, N, G, L


def volume_data(space: HierarchicalSpace, quad: QuadratureRule | None = None) -> VolumeData:
    quad = quad or QuadratureRule.for_degree(space.degree)
    key = ("volume", quad.order)
    cache = space.__dict__.setdefault("_asm_cache", {})
    if key in cache:
        return cache[key]
    g, wg = quad.points, quad.weights
    gu = np.repeat(g, g.size)
    gv = np.tile(g, g.size)
    w2 = np.repeat(wg, g.size) * np.tile(wg, g.size)
    nq = gu.size
    nc, nm = space.cell_idx.shape
    N = np.zeros((nc, nm, nq))
    G = np.zeros((nc, nm, nq, 2))
    L = np.zeros((nc, nm, nq))
    w = np.zeros((nc, nq))
    pts = np.zeros((nc, nq, 2))
    stack = space.stack
    for k in range(space.mesh.nlevels):
        sel = np.flatnonzero(space.cell_level == k)
        if sel.size == 0:
            continue
        nx, ny = stack.spaces[k].nel_shape
        ii, jj = space.cell_i[sel], space.cell_j[sel]
        u = (ii[:, None] + gu[None, :]) / nx
        v = (jj[:, None] + gv[None, :]) / ny
        cid, Nk, Gk, Lk = _hier_tables(space, k, ii, jj, u, v, 2)
        N[cid], G[cid], L[cid] = Nk, Gk, Lk
        hx, hy = stack.cell_size(k)
        w[cid] = w2[None, :] * hx * hy
        pts[cid] = stack.base.to_phys(np.stack([u, v], axis=-1))
    vd = VolumeData(space.cell_idx, N, G, L, w, pts, Scatter(space.cell_idx, space.ndof))
    cache[key] = vd
    return vd


_SIDES = (
    # (name, axis fixed, at end?, normal)
    ("left", 0, False, (-1.0, 0.0)),
    ("right", 0, True, (1.0, 0.0)),
    ("bottom", 1, False, (0.0, -1.0)),
    ("top", 1, True, (0.0, 1.0)),
)


def boundary_data(space: HierarchicalSpace, quad: QuadratureRule | None = None) -> BoundaryData:
    quad = quad or QuadratureRule.for_degree(space.degree)
    key = ("boundary", quad.order)
    cache = space.__dict__.setdefault("_asm_cache", {})
    if key in cache:
        return cache[key]
    g, wg = quad.points, quad.weights
    stack = space.stack
    chunks = []
    for k in range(space.mesh.nlevels):
        sel = np.flatnonzero(space.cell_level == k)
        if sel.size == 0:
            continue
        nx, ny = stack.spaces[k].nel_shape
        hx, hy = stack.cell_size(k)
        ii, jj = space.cell_i[sel], space.cell_j[sel]
        for _, axis, at_end, normal in _SIDES:
            if axis == 0:
                on = ii == (nx - 1 if at_end else 0)
            else:
                on = jj == (ny - 1 if at_end else 0)
            if not on.any():
                continue
            bi, bj = ii[on], jj[on]
            if axis == 0:
                u = np.full((bi.size, g.size), 1.0 if at_end else 0.0)
                v = (bj[:, None] + g[None, :]) / ny
                length = hy
            else:
                u = (bi[:, None] + g[None, :]) / nx
                v = np.full((bi.size, g.size), 1.0 if at_end else 0.0)
                length = hx
            _, Nk, Gk, Lk = _hier_tables(space, k, bi, bj, u, v, 2)
            n = np.asarray(normal)
            cid = space._cell_id[k][bi, bj]
            chunks.append(
                (
                    cid,
                    Nk,
                    np.einsum("cmqd,d->cmq", Gk, n),
                    Lk,
                    np.broadcast_to(wg * length, (bi.size, g.size)),
                    np.full(bi.size, length),
                    stack.base.to_phys(np.stack([u, v], axis=-1)),
                )
            )
    cid = np.concatenate([c[0] for c in chunks])
    idx = space.cell_idx[cid]
    bd = BoundaryData(
        idx,
        np.concatenate([c[1] for c in chunks]),
        np.concatenate([c[2] for c in chunks]),
        np.concatenate([c[3] for c in chunks]),
        np.concatenate([c[4] for c in chunks]),
        np.concatenate([c[5] for c in chunks]),
        np.concatenate([c[6] for c in chunks]),
        Scatter(idx, space.ndof),
    )
    cache[key] = bd
    return bd


def _gram(A, B, w, scatter):
    return scatter.matrix(np.einsum("cq,caq,cbq->cab", w, A, B))


def assemble_mass(space: HierarchicalSpace, quad: QuadratureRule | None = None) -> sp.csr_matrix:
    vd = volume_data(space, quad)
    return _gram(vd.N, vd.N, vd.w, vd.scatter)


def assemble_gradient_gram(space: HierarchicalSpace, quad: QuadratureRule | None = None) -> sp.csr_matrix:
    """Matrix of integrals grad N_i . grad N_j."""
    vd = volume_data(space, quad)
    return vd.scatter.matrix(np.einsum("cq,caqd,cbqd->cab", vd.w, vd.G, vd.G))


def assemble_stiffness_terms(space: HierarchicalSpace, quad: QuadratureRule | None, params: MaterialParams):
    """(K_lap, K_bd, M_N): bilaplacian, boundary consistency and Nitsche penalty matrices.

    K_bd[i, j] = int_{dOmega} (grad N_i . n) lam Lap N_j ds (not symmetric).
    """
    vd = volume_data(space, quad)
    bd = boundary_data(space, quad)
    k_lap = params.lam * _gram(vd.L, vd.L, vd.w, vd.scatter)
    k_bd = params.lam * _gram(bd.GN, bd.L, bd.w, bd.scatter)
    wh = bd.w * bd.h[:, None]
    m_n = params.eps_n * _gram(bd.GN, bd.GN, wh, bd.scatter)
    return k_lap, k_bd, m_n


def assemble_boundary_penalty(space: HierarchicalSpace, eps: float, quad: QuadratureRule | None = None):
    """int_{dOmega} (grad N_i . n) eps h (grad N_j . n) ds."""
    bd = boundary_data(space, quad)
    return eps * _gram(bd.GN, bd.GN, bd.w * bd.h[:, None], bd.scatter)


def assemble_nonlinear(space: HierarchicalSpace, quad: QuadratureRule | None, params: MaterialParams, u_hat):
    """Nonlinear flux vector F_bar(u) and its Jacobian K_F at ``u_hat``."""
    vd = volume_data(space, quad)
    uloc = vd.scatter.gather(np.asarray(u_hat, dtype=float))
    fl, kl = kernels.nonlinear_local(vd.N, vd.G, vd.w, uloc, params.sigma, params.nu)
    return vd.scatter.vector(fl), vd.scatter.matrix(kl)


@dataclass(eq=False)
class SystemOperators:
    """Linear operators of one space; reused while the mesh is unchanged."""

    space: HierarchicalSpace
    params: MaterialParams
    quad: QuadratureRule
    M: sp.csr_matrix
    K_lap: sp.csr_matrix
    K_bd: sp.csr_matrix
    M_N: sp.csr_matrix

    @property
    def K_lin(self) -> sp.csr_matrix:
        if not hasattr(self, "_k_lin"):
            self._k_lin = (self.K_lap - self.K_bd - self.K_bd.T + self.M_N).tocsr()
        return self._k_lin

    @property
    def ndof(self) -> int:
        return self.space.ndof

    def nonlinear(self, u_hat):
        return assemble_nonlinear(self.space, self.quad, self.params, u_hat)


def system_operators(space: HierarchicalSpace, params: MaterialParams, quad: QuadratureRule | None = None) -> SystemOperators:
    quad = quad or QuadratureRule.for_degree(space.degree)
    cache = space.__dict__.setdefault("_asm_cache", {})
    key = ("ops", quad.order, params)
    if key not in cache:
        M = assemble_mass(space, quad)
        k_lap, k_bd, m_n = assemble_stiffness_terms(space, quad, params)
        cache[key] = SystemOperators(space, params, quad, M, k_lap, k_bd, m_n)
    return cache[key]


def residual(ops: SystemOperators, params: MaterialParams, u_hat, u_dot, fbar=None):
    """R = M u_dot + F_bar(u) + (K_lap - K_bd - K_bd^T + M_N) u."""
    u_hat = np.asarray(u_hat, dtype=float)
    if fbar is None:
        fbar, _ = assemble_nonlinear(ops.space, ops.quad, params, u_hat)
    return ops.M @ np.asarray(u_dot, dtype=float) + fbar + ops.K_lin @ u_hat


def field_at_quadrature(space, u_hat, quad=None):
    """Values and gradients of the field at the volume quadrature points."""
    vd = volume_data(space, quad)
    uloc = vd.scatter.gather(np.asarray(u_hat, dtype=float))
    return np.einsum("ca,caq->cq", uloc, vd.N), np.einsum("ca,caqd->cqd", uloc, vd.G), vd


def free_energy(space, quad, params: MaterialParams, u_hat) -> float:
    """Ginzburg-Landau energy: integral of F(u) + lam/2 |grad u|^2."""
    u, gu, vd = field_at_quadrature(space, u_hat, quad)
    F = double_well(u, params)[0]
    return float(np.sum(vd.w * (F + 0.5 * params.lam * np.sum(gu * gu, axis=-1))))


def total_mass(space, quad, u_hat) -> float:
    u, _, vd = field_at_quadrature(space, u_hat, quad)
    return float(np.sum(vd.w * u))
