"""Field transfer between hierarchical spaces.

Cross integrals between two spaces are computed on the common refinement of
their meshes, where both integrands are polynomial on every cell, so the
(p+1)-point Gauss rule is exact.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .assembly import QuadratureRule, assemble_boundary_penalty, assemble_mass, volume_data
from .errors import SolverError, StructureError
from .hierarchy import HierarchicalMesh, HierarchicalSpace
from .timestep import LU_OPTIONS


def common_refinement(a: HierarchicalMesh, b: HierarchicalMesh) -> HierarchicalMesh:
    """Mesh whose active cells are the finer of the two meshes everywhere."""
    if a.stack is not b.stack:
        raise StructureError("meshes belong to different level hierarchies")
    active = [
        (aa & ~rb) | (ab & ~ra)
        for aa, ab, ra, rb in zip(a.active, b.active, a.deactivated, b.deactivated)
    ]
    return HierarchicalMesh(a.stack, active)


def quadrature_points(mesh: HierarchicalMesh, quad: QuadratureRule):
    """Physical Gauss points (ncell*nq, 2) and weights of all active cells."""
    g, wg = quad.points, quad.weights
    gu = np.repeat(g, g.size)
    gv = np.tile(g, g.size)
    w2 = np.repeat(wg, g.size) * np.tile(wg, g.size)
    pts, wts = [], []
    stack = mesh.stack
    for k, act in enumerate(mesh.active):
        ii, jj = np.nonzero(act)
        if ii.size == 0:
            continue
        nx, ny = act.shape
        u = (ii[:, None] + gu[None, :]) / nx
        v = (jj[:, None] + gv[None, :]) / ny
        pts.append(stack.base.to_phys(np.stack([u, v], axis=-1)).reshape(-1, 2))
        hx, hy = stack.cell_size(k)
        wts.append(np.broadcast_to(w2 * hx * hy, u.shape).ravel())
    return np.concatenate(pts), np.concatenate(wts)


def cross_mass(rows: HierarchicalSpace, cols: HierarchicalSpace, quad: QuadratureRule | None = None) -> sp.csr_matrix:
    """Matrix of integrals N^rows_i N^cols_j over the domain."""
    quad = quad or QuadratureRule.for_degree(rows.degree)
    mesh = common_refinement(rows.mesh, cols.mesh)
    pts, w = quadrature_points(mesh, quad)
    ia, va, _, _ = rows.basis_at_points(pts)
    ib, vb, _, _ = cols.basis_at_points(pts)
    data = w[:, None, None] * va[:, :, None] * vb[:, None, :]
    r = np.broadcast_to(ia[:, :, None], data.shape)
    c = np.broadcast_to(ib[:, None, :], data.shape)
    ok = (r >= 0) & (c >= 0)
    mat = sp.coo_matrix((data[ok], (r[ok], c[ok])), shape=(rows.ndof, cols.ndof)).tocsr()
    mat.sum_duplicates()
    return mat


def cross_load(rows: HierarchicalSpace, cols: HierarchicalSpace, fields, quad: QuadratureRule | None = None) -> np.ndarray:
    """Integrals N^rows_i * f for fields f given by coefficient columns on ``cols``.

    Equals ``cross_mass(rows, cols) @ fields`` without forming the matrix.
    """
    quad = quad or QuadratureRule.for_degree(rows.degree)
    fields = np.asarray(fields, dtype=float)
    flat = fields.reshape(cols.ndof, -1)
    mesh = common_refinement(rows.mesh, cols.mesh)
    pts, w = quadrature_points(mesh, quad)
    ib, vb, _, _ = cols.basis_at_points(pts)
    vals = np.einsum("qa,qak->qk", vb, flat[np.maximum(ib, 0)] * (ib >= 0)[..., None])
    ia, va, _, _ = rows.basis_at_points(pts)
    contrib = (w[:, None] * va)[..., None] * vals[:, None, :]
    ok = ia >= 0
    out = np.zeros((rows.ndof, flat.shape[1]))
    np.add.at(out, ia[ok], contrib[ok])
    return out.reshape((rows.ndof,) + fields.shape[1:])


def _refined_solve(A, b):
    """Sparse direct solve plus one step of iterative refinement."""
    try:
        lu = spla.splu(sp.csc_matrix(A), **LU_OPTIONS)
    except RuntimeError as exc:
        raise StructureError(f"singular projection matrix: {exc}") from exc
    x = lu.solve(b)
    x += lu.solve(b - A @ x)
    if not np.all(np.isfinite(x)):
        raise SolverError("projection solve produced non-finite values")
    return x


def l2_project(space: HierarchicalSpace, f, quad: QuadratureRule | None = None) -> np.ndarray:
    """Coefficients of the L2 projection of the pointwise function ``f(x, y)``."""
    vd = volume_data(space, quad)
    fv = np.asarray(f(vd.pts[..., 0], vd.pts[..., 1]), dtype=float)
    fv = np.broadcast_to(fv, vd.w.shape)
    rhs = vd.scatter.vector(np.einsum("cq,caq->ca", vd.w * fv, vd.N))
    return _refined_solve(assemble_mass(space, quad), rhs)


def is_refinement(coarse: HierarchicalMesh, fine: HierarchicalMesh) -> bool:
    """True when every cell of ``coarse`` is covered by cells of ``fine`` of equal or finer level."""
    if coarse.stack is not fine.stack:
        return False
    return all(not np.any(ca & ~fd) for ca, fd in zip(coarse.active, fine.domains))


def refine_transfer(u_old, space_old: HierarchicalSpace, space_new: HierarchicalSpace, quad=None) -> np.ndarray:
    """Re-represent a field of ``space_old`` in the larger ``space_new`` (exact).

    ``u_old`` may hold several fields as columns.
    """
    if space_old.mesh.same_cells(space_new.mesh) and space_old.truncated == space_new.truncated:
        return np.array(u_old, dtype=float, copy=True)
    if not is_refinement(space_old.mesh, space_new.mesh):
        raise StructureError("new space does not contain the old space")
    return _refined_solve(assemble_mass(space_new, quad), cross_load(space_new, space_old, u_old, quad))


def coarse_project(u_fine, space_fine: HierarchicalSpace, space_coarse: HierarchicalSpace, eps_p: float, quad=None) -> np.ndarray:
    """Penalized L2 projection onto a coarser space.

    Solves [M_c + P] u_c = T u_f with P the boundary normal-derivative penalty
    eps_p * int (grad N . n) h (grad N . n) ds.  ``u_fine`` may hold several
    fields as columns.
    """
    if eps_p < 0:
        raise ValueError("penalty must be nonnegative")
    A = assemble_mass(space_coarse, quad)
    if eps_p > 0:
        A = A + assemble_boundary_penalty(space_coarse, eps_p, quad)
    return _refined_solve(A.tocsr(), cross_load(space_coarse, space_fine, u_fine, quad))
