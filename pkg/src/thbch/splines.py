"""Univariate and tensor-product B-spline spaces.

Knot vectors are open; the public constructors only build uniform knot
vectors with single interior knots (maximal smoothness C^{p-1}).  Knot values
are dyadic rationals, so midpoint insertion is exact in floating point and
knots are compared with ``==``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import kernels
from .errors import DomainError, StructureError


class KnotVector:
    """Open knot vector on [0, 1] with a spline degree.

    Args:
        knots: nondecreasing knot sequence; first and last knot repeated p+1 times.
        degree: spline degree p.
    """

    def __init__(self, knots, degree: int):
        knots = np.asarray(knots, dtype=float)
        p = int(degree)
        if knots.ndim != 1 or np.any(np.diff(knots) < 0):
            raise StructureError("knots must be a nondecreasing 1D sequence")
        if not (np.all(knots[: p + 1] == 0.0) and np.all(knots[-p - 1:] == 1.0)):
            raise StructureError("knot vector must be open on [0, 1]")
        if knots.size - p - 1 < p + 1:
            raise StructureError("too few knots for the requested degree")
        self.knots = knots
        self.knots.setflags(write=False)
        self.degree = p
        self.breakpoints = np.unique(knots)

    def __repr__(self):
        return f"KnotVector(degree={self.degree}, nel={self.nel})"

    def __eq__(self, other):
        return (
            isinstance(other, KnotVector)
            and self.degree == other.degree
            and np.array_equal(self.knots, other.knots)
        )

    def __hash__(self):
        return hash((self.degree, self.knots.tobytes()))

    @property
    def n(self) -> int:
        """Number of basis functions."""
        return self.knots.size - self.degree - 1

    @property
    def nel(self) -> int:
        """Number of nonempty knot spans."""
        return self.breakpoints.size - 1

    def multiplicity(self, value: float) -> int:
        return int(np.count_nonzero(self.knots == value))

    def find_span(self, x):
        """Knot span index i with knots[i] <= x < knots[i+1].

        x = 1 maps to the last nontrivial span.  Accepts scalars or arrays.
        """
        xa = np.asarray(x, dtype=float)
        if np.any(xa < 0.0) or np.any(xa > 1.0) or np.any(~np.isfinite(xa)):
            raise DomainError("evaluation point outside [0, 1]")
        span = np.searchsorted(self.knots, xa, side="right") - 1
        span = np.clip(span, self.degree, self.n - 1)
        return int(span) if np.ndim(span) == 0 else span

    def element_span(self, element):
        """Knot span index of element ``element`` (for uniform multiplicity-1 knots)."""
        starts = np.searchsorted(self.knots, self.breakpoints[:-1], side="right") - 1
        return starts[element]

    def eval_basis(self, x, nders: int = 0, span=None):
        """Values and derivatives of the p+1 nonzero functions at x.

        Returns ``(span, table)``: for scalar x the table has shape
        (p+1, nders+1) (function index, derivative order); for array x it has
        shape (npts, p+1, nders+1).  Function ``span - p + k`` owns row k.
        """
        if nders not in (0, 1, 2):
            raise ValueError("nders must be 0, 1 or 2")
        scalar = np.ndim(x) == 0
        xa = np.atleast_1d(np.asarray(x, dtype=float))
        if span is None:
            spans = np.atleast_1d(self.find_span(xa))
        else:
            if np.any(xa < 0.0) or np.any(xa > 1.0):
                raise DomainError("evaluation point outside [0, 1]")
            spans = np.broadcast_to(np.asarray(span, dtype=np.intp), xa.shape)
        ders = kernels.basis_ders(self.knots, self.degree, spans, xa, nders)
        table = ders.transpose(0, 2, 1)
        if scalar:
            return int(spans[0]), table[0]
        return spans, table

    def eval_all(self, x, nders: int = 0):
        """Dense (npts, n, nders+1) table of every basis function at x."""
        xa = np.atleast_1d(np.asarray(x, dtype=float))
        spans, table = self.eval_basis(xa, nders)
        out = np.zeros((xa.size, self.n, nders + 1))
        rows = np.arange(xa.size)[:, None]
        cols = spans[:, None] - self.degree + np.arange(self.degree + 1)[None, :]
        out[rows, cols] = table
        return out

    def refined(self) -> "KnotVector":
        """Insert the midpoint of every nonempty span once."""
        mids = 0.5 * (self.breakpoints[:-1] + self.breakpoints[1:])
        return KnotVector(np.sort(np.concatenate([self.knots, mids])), self.degree)

    def support_elements(self, i):
        """First and last element index (inclusive) of the support of function i.

        Valid for knot vectors with single interior knots.
        """
        i = np.asarray(i)
        return np.maximum(i - self.degree, 0), np.minimum(i, self.nel - 1)


def uniform_knots(degree: int, nel: int) -> KnotVector:
    """Open uniform knot vector with ``nel`` elements and single interior knots."""
    if nel < 1:
        raise StructureError("need at least one element")
    interior = np.arange(1, nel) / nel
    knots = np.concatenate([np.zeros(degree + 1), interior, np.ones(degree + 1)])
    return KnotVector(knots, degree)


def insert_knot(kv: KnotVector, t: float):
    """Single knot insertion (Boehm).

    Returns ``(new_kv, A)`` where A (n_new x n_old) maps coarse coefficients to
    fine coefficients, so coarse basis function i equals sum_j A[j, i] fine_j.
    """
    p = kv.degree
    U = kv.knots
    n = kv.n
    k = int(np.searchsorted(U, t, side="right") - 1)
    k = min(max(k, p), n - 1)
    A = np.zeros((n + 1, n))
    for i in range(n + 1):
        if i <= k - p:
            A[i, i] = 1.0
        elif i >= k + 1:
            A[i, i - 1] = 1.0
        else:
            alpha = (t - U[i]) / (U[i + p] - U[i])
            A[i, i] = alpha
            A[i, i - 1] = 1.0 - alpha
    new = KnotVector(np.insert(U, k + 1, t), p)
    return new, A


def knot_insertion_matrix(coarse: KnotVector, fine: KnotVector) -> np.ndarray:
    """Dense (n_coarse x n_fine) subdivision matrix S with coarse_i = sum_j S[i, j] fine_j."""
    if coarse.degree != fine.degree:
        raise StructureError("degrees differ")
    new_knots = _multiset_difference(fine.knots, coarse.knots)
    if new_knots is None:
        raise StructureError("knot vectors are not nested")
    A = np.eye(coarse.n)
    kv = coarse
    for t in new_knots:
        kv, Ai = insert_knot(kv, t)
        A = Ai @ A
    if not np.array_equal(kv.knots, fine.knots):
        raise StructureError("knot vectors are not nested")
    return A.T


def _multiset_difference(big, small):
    out = []
    i = 0
    small = list(small)
    for t in big:
        if i < len(small) and small[i] == t:
            i += 1
        else:
            out.append(t)
    if i != len(small):
        return None
    return out


@dataclass(frozen=True)
class Element:
    level: int
    index: tuple
    param_box: tuple  # ((u0, u1), (v0, v1))
    phys_box: tuple  # ((x0, x1), (y0, y1))


@dataclass(frozen=True, eq=False)
class TensorSpace:
    """Tensor-product B-spline space on an axis-aligned rectangle.

    ``box`` is ((x0, x1), (y0, y1)); the geometry map is affine.  Flat
    function and element indices are row-major in (ix, iy): ix * n_y + iy.
    """

    kv_x: KnotVector
    kv_y: KnotVector
    level: int = 0
    box: tuple = ((0.0, 1.0), (0.0, 1.0))

    @property
    def degree(self) -> int:
        return self.kv_x.degree

    @property
    def shape(self) -> tuple:
        return (self.kv_x.n, self.kv_y.n)

    @property
    def dim(self) -> int:
        return self.kv_x.n * self.kv_y.n

    @property
    def nel_shape(self) -> tuple:
        return (self.kv_x.nel, self.kv_y.nel)

    @property
    def num_elements(self) -> int:
        return self.kv_x.nel * self.kv_y.nel

    @property
    def scale(self) -> np.ndarray:
        (x0, x1), (y0, y1) = self.box
        return np.array([x1 - x0, y1 - y0])

    @property
    def offset(self) -> np.ndarray:
        return np.array([self.box[0][0], self.box[1][0]])

    def to_param(self, pts):
        return (np.asarray(pts, dtype=float) - self.offset) / self.scale

    def to_phys(self, uv):
        return np.asarray(uv, dtype=float) * self.scale + self.offset

    def elements(self):
        """Element descriptors in lexicographic (ix, iy) order."""
        bx, by = self.kv_x.breakpoints, self.kv_y.breakpoints
        (x0, x1), (y0, y1) = self.box
        sx, sy = x1 - x0, y1 - y0
        out = []
        for i in range(bx.size - 1):
            for j in range(by.size - 1):
                pb = ((bx[i], bx[i + 1]), (by[j], by[j + 1]))
                phys = (
                    (x0 + sx * bx[i], x0 + sx * bx[i + 1]),
                    (y0 + sy * by[j], y0 + sy * by[j + 1]),
                )
                out.append(Element(self.level, (i, j), pb, phys))
        return out

    def eval_all(self, pts, nders: int = 0):
        """Dense table of every tensor function at physical points.

        Returns values (npts, dim) for nders=0, or a dict with keys
        'val', 'grad' (npts, dim, 2) and 'hess_diag' (npts, dim, 2) otherwise.
        """
        uv = self.to_param(pts)
        tx = self.kv_x.eval_all(uv[:, 0], nders)
        ty = self.kv_y.eval_all(uv[:, 1], nders)
        val = np.einsum("pi,pj->pij", tx[..., 0], ty[..., 0]).reshape(len(uv), -1)
        if nders == 0:
            return val
        sx, sy = self.scale
        gx = np.einsum("pi,pj->pij", tx[..., 1], ty[..., 0]).reshape(len(uv), -1) / sx
        gy = np.einsum("pi,pj->pij", tx[..., 0], ty[..., 1]).reshape(len(uv), -1) / sy
        out = {"val": val, "grad": np.stack([gx, gy], axis=-1)}
        if nders >= 2:
            hxx = np.einsum("pi,pj->pij", tx[..., 2], ty[..., 0]).reshape(len(uv), -1) / sx**2
            hyy = np.einsum("pi,pj->pij", tx[..., 0], ty[..., 2]).reshape(len(uv), -1) / sy**2
            out["hess_diag"] = np.stack([hxx, hyy], axis=-1)
        return out


def tensor_space(degree: int, nel: tuple, box=((0.0, 1.0), (0.0, 1.0)), level: int = 0) -> TensorSpace:
    nx, ny = nel
    return TensorSpace(uniform_knots(degree, nx), uniform_knots(degree, ny), level, box)


def dyadic_refine(space: TensorSpace) -> TensorSpace:
    return TensorSpace(space.kv_x.refined(), space.kv_y.refined(), space.level + 1, space.box)


@dataclass(frozen=True, eq=False)
class TwoScaleOperator:
    """Subdivision coefficients between a space and its dyadic refinement.

    ``matrix`` is sparse (n_coarse x n_fine); ``sx`` and ``sy`` are the
    univariate factors, matrix = kron(sx, sy).
    """

    sx: np.ndarray
    sy: np.ndarray
    matrix: sp.csr_matrix = field(repr=False)

    def coefficient(self, coarse_index: int, fine_index: int) -> float:
        return float(self.matrix[coarse_index, fine_index])


def two_scale(coarse: TensorSpace, fine: TensorSpace) -> TwoScaleOperator:
    if coarse.box != fine.box:
        raise StructureError("spaces live on different domains")
    sx = knot_insertion_matrix(coarse.kv_x, fine.kv_x)
    sy = knot_insertion_matrix(coarse.kv_y, fine.kv_y)
    m = sp.kron(sp.csr_matrix(sx), sp.csr_matrix(sy), format="csr")
    m.eliminate_zeros()
    return TwoScaleOperator(sx, sy, m)
