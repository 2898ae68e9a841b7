import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from thbch.errors import DomainError, StructureError
from thbch.splines import (
    KnotVector,
    dyadic_refine,
    insert_knot,
    knot_insertion_matrix,
    tensor_space,
    two_scale,
    uniform_knots,
)

from .oracles import cox_de_boor, dense_basis, lstsq_refinement


def test_find_span_endpoints_and_interior():
    kv = uniform_knots(2, 4)
    assert kv.find_span(0.0) == 2
    assert kv.find_span(1.0) == 5
    # linear scan oracle
    for x in np.linspace(0, 1, 37):
        span = kv.find_span(x)
        assert kv.knots[span] <= x
        assert x < kv.knots[span + 1] or (x == 1.0 and span == kv.n - 1)
    assert kv.knots[kv.find_span(0.3)] == 0.25


@pytest.mark.parametrize("x", [-1e-12, 1.0 + 1e-12, np.nan])
def test_find_span_rejects_outside(x):
    with pytest.raises(DomainError):
        uniform_knots(2, 4).find_span(x)


def test_invalid_knot_vectors():
    with pytest.raises(StructureError):
        KnotVector([0, 0, 0.5, 1, 1, 1], 2)
    with pytest.raises(StructureError):
        KnotVector([0, 0, 0, 0.7, 0.5, 1, 1, 1], 2)
    with pytest.raises(StructureError):
        KnotVector([0, 0, 1, 1], 2)


@pytest.mark.parametrize("p", [2, 3])
def test_values_match_cox_de_boor(p):
    kv = uniform_knots(p, 5)
    xs = np.random.default_rng(p).random(50).tolist() + [0.0, 1.0, 0.4]
    ref = dense_basis(kv.knots, p, xs)
    got = kv.eval_all(np.array(xs))[..., 0]
    np.testing.assert_allclose(got, ref, atol=1e-14)


@settings(max_examples=60, deadline=None)
@given(x=st.floats(0.0, 1.0), p=st.sampled_from([2, 3]), nel=st.integers(1, 9))
def test_partition_of_unity_property(x, p, nel):
    _, tab = uniform_knots(p, nel).eval_basis(x, 2)
    assert abs(tab[:, 0].sum() - 1.0) < 1e-14
    if 0 < x < 1:
        assert abs(tab[:, 1].sum()) < 1e-11 * nel
        assert abs(tab[:, 2].sum()) < 1e-9 * nel**2


def test_partition_of_unity_1000_points():
    kv = uniform_knots(2, 7)
    x = np.random.default_rng(0).random(1000)
    _, tab = kv.eval_basis(x, 0)
    assert np.abs(tab[..., 0].sum(axis=1) - 1).max() < 1e-13


@pytest.mark.parametrize("p", [2, 3])
def test_derivatives_against_finite_differences(p):
    kv = uniform_knots(p, 4)
    xs = (np.arange(4)[:, None] + np.array([0.2, 0.5, 0.8])[None, :]).ravel() / 4
    h = 1e-5
    tab = kv.eval_all(xs, 2)
    fp = kv.eval_all(xs + h, 0)[..., 0]
    fm = kv.eval_all(xs - h, 0)[..., 0]
    f0 = tab[..., 0]
    d1 = (fp - fm) / (2 * h)
    d2 = (fp - 2 * f0 + fm) / h**2
    scale1 = np.abs(tab[..., 1]).max()
    scale2 = np.abs(tab[..., 2]).max()
    assert np.abs(d1 - tab[..., 1]).max() / scale1 < 1e-6
    assert np.abs(d2 - tab[..., 2]).max() / scale2 < 1e-5


def test_eval_basis_shapes():
    kv = uniform_knots(2, 4)
    span, tab = kv.eval_basis(0.3, 2)
    assert tab.shape == (3, 3)
    spans, tab = kv.eval_basis(np.array([0.1, 0.6]), 1)
    assert tab.shape == (2, 3, 2)
    with pytest.raises(ValueError):
        kv.eval_basis(0.3, 3)


def test_dyadic_refine_counts():
    s = tensor_space(2, (4, 4))
    r = dyadic_refine(s)
    assert r.nel_shape == (8, 8)
    assert r.shape == (10, 10)
    assert r.level == 1
    assert r.degree == 2


def test_refining_twice_is_associative():
    kv = uniform_knots(2, 4)
    assert kv.refined().refined() == uniform_knots(2, 16)
    assert kv.refined() == uniform_knots(2, 8)


def test_boehm_mask_interior_function():
    coarse = uniform_knots(2, 8)
    fine = coarse.refined()
    S = knot_insertion_matrix(coarse, fine)
    # coarse function 4 lives on [2/8, 5/8]; fine function j on [(j-2)/16, (j+1)/16]
    row = S[4]
    np.testing.assert_allclose(row[6:10], [0.25, 0.75, 0.75, 0.25], atol=1e-15)
    assert np.count_nonzero(row) == 4


def test_two_scale_against_least_squares():
    coarse = uniform_knots(3, 4)
    fine = coarse.refined()
    S = knot_insertion_matrix(coarse, fine)
    np.testing.assert_allclose(S, lstsq_refinement(coarse.knots, fine.knots, 3), atol=1e-12)
    assert np.all(S >= 0)
    np.testing.assert_allclose(np.ones(coarse.n) @ S, np.ones(fine.n), atol=1e-14)


def test_single_knot_insertion_matches_definition():
    kv = uniform_knots(2, 2)
    new, A = insert_knot(kv, 0.25)
    xs = np.linspace(0, 1, 41)
    old = dense_basis(kv.knots, 2, xs)
    nb = dense_basis(new.knots, 2, xs)
    np.testing.assert_allclose(old, nb @ A, atol=1e-14)


def test_two_scale_requires_nesting():
    with pytest.raises(StructureError):
        knot_insertion_matrix(uniform_knots(2, 3), uniform_knots(2, 4))


def test_tensor_two_scale_pointwise_nestedness():
    coarse = tensor_space(2, (4, 4), ((0.0, 2.0), (-1.0, 1.0)))
    fine = dyadic_refine(coarse)
    op = two_scale(coarse, fine)
    rng = np.random.default_rng(1)
    pts = np.column_stack([rng.uniform(0, 2, 200), rng.uniform(-1, 1, 200)])
    Bc = coarse.eval_all(pts)
    Bf = fine.eval_all(pts)
    assert np.abs(Bc - Bf @ op.matrix.T).max() < 1e-12
    c = rng.standard_normal(coarse.dim)
    assert np.abs(Bc @ c - Bf @ (op.matrix.T @ c)).max() < 1e-12
    np.testing.assert_allclose(op.matrix.T @ np.ones(coarse.dim), np.ones(fine.dim), atol=1e-14)
    assert op.coefficient(0, 0) == 1.0


def test_elements_enumeration():
    s = tensor_space(2, (4, 4))
    els = s.elements()
    assert len(els) == 16
    assert els[0].index == (0, 0)
    assert els[0].param_box == ((0.0, 0.25), (0.0, 0.25))
    assert els[0].phys_box == els[0].param_box
    assert els[1].index == (0, 1)
    t = tensor_space(2, (4, 4), ((1.0, 3.0), (0.0, 1.0)))
    assert t.elements()[4].phys_box == ((1.5, 2.0), (0.0, 0.25))


def test_cox_de_boor_oracle_self_check():
    # the oracle itself: hat function of degree 1
    assert cox_de_boor([0, 0, 0.5, 1, 1], 1, 1, 0.25) == 0.5
