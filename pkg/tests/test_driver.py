import csv
import os
import warnings

import numpy as np
import pytest

from thbch.driver import (
    CSV_HEADER,
    SimulationConfig,
    advance_adaptive,
    coarsen_step,
    compare_runs,
    error_metric,
    initial_condition,
    initial_state,
    load_snapshot,
    read_vtk,
    run,
)
from thbch.assembly import QuadratureRule, total_mass
from thbch.errors import ConfigError, MetricError, StructureError
from thbch.hierarchy import HierarchicalMesh, HierarchicalSpace, LevelStack, eval_field
from thbch.projection import l2_project
from thbch.splines import tensor_space

from .oracles import subdivided_cell_average
from .test_hierarchy import three_level_mesh


def small(**kw):
    base = dict(lam=2.5 / 16**2, t_end=0.003, base=(4, 4), levels=3, seed=7)
    base.update(kw)
    return SimulationConfig(**base)


def test_config_yaml_roundtrip():
    cfg = small(threshold=0.05, domain=(0.0, 2.0, 0.0, 1.0), base=(8, 4))
    back = SimulationConfig.from_yaml(cfg.to_yaml())
    assert back == cfg
    assert back.mu == 2 and back.box == ((0.0, 2.0), (0.0, 1.0))


@pytest.mark.parametrize(
    "change",
    [
        dict(base=(2, 4)),
        dict(degree=1),
        dict(mu=1),
        dict(dt=0.0),
        dict(t_end=0.0035),
        dict(indicator="hessian"),
        dict(threshold=1.0),
        dict(rho_inf=2.0),
        dict(lam=-1.0),
        dict(initial_velocity="random"),
        dict(schema_version=2),
        dict(sigma=0.0),
    ],
)
def test_config_validation(change):
    with pytest.raises(ConfigError):
        small(**change)


def test_config_yaml_errors():
    with pytest.raises(ConfigError):
        SimulationConfig.from_yaml("lam: 0.01\nt_end: 0.1\n")
    with pytest.raises(ConfigError):
        SimulationConfig.from_yaml("schema_version: 1\nlam: 0.01\nt_end: 0.1\nbogus: 3\n")
    with pytest.raises(ConfigError):
        SimulationConfig.from_yaml("schema_version: 1\nlam: [0.01\n")
    with pytest.raises(ConfigError):
        SimulationConfig.from_yaml("- 1\n- 2\n")


def test_mesh_size_warning():
    with pytest.warns(UserWarning):
        small(lam=1.0)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        small()


def test_initial_condition_is_seeded_and_bounded():
    cfg = small(u_mean=0.4)
    ic = initial_condition(cfg)
    assert ic.space.ndof == 18 * 18
    assert np.abs(ic.coeffs - 0.4).max() <= 0.005
    np.testing.assert_array_equal(ic.coeffs, initial_condition(cfg).coeffs)
    assert not np.array_equal(ic.coeffs, initial_condition(small(u_mean=0.4, seed=8)).coeffs)
    x = np.random.default_rng(0).random((50, 2))
    assert np.abs(ic(x[:, 0], x[:, 1]) - 0.4).max() <= 0.005
    flat = initial_condition(small(delta_max=0.0))
    assert np.all(flat.coeffs == 0.0)


def test_initial_state_overrides():
    cfg = small()
    st = initial_state(cfg, lambda x, y: 0.3 + 0 * x)
    np.testing.assert_allclose(st.u, 0.3, atol=1e-12)
    with pytest.raises(StructureError):
        initial_state(cfg, np.zeros(5))
    cons = initial_state(small(initial_velocity="consistent"))
    assert abs(np.sum(cons.v)) > 0


def test_single_step_run_gives_one_record():
    res = run(small(t_end=1e-3))
    assert len(res.records) == 1
    r = res.records[0]
    assert r.step == 1 and r.time == pytest.approx(1e-3)
    assert [s.step for s in res.snapshots] == [0, 1]
    assert sum(r.active_per_level) == res.state.space.mesh.num_active


def test_error_metric_cases():
    s = HierarchicalSpace(three_level_mesh())
    c = l2_project(s, lambda x, y: np.cos(3 * x) + y)
    assert error_metric(s, c, s, c) == 0.0
    assert error_metric(s, 2 * c, s, c) == pytest.approx(1.0, rel=1e-12)
    with pytest.raises(MetricError):
        error_metric(s, c, s, np.zeros(s.ndof))
    other = HierarchicalSpace(HierarchicalMesh.uniform(LevelStack(tensor_space(2, (8, 8)), 1), 0))
    with pytest.raises(StructureError):
        error_metric(s, c, other, np.ones(other.ndof))


def test_error_metric_against_refined_quadrature():
    s = HierarchicalSpace(three_level_mesh())
    # same base and degree, fewer levels: compared on the deeper hierarchy
    r = HierarchicalSpace(HierarchicalMesh.uniform(LevelStack(tensor_space(2, (4, 4)), 2), 1))
    a = l2_project(s, lambda x, y: np.sin(2 * x) * y)
    b = l2_project(r, lambda x, y: np.sin(2 * x) * y + 0.1 * x * x)

    def sq(space, c):
        return lambda x, y: eval_field(space, c, np.column_stack([x.ravel(), y.ravel()])).value.reshape(x.shape)

    fa, fb = sq(s, a), sq(r, b)
    num = subdivided_cell_average(lambda x, y: (fa(x, y) - fb(x, y)) ** 2, ((0, 1), (0, 1)), nsub=16)
    den = subdivided_cell_average(lambda x, y: fb(x, y) ** 2, ((0, 1), (0, 1)), nsub=16)
    assert error_metric(s, a, r, b) == pytest.approx(np.sqrt(num / den), rel=1e-10)


def test_outputs_csv_vtk_and_snapshots(tmp_path):
    cfg = small(snapshot_every=2, raster=9)
    res = run(cfg, u0=lambda x, y: 0.25 + 0 * x, out_dir=tmp_path)
    with open(tmp_path / "timeseries.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == CSV_HEADER and len(rows) == 4
    assert [int(r[0]) for r in rows[1:]] == [1, 2, 3]
    for r in rows[1:]:
        assert float(r[5]) == pytest.approx(0.25, abs=1e-12)
    names = sorted(os.listdir(tmp_path / "snapshots"))
    assert "snap_000002.vtk" in names and "snap_000003.npz" in names and "snap_000001.vtk" not in names
    vals = read_vtk(tmp_path / "snapshots" / "snap_000003.vtk")
    assert vals.shape == (9, 9) and np.abs(vals - 0.25).max() < 1e-9
    snap = load_snapshot(tmp_path / "snapshots" / "snap_000003.npz")
    assert snap.step == 3 and np.allclose(snap.u, res.state.u)
    manifest = (tmp_path / "manifest.yaml").read_text()
    assert manifest.startswith("# backend:") and "schema_version: 1" in manifest


def test_runs_are_deterministic(tmp_path):
    a = run(small(), out_dir=tmp_path / "a")
    b = run(small(), out_dir=tmp_path / "b")
    np.testing.assert_array_equal(a.state.u, b.state.u)
    assert (tmp_path / "a" / "timeseries.csv").read_bytes() == (tmp_path / "b" / "timeseries.csv").read_bytes()
    assert all(err == 0.0 for _, err in compare_runs(tmp_path / "a", tmp_path / "b"))


def test_coarsen_step_reduces_dofs_in_pure_regions():
    cfg = small(threshold=0.1)
    u0 = lambda x, y: np.tanh((x - 0.5) / np.sqrt(2 * cfg.lam))
    st = initial_state(cfg, u0)
    new, ind, info = advance_adaptive(st, cfg)
    assert info.adapt_iters == 1
    coarse = coarsen_step(new, ind, cfg)
    assert coarse.space.ndof < new.space.ndof
    q = QuadratureRule.for_degree(2)
    assert abs(total_mass(coarse.space, q, coarse.u) - total_mass(new.space, q, new.u)) < 1e-10
    pts = np.random.default_rng(0).random((200, 2))
    far = np.abs(pts[:, 0] - 0.5) > 0.35
    diff = eval_field(coarse.space, coarse.u, pts[far]).value - eval_field(new.space, new.u, pts[far]).value
    assert np.abs(diff).max() < 0.05
    assert coarsen_step(new, None, cfg) is new


def test_uniform_mode_keeps_mesh():
    res = run(small(adaptive=False))
    assert all(r.dofs == 18 * 18 and r.adapt_iters == 1 for r in res.records)
