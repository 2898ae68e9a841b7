"""Run configuration and the adaptive solve loop.

A run starts from a uniform mesh at the finest level.  Each time step is
solved, the solution is inspected with an indicator, marked cells are refined
and the step is repeated from its (transferred) initial data until nothing is
marked.  Afterwards the mesh is coarsened away from the interface and the
state is carried over with a penalized L2 projection.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import os
import warnings
from dataclasses import dataclass, field

import numpy as np
import yaml

from . import kernels
from .adaptivity import check_admissible, coarsen, indicator_field, indicator_gradient, mark, refine
from .assembly import MaterialParams, QuadratureRule, free_energy, residual, system_operators, total_mass
from .errors import ConfigError, MetricError, StepFailure, StructureError
from .hierarchy import HierarchicalMesh, HierarchicalSpace, LevelStack, eval_field
from .projection import _refined_solve, coarse_project, common_refinement, quadrature_points, refine_transfer
from .splines import tensor_space
from .timestep import AlphaParams, NewtonSettings, State, alpha_params, step

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
CSV_HEADER = ["step", "time", "dofs", "newton_iters", "adapt_iters", "mass", "energy"]


@dataclass
class SimulationConfig:
    """All parameters of one run.  Serialized as flat YAML with ``schema_version``."""

    lam: float
    t_end: float
    dt: float = 1.0e-3
    domain: tuple = (0.0, 1.0, 0.0, 1.0)
    degree: int = 2
    base: tuple = (4, 4)
    levels: int = 4
    mu: int | None = None
    sigma: float = 1.0
    nu: float = 1.0
    eps_n_coeff: float = 1.0e4
    rho_inf: float = 0.5
    newton_abs_tol: float = 1.0e-10
    newton_rel_tol: float = 1.0e-10
    newton_max_iter: int = 20
    indicator: str = "field"
    threshold: float = 0.1
    adaptive: bool = True
    coarsen_start: float = 0.0
    eps_p: float = 1.0e3
    u_mean: float = 0.0
    delta_max: float = 0.005
    seed: int = 0
    max_adapt_iter: int = 10
    initial_velocity: str = "zero"
    output_dir: str | None = None
    snapshot_every: int = 0
    raster: int = 256
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        self.domain = tuple(float(v) for v in self.domain)
        self.base = tuple(int(v) for v in self.base)
        if self.mu is None:
            self.mu = self.degree
        self.validate()

    # derived quantities

    @property
    def material(self) -> MaterialParams:
        return MaterialParams(self.lam, self.sigma, self.nu, self.eps_n_coeff * self.lam)

    @property
    def newton(self) -> NewtonSettings:
        return NewtonSettings(self.newton_abs_tol, self.newton_rel_tol, self.newton_max_iter)

    @property
    def alpha(self) -> AlphaParams:
        return alpha_params(self.rho_inf)

    @property
    def box(self):
        x0, x1, y0, y1 = self.domain
        return ((x0, x1), (y0, y1))

    @property
    def nsteps(self) -> int:
        return int(round(self.t_end / self.dt))

    @property
    def finest_h(self) -> float:
        x0, x1, y0, y1 = self.domain
        f = 2 ** (self.levels - 1)
        return max((x1 - x0) / (self.base[0] * f), (y1 - y0) / (self.base[1] * f))

    def validate(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version}")
        x0, x1, y0, y1 = self.domain
        if not (x1 > x0 and y1 > y0):
            raise ConfigError("domain must be a nondegenerate rectangle")
        if self.degree < 2:
            raise ConfigError("the fourth-order problem needs degree >= 2")
        if len(self.base) != 2 or min(self.base) < 4:
            raise ConfigError("base mesh must be at least 4x4")
        if self.levels < 1:
            raise ConfigError("levels must be >= 1")
        if self.mu < 2:
            raise ConfigError("mu must be >= 2")
        if self.dt <= 0 or self.t_end <= 0:
            raise ConfigError("dt and t_end must be positive")
        if abs(self.nsteps * self.dt - self.t_end) > 1e-9 * max(self.t_end, 1.0):
            raise ConfigError("t_end must be an integer multiple of dt")
        if self.indicator not in ("field", "gradient"):
            raise ConfigError(f"unknown indicator kind {self.indicator!r}")
        if self.adaptive and self.indicator == "field" and self.sigma == 0:
            raise ConfigError("the field indicator needs sigma > 0")
        if self.threshold <= 0 or (self.indicator == "field" and self.threshold >= 1):
            raise ConfigError("threshold out of range")
        if self.eps_p < 0 or self.delta_max < 0 or self.eps_n_coeff <= 0:
            raise ConfigError("penalties and perturbation amplitude must be nonnegative")
        if self.max_adapt_iter < 1:
            raise ConfigError("max_adapt_iter must be >= 1")
        if self.initial_velocity not in ("zero", "consistent"):
            raise ConfigError("initial_velocity must be 'zero' or 'consistent'")
        if self.raster < 2 or self.snapshot_every < 0:
            raise ConfigError("invalid output settings")
        self.material  # validates lam, sigma, nu
        alpha_params(self.rho_inf)
        target = math.sqrt(self.lam / 2.5)
        if not (0.5 * target <= self.finest_h <= 2.0 * target):
            warnings.warn(
                f"finest element size {self.finest_h:.4g} is far from sqrt(lam/2.5) = {target:.4g}",
                stacklevel=2,
            )

    # serialization

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["domain"] = list(self.domain)
        d["base"] = list(self.base)
        return d

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "SimulationConfig":
        if not isinstance(data, dict):
            raise ConfigError("config must be a mapping")
        if "schema_version" not in data:
            raise ConfigError("config lacks schema_version")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_yaml(cls, text: str) -> "SimulationConfig":
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed config: {exc}") from exc
        return cls.from_dict(data)


def load_config(path) -> SimulationConfig:
    with open(path, encoding="utf-8") as fh:
        return SimulationConfig.from_yaml(fh.read())


@dataclass
class TimeSeriesRecord:
    step: int
    time: float
    dofs: int
    active_per_level: tuple
    newton_iters: int
    adapt_iters: int
    mass: float
    energy: float


@dataclass(eq=False)
class Snapshot:
    step: int
    time: float
    space: HierarchicalSpace
    u: np.ndarray
    v: np.ndarray


@dataclass(eq=False)
class RunResult:
    config: SimulationConfig
    state: State
    records: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)


@dataclass(eq=False)
class InitialCondition:
    """Seeded initial field, represented on the uniform finest level."""

    space: HierarchicalSpace
    coeffs: np.ndarray

    def __call__(self, x, y):
        pts = np.stack(np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float)), axis=-1)
        return eval_field(self.space, self.coeffs, pts.reshape(-1, 2)).value.reshape(pts.shape[:-1])


def level_stack(config: SimulationConfig) -> LevelStack:
    return LevelStack(tensor_space(config.degree, config.base, config.box), config.levels)


def initial_condition(config: SimulationConfig, stack: LevelStack | None = None) -> InitialCondition:
    """u0 = u_mean + delta with one uniform draw in [-delta_max, delta_max] per finest coefficient.

    The constant u_mean is reproduced exactly by the partition of unity, so
    its projection has constant coefficients.
    """
    stack = stack or level_stack(config)
    space = HierarchicalSpace(HierarchicalMesh.uniform(stack, config.levels - 1))
    rng = np.random.default_rng(config.seed)
    delta = rng.uniform(-config.delta_max, config.delta_max, space.ndof) if config.delta_max > 0 else 0.0
    return InitialCondition(space, np.full(space.ndof, float(config.u_mean)) + delta)


def _indicator(config, space, u):
    if config.indicator == "field":
        return indicator_field(space, u, config.material)
    return indicator_gradient(space, u)


def consistent_velocity(space, u, params, quad=None) -> np.ndarray:
    """Velocity with zero residual at t = 0: M v = -(F_bar(u) + K_lin u)."""
    ops = system_operators(space, params, quad)
    r0 = residual(ops, params, u, np.zeros_like(u))
    return _refined_solve(ops.M, -r0)


@dataclass
class AdvanceInfo:
    newton_iters: int
    adapt_iters: int
    reports: list


def advance_adaptive(state: State, config: SimulationConfig):
    """Solve one step, refining and re-solving until no cell is marked for refinement.

    Returns (new state, indicator on the new mesh, AdvanceInfo).
    """
    params, ap, ns = config.material, config.alpha, config.newton
    init = state
    reports = []
    for it in range(1, config.max_adapt_iter + 1):
        ops = system_operators(init.space, params)
        new, rep = step(init, config.dt, ap, ns, ops, params)
        reports.append(rep)
        if not config.adaptive:
            return new, None, AdvanceInfo(rep.iterations, it, reports)
        ind = _indicator(config, new.space, new.u)
        rmarks, _ = mark(ind, config.threshold, new.space.mesh, config.levels)
        if rmarks.is_empty():
            return new, ind, AdvanceInfo(max(r.iterations for r in reports), it, reports)
        mesh = refine(init.space.mesh, rmarks, config.mu)
        space = HierarchicalSpace(mesh)
        log.debug("adapt iteration %d: refined to %d dofs", it, space.ndof)
        uv = refine_transfer(np.column_stack([init.u, init.v]), init.space, space)
        init = State(space, uv[:, 0].copy(), uv[:, 1].copy())
    raise StepFailure(f"adaptation did not terminate within {config.max_adapt_iter} iterations", reports)


def coarsen_step(state: State, indicator, config: SimulationConfig) -> State:
    """Coarsen cells not marked for refinement and project the state onto the coarser space."""
    if indicator is None:
        return state
    _, cmarks = mark(indicator, config.threshold, state.space.mesh, config.levels)
    if cmarks.is_empty():
        return state
    mesh = coarsen(state.space.mesh, cmarks, config.mu)
    if mesh.same_cells(state.space.mesh):
        return state
    space = HierarchicalSpace(mesh)
    uv = coarse_project(np.column_stack([state.u, state.v]), state.space, space, config.eps_p)
    return State(space, uv[:, 0].copy(), uv[:, 1].copy())


def _record(n, t, state, info, config) -> TimeSeriesRecord:
    space, params = state.space, config.material
    quad = QuadratureRule.for_degree(space.degree)
    return TimeSeriesRecord(
        step=n,
        time=t,
        dofs=space.ndof,
        active_per_level=tuple(space.mesh.active_counts()),
        newton_iters=info.newton_iters,
        adapt_iters=info.adapt_iters,
        mass=total_mass(space, quad, state.u),
        energy=free_energy(space, quad, params, state.u),
    )


def initial_state(config: SimulationConfig, u0=None) -> State:
    """State on the uniform finest mesh.

    ``u0`` overrides the seeded initial field; it may be a coefficient vector
    of the uniform finest space or a pointwise function f(x, y), which is then
    L2-projected.
    """
    ic = initial_condition(config)
    space = ic.space
    if u0 is None:
        u = ic.coeffs
    elif callable(u0):
        from .projection import l2_project

        u = l2_project(space, u0)
    else:
        u = np.asarray(u0, dtype=float).copy()
        if u.shape != (space.ndof,):
            raise StructureError("initial coefficient vector does not match the finest space")
    if config.initial_velocity == "consistent":
        v = consistent_velocity(space, u, config.material)
    else:
        v = np.zeros_like(u)
    return State(space, u, v)


def run(config: SimulationConfig, u0=None, out_dir=None, check_mu: bool = False) -> RunResult:
    """Adaptive (or uniform-mode) time integration from t = 0 to t_end.

    With ``check_mu`` the admissibility of every mesh is asserted.  On a step
    failure the outputs gathered so far are written before re-raising.
    """
    out_dir = out_dir if out_dir is not None else config.output_dir
    state = initial_state(config, u0)
    result = RunResult(config, state)
    result.snapshots.append(Snapshot(0, 0.0, state.space, state.u.copy(), state.v.copy()))
    try:
        for n in range(1, config.nsteps + 1):
            t = n * config.dt
            try:
                new, ind, info = advance_adaptive(state, config)
            except StepFailure as exc:
                raise StepFailure(f"step {n} (t={t:.6g}) failed: {exc}", exc.report) from exc
            if config.adaptive and t >= config.coarsen_start - 1e-12 * config.dt:
                new = coarsen_step(new, ind, config)
            if check_mu:
                ok, bad = check_admissible(new.space, config.mu)
                if not ok:
                    raise StructureError(f"mesh lost admissibility at step {n}: {bad[:5]}")
            state = new
            rec = _record(n, t, state, info, config)
            result.records.append(rec)
            log.info("step %d t=%.4g dofs=%d newton=%d adapt=%d", n, t, rec.dofs, rec.newton_iters, rec.adapt_iters)
            if (config.snapshot_every and n % config.snapshot_every == 0) or n == config.nsteps:
                if not result.snapshots or result.snapshots[-1].step != n:
                    result.snapshots.append(Snapshot(n, t, state.space, state.u.copy(), state.v.copy()))
            result.state = state
    finally:
        if out_dir is not None:
            write_outputs(out_dir, config, result.records, result.snapshots)
    return result


# error metric


def _restack(mesh: HierarchicalMesh, stack: LevelStack) -> HierarchicalMesh:
    active = [a.copy() for a in mesh.active]
    for k in range(mesh.nlevels, stack.nlevels):
        active.append(np.zeros(stack.spaces[k].nel_shape, dtype=bool))
    return HierarchicalMesh(stack, active)


def _compatible(a: LevelStack, b: LevelStack) -> bool:
    return (
        a.degree == b.degree
        and a.base.nel_shape == b.base.nel_shape
        and np.allclose(np.asarray(a.box), np.asarray(b.box))
    )


def error_metric(space, u, space_ref, u_ref, quad: QuadratureRule | None = None) -> float:
    """sqrt( int (u - u_ref)^2 / int u_ref^2 ), integrated on the common refinement of both meshes."""
    quad = quad or QuadratureRule.for_degree(max(space.degree, space_ref.degree))
    sa, sb = space.stack, space_ref.stack
    if sa is sb:
        common = common_refinement(space.mesh, space_ref.mesh)
    elif _compatible(sa, sb):
        big = sa if sa.nlevels >= sb.nlevels else sb
        common = common_refinement(_restack(space.mesh, big), _restack(space_ref.mesh, big))
    else:
        raise StructureError("fields live on incompatible base meshes")
    pts, w = quadrature_points(common, quad)
    a = eval_field(space, u, pts).value
    b = eval_field(space_ref, u_ref, pts).value
    den = float(np.sum(w * b * b))
    if den <= 0.0:
        raise MetricError("reference field has zero L2 norm")
    return math.sqrt(float(np.sum(w * (a - b) ** 2)) / den)


# outputs


def raster_values(space, u, resolution: int) -> np.ndarray:
    """Field sampled on a resolution x resolution node grid, shape (ny, nx)."""
    (x0, x1), (y0, y1) = space.stack.box
    xs = np.linspace(x0, x1, resolution)
    ys = np.linspace(y0, y1, resolution)
    X, Y = np.meshgrid(xs, ys)
    vals = eval_field(space, u, np.column_stack([X.ravel(), Y.ravel()])).value
    return vals.reshape(resolution, resolution)


def write_vtk(path, space, u, resolution: int, name: str = "u"):
    (x0, x1), (y0, y1) = space.stack.box
    vals = raster_values(space, u, resolution)
    dx = (x1 - x0) / (resolution - 1)
    dy = (y1 - y0) / (resolution - 1)
    with open(path, "w", encoding="ascii") as fh:
        fh.write("# vtk DataFile Version 3.0\n")
        fh.write(f"{name} field\nASCII\nDATASET STRUCTURED_POINTS\n")
        fh.write(f"DIMENSIONS {resolution} {resolution} 1\n")
        fh.write(f"ORIGIN {x0!r} {y0!r} 0\nSPACING {dx!r} {dy!r} 1\n")
        fh.write(f"POINT_DATA {resolution * resolution}\n")
        fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
        np.savetxt(fh, vals.ravel(), fmt="%.10g")


def read_vtk(path) -> np.ndarray:
    """Values of a structured-points file written by :func:`write_vtk`, shape (ny, nx)."""
    with open(path, encoding="ascii") as fh:
        lines = fh.read().splitlines()
    dims = next(l for l in lines if l.startswith("DIMENSIONS")).split()[1:3]
    start = next(i for i, l in enumerate(lines) if l.startswith("LOOKUP_TABLE")) + 1
    vals = np.array([float(v) for v in lines[start:]])
    return vals.reshape(int(dims[1]), int(dims[0]))


def snapshot_name(step_index: int) -> str:
    return f"snap_{step_index:06d}"


def save_snapshot(directory, snap: Snapshot, resolution: int):
    base = os.path.join(directory, snapshot_name(snap.step))
    dump = snap.space.mesh.dump()
    with open(base + ".mesh", "w", encoding="ascii") as fh:
        fh.write(dump)
    np.savez(base + ".npz", u=snap.u, v=snap.v, time=snap.time, step=snap.step, mesh=dump)
    write_vtk(base + ".vtk", snap.space, snap.u, resolution)


def load_snapshot(path, stack: LevelStack | None = None) -> Snapshot:
    with np.load(path) as data:
        mesh = HierarchicalMesh.from_dump(str(data["mesh"]), stack)
        space = HierarchicalSpace(mesh)
        u, v = data["u"], data["v"]
        if u.shape != (space.ndof,):
            raise StructureError(f"{path}: coefficients do not match the stored mesh")
        return Snapshot(int(data["step"]), float(data["time"]), space, u, v)


def write_csv(path, records):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(CSV_HEADER)
        for r in records:
            wr.writerow([r.step, repr(r.time), r.dofs, r.newton_iters, r.adapt_iters, repr(r.mass), repr(r.energy)])


def write_outputs(out_dir, config: SimulationConfig, records, snapshots):
    """CSV time series, per-snapshot VTK raster + mesh dump + npz, and the run manifest."""
    try:
        snap_dir = os.path.join(out_dir, "snapshots")
        os.makedirs(snap_dir, exist_ok=True)
        write_csv(os.path.join(out_dir, "timeseries.csv"), records)
        for snap in snapshots:
            save_snapshot(snap_dir, snap, config.raster)
        manifest = config.to_dict()
        manifest["output_dir"] = str(out_dir)
        with open(os.path.join(out_dir, "manifest.yaml"), "w", encoding="utf-8") as fh:
            fh.write(f"# backend: {kernels.BACKEND}\n")
            yaml.safe_dump(manifest, fh, sort_keys=True)
    except OSError as exc:
        raise OSError(f"cannot write outputs to {out_dir!r}: {exc}") from exc


def list_snapshots(run_dir):
    snap_dir = os.path.join(run_dir, "snapshots")
    if not os.path.isdir(snap_dir):
        raise FileNotFoundError(f"{run_dir!r} has no snapshots directory")
    return sorted(os.path.join(snap_dir, f) for f in os.listdir(snap_dir) if f.endswith(".npz"))


def compare_runs(run_dir, ref_dir):
    """[(time, error_metric)] for snapshots present in both runs (matched by step)."""
    ours = {os.path.basename(p): p for p in list_snapshots(run_dir)}
    refs = {os.path.basename(p): p for p in list_snapshots(ref_dir)}
    out = []
    for name in sorted(set(ours) & set(refs)):
        a, b = load_snapshot(ours[name]), load_snapshot(refs[name])
        try:
            err = error_metric(a.space, a.u, b.space, b.u)
        except MetricError:
            err = float("nan")
        out.append((a.time, err))
    return out
