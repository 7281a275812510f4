"""Time loop, configuration files, run logs and field snapshots."""

from __future__ import annotations

import configparser
import csv
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import constitutive as cm
from . import scenario as sc
from .assembly import FEContext, evaluate, lagrange_interpolate, rt_interpolate, tabulate
from .elements import REFERENCE_VERTICES, geometry_maps
from .mesh import Mesh, build_structured
from .momentum import IceForcing, MomentumProblem, MomentumState, ViscousPlastic
from .transport import TRACER_SPACE, TracerState, advect_step
from .vtk import export_vtk

log = logging.getLogger(__name__)

LOG_SCHEMA = "fosls-seaice-runlog/1"
LOG_COLUMNS = [
    "step",
    "time_days",
    "phases",
    "gn_iterations",
    "gn_converged",
    "F_m",
    "F_c",
    "F_e",
    "int_H",
    "int_A",
    "min_A",
    "max_A",
    "min_H",
    "max_H",
    "active_A",
    "active_H",
    "sigma_symmetry_defect",
    "max_speed",
]

# config file section/key -> BenchmarkConfig attribute (physics keys map onto PhysParams)
_CONFIG_KEYS = {
    "mesh": {"n": ("n", int), "length_scale": ("length_scale", float)},
    "time": {"dt": ("dt", float), "t_end_days": ("t_end_days", float), "theta": ("theta", float)},
    "physics": {
        "trace_factor": ("trace_factor", float),
        "wind": ("wind_enabled", "bool"),
        "ocean": ("ocean_enabled", "bool"),
        **{f.name: (f.name, float) for f in fields(cm.PhysParams)},
    },
    "solver": {
        "elements": ("elements", str),
        "quad_order": ("quad_order", int),
        "gn_tol": ("gn_tol", float),
        "gn_max_iter": ("gn_max_iter", int),
        "armijo": ("armijo", float),
        "linear_solver": ("linear_solver", str),
    },
    "output": {
        "directory": ("output_dir", str),
        "every_hours": ("output_every_hours", float),
        "vtk": ("write_vtk", "bool"),
    },
}
_PARAM_NAMES = {f.name for f in fields(cm.PhysParams)}


class ConfigError(ValueError):
    pass


class RunError(RuntimeError):
    def __init__(self, message, step):
        super().__init__(message)
        self.step = step


def _parse_bool(text: str) -> bool:
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _apply(values: dict, params: dict, section: str, key: str, raw: str):
    try:
        attr, kind = _CONFIG_KEYS[section][key]
    except KeyError:
        raise ConfigError(f"unknown config key {section}.{key}") from None
    try:
        value = _parse_bool(raw) if kind == "bool" else kind(raw.strip())
    except ValueError as exc:
        raise ConfigError(f"bad value for {section}.{key}: {raw!r} ({exc})") from None
    if section == "physics" and attr in _PARAM_NAMES:
        params[attr] = value
    else:
        values[attr] = value


def load_config(path=None, overrides=()) -> sc.BenchmarkConfig:
    """Read an INI-style config file; ``overrides`` are ``section.key=value`` strings."""
    values: dict = {}
    params: dict = {}
    if path is not None:
        parser = configparser.ConfigParser()
        if not parser.read(path):
            raise ConfigError(f"cannot read config file {path}")
        for section in parser.sections():
            if section not in _CONFIG_KEYS:
                raise ConfigError(f"unknown config section [{section}]")
            for key, raw in parser.items(section):
                _apply(values, params, section, key, raw)
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        lhs, raw = item.split("=", 1)
        section, key = lhs.strip().split(".", 1)
        _apply(values, params, section, key, raw)
    try:
        return sc.BenchmarkConfig(params=cm.PhysParams(**params), **values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def default_config_text(cfg: sc.BenchmarkConfig | None = None) -> str:
    cfg = cfg or sc.BenchmarkConfig()
    out = []
    for section, keys in _CONFIG_KEYS.items():
        out.append(f"[{section}]")
        for key, (attr, _) in keys.items():
            v = getattr(cfg.params, attr) if section == "physics" and attr in _PARAM_NAMES else getattr(cfg, attr)
            out.append(f"{key} = {str(v).lower() if isinstance(v, bool) else v}")
        out.append("")
    return "\n".join(out)


# --------------------------------------------------------------------------


@dataclass
class Simulation:
    config: sc.BenchmarkConfig
    mesh: Mesh
    ctx: FEContext
    problem: MomentumProblem
    state: MomentumState
    tracers: TracerState


def setup(config: sc.BenchmarkConfig) -> Simulation:
    m = build_structured(config.n)
    ctx = FEContext(m, config.quad_order, config.length_scale)
    params = config.params
    forcing = IceForcing(
        params,
        wind=(lambda x, t: sc.wind(x, t, params)) if config.wind_enabled else None,
        ocean=(lambda x: sc.ocean(x, params)) if config.ocean_enabled else None,
    )
    problem = MomentumProblem(
        ctx,
        config.elements,
        law=ViscousPlastic(params, config.trace_factor),
        forcing=forcing,
        rho_ice=params.rho_ice,
        params=params,
        linear_solver=config.linear_solver,
    )
    state, tracers = initial_state(problem)
    return Simulation(config, m, ctx, problem, state, tracers)


def initial_state(problem: MomentumProblem, height=sc.initial_height, concentration=sc.initial_concentration):
    """Zero velocity, prescribed A and H, and the stress of the resting ice."""
    m = problem.ctx.mesh
    tdm = problem.ctx.dofmap(TRACER_SPACE)
    A = lagrange_interpolate(m, tdm, concentration)
    H = lagrange_interpolate(m, tdm, height)
    params = problem.params

    def rest_stress(pts):
        # C(0; A, H) = -P/2 I with A, H taken from their discrete interpolants
        tri = _locate(m, pts)
        lam = _barycentric_in(m, tri, pts)
        Ap = np.einsum("pi,pi->p", lam, A[m.triangles[tri]])
        Hp = np.einsum("pi,pi->p", lam, H[m.triangles[tri]])
        P = cm.ice_strength(np.clip(Ap, 0.0, 1.0), np.maximum(Hp, 0.0), params)
        return -0.5 * P[:, None, None] * np.eye(2)

    sigma = rt_interpolate(m, problem.sdm, rest_stress, scale=problem.ctx.scale)
    u = np.zeros(problem.udm.n_global)
    return MomentumState(sigma, u, 0.0), TracerState(A, H)


def _locate(m: Mesh, pts: np.ndarray) -> np.ndarray:
    # structured meshes only: cell index from coordinates, then the diagonal test
    n = int(round(np.sqrt(m.n_triangles / 2)))
    i = np.clip(np.floor(pts[:, 0] * n).astype(int), 0, n - 1)
    j = np.clip(np.floor(pts[:, 1] * n).astype(int), 0, n - 1)
    fx = pts[:, 0] * n - i
    fy = pts[:, 1] * n - j
    return 2 * (j * n + i) + (fy > fx).astype(int)


def _barycentric_in(m: Mesh, tri: np.ndarray, pts: np.ndarray) -> np.ndarray:
    p = m.vertices[m.triangles[tri]]
    J = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)
    ref = np.linalg.solve(J, (pts - p[:, 0])[..., None])[..., 0]
    return np.column_stack([1.0 - ref.sum(axis=1), ref])


# --------------------------------------------------------------------------


@dataclass
class StepRecord:
    step: int
    time_days: float
    phases: str
    gn_iterations: int
    gn_converged: bool
    F_m: float
    F_c: float
    F_e: float
    int_H: float
    int_A: float
    min_A: float
    max_A: float
    min_H: float
    max_H: float
    active_A: int
    active_H: int
    sigma_symmetry_defect: float
    max_speed: float
    wall_time: float = 0.0


@dataclass
class RunLog:
    records: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)

    @property
    def healthy(self) -> bool:
        return all(r.gn_converged for r in self.records)

    def write_csv(self, path):
        path = Path(path)
        with path.open("w", newline="") as fh:
            fh.write(f"# schema={LOG_SCHEMA}\n")
            w = csv.writer(fh)
            w.writerow(LOG_COLUMNS)
            for r in self.records:
                d = asdict(r)
                w.writerow([_csv_value(d[c]) for c in LOG_COLUMNS])
        return path

    def write_timings(self, path):
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "wall_time_s"])
            for r in self.records:
                w.writerow([r.step, f"{r.wall_time:.6f}"])


def _csv_value(v):
    if isinstance(v, bool):
        return int(v)
    if isinstance(v, float):
        return format(v, ".17g")
    return v


def read_run_log(path):
    """Rows of a run-log CSV as dicts of floats (plus ``phases`` as text)."""
    with Path(path).open() as fh:
        first = fh.readline().strip()
        if first != f"# schema={LOG_SCHEMA}":
            raise ValueError(f"unexpected run-log schema line {first!r}")
        rows = []
        for row in csv.DictReader(fh):
            rows.append({k: (v if k == "phases" else float(v)) for k, v in row.items()})
    return rows


def vertex_fields(sim: Simulation) -> dict:
    """Vertex samples of every field; RT and P2 data are averaged over adjacent triangles."""
    m, prob = sim.mesh, sim.problem
    V = m.n_vertices
    tdm = sim.ctx.dofmap(TRACER_SPACE)
    u = sim.state.u.reshape(2, -1)[:, :V].T  # Lagrange vertex dofs come first
    g = geometry_maps(m.vertices, m.triangles, sim.ctx.scale)
    stab = tabulate(prob.sdm, g, REFERENCE_VERTICES)
    sv, _ = evaluate(stab, sim.state.sigma)  # (T, 3, 2, 2)
    acc = np.zeros((V, 2, 2))
    cnt = np.bincount(m.triangles.ravel(), minlength=V).astype(float)
    np.add.at(acc, m.triangles.ravel(), sv.reshape(-1, 2, 2))
    sigma = acc / cnt[:, None, None]
    t_days = sim.state.time / sc.SECONDS_PER_DAY
    out = {
        "A": sim.tracers.A[:V],
        "H": sim.tracers.H[:V],
        "velocity": u,
        "sigma_row1": sigma[:, 0, :],
        "sigma_row2": sigma[:, 1, :],
    }
    if sim.config.wind_enabled:
        out["wind"] = sc.wind(m.vertices, t_days, sim.config.params)
    if sim.config.ocean_enabled:
        out["ocean"] = sc.ocean(m.vertices, sim.config.params)
    return out


def snapshot_name(time_days: float) -> str:
    return f"state_t{time_days:08.4f}d.vtk"


def run(config: sc.BenchmarkConfig, write_output: bool = True, sim: Simulation | None = None) -> RunLog:
    """Advance the benchmark to ``t_end``: transport then Gauss-Newton momentum per step."""
    sim = sim or setup(config)
    out_dir = Path(config.output_dir)
    if write_output:
        out_dir.mkdir(parents=True, exist_ok=True)
    runlog = RunLog()
    prob, ctx = sim.problem, sim.ctx
    dt, theta = config.dt, config.theta
    cadence = config.output_every_hours * 3600.0
    next_output = 0.0

    def maybe_snapshot(force=False):
        nonlocal next_output
        t = sim.state.time
        if write_output and config.write_vtk and (force or t >= next_output - 1e-6 * dt):
            path = out_dir / snapshot_name(t / sc.SECONDS_PER_DAY)
            export_vtk(path, sim.mesh.vertices, sim.mesh.triangles, vertex_fields(sim))
            runlog.snapshots.append(path)
            while next_output <= t + 1e-6 * dt:
                next_output += cadence

    maybe_snapshot()
    n_steps = config.n_steps
    for k in range(1, n_steps + 1):
        t0 = time.perf_counter()
        phases = []
        try:
            adv = advect_step(ctx, sim.tracers, prob.vel_space, sim.state.u, dt)
            phases.append("advect")
            sim.tracers = adv.tracers
            data = prob.prepare(sim.state, sim.tracers.A, sim.tracers.H, dt, theta)
            new_state, report = prob.gn_solve(sim.state, data, tol=config.gn_tol, max_iter=config.gn_max_iter, armijo=config.armijo)
            phases.append("momentum")
        except Exception as exc:
            raise RunError(f"step {k} (t={k * dt / sc.SECONDS_PER_DAY:.4f} d) failed: {exc}", k) from exc
        x = prob.join(new_state.sigma, new_state.u)
        F_m, F_c = prob.functional_parts(x, data)
        if not (np.all(np.isfinite(x)) and np.isfinite(F_m) and np.isfinite(F_c)):
            raise RunError(f"step {k}: non-finite state after the momentum solve", k)
        sim.state = new_state
        # keep the time column exact multiples of dt
        sim.state.time = k * dt
        tq = evaluate(ctx.table(TRACER_SPACE), sim.tracers.A)[0][..., 0]
        hq = evaluate(ctx.table(TRACER_SPACE), sim.tracers.H)[0][..., 0]
        uu = new_state.u.reshape(2, -1)
        rec = StepRecord(
            step=k,
            time_days=k * dt / sc.SECONDS_PER_DAY,
            phases=">".join(phases),
            gn_iterations=report.iterations,
            gn_converged=report.converged,
            F_m=F_m,
            F_c=F_c,
            F_e=adv.functional,
            int_H=ctx.integrate(hq),
            int_A=ctx.integrate(tq),
            min_A=float(sim.tracers.A.min()),
            max_A=float(sim.tracers.A.max()),
            min_H=float(sim.tracers.H.min()),
            max_H=float(sim.tracers.H.max()),
            active_A=adv.active_sets[0].n_active,
            active_H=adv.active_sets[1].n_active,
            sigma_symmetry_defect=prob.symmetry_defect(new_state.sigma),
            max_speed=float(np.sqrt((uu**2).sum(axis=0)).max()),
            wall_time=time.perf_counter() - t0,
        )
        runlog.records.append(rec)
        log.info(
            "step %d t=%.4f d GN its=%d conv=%s F_m=%.4e F_c=%.4e",
            k, rec.time_days, rec.gn_iterations, rec.gn_converged, F_m, F_c,
        )
        maybe_snapshot(force=(k == n_steps))
    if write_output:
        runlog.write_csv(out_dir / "run_log.csv")
        runlog.write_timings(out_dir / "timings.csv")
    return runlog
