"""Training targets: reference solutions and optimal local pseudo-time steps.

For a snapshot ``x_n`` of a baseline run and the converged state ``x*`` the
optimal steps minimize the velocity L2 distance between one pseudo-time step
and ``x*``::

    g(theta) = || x_n - K(theta)^{-1} F(x_n) - x* ||,   K = M(exp theta) + F'(x_n)

over ``theta_e = log dt_e``.  The gradient costs one extra transposed solve
(adjoint method) and the bound-constrained minimization uses L-BFGS-B.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.optimize import minimize

from .features import Dataset, extract_all
from .fem import BoundaryConditions, FluidProps, Problem
from .linsolve import SingularMatrixError, factorize
from .mesh import GEOMETRIES, generate_mesh
from .ptc import IterSchedule, cfl_iter, local_dt, ptc_step, solve_nonlinear

log = logging.getLogger(__name__)

DT_MIN, DT_MAX = 1e-12, 1e12
REF_TOL = 1e-10


class OracleUnavailable(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# reference solutions


def reference_solution(problem: Problem, tol: float = REF_TOL, max_iter: int = 200,
                       continuation=(10.0, 3.0, 1.0)) -> np.ndarray:
    """Converged state with ``|F(x*)| <= tol * |F(x0)|``.

    Tries the iteration schedule directly, then a viscosity continuation
    (``continuation`` multiples of mu, warm-starting each stage).
    """
    x0 = problem.initial_state()
    target = tol * problem.residual_norm(problem.residual(x0))
    rep = solve_nonlinear(problem, IterSchedule(), max_iter=max_iter, tol=tol)
    if rep.converged:
        return rep.final_state
    x = x0
    for factor in continuation:
        props = FluidProps(problem.props.rho, problem.props.mu * factor, problem.props.body_force)
        stage = Problem(problem.mesh, props, problem.bc, problem.convection)
        r_start = stage.residual_norm(stage.residual(x))
        stage_target = target if factor == 1.0 else tol * stage.residual_norm(stage.residual(x0))
        if r_start <= stage_target:
            continue
        rep = solve_nonlinear(stage, IterSchedule(), max_iter=max_iter, tol=stage_target / r_start,
                              x0=x)
        if not rep.converged:
            raise OracleUnavailable(f"continuation stage {factor} x mu failed: {rep.failure}")
        x = rep.final_state
    if problem.residual_norm(problem.residual(x)) > target:
        raise OracleUnavailable("continuation did not reach the reference tolerance")
    return x


# ---------------------------------------------------------------------------
# optimal steps


@dataclass
class OracleResult:
    dt: np.ndarray
    g_init: float
    g_opt: float
    evaluations: int
    message: str = ""


def minimize_log_dt(evaluate: Callable[[np.ndarray], tuple[float, np.ndarray]], dt0: np.ndarray,
                    lo: float = DT_MIN, hi: float = DT_MAX, maxfun: int = 200,
                    ftol: float = 1e-8) -> OracleResult:
    """Bound-constrained L-BFGS-B over ``theta = log dt``.

    ``evaluate(dt)`` returns the objective and its gradient with respect to
    ``theta``; it may raise ``SingularMatrixError``.  The best point seen is
    returned, with ``dt0`` itself evaluated first, so the result never does
    worse than the initial guess.
    """
    dt0 = np.clip(np.asarray(dt0, dtype=float), lo, hi)
    g0, grad0 = evaluate(dt0)
    best = {"g": g0, "dt": dt0, "n": 1}
    if g0 == 0.0 or not np.any(grad0):
        return OracleResult(dt0, g0, g0, 1, "initial point is stationary")
    theta0 = np.log(dt0)

    def fun(theta):
        best["n"] += 1
        dt = np.exp(theta)
        try:
            g, grad = evaluate(dt)
        except SingularMatrixError:
            return 1e3, np.zeros_like(theta)
        if not np.isfinite(g):
            return 1e3, np.zeros_like(theta)
        if g < best["g"]:
            best["g"], best["dt"] = g, dt
        return g / g0, grad / g0

    res = minimize(fun, theta0, jac=True, method="L-BFGS-B",
                   bounds=[(math.log(lo), math.log(hi))] * len(theta0),
                   options={"maxfun": maxfun, "maxiter": maxfun, "ftol": ftol, "gtol": 0.0})
    return OracleResult(best["dt"], g0, best["g"], best["n"], str(res.message))


def step_objective(problem: Problem, xn: np.ndarray, xstar: np.ndarray):
    """``evaluate(dt)`` for :func:`minimize_log_dt`: velocity L2 distance and adjoint gradient."""
    R = problem.residual(xn)
    J = problem.jacobian(xn)
    M, n = problem.mass, problem.n
    el = problem.mesh.elements
    free = ~problem.dirichlet_mask
    base = problem.props.rho * problem.area / 3.0

    def evaluate(dt):
        K = problem.ptc_matrix(xn, dt, jac=J)
        lu = factorize(K)
        s = lu.solve(R)
        w = xn - s - xstar
        Qw = np.zeros_like(w)
        Qw[:n] = M @ w[:n]
        Qw[n:2 * n] = M @ w[n:2 * n]
        g = math.sqrt(max(float(w @ Qw), 0.0))
        if g == 0.0:
            return 0.0, np.zeros(len(dt))
        lam = lu.solve(Qw, transpose=True)
        ls = np.where(free, lam * s, 0.0)
        per_elem = ls[el].sum(axis=1) + ls[el + n].sum(axis=1)
        return g, -(base / dt) * per_elem / g

    return evaluate


def optimal_dt(problem: Problem, xn: np.ndarray, xstar: np.ndarray, n: int,
               maxfun: int = 200, ftol: float = 1e-8) -> OracleResult:
    """Optimal per-element steps for snapshot ``xn`` of iteration ``n``.

    Initialized at the iteration-schedule steps of that iteration.
    """
    dt0 = local_dt(cfl_iter(n), problem.h, problem.centroid_speed(xn))
    return minimize_log_dt(step_objective(problem, xn, xstar), dt0, maxfun=maxfun, ftol=ftol)


def step_distance(problem: Problem, xn: np.ndarray, xstar: np.ndarray, dt: np.ndarray) -> float:
    """Velocity L2 distance to ``xstar`` after one pseudo-time step with ``dt``."""
    x1, _ = ptc_step(problem, xn, dt)
    return problem.velocity_norm(x1 - xstar)


# ---------------------------------------------------------------------------
# datasets


@dataclass(frozen=True)
class DataConfig:
    geometry: str
    h_max: float
    velocity: float
    iterations: tuple[int, ...] = (1, 10)

    @property
    def config_id(self) -> str:
        return f"{self.geometry}_h{self.h_max:g}_u{self.velocity:g}"

    def problem(self) -> Problem:
        spec = GEOMETRIES[self.geometry]
        mesh = generate_mesh(spec, self.h_max)
        bc = (BoundaryConditions(u_wall=self.velocity) if spec.kind == "Annulus"
              else BoundaryConditions(u_in=self.velocity))
        return Problem(mesh, FluidProps(), bc)


DESK_SNAPSHOTS = (1, 2, 3, 4, 5, 6, 8, 10, 12, 15, 20)


def desk_data_configs(iterations: tuple[int, ...] = DESK_SNAPSHOTS) -> list[DataConfig]:
    """B1 training sweep: two mesh sizes by four inflow velocities."""
    return [DataConfig("B1", h, u, iterations) for h in (0.0256, 0.0206)
            for u in (0.001, 0.002, 0.003, 0.004)]


def parse_data_configs(text: str) -> list[DataConfig]:
    """``[data:NAME]`` sections with ``geometry``, ``h_max``, ``velocity``, ``iterations`` lists."""
    import configparser

    from .mesh import ConfigurationError

    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigurationError(str(exc)) from exc
    out = []
    for sec in cp.sections():
        if not sec.startswith("data:"):
            continue
        o = cp[sec]
        try:
            geometry = o.get("geometry", sec[5:].strip())
            hs = [float(v) for v in o["h_max"].replace(",", " ").split()]
            us = [float(v) for v in o["velocity"].replace(",", " ").split()]
            its = tuple(int(v) for v in o.get("iterations", "1, 10").replace(",", " ").split())
        except (KeyError, ValueError) as exc:
            raise ConfigurationError(f"[{sec}]: {exc}") from exc
        if geometry not in GEOMETRIES:
            raise ConfigurationError(f"[{sec}]: unknown geometry {geometry!r}")
        out += [DataConfig(geometry, h, u, its) for h in hs for u in us]
    if not out:
        raise ConfigurationError("no [data:*] sections")
    return out


@dataclass
class SnapshotRecord:
    config_id: str
    iteration: int
    g_iter: float
    g_opt: float
    evaluations: int
    dt_opt: np.ndarray | None = None


@dataclass
class GeneratedData:
    train: Dataset
    test: Dataset
    val: Dataset
    snapshots: list[SnapshotRecord] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)
    manifest: list[str] = field(default_factory=list)


def config_samples(cfg: DataConfig, maxfun: int = 200) -> tuple[Dataset, list[SnapshotRecord]]:
    """Features and optimal-step targets for every snapshot of one configuration."""
    problem = cfg.problem()
    xstar = reference_solution(problem)
    run = solve_nonlinear(problem, IterSchedule(), max_iter=max(cfg.iterations),
                          keep=set(cfg.iterations))
    parts, records = [], []
    for it in cfg.iterations:
        if it not in run.snapshots:
            log.warning("%s: baseline stopped before iteration %d", cfg.config_id, it)
            continue
        xn = run.snapshots[it]
        res = optimal_dt(problem, xn, xstar, it, maxfun=maxfun)
        E = problem.mesh.n_elements
        parts.append(Dataset(extract_all(problem, xn), res.dt, [cfg.config_id] * E, [it] * E,
                             np.arange(E)))
        records.append(SnapshotRecord(cfg.config_id, it, res.g_init, res.g_opt, res.evaluations, res.dt))
    return Dataset.concat(parts), records


def split_counts(n: int) -> tuple[int, int, int]:
    n_train = round(0.7 * n)
    n_test = round(0.15 * n)
    return n_train, n_test, n - n_train - n_test


def balance_and_split(ds: Dataset, groups: np.ndarray, seed: int) -> tuple[Dataset, Dataset, Dataset]:
    """Downsample every group to the smallest group size, then split 70/15/15."""
    rng = np.random.default_rng(seed)
    keys = sorted(set(groups.tolist()))
    if not keys:
        empty = Dataset.concat([])
        return empty, empty, empty
    members = [np.flatnonzero(groups == k) for k in keys]
    m = min(len(ix) for ix in members)
    chosen = np.concatenate([np.sort(rng.choice(ix, size=m, replace=False)) for ix in members])
    chosen = chosen[rng.permutation(len(chosen))]
    a, b, _ = split_counts(len(chosen))
    return ds.subset(chosen[:a]), ds.subset(chosen[a:a + b]), ds.subset(chosen[a + b:])


def generate_dataset(configs: list[DataConfig], seed: int = 0, maxfun: int = 200,
                     workers: int = 1) -> GeneratedData:
    """Run the oracle on every configuration, balance by mesh size and split."""
    from ._parallel import parallel_map

    results = parallel_map(_config_job, [(c, maxfun) for c in configs], workers)
    parts, snaps, skipped, hs = [], [], [], []
    for cfg, out in zip(configs, results):
        if isinstance(out, str):
            log.warning("skipping %s: %s", cfg.config_id, out)
            skipped.append(f"{cfg.config_id}: {out}")
            continue
        ds, recs = out
        parts.append(ds)
        snaps += recs
        hs.append(np.full(len(ds), cfg.h_max))
    full = Dataset.concat(parts)
    groups = np.concatenate(hs) if hs else np.zeros(0)
    train, test, val = balance_and_split(full, groups, seed)
    manifest = [f"seed {seed}", f"maxfun {maxfun}"]
    manifest += [f"config {c.config_id} geometry={c.geometry} h_max={c.h_max!r} velocity={c.velocity!r} "
                 f"iterations={','.join(map(str, c.iterations))}" for c in configs]
    manifest += [f"skipped {s}" for s in skipped]
    manifest += [f"snapshot {r.config_id} iter={r.iteration} g_iter={r.g_iter!r} g_opt={r.g_opt!r} "
                 f"evaluations={r.evaluations}" for r in snaps]
    manifest += [f"samples total={len(full)} train={len(train)} test={len(test)} val={len(val)}"]
    return GeneratedData(train, test, val, snaps, skipped, manifest)


def _config_job(args):
    cfg, maxfun = args
    try:
        return config_samples(cfg, maxfun)
    except (OracleUnavailable, SingularMatrixError) as exc:
        return str(exc)
