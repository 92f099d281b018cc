"""Pseudo-transient continuation with per-element pseudo-time steps.

Each iteration solves ``(M(dt) + F'(v)) s = -F(v)`` where ``M(dt)`` is the
lumped velocity mass matrix scaled element-wise by ``rho / dt_e``.  The
per-element steps come from a global CFL number (iteration schedule or
error controller) through ``dt_e = CFL * h_e / |u|_e``, or directly from a
trained network.  Damped Newton variants are provided as baselines.
"""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

from .fem import EPS_U, NumericError, Problem
from .linsolve import SingularMatrixError, factorize

DEFAULT_TOL = 1e-6
DEFAULT_MAX_ITER = 100
BLOWUP = 1e10  # residual growth (relative to the initial one) treated as divergence


# ---------------------------------------------------------------------------
# strategies


@dataclass(frozen=True)
class IterSchedule:
    name: str = "CFL_iter"


@dataclass(frozen=True)
class ErrController:
    k_p: float = 0.65
    k_i: float = 0.05
    k_d: float = 0.05
    tol: float = DEFAULT_TOL
    cfl0: float = 1.0
    cfl_min: float = 1e-4
    cfl_max: float = 1e8
    name: str = "CFL_e"

    def __post_init__(self):
        if min(self.k_p, self.k_i, self.k_d) <= 0:
            raise ValueError("controller gains must be positive")
        if not (self.tol > 0 and self.cfl0 > 0 and 0 < self.cfl_min <= self.cfl_max):
            raise ValueError("invalid controller settings")


@dataclass(frozen=True)
class Learned:
    """Network-predicted steps.

    Predictions are raised to at least ``cfl_floor * h_e / |u|_e`` (a local
    CFL floor; 0 disables it) and then clipped to ``[dt_floor, dt_cap]``.
    """

    model: object  # nn.MlpModel
    dt_floor: float = 1e-12
    dt_cap: float = 1e12
    cfl_floor: float = 0.1
    name: str = "NN"

    def __post_init__(self):
        if not (0 < self.dt_floor <= self.dt_cap):
            raise ValueError("need 0 < dt_floor <= dt_cap")
        if not self.cfl_floor >= 0:
            raise ValueError("cfl_floor must be non-negative")


@dataclass(frozen=True)
class NewtonConstant:
    damping: float = 1.0
    name: str = "NC"

    def __post_init__(self):
        if not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")


@dataclass(frozen=True)
class NewtonAdaptive:
    lambda_min: float = 1e-4
    name: str = "AN"

    def __post_init__(self):
        if not 0 < self.lambda_min <= 1:
            raise ValueError("lambda_min must lie in (0, 1]")


CflStrategy = Union[IterSchedule, ErrController, Learned, NewtonConstant, NewtonAdaptive]


def describe(strategy: CflStrategy) -> str:
    if isinstance(strategy, ErrController):
        return f"CFL_e(kP={strategy.k_p},kI={strategy.k_i},kD={strategy.k_d},tol={strategy.tol})"
    if isinstance(strategy, NewtonConstant):
        return f"NC(lambda={strategy.damping})"
    if isinstance(strategy, NewtonAdaptive):
        return f"AN(lambda_min={strategy.lambda_min})"
    return strategy.name


# ---------------------------------------------------------------------------
# CFL laws


def cfl_iter(n: int) -> float:
    """Iteration-count CFL schedule (base 1.3, plateaus after 9 steps per stage)."""
    if n < 1:
        raise ValueError("iteration count starts at 1")
    if n <= 20:
        return 1.3 ** min(n, 9)
    if n <= 40:
        return 1.3 ** 9 + 9 * 1.3 ** min(n - 20, 9)
    return 1.3 ** 9 + 9 * 1.3 ** 9 + 90 * 1.3 ** min(n - 40, 9)


def cfl_err(e1: float, e2: float | None, e3: float | None, prev_cfl: float,
            params: ErrController) -> float:
    """PID update of the global CFL number.

    ``e1, e2, e3`` are the error estimates of the previous three iterations
    (most recent first); missing history is passed as ``None`` and its
    ratio taken as 1.
    """
    for e in (e1, e2, e3):
        if e is not None and not e > 0:
            raise ValueError("error estimates must be positive")
    p = (e2 / e1) ** params.k_p if e2 is not None else 1.0
    i = (params.tol / e1) ** params.k_i
    d = ((e2 / e1) / (e3 / e2)) ** params.k_d if e3 is not None else 1.0
    return float(np.clip(p * i * d * prev_cfl, params.cfl_min, params.cfl_max))


def local_dt(cfl, h, u_norm, eps_u: float = EPS_U):
    """``cfl * h / |u|`` with ``|u|`` floored at ``eps_u``."""
    return cfl * np.asarray(h) / np.maximum(np.asarray(u_norm), eps_u)


# ---------------------------------------------------------------------------
# single steps


def ptc_step(problem: Problem, x: np.ndarray, dt: np.ndarray,
             R: np.ndarray | None = None, J=None) -> tuple[np.ndarray, np.ndarray]:
    """One local pseudo-time step; returns ``(x_new, step)``."""
    R = problem.residual(x) if R is None else R
    K = problem.ptc_matrix(x, dt, jac=J)
    s = -factorize(K).solve(R)
    return x + s, s


def newton_adaptive_step(residual_norm: Callable[[np.ndarray], float], x: np.ndarray,
                         s: np.ndarray, f0: float | None = None,
                         lambda_min: float = 1e-4) -> tuple[np.ndarray, float, bool]:
    """Backtracking on the residual norm; returns ``(x_new, lambda, forced)``.

    ``lambda`` starts at 1 and is halved while
    ``|F(x + lambda s)| > (1 - lambda/2) |F(x)|``.  If no trial satisfies the
    test before ``lambda_min`` the best trial is accepted and ``forced`` is set.
    """
    f0 = residual_norm(x) if f0 is None else f0
    lam = 1.0
    best = (math.inf, 1.0)
    while True:
        try:
            f = residual_norm(x + lam * s)
        except NumericError:
            f = math.inf
        if not np.isfinite(f):
            f = math.inf
        if f < best[0]:
            best = (f, lam)
        if f <= (1.0 - 0.5 * lam) * f0:
            return x + lam * s, lam, False
        if lam / 2 < lambda_min:
            break
        lam /= 2
    lam = best[1] if np.isfinite(best[0]) else lambda_min
    return x + lam * s, lam, True


# ---------------------------------------------------------------------------
# driver


@dataclass
class SolveReport:
    converged: bool
    iterations: int
    residual_history: list[float]
    cfl_history: list[float]
    min_dt: list[float]
    max_dt: list[float]
    wall_ms: list[float]
    wall_time: float
    final_state: np.ndarray
    strategy: str
    failure: str | None = None
    snapshots: dict[int, np.ndarray] = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iter", "residual", "global_cfl", "min_dt", "max_dt", "wall_ms"])
        for k, r in enumerate(self.residual_history):
            if k == 0:
                w.writerow([0, repr(r), "", "", "", "0.0"])
            else:
                w.writerow([k, repr(r), _fmt(self.cfl_history[k - 1]), _fmt(self.min_dt[k - 1]),
                            _fmt(self.max_dt[k - 1]), f"{self.wall_ms[k - 1]:.3f}"])
        return buf.getvalue()


def _fmt(v):
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(float(v))


def predict_local_dt(problem: Problem, x: np.ndarray, strategy: Learned,
                     R: np.ndarray | None = None) -> np.ndarray:
    from .features import extract_all
    from .nn import predict_dt

    feats = extract_all(problem, x, R=R)
    dt = predict_dt(strategy.model, feats)
    dt = np.where(np.isnan(dt), strategy.dt_floor, dt)
    if strategy.cfl_floor > 0:
        dt = np.maximum(dt, local_dt(strategy.cfl_floor, problem.h, problem.centroid_speed(x)))
    return np.clip(dt, strategy.dt_floor, strategy.dt_cap)


def solve_nonlinear(problem: Problem, strategy: CflStrategy, max_iter: int = DEFAULT_MAX_ITER,
                    tol: float = DEFAULT_TOL, x0: np.ndarray | None = None,
                    keep: set[int] | None = None, first_iter: int = 1) -> SolveReport:
    """Run the nonlinear iteration until ``|F| <= tol * |F(x0)|`` or ``max_iter``.

    ``keep`` lists iteration numbers (1-based) whose input state is stored in
    ``report.snapshots``.  ``first_iter`` offsets the iteration counter seen by
    the CFL schedule, which lets a run be resumed from a saved state.
    """
    if max_iter < 1 or not tol > 0 or first_iter < 1:
        raise ValueError("need max_iter >= 1, tol > 0 and first_iter >= 1")
    keep = keep or set()
    start = time.perf_counter()
    x = problem.initial_state() if x0 is None else np.array(x0, dtype=float)
    R = problem.residual(x)
    r0 = problem.residual_norm(R)
    res = [r0]
    cfls, dmin, dmax, wall = [], [], [], []
    snaps: dict[int, np.ndarray] = {}
    cfl_prev = strategy.cfl0 if isinstance(strategy, ErrController) else None
    failure = None
    converged = r0 <= tol * r0 or r0 == 0.0
    n = 0
    while not converged and n < max_iter:
        n += 1
        t0 = time.perf_counter()
        if n in keep:
            snaps[n] = x.copy()
        try:
            J = problem.jacobian(x)
            cfl = math.nan
            if isinstance(strategy, (NewtonConstant, NewtonAdaptive)):
                s = -factorize(J).solve(R)
                if isinstance(strategy, NewtonConstant):
                    x = x + strategy.damping * s
                else:
                    x, _, _ = newton_adaptive_step(
                        lambda y: problem.residual_norm(problem.residual(y)), x, s,
                        f0=res[-1], lambda_min=strategy.lambda_min)
                dt = np.array([math.inf])
            else:
                if isinstance(strategy, Learned):
                    dt = predict_local_dt(problem, x, strategy, R=R)
                else:
                    if isinstance(strategy, IterSchedule):
                        cfl = cfl_iter(n + first_iter - 1)
                    else:
                        e = [r / r0 for r in res]
                        cfl = cfl_err(e[-1], e[-2] if len(e) > 1 else None,
                                      e[-3] if len(e) > 2 else None, cfl_prev, strategy)
                        cfl_prev = cfl
                    dt = local_dt(cfl, problem.h, problem.centroid_speed(x))
                x, _ = ptc_step(problem, x, dt, R=R, J=J)
            R = problem.residual(x)
            r = problem.residual_norm(R)
        except SingularMatrixError as exc:
            failure = f"singular linear system at iteration {n}: {exc}"
            break
        except NumericError:
            failure = f"non-finite state at iteration {n}"
            break
        res.append(r)
        cfls.append(cfl)
        dmin.append(float(np.min(dt)))
        dmax.append(float(np.max(dt)))
        wall.append(1e3 * (time.perf_counter() - t0))
        if not np.isfinite(r) or r > BLOWUP * r0:
            failure = f"divergence guard triggered at iteration {n} (residual {r:.3e})"
            break
        converged = r <= tol * r0
    if not converged and failure is None:
        failure = "maximum iterations reached"
    return SolveReport(
        converged=bool(converged),
        iterations=n,
        residual_history=res,
        cfl_history=cfls,
        min_dt=dmin,
        max_dt=dmax,
        wall_ms=wall,
        wall_time=time.perf_counter() - start,
        final_state=x,
        strategy=describe(strategy),
        failure=None if converged else failure,
        snapshots=snaps,
    )
