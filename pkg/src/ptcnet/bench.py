"""Declarative benchmark suites: run strategies over geometry sweeps, tabulate, plot.

A suite file is INI-style::

    [suite]
    name = desk
    strategies = CFL_iter, CFL_e, NC, AN
    tol = 1e-6
    max_iter = 100
    seed = 0
    model = model.txt        ; required when NN is listed

    [fluid]
    rho = 1000
    mu = 0.001

    [run:B1]
    geometry = B1
    h_max = 0.0256, 0.0206
    velocity = 0.001, 0.004
    obstacle = circle 0.03 @ 0.3 0.04 ; 'ellipse a b @ x y', several separated by ';'

Every ``[run:*]`` section expands to the product of its lists.
"""

from __future__ import annotations

import configparser
import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._parallel import parallel_map
from .fem import BoundaryConditions, FluidProps, Problem
from .linsolve import SingularMatrixError
from .mesh import GEOMETRIES, Circle, ConfigurationError, Ellipse, Obstacle, generate_mesh
from .ptc import (DEFAULT_MAX_ITER, DEFAULT_TOL, ErrController, IterSchedule, Learned,
                  NewtonAdaptive, NewtonConstant, SolveReport, solve_nonlinear)

STRATEGY_NAMES = ("CFL_iter", "CFL_e", "NC", "AN", "NN")


def make_strategy(name: str, model=None):
    name = name.strip()
    if name == "CFL_iter":
        return IterSchedule()
    if name == "CFL_e":
        return ErrController()
    if name == "NC":
        return NewtonConstant()
    if name == "AN":
        return NewtonAdaptive()
    if name == "NN":
        if model is None:
            raise ConfigurationError("strategy NN needs a model file")
        return Learned(model)
    raise ConfigurationError(f"unknown strategy {name!r}; choose from {', '.join(STRATEGY_NAMES)}")


@dataclass(frozen=True)
class ExperimentConfig:
    family: str
    geometry: str
    h_max: float
    velocity: float
    obstacle: Obstacle | None = None
    props: FluidProps = FluidProps()
    strategies: tuple[str, ...] = ("CFL_iter", "CFL_e")
    tol: float = DEFAULT_TOL
    max_iter: int = DEFAULT_MAX_ITER
    seed: int = 0

    def __post_init__(self):
        if not self.strategies:
            raise ConfigurationError("at least one strategy is required")
        if self.geometry not in GEOMETRIES:
            raise ConfigurationError(f"unknown geometry {self.geometry!r}")
        if not (self.h_max > 0 and self.velocity > 0):
            raise ConfigurationError("h_max and velocity must be positive")

    @property
    def config_id(self) -> str:
        base = f"{self.family}_h{self.h_max:g}_u{self.velocity:g}"
        if self.obstacle is not None:
            x, y = self.obstacle.center
            base += f"_o{x:g}-{y:g}"
            shape = self.obstacle.shape
            if isinstance(shape, Ellipse):
                base += f"_e{shape.a:g}x{shape.b:g}"
        return base

    def problem(self) -> Problem:
        spec = GEOMETRIES[self.geometry]
        if self.obstacle is not None:
            spec = spec.with_obstacle(self.obstacle)
        mesh = generate_mesh(spec, self.h_max)
        bc = (BoundaryConditions(u_wall=self.velocity) if spec.kind == "Annulus"
              else BoundaryConditions(u_in=self.velocity))
        return Problem(mesh, self.props, bc)


@dataclass
class RunResult:
    config: ExperimentConfig
    strategy: str
    report: SolveReport | None
    elements: int = 0
    error: str | None = None

    @property
    def converged(self) -> bool:
        return self.report is not None and self.report.converged

    @property
    def iterations(self) -> int:
        """Iteration count, with non-converged runs charged the iteration cap."""
        return self.report.iterations if self.converged else self.config.max_iter


@dataclass
class SuiteResult:
    runs: list[RunResult]
    strategies: tuple[str, ...]
    configs: list[ExperimentConfig] = field(default_factory=list)

    def rows(self):
        """(config, {strategy: RunResult}, winners) per config, in suite order."""
        out = []
        for cfg in self.configs:
            by = {r.strategy: r for r in self.runs if r.config == cfg}
            conv = {s: by[s].iterations for s in self.strategies if s in by and by[s].converged}
            best = min(conv.values()) if conv else None
            winners = [s for s in self.strategies if conv.get(s) == best] if conv else []
            out.append((cfg, by, winners))
        return out

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        head = ["config_id", "family", "geometry", "h_max", "velocity", "elements"]
        for s in self.strategies:
            head += [f"{s}_iterations", f"{s}_converged"]
        w.writerow(head + ["winner"])
        for cfg, by, winners in self.rows():
            elements = next((r.elements for r in by.values() if r.elements), 0)
            row = [cfg.config_id, cfg.family, cfg.geometry, repr(cfg.h_max), repr(cfg.velocity), elements]
            for s in self.strategies:
                r = by.get(s)
                row += [r.iterations if r else "", int(r.converged) if r else ""]
            w.writerow(row + [" ".join(winners)])
        return buf.getvalue()

    def mean_iterations(self) -> dict[tuple[str, str], float]:
        """Mean iteration count per (family, strategy), non-converged counted at the cap."""
        acc: dict[tuple[str, str], list[int]] = {}
        for r in self.runs:
            acc.setdefault((r.config.family, r.strategy), []).append(r.iterations)
        return {k: float(np.mean(v)) for k, v in acc.items()}

    def means_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["family", "strategy", "mean_iterations", "converged", "runs"])
        means = self.mean_iterations()
        for fam in dict.fromkeys(c.family for c in self.configs):
            for s in self.strategies:
                runs = [r for r in self.runs if r.config.family == fam and r.strategy == s]
                if runs:
                    w.writerow([fam, s, repr(means[(fam, s)]), sum(r.converged for r in runs), len(runs)])
        return buf.getvalue()


def _run_job(args) -> list[RunResult]:
    cfg, model = args
    try:
        problem = cfg.problem()
    except ConfigurationError as exc:
        return [RunResult(cfg, s, None, error=f"configuration: {exc}") for s in cfg.strategies]
    out = []
    for s in cfg.strategies:
        try:
            rep = solve_nonlinear(problem, make_strategy(s, model), cfg.max_iter, cfg.tol)
            out.append(RunResult(cfg, s, rep, problem.mesh.n_elements))
        except (SingularMatrixError, ValueError, FloatingPointError) as exc:
            out.append(RunResult(cfg, s, None, problem.mesh.n_elements, error=str(exc)))
    return out


def run_suite(configs: list[ExperimentConfig], out_dir: str | Path | None = None, model=None,
              workers: int | None = None) -> SuiteResult:
    """Run every (config, strategy) pair; optionally write CSVs and SVGs to ``out_dir``."""
    if not configs:
        raise ConfigurationError("empty suite")
    strategies = tuple(dict.fromkeys(s for c in configs for s in c.strategies))
    if "NN" in strategies and model is None:
        raise ConfigurationError("strategy NN needs a model file")
    results = parallel_map(_run_job, [(c, model) for c in configs], workers)
    suite = SuiteResult([r for rs in results for r in rs], strategies, list(configs))
    if out_dir is not None:
        write_artifacts(suite, Path(out_dir))
    return suite


def write_artifacts(suite: SuiteResult, out: Path) -> None:
    runs_dir = out / "runs"
    runs_dir.mkdir(parents=True, exist_ok=True)
    for r in suite.runs:
        if r.report is not None:
            (runs_dir / f"{r.config.config_id}__{r.strategy}.csv").write_text(r.report.to_csv())
    (out / "summary.csv").write_text(suite.summary_csv())
    (out / "means.csv").write_text(suite.means_csv())
    errors = [f"{r.config.config_id} {r.strategy}: {r.error}" for r in suite.runs if r.error]
    (out / "errors.txt").write_text("".join(e + "\n" for e in errors))
    means = suite.mean_iterations()
    for fam in dict.fromkeys(c.family for c in suite.configs):
        rows = [(cfg, by) for cfg, by, _ in suite.rows() if cfg.family == fam]
        series = {s: [by[s].iterations if s in by else None for _, by in rows] for s in suite.strategies}
        fam_means = {s: means[(fam, s)] for s in suite.strategies if (fam, s) in means}
        (out / f"scatter_{fam}.svg").write_text(scatter_svg(fam, series, fam_means))


# ---------------------------------------------------------------------------
# config files


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.replace(",", " ").split()]


def parse_obstacles(text: str) -> list[Obstacle]:
    out = []
    for part in filter(None, (p.strip() for p in text.split(";"))):
        try:
            shape_txt, center_txt = part.split("@")
            kind, *dims = shape_txt.split()
            center = tuple(_floats(center_txt))
            dims = [float(d) for d in dims]
            if kind == "circle" and len(dims) == 1:
                shape = Circle(dims[0])
            elif kind == "ellipse" and len(dims) == 2:
                shape = Ellipse(*dims)
            else:
                raise ValueError
            if len(center) != 2:
                raise ValueError
        except ValueError as exc:
            raise ConfigurationError(f"bad obstacle {part!r}; use 'circle r @ x y' or "
                                     f"'ellipse a b @ x y'") from exc
        out.append(Obstacle(shape, center))
    return out


def parse_suite(text: str) -> tuple[list[ExperimentConfig], dict[str, str]]:
    """Configs and the raw ``[suite]`` options from an INI-style suite description."""
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigurationError(str(exc)) from exc
    suite = dict(cp["suite"]) if cp.has_section("suite") else {}
    try:
        strategies = tuple(s.strip() for s in suite.get("strategies", "CFL_iter, CFL_e").split(",") if s.strip())
        tol = float(suite.get("tol", DEFAULT_TOL))
        max_iter = int(suite.get("max_iter", DEFAULT_MAX_ITER))
        seed = int(suite.get("seed", 0))
        fluid = cp["fluid"] if cp.has_section("fluid") else {}
        props = FluidProps(float(fluid.get("rho", 1000.0)), float(fluid.get("mu", 1e-3)))
    except ValueError as exc:
        raise ConfigurationError(str(exc)) from exc
    for s in strategies:
        if s not in STRATEGY_NAMES:
            raise ConfigurationError(f"unknown strategy {s!r}")
    configs = []
    for sec in cp.sections():
        if not sec.startswith("run:"):
            continue
        opts = cp[sec]
        family = sec[4:].strip() or opts.get("geometry", "run")
        geometry = opts.get("geometry", family)
        obstacles = parse_obstacles(opts.get("obstacle", "")) or [None]
        try:
            hs, us = _floats(opts["h_max"]), _floats(opts["velocity"])
        except KeyError as exc:
            raise ConfigurationError(f"[{sec}] needs h_max and velocity") from exc
        except ValueError as exc:
            raise ConfigurationError(f"[{sec}]: {exc}") from exc
        for h in hs:
            for u in us:
                for ob in obstacles:
                    configs.append(ExperimentConfig(family, geometry, h, u, ob, props, strategies,
                                                    tol, max_iter, seed))
    if not configs:
        raise ConfigurationError("suite defines no [run:*] sections")
    return configs, suite


DESK_SUITE = """\
[suite]
name = desk
strategies = CFL_iter, CFL_e, NC, AN
tol = 1e-6
max_iter = 100
seed = 0

[fluid]
rho = 1000
mu = 0.001

[run:B1]
geometry = B1
h_max = 0.0256, 0.0206, 0.0156
velocity = 0.001, 0.004, 0.007

[run:C]
geometry = C
h_max = 0.03, 0.026
velocity = 0.01, 0.05

[run:BO]
geometry = B1
h_max = 0.0206
velocity = 0.004
obstacle = circle 0.03 @ 0.3 0.04; circle 0.03 @ 1.1 0.04
"""


def _shapes(shapes: list[str], centers: list[tuple[float, float]]) -> str:
    return "; ".join(f"{sh} @ {x!r} {y!r}" for x, y in centers for sh in shapes)


_BO_SHAPES = ["circle 0.03", "ellipse 0.03 0.02", "ellipse 0.02 0.03"]
_CO_SHAPES = ["circle 0.04", "ellipse 0.03 0.02", "ellipse 0.02 0.03"]

FULL_SUITE = f"""\
[suite]
name = full
strategies = CFL_iter, CFL_e, NC, AN
tol = 1e-6
max_iter = 100
seed = 0

[fluid]
rho = 1000
mu = 0.001

[run:B1]
geometry = B1
h_max = 0.0106, 0.0156, 0.0206, 0.0256
velocity = 0.001, 0.004, 0.007, 0.01, 0.012, 0.015

[run:B1S]
geometry = B1S
h_max = 0.00106, 0.00156, 0.00206, 0.00256
velocity = 0.01, 0.04, 0.07, 0.1, 0.12, 0.15

[run:B2]
geometry = B2
h_max = 0.0126, 0.0156, 0.0186, 0.0206
velocity = 0.001, 0.004, 0.007, 0.01

[run:B2S]
geometry = B2S
h_max = 0.00126, 0.00156, 0.00186, 0.00206
velocity = 0.01, 0.04, 0.07, 0.1

[run:C]
geometry = C
h_max = 0.014, 0.016, 0.018, 0.02, 0.022
velocity = 0.01, 0.03, 0.04, 0.05, 0.07, 0.1

[run:CS]
geometry = CS
h_max = 0.0028, 0.0032, 0.0036, 0.004, 0.0044
velocity = 0.01, 0.03, 0.05

[run:BO]
geometry = B1
h_max = 0.0126
velocity = 0.008
obstacle = {_shapes(_BO_SHAPES, [(0.37, round(0.035 + 0.005 * k, 3)) for k in range(10)]
                    + [(0.3, 0.04), (1.1, 0.04)])}

; mesh sizes and wall speeds as listed for the Couette obstacle runs
[run:CO]
geometry = C
h_max = 0.01, 0.03, 0.05
velocity = 0.014, 0.016, 0.018, 0.02, 0.022
obstacle = {_shapes(_CO_SHAPES, [(0.1, 0.4)])}
"""

PRESETS = {"desk": DESK_SUITE, "full": FULL_SUITE}


def desk_configs(strategies: tuple[str, ...] | None = None) -> list[ExperimentConfig]:
    configs, _ = parse_suite(DESK_SUITE)
    if strategies is not None:
        configs = [ExperimentConfig(c.family, c.geometry, c.h_max, c.velocity, c.obstacle, c.props,
                                    tuple(strategies), c.tol, c.max_iter, c.seed) for c in configs]
    return configs


# ---------------------------------------------------------------------------
# SVG output

_COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]
_W, _H, _PAD = 640, 400, 60


def _svg(body: list[str], title: str) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
            f'viewBox="0 0 {_W} {_H}">')
    return "\n".join([head, f'<rect width="{_W}" height="{_H}" fill="white"/>',
                      f'<text x="{_W / 2}" y="20" text-anchor="middle" font-size="14">{title}</text>',
                      *body, "</svg>"]) + "\n"


def _axes(xlabel: str, ylabel: str) -> list[str]:
    x0, y0, x1, y1 = _PAD, _H - _PAD, _W - _PAD / 2, _PAD / 2
    return [f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>',
            f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>',
            f'<text x="{(x0 + x1) / 2}" y="{_H - 15}" text-anchor="middle" font-size="12">{xlabel}</text>',
            f'<text x="15" y="{(y0 + y1) / 2}" text-anchor="middle" font-size="12" '
            f'transform="rotate(-90 15 {(y0 + y1) / 2})">{ylabel}</text>']


def _legend(names: list[str]) -> list[str]:
    out = []
    for k, n in enumerate(names):
        y = _PAD / 2 + 15 * k + 10
        out.append(f'<rect x="{_W - 150}" y="{y - 8}" width="10" height="10" fill="{_COLORS[k % len(_COLORS)]}"/>')
        out.append(f'<text x="{_W - 135}" y="{y + 1}" font-size="11">{n}</text>')
    return out


def convergence_svg(reports, title: str = "convergence") -> str:
    """Log-scale residual against iteration, one polyline per series.

    ``reports`` maps names to residual histories or to ``SolveReport``s; a
    plain list of reports is also accepted.
    """
    if isinstance(reports, list):
        reports = {f"{k}:{r.strategy}": r for k, r in enumerate(reports)}
    if not reports:
        raise ValueError("need at least one report")
    series = {name: list(r.residual_history if isinstance(r, SolveReport) else r)
              for name, r in reports.items()}
    for name, h in series.items():
        if not h:
            raise ValueError(f"{name}: empty residual history")
    vals = [v for h in series.values() for v in h if v > 0 and math.isfinite(v)]
    lo, hi = (math.log10(min(vals)), math.log10(max(vals))) if vals else (0.0, 1.0)
    if hi - lo < 1e-12:
        lo, hi = lo - 1, hi + 1
    n_max = max(max(len(h) - 1, 1) for h in series.values())
    x0, y0, x1, y1 = _PAD, _H - _PAD, _W - _PAD / 2, _PAD / 2

    def px(i):
        return x0 + (x1 - x0) * i / n_max

    def py(v):
        lv = math.log10(v) if v > 0 and math.isfinite(v) else lo
        lv = min(max(lv, lo), hi)
        return y0 - (y0 - y1) * (lv - lo) / (hi - lo)

    body = _axes("iteration", "log10 residual")
    for k, (name, h) in enumerate(series.items()):
        pts = " ".join(f"{px(i):.2f},{py(v):.2f}" for i, v in enumerate(h))
        color = _COLORS[k % len(_COLORS)]
        body.append(f'<polyline class="series" fill="none" stroke="{color}" points="{pts}"/>')
        if len(h) == 1:
            body.append(f'<circle cx="{px(0):.2f}" cy="{py(h[0]):.2f}" r="3" fill="{color}"/>')
    body += [f'<text x="{x0 - 5}" y="{y0}" text-anchor="end" font-size="10">{lo:.1f}</text>',
             f'<text x="{x0 - 5}" y="{y1 + 10}" text-anchor="end" font-size="10">{hi:.1f}</text>',
             f'<text x="{x1}" y="{y0 + 15}" text-anchor="end" font-size="10">{n_max}</text>']
    return _svg(body + _legend(list(series)), title)


def read_run_csv(path: str | Path) -> list[float]:
    """Residual history from a per-run CSV."""
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows or "residual" not in rows[0]:
        raise ValueError(f"{path}: not a run CSV")
    return [float(r["residual"]) for r in rows]


def scatter_svg(title: str, series: dict[str, list[int | None]], means: dict[str, float]) -> str:
    """Iterations per config (ordered by best count) with per-strategy mean lines."""
    names = list(series)
    n = max((len(v) for v in series.values()), default=0)
    best = [min((v[i] for v in series.values() if v[i] is not None), default=0) for i in range(n)]
    order = sorted(range(n), key=lambda i: (best[i], i))
    top = max([v for s in series.values() for v in s if v is not None] + [1])
    x0, y0, x1, y1 = _PAD, _H - _PAD, _W - _PAD / 2, _PAD / 2

    def px(rank):
        return x0 + (x1 - x0) * (rank + 0.5) / max(n, 1)

    def py(v):
        return y0 - (y0 - y1) * v / top

    body = _axes("configuration (ordered)", "iterations")
    for k, s in enumerate(names):
        color = _COLORS[k % len(_COLORS)]
        for rank, i in enumerate(order):
            v = series[s][i]
            if v is not None:
                body.append(f'<circle cx="{px(rank):.2f}" cy="{py(v):.2f}" r="3" fill="{color}"/>')
        if s in means:
            body.append(f'<line x1="{x0}" y1="{py(means[s]):.2f}" x2="{x1}" y2="{py(means[s]):.2f}" '
                        f'stroke="{color}" stroke-dasharray="4 3"/>')
    body.append(f'<text x="{x0 - 5}" y="{y1 + 10}" text-anchor="end" font-size="10">{top}</text>')
    return _svg(body + _legend(names), title)
