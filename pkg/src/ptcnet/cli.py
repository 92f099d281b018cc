"""Command-line entry point: ``ptcnet <subcommand> ...``.

Exit status is 0 when every requested run executed; non-converged runs are
results, not errors.  Worker processes default to ``$PTCNET_WORKERS``.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from ._parallel import WORKERS_ENV, default_workers
from .mesh import GEOMETRIES, ConfigurationError, MeshFormatError


def _csv_ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.replace(",", " ").split())


def _experiment(args, strategies):
    from .bench import ExperimentConfig, parse_obstacles
    from .fem import FluidProps

    obstacles = parse_obstacles(args.obstacle or "")
    if len(obstacles) > 1:
        raise ConfigurationError("a single run takes at most one obstacle")
    return ExperimentConfig(args.geometry, args.geometry, args.h_max, args.velocity,
                            obstacles[0] if obstacles else None,
                            FluidProps(args.rho, args.mu), tuple(strategies), args.tol,
                            args.max_iter, 0)


def cmd_mesh(args) -> int:
    from .mesh import euler_characteristic, write_mesh

    cfg = _experiment(args, ("CFL_iter",))
    mesh = cfg.problem().mesh
    write_mesh(mesh, args.output)
    print(f"{mesh.n_elements} elements, {len(mesh.vertices)} vertices, "
          f"Euler characteristic {euler_characteristic(mesh)} -> {args.output}")
    return 0


def cmd_solve(args) -> int:
    from .bench import convergence_svg, make_strategy
    from .nn import load_model
    from .ptc import solve_nonlinear

    model = load_model(args.model) if args.model else None
    cfg = _experiment(args, (args.strategy,))
    problem = cfg.problem()
    rep = solve_nonlinear(problem, make_strategy(args.strategy, model), args.max_iter, args.tol)
    status = "converged" if rep.converged else f"not converged ({rep.failure})"
    print(f"{cfg.config_id} {rep.strategy}: {status} after {rep.iterations} iterations, "
          f"{problem.mesh.n_elements} elements, {rep.wall_time:.2f} s")
    if args.output:
        Path(args.output).write_text(rep.to_csv())
    if args.plot:
        Path(args.plot).write_text(convergence_svg({rep.strategy: rep}, cfg.config_id))
    return 0


def cmd_gen_data(args) -> int:
    from .features import write_dataset
    from .oracle import desk_data_configs, generate_dataset, parse_data_configs

    if args.config:
        configs = parse_data_configs(Path(args.config).read_text())
    else:
        configs = desk_data_configs()
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    data = generate_dataset(configs, seed=args.seed, maxfun=args.maxfun, workers=args.workers)
    for name in ("train", "test", "val"):
        write_dataset(getattr(data, name), out / f"{name}.csv")
    (out / "manifest.txt").write_text("".join(line + "\n" for line in data.manifest))
    print(f"{len(data.train)} train, {len(data.test)} test, {len(data.val)} val samples -> {out}")
    for s in data.skipped:
        print(f"skipped {s}", file=sys.stderr)
    return 1 if data.skipped else 0


def _load_split(data_dir: Path, name: str):
    from .features import read_dataset

    return read_dataset(data_dir / f"{name}.csv")


def cmd_train(args) -> int:
    from .nn import DEFAULT_DIMS, TrainConfig, rmse, save_model, train

    data = Path(args.data)
    tr, va, te = (_load_split(data, n) for n in ("train", "val", "test"))
    dims = (DEFAULT_DIMS[0],) + _csv_ints(args.hidden) + (1,)
    cfg = TrainConfig(lr=args.lr, batch_size=args.batch_size, max_epochs=args.epochs,
                      patience=args.patience, seed=args.seed, dims=dims,
                      log_target=not args.raw_target)
    model, hist = train(tr.X, tr.y, va.X, va.y, cfg)
    save_model(model, args.output)
    if args.history:
        Path(args.history).write_text(hist.to_csv())
    test = rmse(model, te.X, te.y) if len(te) else float("nan")
    print(f"best epoch {hist.best_epoch}/{hist.epoch[-1]}, val RMSE {model.meta['val_rmse']}, "
          f"test RMSE {test!r} -> {args.output}")
    return 0


def cmd_grid_search(args) -> int:
    from .nn import TrainConfig, grid_csv, grid_search

    data = Path(args.data)
    tr = _load_split(data, "train")
    cfg = TrainConfig(lr=args.lr, batch_size=args.batch_size, max_epochs=args.epochs,
                      patience=args.patience, seed=args.seed)
    rows = grid_search(tr.X, tr.y, _csv_ints(args.layers), _csv_ints(args.widths), args.folds, cfg)
    text = grid_csv(rows)
    if args.output:
        Path(args.output).write_text(text)
    print(text, end="")
    return 0


def cmd_bench(args) -> int:
    from .bench import PRESETS, parse_suite, run_suite
    from .nn import load_model

    text = Path(args.config).read_text() if args.config else PRESETS[args.preset]
    configs, opts = parse_suite(text)
    model_path = args.model
    if model_path is None and opts.get("model"):
        model_path = str(Path(args.config).parent / opts["model"])  # relative to the suite file
    model = load_model(model_path) if model_path else None
    suite = run_suite(configs, args.output, model=model, workers=args.workers)
    print(suite.means_csv(), end="")
    failed = [r for r in suite.runs if r.error]
    for r in failed:
        print(f"error {r.config.config_id} {r.strategy}: {r.error}", file=sys.stderr)
    return 1 if failed else 0


def cmd_plot(args) -> int:
    from .bench import convergence_svg, read_run_csv

    series = {Path(p).stem: read_run_csv(p) for p in args.runs}
    Path(args.output).write_text(convergence_svg(series, args.title))
    print(f"{len(series)} series -> {args.output}")
    return 0


def _add_run_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--geometry", default="B1", choices=sorted(GEOMETRIES))
    p.add_argument("--h-max", type=float, default=0.0256)
    p.add_argument("--velocity", type=float, default=0.001,
                   help="inflow velocity (back-steps) or inner wall speed (annuli), m/s")
    p.add_argument("--obstacle", help="e.g. 'circle 0.03 @ 0.3 0.04'")
    p.add_argument("--rho", type=float, default=1000.0)
    p.add_argument("--mu", type=float, default=1e-3)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--max-iter", type=int, default=100)


def _add_train_args(p: argparse.ArgumentParser, epochs: int) -> None:
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=256)
    p.add_argument("--epochs", type=int, default=epochs)
    p.add_argument("--patience", type=int, default=150)
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ptcnet", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mesh", help="generate a mesh and write it as text")
    _add_run_args(p)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_mesh)

    p = sub.add_parser("solve", help="run one nonlinear solve")
    _add_run_args(p)
    p.add_argument("--strategy", default="CFL_iter", choices=["CFL_iter", "CFL_e", "NC", "AN", "NN"])
    p.add_argument("--model", help="model file for the NN strategy")
    p.add_argument("-o", "--output", help="per-iteration CSV")
    p.add_argument("--plot", help="convergence SVG")
    p.set_defaults(func=cmd_solve)

    workers_help = f"worker processes (default ${WORKERS_ENV} or 1)"
    p = sub.add_parser("gen-data", help="build optimal-step training data")
    p.add_argument("--config", help="file with [data:NAME] sections; default is the desk preset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--maxfun", type=int, default=200)
    p.add_argument("--workers", type=int, default=None, help=workers_help)
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the step-size network")
    p.add_argument("--data", required=True, help="directory written by gen-data")
    p.add_argument("--hidden", default="16,16", help="hidden layer widths")
    p.add_argument("--raw-target", action="store_true", help="regress dt instead of log dt")
    p.add_argument("--history", help="per-epoch CSV")
    _add_train_args(p, 5000)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("grid-search", help="k-fold architecture search")
    p.add_argument("--data", required=True)
    p.add_argument("--layers", default="2,3,4,5")
    p.add_argument("--widths", default="16,32,64,128,256")
    p.add_argument("--folds", type=int, default=6)
    _add_train_args(p, 500)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_grid_search)

    p = sub.add_parser("bench", help="run a benchmark suite")
    p.add_argument("--config", help="suite file; overrides --preset")
    p.add_argument("--preset", default="desk", choices=["desk", "full"])
    p.add_argument("--model", help="model file for the NN strategy")
    p.add_argument("--workers", type=int, default=None, help=workers_help)
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("plot", help="convergence SVG from per-run CSVs")
    p.add_argument("runs", nargs="+")
    p.add_argument("--title", default="convergence")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_plot)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "workers", None) is None and hasattr(args, "workers"):
        args.workers = default_workers()
    try:
        return args.func(args)
    except (ConfigurationError, MeshFormatError, ValueError, OSError) as exc:
        print(f"ptcnet {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
