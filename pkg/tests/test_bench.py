import csv
import io
import re

import numpy as np
import pytest

from ptcnet.bench import (DESK_SUITE, FULL_SUITE, ExperimentConfig, convergence_svg, desk_configs, parse_obstacles,
                          parse_suite, read_run_csv, run_suite, scatter_svg)
from ptcnet.mesh import GEOMETRIES, Circle, ConfigurationError, Ellipse, _check_obstacle

SUITE = """\
[suite]
strategies = CFL_iter, AN
max_iter = 30

[run:B1]
geometry = B1
h_max = 0.0256
velocity = 0.001, 0.002
"""


@pytest.fixture(scope="module")
def suite_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("bench")
    configs, _ = parse_suite(SUITE)
    return run_suite(configs, out), out


def test_counts_and_summary(suite_run):
    suite, out = suite_run
    assert len(suite.runs) == 4 and all(r.report is not None for r in suite.runs)
    rows = list(csv.DictReader(io.StringIO(suite.summary_csv())))
    assert len(rows) == 2
    for s in suite.strategies:
        conv = sum(int(r[f"{s}_converged"]) for r in rows)
        assert conv + sum(1 - int(r[f"{s}_converged"]) for r in rows) == len(rows)
    assert {p.name for p in out.iterdir()} >= {"runs", "summary.csv", "means.csv", "errors.txt",
                                               "scatter_B1.svg"}
    assert (out / "errors.txt").read_text() == ""


def test_means_rederive_from_run_csvs(suite_run):
    suite, out = suite_run
    per = {}
    for cfg in suite.configs:
        for s in suite.strategies:
            hist = read_run_csv(out / "runs" / f"{cfg.config_id}__{s}.csv")
            converged = hist[-1] <= cfg.tol * hist[0]
            per.setdefault(s, []).append(len(hist) - 1 if converged else cfg.max_iter)
    rows = list(csv.DictReader((out / "means.csv").open()))
    for row in rows:
        assert float(row["mean_iterations"]) == pytest.approx(np.mean(per[row["strategy"]]))


def test_rerun_is_byte_identical(suite_run):
    suite, _ = suite_run
    again = run_suite(suite.configs)
    assert again.summary_csv() == suite.summary_csv()
    assert again.means_csv() == suite.means_csv()


def test_all_diverged_config_has_no_winner():
    cfg = ExperimentConfig("B1", "B1", 0.0256, 0.007, strategies=("CFL_iter", "NC"), max_iter=2)
    suite = run_suite([cfg])
    row = next(csv.DictReader(io.StringIO(suite.summary_csv())))
    assert row["winner"] == ""
    assert row["CFL_iter_iterations"] == "2" and row["NC_iterations"] == "2"


def test_convergence_svg():
    svg = convergence_svg({"a": [1.0, 0.1, 0.01], "b": [1.0], "c": [2.0, 1.0]})
    assert svg.startswith("<svg") and svg.rstrip().endswith("</svg>")
    assert len(re.findall(r'class="series"', svg)) == 3
    assert "<circle" in svg
    with pytest.raises(ValueError):
        convergence_svg({})
    with pytest.raises(ValueError):
        convergence_svg({"a": []})


def test_scatter_svg_marks_every_run():
    svg = scatter_svg("B1", {"CFL_iter": [10, 25, None], "AN": [6, 10, 16]}, {"CFL_iter": 17.5, "AN": 10.7})
    assert svg.count("<circle") >= 5


def test_suite_parsing():
    configs, opts = parse_suite(DESK_SUITE)
    assert opts["name"] == "desk"
    families = [c.family for c in configs]
    assert families.count("B1") == 9 and families.count("C") == 4 and families.count("BO") == 2
    assert len(desk_configs(("CFL_iter",))[0].strategies) == 1
    obs = parse_obstacles("circle 0.03 @ 0.3 0.04; ellipse 0.04 0.02 @ 1 0.05")
    assert isinstance(obs[0].shape, Circle) and isinstance(obs[1].shape, Ellipse)
    for bad in ("[run:x]\ngeometry = B1\n", "[suite]\nstrategies = XX\n[run:x]\nh_max=1\nvelocity=1\n",
                "[suite]\nstrategies = CFL_iter\n"):
        with pytest.raises(ConfigurationError):
            parse_suite(bad)
    with pytest.raises(ConfigurationError):
        parse_obstacles("square 1 @ 0 0")
    with pytest.raises(ConfigurationError):
        run_suite(desk_configs(("NN",)))


def test_full_preset_parses_with_valid_obstacles():
    configs, opts = parse_suite(FULL_SUITE)
    counts = {}
    for c in configs:
        counts[c.family] = counts.get(c.family, 0) + 1
    assert counts == {"B1": 24, "B1S": 24, "B2": 16, "B2S": 16, "C": 30, "CS": 15, "BO": 36, "CO": 45}
    assert len({c.config_id for c in configs}) == len(configs)
    for c in configs:
        if c.obstacle is not None:
            _check_obstacle(GEOMETRIES[c.geometry].with_obstacle(c.obstacle))
