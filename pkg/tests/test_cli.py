import csv

import pytest

from ptcnet.cli import main


def test_mesh_solve_plot(tmp_path, capsys):
    assert main(["mesh", "--geometry", "C", "--h-max", "0.06", "-o", str(tmp_path / "m.txt")]) == 0
    assert "Euler characteristic 0" in capsys.readouterr().out
    run = tmp_path / "run.csv"
    assert main(["solve", "--h-max", "0.0256", "--velocity", "0.001", "-o", str(run),
                 "--plot", str(tmp_path / "run.svg")]) == 0
    assert "converged after" in capsys.readouterr().out
    nc = tmp_path / "nc.csv"
    assert main(["solve", "--velocity", "0.007", "--strategy", "NC", "-o", str(nc)]) == 0
    assert "not converged" in capsys.readouterr().out
    assert main(["plot", str(run), str(nc), "-o", str(tmp_path / "p.svg")]) == 0
    assert (tmp_path / "p.svg").read_text().count('class="series"') == 2


def test_data_train_search_bench(tmp_path, capsys):
    cfg = tmp_path / "data.ini"
    cfg.write_text("[data:a]\ngeometry = B1\nh_max = 0.0256\nvelocity = 0.001, 0.002\niterations = 1\n")
    data = tmp_path / "data"
    assert main(["gen-data", "--config", str(cfg), "--maxfun", "3", "-o", str(data)]) == 0
    assert {p.name for p in data.iterdir()} == {"train.csv", "test.csv", "val.csv", "manifest.txt"}
    model = tmp_path / "model.txt"
    assert main(["train", "--data", str(data), "--epochs", "2", "--history", str(tmp_path / "h.csv"),
                 "-o", str(model)]) == 0
    assert model.read_text().startswith("ptcnet-mlp 1")
    assert main(["grid-search", "--data", str(data), "--layers", "2", "--widths", "8", "--folds", "2",
                 "--epochs", "1", "-o", str(tmp_path / "grid.csv")]) == 0
    suite = tmp_path / "suite.ini"
    suite.write_text("[suite]\nstrategies = CFL_iter, NN\nmax_iter = 5\nmodel = model.txt\n"
                     "[run:B1]\ngeometry = B1\nh_max = 0.0256\nvelocity = 0.001\n")
    out = tmp_path / "bench"
    assert main(["bench", "--config", str(suite), "-o", str(out)]) == 0
    rows = list(csv.DictReader((out / "summary.csv").open()))
    assert len(rows) == 1 and "NN_iterations" in rows[0]
    capsys.readouterr()


def test_errors_give_nonzero_exit(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[suite]\nstrategies = nope\n")
    assert main(["bench", "--config", str(bad), "-o", str(tmp_path / "o")]) == 2
    assert main(["solve", "--h-max", "1.0", "-o", str(tmp_path / "x.csv")]) == 2
    assert "ptcnet solve" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        main(["frobnicate"])
