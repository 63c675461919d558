import os

import numpy as np
import pytest

from calsbi.cli import main
from calsbi.problems import load_dataset


def run(argv):
    return main(argv)


@pytest.fixture(scope="module")
def data_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "d.sbid"
    code = run(["simulate", "--problem", "gaussian-linear", "--n", "256",
                "--seed", "7", "--out", str(path)])
    assert code == 0
    return str(path)


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory, data_file):
    out = tmp_path_factory.mktemp("runs") / "run1"
    code = run(["train", "--method", "npe", "--reg", "conservative",
                "--data", data_file, "--out-dir", str(out),
                "--epochs", "2", "--batch", "64", "--L", "4"])
    assert code == 0
    return str(out)


def test_simulate_writes_expected_rows(tmp_path):
    out = tmp_path / "d.sbid"
    assert run(["simulate", "--problem", "gaussian-linear", "--n", "1024",
                "--seed", "7", "--out", str(out)]) == 0
    ds = load_dataset(out)
    assert ds.count == 1024
    assert os.path.exists(str(out) + ".manifest")


def test_simulate_repeat_is_byte_identical(tmp_path):
    a, b = tmp_path / "a.sbid", tmp_path / "b.sbid"
    run(["simulate", "--n", "64", "--seed", "3", "--out", str(a)])
    run(["simulate", "--n", "64", "--seed", "3", "--out", str(b)])
    assert a.read_bytes() == b.read_bytes()


def test_simulate_rejects_zero_rows(tmp_path, capsys):
    with pytest.raises(SystemExit) as err:
        run(["simulate", "--n", "0", "--out", str(tmp_path / "x.sbid")])
    assert err.value.code == 2


def test_unknown_problem_exits_with_usage_error(tmp_path, capsys):
    code = run(["simulate", "--problem", "weinberg", "--n", "4",
                "--out", str(tmp_path / "x.sbid")])
    assert code == 2
    assert "unknown problem" in capsys.readouterr().err


def test_train_writes_checkpoint_report_manifest(run_dir):
    assert os.path.exists(os.path.join(run_dir, "model.calc"))
    assert os.path.exists(os.path.join(run_dir, "model_best.calc"))
    assert os.path.exists(os.path.join(run_dir, "train.csv"))
    manifest = open(os.path.join(run_dir, "manifest.txt")).read()
    assert "command=train" in manifest
    assert "lambda=5.0" in manifest


def test_train_warns_when_lambda_ignored(data_file, tmp_path, capsys):
    code = run(["train", "--method", "npe", "--reg", "none", "--lambda", "5",
                "--data", data_file, "--out-dir", str(tmp_path / "r"),
                "--epochs", "1", "--batch", "64"])
    assert code == 0
    assert "ignored" in capsys.readouterr().err


def test_train_direct_form_with_interior_levels(data_file, tmp_path):
    code = run(["train", "--method", "npe", "--reg", "calibration",
                "--loss-form", "direct", "--levels", "19",
                "--data", data_file, "--out-dir", str(tmp_path / "r"),
                "--epochs", "1", "--batch", "64", "--L", "4"])
    assert code == 0


def test_missing_dataset_is_usage_error(tmp_path, capsys):
    code = run(["train", "--method", "npe", "--data", str(tmp_path / "no.sbid"),
                "--out-dir", str(tmp_path / "r"), "--epochs", "1"])
    assert code == 2


def test_eval_oracle_curve_sits_on_diagonal(data_file, tmp_path, capsys):
    out = tmp_path / "eval"
    code = run(["eval", "--oracle", "--data", data_file, "--ecp", "rank",
                "--L", "256", "--seed", "1", "--out-dir", str(out)])
    assert code == 0
    lines = (out / "coverage.csv").read_text().strip().splitlines()
    assert lines[0] == "level,ecp,method,n,L"
    rows = [line.split(",") for line in lines[1:]]
    gaps = [abs(float(lev) - float(e)) for lev, e, *_ in rows]
    assert max(gaps) <= 0.06  # 256 test pairs, broad tolerance
    assert (out / "metrics.csv").exists()
    assert (out / "sbc.csv").exists()
    assert (out / "coverage.svg").exists()
    assert (out / "manifest.txt").exists()


def test_eval_both_estimators_share_one_csv(data_file, tmp_path):
    out = tmp_path / "eval"
    code = run(["eval", "--oracle", "--data", data_file, "--ecp", "both",
                "--L", "128", "--grid-res", "64", "--levels", "5",
                "--out-dir", str(out)])
    assert code == 0
    text = (out / "coverage.csv").read_text()
    assert "rank-based" in text and "grid-hpdr" in text


def test_eval_trained_checkpoint(run_dir, data_file, tmp_path):
    out = tmp_path / "eval"
    code = run(["eval", "--checkpoint", os.path.join(run_dir, "model.calc"),
                "--data", data_file, "--L", "64", "--levels", "5",
                "--out-dir", str(out)])
    assert code == 0
    metrics = (out / "metrics.csv").read_text()
    assert "expected_log_posterior" in metrics


def test_eval_missing_checkpoint_exits_two(data_file, tmp_path):
    code = run(["eval", "--checkpoint", str(tmp_path / "no.calc"),
                "--data", data_file, "--out-dir", str(tmp_path / "e")])
    assert code == 2
    code = run(["eval", "--data", data_file, "--out-dir", str(tmp_path / "e")])
    assert code == 2


def test_eval_oracle_unsupported_problem(tmp_path, capsys):
    data = tmp_path / "nl.sbid"
    run(["simulate", "--problem", "nonlinear-2d", "--n", "32", "--out", str(data)])
    code = run(["eval", "--oracle", "--data", str(data),
                "--out-dir", str(tmp_path / "e")])
    assert code == 2
    assert "no analytic oracle" in capsys.readouterr().err


def test_demo_detects_overconfidence(tmp_path, capsys):
    out = tmp_path / "demo"
    code = run(["demo-mixture", "--out-dir", str(out)])
    assert code == 0
    printed = capsys.readouterr().out
    ecp = float(printed.split(":")[1].split("(")[0])
    assert ecp < 0.9
    assert (out / "demo.svg").exists()
    seg_lines = (out / "segments.csv").read_text().strip().splitlines()
    assert len(seg_lines) >= 3  # header + at least two disjoint segments


def test_demo_self_test_recovers_level(tmp_path, capsys):
    code = run(["demo-mixture", "--self", "--out-dir", str(tmp_path / "demo")])
    assert code == 0
    ecp = float(capsys.readouterr().out.split(":")[1].split("(")[0])
    assert ecp == pytest.approx(0.9, abs=0.03)


def test_demo_regions_shrink_with_level(tmp_path):
    out_hi = tmp_path / "hi"
    out_lo = tmp_path / "lo"
    run(["demo-mixture", "--out-dir", str(out_hi)])
    run(["demo-mixture", "--level", "0.5", "--out-dir", str(out_lo)])

    def total_length(path):
        rows = path.read_text().strip().splitlines()[1:]
        return sum(float(r.split(",")[1]) - float(r.split(",")[0]) for r in rows)

    assert total_length(out_lo / "segments.csv") < total_length(out_hi / "segments.csv")


def test_config_file_provides_defaults_flags_win(data_file, tmp_path):
    cfg = tmp_path / "train.cfg"
    cfg.write_text("epochs=1\nbatch=64\nmethod=npe\nreg=none\n")
    out = tmp_path / "r"
    code = run(["--config", str(cfg), "train", "--data", data_file,
                "--out-dir", str(out), "--reg", "conservative", "--L", "4"])
    assert code == 0
    manifest = (out / "manifest.txt").read_text()
    assert "reg=conservative" in manifest   # flag wins over config
    assert "epochs=1" in manifest           # config supplies the default
