import hashlib
import json
import os

import numpy as np
import pytest

from rpf import cli
from rpf.network import case9, network_to_json


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    monkeypatch.delenv("RPF_THREADS", raising=False)
    monkeypatch.delenv("RPF_OUT_DIR", raising=False)


def run(*argv) -> int:
    return cli.main([str(a) for a in argv])


def sha(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    # one small gen+train pass shared by the read-only tests below
    ws = tmp_path_factory.mktemp("ws")
    rc = cli.main(["gen", "--out-dir", str(ws), "--seed", "3",
                   "--n-train", "12", "--n-test", "6",
                   "--n-train-infeasible", "6"])
    assert rc == 0
    rc = cli.main(["train", "--out-dir", str(ws), "--features", "linear",
                   "--dataset", str(ws / "train.csv")])
    assert rc == 0
    return ws


# ---------------------------------------------------------------------------
# parsing and exit codes


def test_no_subcommand_is_usage_error(capsys):
    assert run() == 1
    assert "usage" in capsys.readouterr().out.lower()


def test_help_lists_every_subcommand(capsys):
    with pytest.raises(SystemExit) as e:
        run("--help")
    assert e.value.code == 0
    out = capsys.readouterr().out
    for name in ("gen", "train", "eval", "pf", "qss", "opf", "export"):
        assert name in out


def test_unknown_flag_exits_1(capsys):
    assert run("gen", "--bogus", "1") == 1


def test_bad_env_value_exits_1(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("RPF_THREADS", "many")
    assert run("gen", "--out-dir", tmp_path, "--n-train", "2",
               "--n-test", "2") == 1
    assert "RPF_THREADS" in capsys.readouterr().err


def test_missing_network_file_exits_1(tmp_path, capsys):
    rc = run("gen", "--out-dir", tmp_path, "--network", tmp_path / "no.m")
    assert rc == 1
    assert "file not found" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# option precedence


def test_flags_beat_config_beat_defaults(tmp_path, capsys):
    cfg = tmp_path / "opts.json"
    cfg.write_text(json.dumps({"n-train": 3, "n_test": 2}))
    rc = run("gen", "--config", cfg, "--out-dir", tmp_path, "--n-test", "4")
    assert rc == 0
    report = json.loads((tmp_path / "gen_report.json").read_text())
    assert report["options"]["n_train"] == 3   # config reaches through
    assert report["options"]["n_test"] == 4    # explicit flag wins
    assert report["files"]["train.csv"]["n"] == 3


def test_env_out_dir_used_when_flag_absent(tmp_path, monkeypatch):
    target = tmp_path / "from_env"
    monkeypatch.setenv("RPF_OUT_DIR", str(target))
    monkeypatch.chdir(tmp_path)
    assert run("gen", "--n-train", "2", "--n-test", "2") == 0
    assert (target / "train.csv").exists()


def test_unknown_config_key_exits_1(tmp_path, capsys):
    cfg = tmp_path / "opts.json"
    cfg.write_text(json.dumps({"n_trian": 3}))
    assert run("gen", "--config", cfg, "--out-dir", tmp_path) == 1
    assert "n_trian" in capsys.readouterr().err


def test_config_must_be_json_object(tmp_path):
    cfg = tmp_path / "opts.json"
    cfg.write_text("[1, 2]")
    assert run("gen", "--config", cfg, "--out-dir", tmp_path) == 1


# ---------------------------------------------------------------------------
# gen


def test_gen_writes_datasets_and_report(workspace):
    for name in ("train.csv", "test_feasible.csv", "test_infeasible.csv",
                 "train_infeasible.csv", "gen_report.json"):
        assert (workspace / name).exists()
    report = json.loads((workspace / "gen_report.json").read_text())
    assert report["tool"] == "rpf" and report["command"] == "gen"
    assert len(report["options_hash"]) == 16
    assert report["files"]["train.csv"]["n"] == 12
    assert report["files"]["test_infeasible.csv"]["mode"] == "infeasible"
    assert "network_fingerprint" in report["inputs"]
    blob = (workspace / "gen_report.json").read_text()
    assert "/" not in report["inputs"]["network_fingerprint"]
    assert str(workspace) not in blob  # no paths leak into artifacts


def test_gen_bytes_identical_across_dirs_and_threads(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("gen", "--out-dir", a, "--seed", "5", "--n-train", "6",
               "--n-test", "4") == 0
    assert run("gen", "--out-dir", b, "--seed", "5", "--n-train", "6",
               "--n-test", "4", "--threads", "3") == 0
    for name in ("train.csv", "test_feasible.csv", "test_infeasible.csv",
                 "gen_report.json"):
        assert sha(a / name) == sha(b / name), name


def test_gen_seed_changes_data(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d, seed in ((a, 1), (b, 2)):
        assert run("gen", "--out-dir", d, "--seed", seed,
                   "--n-train", "4", "--n-test", "2") == 0
    assert sha(a / "train.csv") != sha(b / "train.csv")


# ---------------------------------------------------------------------------
# train


def test_train_writes_model_and_curve(workspace):
    assert (workspace / "model.json").exists()
    assert (workspace / "train_curve.csv").exists()
    blob = json.loads((workspace / "model.json").read_text())
    assert blob["format"] == "rpf-model-v1"
    lines = (workspace / "train_curve.csv").read_text().strip().splitlines()
    assert lines[0].startswith("# {")
    assert lines[1].split(",")[0] == "epoch"


def test_train_mlp_needs_two_widths(workspace, tmp_path):
    rc = run("train", "--out-dir", tmp_path, "--features", "mlp",
             "--widths", "8", "--dataset", workspace / "train.csv")
    assert rc == 1


def test_train_rejects_tampered_dataset(workspace, tmp_path, capsys):
    lines = (workspace / "train.csv").read_text().splitlines()
    cells = lines[2].split(",")
    cells[-1] = repr(float(cells[-1]) + 1.0)  # rho no longer matches
    lines[2] = ",".join(cells)
    bad = tmp_path / "bad.csv"
    bad.write_text("\n".join(lines) + "\n")
    rc = run("train", "--out-dir", tmp_path, "--features", "linear",
             "--dataset", bad)
    assert rc == 2


# ---------------------------------------------------------------------------
# eval


def test_eval_outputs_tables(workspace, tmp_path):
    rc = run("eval", "--out-dir", tmp_path, "--model", workspace / "model.json",
             "--test", workspace / "test_feasible.csv",
             "--test-infeasible", workspace / "test_infeasible.csv")
    assert rc == 0
    for name in ("errors_voltage.csv", "errors_residuals.csv", "summary.csv",
                 "infeasible_comparison.csv"):
        assert (tmp_path / name).exists(), name
    lines = (tmp_path / "summary.csv").read_text().strip().splitlines()
    assert lines[1] == "model,metric,value"
    assert any(",median_abs_v," in ln for ln in lines)


def test_eval_two_models_adds_ratio(workspace, tmp_path):
    rc = run("eval", "--out-dir", tmp_path, "--model", workspace / "model.json",
             "--model-b", workspace / "model.json",
             "--test", workspace / "test_feasible.csv")
    assert rc == 0
    text = (tmp_path / "summary.csv").read_text()
    assert "a_over_b" in text


def test_eval_fingerprint_mismatch_exits_2(workspace, tmp_path, capsys):
    blob = network_to_json(case9())
    blob["branches"][0]["x"] *= 1.5
    other = tmp_path / "tweaked.json"
    other.write_text(json.dumps(blob))
    rc = run("eval", "--out-dir", tmp_path, "--network", other,
             "--model", workspace / "model.json",
             "--test", workspace / "test_feasible.csv")
    assert rc == 2
    assert "different network" in capsys.readouterr().err.lower()


def test_eval_missing_dataset_exits_1(workspace, tmp_path):
    rc = run("eval", "--out-dir", tmp_path, "--model", workspace / "model.json",
             "--test", tmp_path / "nope.csv")
    assert rc == 1


# ---------------------------------------------------------------------------
# pf / qss / opf


def test_pf_oracle_small_run(tmp_path):
    rc = run("pf", "--oracle", "--n", "3", "--seed", "2", "--out-dir", tmp_path)
    assert rc == 0
    lines = (tmp_path / "pf_gen1.csv").read_text().strip().splitlines()
    assert lines[1].split(",")[:3] == ["oc", "s_hat", "s_star"]
    assert len(lines) == 5
    errs = [float(ln.split(",")[3]) for ln in lines[2:]]
    assert max(errs) <= 1e-6  # oracle restores the joint solution


def test_pf_distributed_slack_filename(tmp_path):
    rc = run("pf", "--oracle", "--n", "2", "--slack", "distributed",
             "--out-dir", tmp_path)
    assert rc == 0
    assert (tmp_path / "pf_distributed.csv").exists()


def test_pf_bad_slack_exits_1(tmp_path):
    assert run("pf", "--oracle", "--n", "2", "--slack", "gen9",
               "--out-dir", tmp_path) == 1


def test_qss_oracle_small_run(tmp_path):
    rc = run("qss", "--oracle", "--n", "3", "--seed", "4",
             "--out-dir", tmp_path)
    assert rc == 0
    lines = (tmp_path / "qss_results.csv").read_text().strip().splitlines()
    head = lines[1].split(",")
    assert "omega" in head and "sign_ok" in head
    k = head.index("sign_ok")
    assert all(ln.split(",")[k] == "1" for ln in lines[2:])


def test_opf_oracle_with_grid(tmp_path):
    rc = run("opf", "--oracle", "--decisions", "P2,P3", "--grid", "4",
             "--seed", "6", "--out-dir", tmp_path)
    assert rc == 0
    sol = (tmp_path / "opf_solution.csv").read_text()
    assert "objective" in sol and "cost" in sol
    lines = (tmp_path / "opf_grid.csv").read_text().strip().splitlines()
    assert len(lines) == 2 + 16
    head = lines[1].split(",")
    assert "u1" in head and "u2" in head and "is_argmin" in head


def test_opf_bad_decision_exits_1(tmp_path):
    assert run("opf", "--oracle", "--decisions", "P9", "--out-dir", tmp_path) == 1


# ---------------------------------------------------------------------------
# export


def test_export_box_svg(workspace, tmp_path):
    rc = run("eval", "--out-dir", tmp_path, "--model", workspace / "model.json",
             "--test", workspace / "test_feasible.csv")
    assert rc == 0
    rc = run("export", "--kind", "box", "--input",
             tmp_path / "errors_residuals.csv", "--group", "group",
             "--value", "value", "--out-dir", tmp_path)
    assert rc == 0
    svg = (tmp_path / "errors_residuals.svg").read_text()
    assert svg.lstrip().startswith("<svg") or "<svg" in svg[:200]


def test_export_missing_column_exits_1(workspace, tmp_path):
    run("eval", "--out-dir", tmp_path, "--model", workspace / "model.json",
        "--test", workspace / "test_feasible.csv")
    rc = run("export", "--kind", "scatter", "--input",
             tmp_path / "errors_voltage.csv", "--x", "oc", "--y", "wrong",
             "--out-dir", tmp_path)
    assert rc == 1


def test_export_deterministic_bytes(workspace, tmp_path):
    run("eval", "--out-dir", tmp_path, "--model", workspace / "model.json",
        "--test", workspace / "test_feasible.csv")
    for tag in ("one.svg", "two.svg"):
        rc = run("export", "--kind", "box", "--input",
                 tmp_path / "errors_voltage.csv", "--group", "variable",
                 "--value", "abs_error", "--svg-out", tag,
                 "--out-dir", tmp_path)
        assert rc == 0
    assert sha(tmp_path / "one.svg") == sha(tmp_path / "two.svg")
