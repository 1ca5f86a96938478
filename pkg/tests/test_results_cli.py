import csv
import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

from siesta import cli, config, data, nn, orchestrator, results
from siesta.pq import PQCodec

from test_orchestrator import SMALL, small_cfg


@pytest.fixture(scope="module")
def run_result():
    cfg = small_cfg()
    ds = data.load_configured(cfg.data, cfg.plan.base_classes)
    return cfg, orchestrator.run_experiment(cfg, ds)


@pytest.fixture
def cfg_file(tmp_path):
    tree = {}
    for pair in SMALL:
        k, v = pair.split("=")
        config._set_path(tree, k, yaml.safe_load(v))
    p = tmp_path / "small.yaml"
    p.write_text(yaml.safe_dump(tree))
    return str(p)


def test_emit_is_idempotent_and_complete(tmp_path, run_result):
    cfg, res = run_result
    a = results.emit_results(res, cfg, tmp_path / "a")
    blobs = {k: open(p, "rb").read() for k, p in a.items()}
    results.emit_results(res, cfg, tmp_path / "a")
    assert {k: open(p, "rb").read() for k, p in a.items()} == blobs
    assert set(a) == {"metrics.json", "config.yaml", "seeds.json", "curves.csv", "update_log.csv",
                      "predictions.csv", "model.ckpt", "codec.pq", "buffer.jsonl"}


def test_outputs_reparse(tmp_path, run_result):
    cfg, res = run_result
    paths = results.emit_results(res, cfg, tmp_path)
    curves = results.read_curves(paths["curves.csv"])
    assert len(curves) == len(res.metrics.steps)
    m = json.loads(open(paths["metrics.json"]).read())
    assert m["mu"] == pytest.approx(np.mean([r["post_sleep_acc"] for r in curves]), abs=1e-12)
    assert m["U"] == curves[-1]["U"] == res.metrics.updates
    assert config.parse_config(paths["config.yaml"]) == cfg
    labels, preds = results.read_predictions(paths["predictions.csv"])
    np.testing.assert_array_equal(preds, res.final_predictions)
    assert m["final_alpha"] == pytest.approx(100.0 * np.mean(labels == preds))
    net, head = nn.load_checkpoint(paths["model.ckpt"])
    np.testing.assert_array_equal(head.weights, res.state.head.weights)
    np.testing.assert_array_equal(PQCodec.load(paths["codec.pq"]).codebooks, res.state.codec.codebooks)
    n_lines = len(open(paths["buffer.jsonl"]).read().splitlines())
    assert n_lines == len(res.state.buffer)
    with open(paths["update_log.csv"]) as fh:
        assert sum(1 for _ in csv.DictReader(fh)) == len(res.update_log)


def test_cli_fit_base_run_stats(tmp_path, cfg_file, capsys):
    base = tmp_path / "base"
    assert cli.main(["fit-base", "--config", cfg_file, "--out", str(base),
                     "--features-out", str(tmp_path / "f.sft")]) == 0
    assert data.load_feature_file(tmp_path / "f.sft").shape == (2, 2, 8)
    outs = []
    for mode in ("siesta", "awake_only", "remind"):
        out = tmp_path / mode
        assert cli.main(["run", "--config", cfg_file, "--base", str(base), "--set", f"plan.mode={mode}",
                         "--out", str(out)]) == 0
        outs.append(str(out / "predictions.csv"))
    capsys.readouterr()
    assert cli.main(["stats"] + outs[:2]) == 0
    two = json.loads(capsys.readouterr().out)
    assert two["test"] == "mcnemar" and 0.0 <= two["p_value"] <= 1.0
    assert cli.main(["stats"] + outs) == 0
    assert json.loads(capsys.readouterr().out)["test"] == "cochran_q"
    assert cli.main(["stats", outs[0], outs[0]]) == 0
    assert json.loads(capsys.readouterr().out)["p_value"] == 1.0


def test_cli_run_with_base_matches_library(tmp_path, cfg_file):
    base = tmp_path / "base"
    cli.main(["fit-base", "--config", cfg_file, "--out", str(base)])
    cli.main(["run", "--config", cfg_file, "--base", str(base), "--out", str(tmp_path / "r")])
    cfg = config.parse_config(cfg_file)
    ds = data.load_configured(cfg.data, cfg.plan.base_classes)
    res = orchestrator.run_experiment(cfg, ds, orchestrator.fit_base(cfg, ds))
    m = json.loads((tmp_path / "r" / "metrics.json").read_text())
    assert m["final_alpha"] == res.metrics.final_alpha and m["U"] == res.metrics.updates


def test_cli_sweep(tmp_path, cfg_file):
    out = tmp_path / "sw"
    assert cli.main(["sweep", "--config", cfg_file, "--grid", "sleep.updates=64,128", "--seeds", "0,1",
                     "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out / "summary.csv")))
    assert len(rows) == 4
    assert sorted(int(r["U"]) for r in rows) == [128, 128, 256, 256]


@pytest.mark.parametrize("argv,code", [
    (["run", "--set", "sleep.updates=-5"], 2),
    (["run", "--set", "nope=1"], 2),
    (["run", "--set", "data.source=idx", "--set", "data.images=/nonexistent/i",
      "--set", "data.labels=/nonexistent/l"], 6),
    (["run", "--base", "/nonexistent/base"], 4),
])
def test_cli_exit_codes(argv, code, capsys):
    assert cli.main(argv) == code
    assert capsys.readouterr().err.startswith("siesta: ")


def test_cli_stats_label_mismatch(tmp_path):
    results.write_predictions(tmp_path / "a.csv", [0, 1], [0, 1])
    results.write_predictions(tmp_path / "b.csv", [1, 1], [0, 1])
    assert cli.main(["stats", str(tmp_path / "a.csv"), str(tmp_path / "b.csv")]) == 4
    assert cli.main(["stats", str(tmp_path / "a.csv")]) == 2


def test_console_script_entry_point():
    out = subprocess.run([sys.executable, "-m", "siesta.cli", "run", "--set", "plan.mode=dream"],
                         capture_output=True, text=True)
    assert out.returncode == 2 and "siesta: config:" in out.stderr
