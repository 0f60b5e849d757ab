import json
import os
import subprocess
import sys
from pathlib import Path

import pytest

from dmslab.cli import main


def run_cli(args):
    return main(args)


def read_jsonl(path):
    return [json.loads(line) for line in Path(path).read_text().splitlines()]


def test_costmodel_llama_values(capsys):
    assert run_cli(["costmodel", "--profile", "llama-3.1-8b", "--batch", "1", "--length", "0"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["flops"] == 15_009_316_864
    assert 7.4e9 <= out["bytes_read"] / 2 <= 7.6e9
    assert out["memory_bound"] is True
    assert out["latency_seconds"] == pytest.approx(4.48e-3, rel=5e-3)


def test_costmodel_bl_coefficient(capsys):
    run_cli(["costmodel", "--profile", "llama-3.1-8b", "--batch", "1", "--length", "4096"])
    at_l = json.loads(capsys.readouterr().out)["flops"]
    run_cli(["costmodel", "--profile", "llama-3.1-8b", "--batch", "1", "--length", "0"])
    at_0 = json.loads(capsys.readouterr().out)["flops"]
    assert (at_l - at_0) / 4096 == 524288


def test_costmodel_kv_fraction_monotone(capsys):
    run_cli(["costmodel", "--profile", "qwen-r1-7b", "--batch", "256", "--length", "32768"])
    big = json.loads(capsys.readouterr().out)["kv_read_fraction"]
    run_cli(["costmodel", "--profile", "qwen-r1-7b", "--batch", "1", "--length", "128"])
    small = json.loads(capsys.readouterr().out)["kv_read_fraction"]
    assert big > 0.8 and big > small


def test_costmodel_unknown_profile_lists_presets(capsys):
    assert run_cli(["costmodel", "--profile", "bogus"]) == 1
    err = capsys.readouterr().err
    assert "llama-3.1-8b" in err and "qwen-r1-7b" in err


def test_simulate_vanilla_dense_counts(tmp_path, capsys):
    cfg = {"policy": "vanilla", "prompt_len": 4, "gen_len": 3}
    path = tmp_path / "sim.json"
    path.write_text(json.dumps(cfg))
    assert run_cli(["simulate", "--config", str(path), "--out", str(tmp_path / "o"), "--seed", "1"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["reads_total"] == 18.0
    assert out["peak_tokens"] == 7.0
    assert out["prefill_reads"] == 10.0
    records = read_jsonl(tmp_path / "o" / "ledger.jsonl")
    assert records[0]["measured_cr"] == 1.0
    assert records[0]["seed"] == 1


def test_simulate_all_evict_window_bound(tmp_path, capsys):
    cfg = {
        "policy": "dms",
        "decisions": "all-one",
        "window": 16,
        "prompt_len": 0,
        "gen_len": 64,
        "n_kv_heads": 1,
    }
    path = tmp_path / "sim.json"
    path.write_text(json.dumps(cfg))
    assert run_cli(["simulate", "--config", str(path), "--out", str(tmp_path / "o")]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["peak_tokens"] <= 17.0  # window + 1 per head after warmup


def test_simulate_tova_budget_peak(tmp_path, capsys):
    cfg = {"policy": "tova", "kv_budget": 8, "prompt_len": 8, "gen_len": 24}
    path = tmp_path / "sim.json"
    path.write_text(json.dumps(cfg))
    assert run_cli(["simulate", "--config", str(path), "--out", str(tmp_path / "o")]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["peak_tokens"] == 8.0


def test_simulate_unknown_policy_lists_valid(tmp_path, capsys):
    path = tmp_path / "sim.json"
    path.write_text(json.dumps({"policy": "nope"}))
    assert run_cli(["simulate", "--config", str(path), "--out", str(tmp_path / "o")]) == 1
    err = capsys.readouterr().err
    for name in ("vanilla", "dms", "dms-immediate", "tova", "h2o", "quest", "dmc-lite"):
        assert name in err


def test_simulate_determinism_byte_identical(tmp_path, capsys):
    cfg = {"policy": "dms", "decisions": {"random": 0.5}, "prompt_len": 6, "gen_len": 10,
           "sequences": 2}
    path = tmp_path / "sim.json"
    path.write_text(json.dumps(cfg))
    run_cli(["simulate", "--config", str(path), "--out", str(tmp_path / "a"), "--seed", "7"])
    run_cli(["simulate", "--config", str(path), "--out", str(tmp_path / "b"), "--seed", "7"])
    capsys.readouterr()
    a = (tmp_path / "a" / "ledger.jsonl").read_bytes()
    b = (tmp_path / "b" / "ledger.jsonl").read_bytes()
    assert a == b
    run_cli(["simulate", "--config", str(path), "--out", str(tmp_path / "c"), "--seed", "8"])
    capsys.readouterr()
    assert (tmp_path / "c" / "ledger.jsonl").read_bytes() != a


def test_train_zero_steps_keeps_initial_weights(tmp_path):
    cfg = {
        "phase": "pretrain",
        "model": {"vocab": 64, "d_model": 16, "n_layers": 1, "n_q_heads": 2,
                  "n_kv_heads": 1, "d_ff": 32, "max_seq": 64},
        "pretrain": {"steps": 0, "seq_len": 32},
    }
    path = tmp_path / "train.json"
    path.write_text(json.dumps(cfg))
    assert run_cli(["train", "--config", str(path), "--out", str(tmp_path / "o"), "--seed", "3"]) == 0
    log = read_jsonl(tmp_path / "o" / "train_log.jsonl")
    assert len(log) == 1 and "header" in log[0]
    from dmslab import checkpoint
    from dmslab.model import ModelConfig, init_params
    from dmslab.util import rng_for
    params, extra = checkpoint.load(str(tmp_path / "o" / "checkpoint"))
    fresh = init_params(ModelConfig(**cfg["model"]), rng_for(3, "pretrain/init"))
    import numpy as np
    for name in fresh:
        assert np.array_equal(params[name].data, fresh[name].data)
    assert extra["seed"] == 3


def test_train_retrofit_smoke_and_determinism(tmp_path):
    model = {"vocab": 256, "d_model": 16, "n_layers": 1, "n_q_heads": 2,
             "n_kv_heads": 1, "d_ff": 32, "max_seq": 96}
    pre = tmp_path / "pre.json"
    pre.write_text(json.dumps({"phase": "pretrain", "model": model,
                               "pretrain": {"steps": 2, "seq_len": 48, "batch_size": 2}}))
    assert run_cli(["train", "--config", str(pre), "--out", str(tmp_path / "t"), "--seed", "0"]) == 0
    retro = tmp_path / "retro.json"
    retro.write_text(json.dumps({
        "phase": "retrofit", "model": model,
        "teacher_checkpoint": str(tmp_path / "t" / "checkpoint"),
        "retrofit": {"steps": 3, "seq_len": 48, "batch_size": 2, "cr_final": 2.0,
                     "steps_per_cr": 2, "window": 4},
    }))
    assert run_cli(["train", "--config", str(retro), "--out", str(tmp_path / "r1"), "--seed", "5"]) == 0
    assert run_cli(["train", "--config", str(retro), "--out", str(tmp_path / "r2"), "--seed", "5"]) == 0
    log1 = (tmp_path / "r1" / "train_log.jsonl").read_bytes()
    log2 = (tmp_path / "r2" / "train_log.jsonl").read_bytes()
    assert log1 == log2
    ck1 = (tmp_path / "r1" / "checkpoint.bin").read_bytes()
    ck2 = (tmp_path / "r2" / "checkpoint.bin").read_bytes()
    assert ck1 == ck2
    recs = read_jsonl(tmp_path / "r1" / "train_log.jsonl")
    assert {"step", "l_d", "l_aux", "alpha_mean", "realized_cr"} <= set(recs[1].keys())


def test_train_missing_teacher_is_config_error(tmp_path, capsys):
    retro = tmp_path / "retro.json"
    retro.write_text(json.dumps({"phase": "retrofit",
                                 "teacher_checkpoint": str(tmp_path / "nope")}))
    assert run_cli(["train", "--config", str(retro), "--out", str(tmp_path / "o")]) == 1
    assert "teacher checkpoint" in capsys.readouterr().err


def test_pareto_from_synthetic_sweep_table(tmp_path, capsys):
    import csv as csvmod

    rows = [
        # two methods on one axis with the analytic 0.5 improvement case
        {"method": "a", "L": 1, "W": 1, "CR": 1, "seed": 0, "axis": "kv_reads",
         "budget": 0.0, "score": 0.0},
        {"method": "a", "L": 2, "W": 1, "CR": 1, "seed": 0, "axis": "kv_reads",
         "budget": 1.0, "score": 2.0},
        {"method": "b", "L": 1, "W": 1, "CR": 1, "seed": 0, "axis": "kv_reads",
         "budget": 0.0, "score": 0.0},
        {"method": "b", "L": 2, "W": 1, "CR": 1, "seed": 0, "axis": "kv_reads",
         "budget": 1.0, "score": 1.0},
        # disjoint projections on the other axis
        {"method": "a", "L": 1, "W": 1, "CR": 1, "seed": 0, "axis": "peak_tokens",
         "budget": 0.0, "score": 0.5},
        {"method": "a", "L": 2, "W": 1, "CR": 1, "seed": 0, "axis": "peak_tokens",
         "budget": 1.0, "score": 0.6},
        {"method": "b", "L": 1, "W": 1, "CR": 1, "seed": 0, "axis": "peak_tokens",
         "budget": 2.0, "score": 0.5},
        {"method": "b", "L": 2, "W": 1, "CR": 1, "seed": 0, "axis": "peak_tokens",
         "budget": 3.0, "score": 0.9},
    ]
    table = tmp_path / "sweep.csv"
    with open(table, "w", newline="") as f:
        w = csvmod.DictWriter(f, fieldnames=list(rows[0].keys()))
        w.writeheader()
        w.writerows(rows)
    assert run_cli(["pareto", "--config", "/dev/null"]) == 1  # missing sweep info
    capsys.readouterr()
    cfgp = tmp_path / "p.json"
    cfgp.write_text(json.dumps({"sweep_table": str(table)}))
    assert run_cli(["pareto", "--config", str(cfgp), "--out", str(tmp_path / "o")]) == 0
    capsys.readouterr()
    imp = {}
    with open(tmp_path / "o" / "improvement.csv") as f:
        for r in csvmod.DictReader(f):
            imp[(r["axis"], r["method_a"], r["method_b"])] = r["avg_improvement"]
    assert float(imp[("kv_reads", "a", "b")]) == pytest.approx(0.5, abs=1e-9)
    assert float(imp[("kv_reads", "b", "a")]) == pytest.approx(-0.5, abs=1e-9)
    assert imp[("peak_tokens", "a", "b")] == "NA"
    with open(tmp_path / "o" / "frontier.csv") as f:
        fr = list(csvmod.DictReader(f))
    assert all(r["method"] in ("a", "b") for r in fr)


def test_entry_point_installed():
    proc = subprocess.run(
        [sys.executable, "-m", "dmslab.cli", "costmodel", "--profile", "llama-3.1-8b"],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["memory_bound"] is True
