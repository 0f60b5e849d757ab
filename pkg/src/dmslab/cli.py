"""Command-line front end: train | simulate | pareto | costmodel.

Configuration comes from a JSON file (--config) with flag overrides winning
over file values. Every output artifact records the seed, outputs carry no
timestamps, and all randomness is split from the run seed by fixed labels,
so identical invocations produce byte-identical files.

Exit codes: 0 success, 1 configuration error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import checkpoint, corpus, costmodel
from .engine import ModelEngine, SingleLayerEngine
from .attention import AttentionConfig, ProjectionSet
from .gates import EXPLICIT, GATE_BIAS
from .hyperscale import (
    AXES,
    BudgetConfig,
    frontier_rows,
    improvement_rows,
    method_engine_factory,
    sweep,
)
from .kvcache import ReadLedger
from .model import ModelConfig
from .numerics import Tensor
from .policies import (
    POLICY_NAMES,
    DmcLitePolicy,
    GateDmsPolicy,
    H2OPolicy,
    PolicyBudget,
    QuestPolicy,
    ScriptedDmsPolicy,
    TovaPolicy,
    VanillaPolicy,
)
from .train import NumericalError, RetrofitConfig, pretrain, retrofit, write_log
from .util import rng_for


class ConfigError(ValueError):
    pass


def _load_config(args) -> dict:
    cfg: dict = {}
    if args.config:
        try:
            with open(args.config) as f:
                cfg = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {args.config}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file is not valid JSON: {e}")
    for key in ("seed", "out", "policy", "profile"):
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    cfg.setdefault("seed", 0)
    return cfg


def _model_config(cfg: dict) -> ModelConfig:
    fields = cfg.get("model", {})
    try:
        return ModelConfig(**fields)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"model: {e}")


def _require(cfg: dict, field: str):
    if field not in cfg:
        raise ConfigError(f"missing required config field: {field}")
    return cfg[field]


def _out_dir(cfg: dict) -> str:
    out = _require(cfg, "out")
    os.makedirs(out, exist_ok=True)
    return out


def _write_csv(path: str, rows: list[dict], columns: list[str]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=columns)
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in columns})


def _write_jsonl(path: str, rows: list[dict]) -> None:
    with open(path, "w") as f:
        for r in rows:
            f.write(json.dumps(r, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(cfg)
    seed = int(cfg["seed"])
    mcfg = _model_config(cfg)
    phase = cfg.get("phase", "retrofit")
    if phase not in ("pretrain", "retrofit"):
        raise ConfigError(f"phase must be pretrain or retrofit, got {phase!r}")

    if phase == "pretrain":
        p = cfg.get("pretrain", {})
        steps = int(p.get("steps", 1000))
        if steps < 0:
            raise ConfigError("pretrain.steps must be >= 0")
        if steps > 0 and mcfg.vocab < corpus.VOCAB:
            raise ConfigError(
                f"model.vocab must be >= {corpus.VOCAB} to train on the synthetic corpus"
            )
        log: list[dict] = []
        params = pretrain(
            mcfg, steps, seed,
            batch_size=int(p.get("batch_size", 4)),
            seq_len=int(p.get("seq_len", 256)),
            lr=float(p.get("lr", 3e-3)),
            log=log,
        )
        checkpoint.save(params, os.path.join(out, "checkpoint"), {"seed": seed})
        write_log(log, os.path.join(out, "train_log.jsonl"),
                  header={"seed": seed, "phase": phase, "steps": steps})
        return 0

    teacher_prefix = _require(cfg, "teacher_checkpoint")
    if not checkpoint.exists(teacher_prefix):
        raise ConfigError(f"teacher checkpoint not found: {teacher_prefix}")
    teacher, _ = checkpoint.load(teacher_prefix)
    student = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in teacher.items()}
    r = cfg.get("retrofit", {})
    try:
        rcfg = RetrofitConfig(
            steps=int(r.get("steps", 300)),
            batch_size=int(r.get("batch_size", 4)),
            seq_len=int(r.get("seq_len", 256)),
            cr_final=float(r.get("cr_final", 4.0)),
            steps_per_cr=int(r.get("steps_per_cr", 100)),
            window=int(r.get("window", 16)),
            variant=r.get("variant", "delayed"),
            gate_mode=r.get("gate_mode", EXPLICIT),
            tau=float(r.get("tau", 0.1)),
            lr=float(r.get("lr", 3e-3)),
            seed=seed,
            prephase_steps=int(r.get("prephase_steps", 0)),
        )
    except (TypeError, ValueError) as e:
        raise ConfigError(f"retrofit: {e}")
    if rcfg.steps < 0 or rcfg.window < 1:
        raise ConfigError("retrofit.steps must be >= 0 and retrofit.window >= 1")
    if rcfg.variant not in ("delayed", "immediate"):
        raise ConfigError("retrofit.variant must be delayed or immediate")
    if rcfg.steps > 0 and mcfg.vocab < corpus.VOCAB:
        raise ConfigError(
            f"model.vocab must be >= {corpus.VOCAB} to train on the synthetic corpus"
        )
    records = retrofit(student, teacher, mcfg, rcfg)
    checkpoint.save(student, os.path.join(out, "checkpoint"), {"seed": seed})
    write_log(records, os.path.join(out, "train_log.jsonl"),
              header={"seed": seed, "phase": phase, "steps": rcfg.steps,
                      "cr_final": rcfg.cr_final, "window": rcfg.window,
                      "variant": rcfg.variant})
    return 0


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def _scripted_stream(spec, rng, T: int, n_kv: int) -> np.ndarray:
    if spec == "all-zero":
        return np.zeros((T, n_kv))
    if spec == "all-one":
        return np.ones((T, n_kv))
    if isinstance(spec, dict) and "random" in spec:
        return (rng.random((T, n_kv)) < float(spec["random"])).astype(float)
    raise ConfigError(f"decisions must be all-zero, all-one, or {{'random': p}}, got {spec!r}")


def _sim_policy(cfg: dict, rng, T: int, n_kv: int, page_size: int):
    name = cfg.get("policy", "vanilla")
    if name not in POLICY_NAMES:
        raise ConfigError(f"unknown policy {name!r}; valid: {', '.join(POLICY_NAMES)}")
    window = int(cfg.get("window", 16))
    if name == "vanilla":
        return VanillaPolicy(), window
    if name in ("dms", "dms-immediate"):
        stream = _scripted_stream(cfg.get("decisions", "all-zero"), rng, T, n_kv)
        variant = "delayed" if name == "dms" else "immediate"
        return ScriptedDmsPolicy(stream, window, variant), window
    budget = PolicyBudget(int(cfg["kv_budget"])) if "kv_budget" in cfg else (
        PolicyBudget.from_cr(int(cfg.get("prompt_len", 4)), int(cfg.get("gen_len", 3)),
                             float(cfg.get("cr", 4.0)))
    )
    if name == "tova":
        return TovaPolicy(budget), window
    if name == "h2o":
        return H2OPolicy(budget), window
    if name == "quest":
        return QuestPolicy(budget, page_size), window
    stream = _scripted_stream(cfg.get("decisions", "all-zero"), rng, T, 1)
    return DmcLitePolicy(stream[:, 0]), window


def cmd_simulate(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(cfg)
    seed = int(cfg["seed"])
    prompt_len = int(cfg.get("prompt_len", 4))
    gen_len = int(cfg.get("gen_len", 3))
    n_seq = int(cfg.get("sequences", 1))
    page_size = int(cfg.get("page_size", 16))
    d = int(cfg.get("d_model", 16))
    acfg = AttentionConfig(d, int(cfg.get("n_q_heads", 2)), int(cfg.get("n_kv_heads", 1)))
    T = prompt_len + gen_len
    records = []
    for s in range(n_seq):
        rng = rng_for(seed, f"simulate/{s}")
        policy, window = _sim_policy(cfg, rng, T, acfg.n_kv_heads, page_size)
        proj = ProjectionSet(
            Tensor(rng.normal(size=(d, d)) * 0.3),
            Tensor(rng.normal(size=(d, acfg.kv_dim)) * 0.3),
            Tensor(rng.normal(size=(d, acfg.kv_dim)) * 0.3),
            Tensor(rng.normal(size=(d, d)) * 0.3),
        )
        eng = SingleLayerEngine(proj, acfg, policy, window, page_size)
        h = rng.normal(size=(T, d))
        eng.prefill(h[:prompt_len])
        for t in range(prompt_len, T):
            eng.decode_step(h[t])
        rec = eng.ledger.export(eng.cache, elapsed_tokens=T)
        rec["seed"] = seed
        rec["sequence"] = s
        rec["policy"] = cfg.get("policy", "vanilla")
        records.append(rec)
    agg = ReadLedger()
    total = {
        "aggregate": True,
        "seed": seed,
        "policy": cfg.get("policy", "vanilla"),
        "reads_total": sum(r["reads_total"] for r in records),
        "prefill_reads": sum(r["prefill_reads"] for r in records),
        "peak_tokens": sum(r["peak_tokens"] for r in records),
        "steps": sum(r["steps"] for r in records),
    }
    _write_jsonl(os.path.join(out, "ledger.jsonl"), records + [total])
    print(json.dumps(total, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# pareto
# ---------------------------------------------------------------------------

SWEEP_COLUMNS = ["method", "L", "W", "CR", "seed", "axis", "budget", "score"]
FRONTIER_COLUMNS = ["method", "axis", "budget", "score", "L", "W", "CR"]
IMPROVEMENT_COLUMNS = ["axis", "method_a", "method_b", "avg_improvement"]


def _read_sweep_csv(path: str) -> list[dict]:
    rows = []
    with open(path) as f:
        for r in csv.DictReader(f):
            rows.append(
                {
                    "method": r["method"],
                    "L": int(r["L"]),
                    "W": int(r["W"]),
                    "CR": float(r["CR"]),
                    "seed": int(r["seed"]),
                    "axis": r["axis"],
                    "budget": float(r["budget"]),
                    "score": float(r["score"]),
                }
            )
    return rows


def cmd_pareto(args) -> int:
    cfg = _load_config(args)
    out = _out_dir(cfg)
    seed = int(cfg["seed"])
    if "sweep_table" in cfg:
        if not os.path.exists(cfg["sweep_table"]):
            raise ConfigError(f"sweep table not found: {cfg['sweep_table']}")
        rows = _read_sweep_csv(cfg["sweep_table"])
    else:
        sw = cfg.get("sweep")
        if sw is None:
            raise ConfigError("pareto needs either sweep_table or an inline sweep block")
        mcfg = _model_config(cfg)
        methods = sw.get("methods", ["vanilla", "dms"])
        for m in methods:
            if m not in POLICY_NAMES:
                raise ConfigError(f"unknown method {m!r}; valid: {', '.join(POLICY_NAMES)}")
        window = int(sw.get("window", 16))
        runners = {}
        for m in methods:
            prefix = sw.get("dms_checkpoint") if m.startswith("dms") else sw.get(
                "teacher_checkpoint"
            )
            if prefix is None or not checkpoint.exists(prefix):
                raise ConfigError(f"checkpoint for method {m!r} not found: {prefix}")
            params, _ = checkpoint.load(prefix)
            runners[m] = method_engine_factory(
                m, params, mcfg, window=window,
                page_size=int(sw.get("page_size", 16)), seed=seed,
            )
        cr = float(sw.get("cr", 4.0))
        configs_by_method = {
            m: [
                BudgetConfig(int(L), int(W), 1.0 if m == "vanilla" else cr)
                for L in sw.get("lengths", [64, 128])
                for W in sw.get("widths", [1, 2])
            ]
            for m in methods
        }
        rows = []
        for m in methods:
            rows += sweep(
                sw.get("tasks", list(corpus.TASKS)),
                {m: runners[m]},
                configs_by_method[m],
                seeds=[seed],
                problems=int(sw.get("problems", 16)),
                temperature=float(sw.get("temperature", 0.8)),
                aggregate_mode=sw.get("aggregate", "majority"),
            )
        _write_csv(os.path.join(out, "sweep.csv"), rows, SWEEP_COLUMNS)
        _write_jsonl(os.path.join(out, "sweep.jsonl"), rows)
    fr = frontier_rows(rows)
    imp = improvement_rows(rows)
    _write_csv(os.path.join(out, "frontier.csv"), fr, FRONTIER_COLUMNS)
    _write_csv(os.path.join(out, "improvement.csv"), imp, IMPROVEMENT_COLUMNS)
    print(json.dumps({"seed": seed, "sweep_points": len(rows),
                      "frontier_points": len(fr), "pairs": len(imp)}, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# costmodel
# ---------------------------------------------------------------------------


def cmd_costmodel(args) -> int:
    cfg = _load_config(args)
    name = cfg.get("profile", "llama-3.1-8b")
    if cfg.get("profile_file"):
        profile = costmodel.load_profile(cfg["profile_file"])
    else:
        try:
            profile = costmodel.get_profile(name)
        except KeyError as e:
            raise ConfigError(str(e))
    B = int(cfg.get("batch", args.batch if args.batch is not None else 1))
    L = int(cfg.get("length", args.length if args.length is not None else 0))
    try:
        rep = costmodel.latency(profile, B, L)
    except ValueError as e:
        raise ConfigError(str(e))
    out = {
        "profile": name if not cfg.get("profile_file") else cfg["profile_file"],
        "batch": B,
        "length": L,
        "flops": rep.flops,
        "bytes_read": rep.bytes_read,
        "latency_seconds": rep.latency_seconds,
        "kv_read_fraction": rep.kv_read_fraction,
        "memory_bound": rep.memory_bound,
    }
    print(json.dumps(out, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dmslab")
    sub = p.add_subparsers(dest="command", required=True)
    for name, fn in (
        ("train", cmd_train),
        ("simulate", cmd_simulate),
        ("pareto", cmd_pareto),
        ("costmodel", cmd_costmodel),
    ):
        sp = sub.add_parser(name)
        sp.add_argument("--config", default=None)
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", default=None)
        sp.add_argument("--policy", default=None)
        sp.add_argument("--profile", default=None)
        if name == "costmodel":
            sp.add_argument("--batch", type=int, default=None)
            sp.add_argument("--length", type=int, default=None)
        sp.set_defaults(fn=fn)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except NumericalError as e:
        print(f"numerical failure: {e} (last good step: {e.last_good_step})", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
