"""Budget sweeps over length-width-compression configurations, chain-outcome
aggregation, Pareto extraction, and the average-improvement integral between
two frontiers.

Budget axes are in token units straight from the engine ledgers: kv_reads is
the per-generation-step attended-entry count summed over steps and chains,
peak_tokens the maximum simultaneously live entries summed over a config's
chains (all chains of one problem are resident concurrently). Chain sampling
noise is seeded per (seed, task, problem, chain) and shared across methods so
method comparisons are paired.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import corpus
from .costmodel import effective_axes
from .engine import ModelEngine
from .gates import GATE_BIAS
from .kvcache import ReadLedger
from .model import ModelConfig
from .policies import (
    DmcLitePolicy,
    GateDmsPolicy,
    H2OPolicy,
    POLICY_NAMES,
    PolicyBudget,
    QuestPolicy,
    TovaPolicy,
)
from .util import rng_for

AXES = ("kv_reads", "peak_tokens")


@dataclass(frozen=True)
class BudgetConfig:
    length: int  # max tokens per chain, prompt included
    width: int  # parallel chains
    cr: float  # compression ratio (1 for vanilla)

    def __post_init__(self):
        if self.length < 1 or self.width < 1 or self.cr < 1:
            raise ValueError("budget config requires length >= 1, width >= 1, cr >= 1")

    def label(self) -> str:
        return f"{self.length}-{self.width}-{self.cr:g}"


@dataclass
class FrontierPoint:
    budget: float
    accuracy: float
    method: str
    config: BudgetConfig | None = None


def aggregate(outcomes: list, mode: str = "majority"):
    """majority: most frequent value, ties broken by first occurrence.
    pass-at-all: True iff any outcome is truthy."""
    if not outcomes:
        raise ValueError("aggregate needs at least one outcome")
    if mode == "pass-at-all":
        return any(bool(o) for o in outcomes)
    if mode != "majority":
        raise ValueError(f"unknown aggregation mode {mode!r}")
    counts: dict = {}
    order: dict = {}
    for i, o in enumerate(outcomes):
        counts[o] = counts.get(o, 0) + 1
        order.setdefault(o, i)
    return max(counts, key=lambda o: (counts[o], -order[o]))


def dominates(a: FrontierPoint, b: FrontierPoint) -> bool:
    """a dominates b: no worse on both axes, strictly better on one."""
    return (
        a.budget <= b.budget
        and a.accuracy >= b.accuracy
        and (a.budget < b.budget or a.accuracy > b.accuracy)
    )


def pareto_extract(points: list[FrontierPoint]) -> list[FrontierPoint]:
    """Maximal non-dominated subset, sorted by budget (duplicates collapsed)."""
    if not points:
        raise ValueError("pareto_extract needs at least one point")
    seen: dict[tuple[float, float], FrontierPoint] = {}
    for p in points:
        seen.setdefault((p.budget, p.accuracy), p)
    unique = list(seen.values())
    front = [
        p for p in unique if not any(dominates(q, p) for q in unique if q is not p)
    ]
    return sorted(front, key=lambda p: p.budget)


def _interp(front: list[FrontierPoint], x: float) -> float:
    xs = [p.budget for p in front]
    ys = [p.accuracy for p in front]
    return float(np.interp(x, xs, ys))


def avg_improvement(a: list[FrontierPoint], b: list[FrontierPoint]) -> float | None:
    """Mean of A(x) - B(x) over the largest common budget interval, with
    linear interpolation between measured budgets. None when the budget
    projections are disjoint (reported as NA)."""
    if not a or not b:
        raise ValueError("both frontiers must be non-empty")
    a = sorted(a, key=lambda p: p.budget)
    b = sorted(b, key=lambda p: p.budget)
    lo = max(a[0].budget, b[0].budget)
    hi = min(a[-1].budget, b[-1].budget)
    if hi <= lo:
        return None
    knots = sorted(
        {lo, hi}
        | {p.budget for p in a if lo < p.budget < hi}
        | {p.budget for p in b if lo < p.budget < hi}
    )
    total = 0.0
    for x0, x1 in zip(knots, knots[1:]):
        d0 = _interp(a, x0) - _interp(b, x0)
        d1 = _interp(a, x1) - _interp(b, x1)
        total += 0.5 * (d0 + d1) * (x1 - x0)
    return total / (hi - lo)


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

EngineFactory = Callable[[BudgetConfig], Callable[[], ModelEngine]]


def method_engine_factory(
    method: str,
    params,
    cfg: ModelConfig,
    window: int = 16,
    page_size: int = 16,
    seed: int = 0,
) -> EngineFactory:
    """Engine maker for a policy name; budgets derive from the config as
    (input_len + max_gen_len) / CR = length / CR."""
    if method not in POLICY_NAMES:
        raise KeyError(f"unknown policy {method!r}; valid: {', '.join(POLICY_NAMES)}")
    acfg = cfg.attention()

    def for_config(bc: BudgetConfig) -> Callable[[], ModelEngine]:
        budget = PolicyBudget(max(1, int(bc.length / bc.cr)))

        def make() -> ModelEngine:
            if method == "vanilla":
                factory = None
            elif method in ("dms", "dms-immediate"):
                variant = "delayed" if method == "dms" else "immediate"
                factory = lambda layer: GateDmsPolicy(
                    params[f"l{layer}.gate.w"].data, GATE_BIAS, window, acfg, variant
                )
            elif method == "tova":
                factory = lambda layer: TovaPolicy(budget)
            elif method == "h2o":
                factory = lambda layer: H2OPolicy(budget)
            elif method == "quest":
                q_pages = max(16, int(2 * bc.cr))
                factory = lambda layer: QuestPolicy(budget, q_pages)
                return ModelEngine(params, cfg, factory, window, q_pages)
            else:  # dmc-lite: pseudorandom accumulate stream at rate 1 - 1/CR
                stream_rng = rng_for(seed, f"dmc-stream/{bc.label()}")
                stream = (stream_rng.random(bc.length) < 1 - 1 / bc.cr).astype(float)
                factory = lambda layer: DmcLitePolicy(stream)
            return ModelEngine(params, cfg, factory, window, page_size)

        return make

    return for_config


def run_chain(
    engine: ModelEngine,
    inst: corpus.TaskInstance,
    max_len: int,
    rng: np.random.Generator,
    temperature: float,
) -> tuple[object, ReadLedger]:
    """One chain capped at max_len total tokens; returns (answer, ledger)."""
    prompt = inst.prompt[:max_len]
    max_new = max_len - len(prompt)
    if max_new <= 0:
        engine.prefill(prompt)
        return None, engine.ledger
    gen = engine.generate(prompt, max_new, rng, temperature, eos_id=corpus.EOS)
    return corpus.extract_answer(inst.task, gen), engine.ledger


def sweep(
    tasks: list[str],
    runners: dict[str, EngineFactory],
    configs: list[BudgetConfig],
    seeds: list[int],
    problems: int = 16,
    temperature: float = 0.8,
    aggregate_mode: str = "majority",
) -> list[dict]:
    """Rows: method, L, W, CR, seed, axis, budget, score (one per axis).

    Scores are means over tasks of per-task exact-match accuracy under the
    chain-outcome aggregation rule; budgets are means over problems of the
    summed chain ledger totals.
    """
    rows: list[dict] = []
    for seed in seeds:
        instances = {
            task: [gen_problem(seed, task, i) for i in range(problems)] for task in tasks
        }
        for method, runner in runners.items():
            for bc in configs:
                maker = runner(bc)
                task_scores = []
                reads_budget = []
                peak_budget = []
                for task in tasks:
                    correct = []
                    for prob_idx, inst in enumerate(instances[task]):
                        answers = []
                        merged = ReadLedger()
                        for chain in range(bc.width):
                            rng = rng_for(
                                seed, f"chain/{task}/{prob_idx}/{chain}/{bc.label()}"
                            )
                            ans, ledger = run_chain(
                                maker(), inst, bc.length, rng, temperature
                            )
                            answers.append(ans)
                            merged.merge(ledger)
                        if aggregate_mode == "pass-at-all":
                            outcome = aggregate(
                                [a == inst.answer for a in answers], "pass-at-all"
                            )
                            correct.append(bool(outcome))
                        else:
                            correct.append(aggregate(answers) == inst.answer)
                        r, pk = effective_axes(merged)
                        reads_budget.append(r)
                        peak_budget.append(pk)
                    task_scores.append(float(np.mean(correct)))
                score = float(np.mean(task_scores))
                for axis, budget in (
                    ("kv_reads", float(np.mean(reads_budget))),
                    ("peak_tokens", float(np.mean(peak_budget))),
                ):
                    rows.append(
                        {
                            "method": method,
                            "L": bc.length,
                            "W": bc.width,
                            "CR": bc.cr,
                            "seed": seed,
                            "axis": axis,
                            "budget": budget,
                            "score": score,
                        }
                    )
    return rows


def gen_problem(seed: int, task: str, index: int) -> corpus.TaskInstance:
    return corpus.gen_task(rng_for(seed, f"problem/{task}/{index}"), task)


def frontier_rows(rows: list[dict]) -> list[dict]:
    """Pareto frontier per (method, axis), flattened for CSV emission."""
    out = []
    for axis in AXES:
        methods = sorted({r["method"] for r in rows})
        for method in methods:
            pts = [
                FrontierPoint(
                    r["budget"],
                    r["score"],
                    method,
                    BudgetConfig(r["L"], r["W"], r["CR"]),
                )
                for r in rows
                if r["method"] == method and r["axis"] == axis
            ]
            if not pts:
                continue
            for p in pareto_extract(pts):
                out.append(
                    {
                        "method": method,
                        "axis": axis,
                        "budget": p.budget,
                        "score": p.accuracy,
                        "L": p.config.length,
                        "W": p.config.width,
                        "CR": p.config.cr,
                    }
                )
    return out


def improvement_rows(rows: list[dict]) -> list[dict]:
    """Pairwise avg_improvement per axis over extracted frontiers; budget
    projections that do not overlap yield the NA marker."""
    out = []
    methods = sorted({r["method"] for r in rows})
    for axis in AXES:
        fronts = {}
        for method in methods:
            pts = [
                FrontierPoint(r["budget"], r["score"], method)
                for r in rows
                if r["method"] == method and r["axis"] == axis
            ]
            if pts:
                fronts[method] = pareto_extract(pts)
        for ma in methods:
            for mb in methods:
                if ma == mb or ma not in fronts or mb not in fronts:
                    continue
                val = avg_improvement(fronts[ma], fronts[mb])
                out.append(
                    {
                        "axis": axis,
                        "method_a": ma,
                        "method_b": mb,
                        "avg_improvement": "NA" if val is None else val,
                    }
                )
    return out
