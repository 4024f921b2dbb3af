"""Inner-loop subset optimization: surrogate-guided search and random search.

One run spends exactly n_eval evaluator calls: n_init cardinality-uniform
draws up front, then one proposal per iteration. Each iteration re-draws the
scalarization weight, recomputes h over everything evaluated so far, refits
the surrogate on h, and proposes the best non-tabu expected improvement.
The returned best is the argmax of raw metric, earliest achiever on ties.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .acquisition import ProposalConfig, SearchSpaceExhausted, propose
from .pool import EvaluationRecord, ExamplePool, SubsetVector, sample_subset
from .scalarization import ScalarizationConfig, sample_beta, tch
from .surrogate import fit_gp

# Evaluators return a metric, optionally paired with a wallclock cost in ms.
# In-process oracles cost less than the ledger's ms resolution and report 0.
EvaluatorFn = Callable[[SubsetVector], "float | tuple[float, int]"]
RecordSink = Callable[[EvaluationRecord], None]

_RS_REDRAW_ATTEMPTS = 100


@dataclass(frozen=True)
class OptimizerConfig:
    """Evaluation budget and sub-configs for one optimize call.

    n_init defaults to min(16, n_eval // 2) when unset.
    """

    n_eval: int = 32
    n_init: int | None = None
    scalarization: ScalarizationConfig = field(default_factory=ScalarizationConfig)
    proposal: ProposalConfig = field(default_factory=ProposalConfig)

    def __post_init__(self) -> None:
        if self.n_eval < 1:
            raise ValueError("n_eval must be at least 1")
        n_init = self.resolved_n_init()
        if not (1 <= n_init <= self.n_eval):
            raise ValueError(
                f"n_init must lie in [1, n_eval={self.n_eval}], got {n_init}"
            )

    def resolved_n_init(self) -> int:
        if self.n_init is not None:
            return self.n_init
        return max(1, min(16, self.n_eval // 2))


@dataclass(frozen=True)
class OptimizerResult:
    best_subset: SubsetVector
    best_metric: float
    records: tuple[EvaluationRecord, ...]


def _call_evaluator(evaluator: EvaluatorFn, subset: SubsetVector) -> tuple[float, int]:
    out = evaluator(subset)
    if isinstance(out, tuple):
        metric, ms = out
        return float(metric), int(ms)
    return float(out), 0


def _best_of(records: Sequence[EvaluationRecord]) -> tuple[SubsetVector, float]:
    best = records[0]
    for r in records[1:]:
        if r.metric > best.metric:  # strict: earliest achiever wins ties
            best = r
    return best.subset, best.metric


def bayes_opt(
    evaluator: EvaluatorFn,
    pool: ExamplePool,
    cfg: OptimizerConfig,
    rng: np.random.Generator,
    *,
    round_index: int = 0,
    on_record: RecordSink | None = None,
) -> OptimizerResult:
    """Surrogate-guided subset search over the given pool.

    Iterations n_init+1..n_eval each draw beta, scalarize all metrics so far,
    refit the GP on the (standardized) h values, and evaluate the proposal
    with every already-evaluated subset tabu. If the budget exceeds the
    2^m - 1 nonempty subsets, the loop ends once every subset has been
    evaluated; the best found is then the exact optimum.
    """
    m = len(pool)
    if m < 1:
        raise ValueError("pool must be non-empty")
    n_init = cfg.resolved_n_init()
    records: list[EvaluationRecord] = []

    def commit(record: EvaluationRecord) -> None:
        records.append(record)
        if on_record is not None:
            on_record(record)

    for i in range(1, n_init + 1):
        subset = sample_subset(m, rng)
        metric, ms = _call_evaluator(evaluator, subset)
        commit(EvaluationRecord(subset, metric, "init", round_index, i, ms))

    for t in range(n_init + 1, cfg.n_eval + 1):
        beta = sample_beta(cfg.scalarization, rng)
        metrics = [r.metric for r in records]
        cards = [r.subset.cardinality for r in records]
        h = tch(metrics, cards, beta)
        model = fit_gp([r.subset for r in records], h)
        incumbent = (float(np.max(h)) - model.target_mean) / model.target_std
        tabu = {r.subset for r in records}
        try:
            subset = propose(model, incumbent, tabu, cfg.proposal, rng)
        except SearchSpaceExhausted:
            break  # budget exceeds the lattice: every subset is already evaluated
        metric, ms = _call_evaluator(evaluator, subset)
        commit(EvaluationRecord(subset, metric, "bo", round_index, t, ms, beta=beta))

    best_subset, best_metric = _best_of(records)
    return OptimizerResult(best_subset, best_metric, tuple(records))


def random_search(
    evaluator: EvaluatorFn,
    pool: ExamplePool,
    cfg: OptimizerConfig,
    rng: np.random.Generator,
    *,
    round_index: int = 0,
    on_record: RecordSink | None = None,
) -> OptimizerResult:
    """Cardinality-uniform random baseline on the same budget and ledger schema.

    Duplicate draws are re-drawn up to 100 times, then accepted as-is.
    """
    m = len(pool)
    if m < 1:
        raise ValueError("pool must be non-empty")
    records: list[EvaluationRecord] = []
    seen: set[SubsetVector] = set()
    for i in range(1, cfg.n_eval + 1):
        subset = sample_subset(m, rng)
        attempts = 0
        while subset in seen and attempts < _RS_REDRAW_ATTEMPTS:
            subset = sample_subset(m, rng)
            attempts += 1
        seen.add(subset)
        metric, ms = _call_evaluator(evaluator, subset)
        record = EvaluationRecord(subset, metric, "rs", round_index, i, ms)
        records.append(record)
        if on_record is not None:
            on_record(record)
    best_subset, best_metric = _best_of(records)
    return OptimizerResult(best_subset, best_metric, tuple(records))
