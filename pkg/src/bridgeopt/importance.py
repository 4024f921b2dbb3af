"""Per-example importance from the surrogate's mean gradient.

A GP fitted on a space-filling design over subsets gives a differentiable
relaxation of the black-box metric. Averaging the gradient of its posterior
mean over the design points scores each pool coordinate; ranked prefix
sweeps over those scores separate helpful examples from harmful ones.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .pool import ExamplePool, SubsetVector, sample_subset
from .surrogate import fit_gp

Evaluator = Callable[[SubsetVector], float]
# Sweep evaluators get a noise handle so replicates can resample evaluator
# noise while staying bit-reproducible for a fixed handle.
SweepEvaluator = Callable[[SubsetVector, int], float]

DIRECTIONS = ("ascending", "descending")


@dataclass(frozen=True)
class ImportanceVector:
    """Mean-gradient score per pool coordinate, with design provenance."""

    scores: tuple[float, ...]
    n_design: int
    seed: int | None = None


@dataclass(frozen=True)
class SweepRow:
    direction: str
    t: int
    replicate: int
    metric: float


@dataclass(frozen=True)
class RankedSweep:
    """Raw prefix-sweep measurements in canonical emission order."""

    order: tuple[int, ...]  # pool indices sorted by ascending score, ties by index
    t_grid: tuple[int, ...]
    rows: tuple[SweepRow, ...]


def importance_scores(
    evaluator: Evaluator,
    pool: ExamplePool,
    n_design: int,
    rng: np.random.Generator,
    seed: int | None = None,
) -> ImportanceVector:
    """Score each example by the average posterior-mean gradient.

    Draws n_design subsets (cardinality-uniform), evaluates them, fits the
    GP, and averages the gradient of the fitted mean over the design points
    themselves. The factorized training solve is shared across all points.
    """
    m = len(pool)
    if n_design < 2:
        raise ValueError("n_design must be at least 2")
    design = [sample_subset(m, rng) for _ in range(n_design)]
    targets = [float(evaluator(s)) for s in design]
    model = fit_gp(design, targets)
    grad_sum = np.zeros(m)
    for s in design:
        grad_sum += model.posterior_gradient(s)
    scores = grad_sum / n_design
    return ImportanceVector(tuple(float(v) for v in scores), n_design, seed)


def _score_order(scores: Sequence[float]) -> tuple[int, ...]:
    return tuple(sorted(range(len(scores)), key=lambda i: (scores[i], i)))


def build_ranked_sets(scores: Sequence[float], t: int) -> tuple[SubsetVector, SubsetVector]:
    """(ascending, descending) subsets of size t.

    Ascending takes the t lowest-scored examples, descending the t highest;
    ties break toward the lower pool index, so the two directions partition
    the pool: descending(t) and ascending(m - t) are disjoint and cover it.
    """
    m = len(scores)
    if not (1 <= t <= m):
        raise ValueError(f"t must lie in [1, {m}], got {t}")
    order = _score_order(scores)
    ascending = SubsetVector.from_indices(m, order[:t])
    descending = SubsetVector.from_indices(m, order[m - t :])
    return ascending, descending


def sweep(
    evaluator: SweepEvaluator,
    scores: Sequence[float],
    step: int,
    replicates: int,
    rng: np.random.Generator,
) -> RankedSweep:
    """Evaluate ranked prefixes in both directions over the t grid.

    The grid is {1, 1+step, ...} capped at m, with m always terminal. Rows
    are produced in canonical order (direction, then t, then replicate);
    each replicate draws a fresh noise handle from rng.
    """
    m = len(scores)
    if step < 1:
        raise ValueError("step must be at least 1")
    if replicates < 1:
        raise ValueError("replicates must be at least 1")
    t_grid = list(range(1, m, step))
    t_grid.append(m)
    order = _score_order(scores)
    rows: list[SweepRow] = []
    for direction in DIRECTIONS:
        for t in t_grid:
            ascending, descending = build_ranked_sets(scores, t)
            subset = ascending if direction == "ascending" else descending
            for rep in range(replicates):
                tag = int(rng.integers(0, 2**31))
                rows.append(SweepRow(direction, t, rep, float(evaluator(subset, tag))))
    return RankedSweep(order, tuple(t_grid), tuple(rows))
