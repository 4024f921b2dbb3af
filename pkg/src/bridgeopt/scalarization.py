"""Sparsity-aware Tchebyshev scalarization of subset metrics.

Each inner-loop iteration draws a weight beta and collapses the two
objectives (metric gap to the incumbent, subset cardinality) into one
non-positive score:

    h_i = max( beta * (g_i - max_j g_j),  -(1 - beta) * |e_i| )

High beta favors chasing the best metric seen; low beta favors small
subsets. The surrogate is fitted on h, never on raw g.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class ScalarizationConfig:
    """Bounds for the per-iteration beta draw."""

    beta_lb: float = 0.25
    beta_ub: float = 1.0

    def __post_init__(self) -> None:
        if not (0.0 <= self.beta_lb <= self.beta_ub <= 1.0):
            raise ValueError("beta bounds must satisfy 0 <= beta_lb <= beta_ub <= 1")


@dataclass(frozen=True)
class ScalarizedRecord:
    """The h vector produced at one iteration, with the beta that shaped it."""

    iteration: int
    beta: float
    h: tuple[float, ...]


def sample_beta(cfg: ScalarizationConfig, rng: np.random.Generator) -> float:
    """Uniform draw from [beta_lb, beta_ub]; degenerate bounds return the point."""
    if cfg.beta_lb == cfg.beta_ub:
        return cfg.beta_lb
    return float(rng.uniform(cfg.beta_lb, cfg.beta_ub))


def tch(metrics: Sequence[float], cards: Sequence[int], beta: float) -> np.ndarray:
    """Scalarize evaluated subsets against the running best metric.

    Every component is <= 0: the metric term is a gap to the max, the
    cardinality term is a pure penalty.
    """
    g = np.asarray(metrics, dtype=np.float64)
    c = np.asarray(cards, dtype=np.float64)
    if g.shape != c.shape or g.ndim != 1 or g.shape[0] == 0:
        raise ValueError("metrics and cards must be equal-length non-empty sequences")
    if not np.all(np.isfinite(g)):
        raise ValueError("metrics must be finite")
    if np.any(c < 1):
        raise ValueError("cardinalities must be at least 1")
    if not (0.0 <= beta <= 1.0):
        raise ValueError("beta must lie in [0, 1]")
    if not math.isfinite(beta):
        raise ValueError("beta must be finite")
    g_max = float(np.max(g))
    return np.maximum(beta * (g - g_max), -(1.0 - beta) * c)
