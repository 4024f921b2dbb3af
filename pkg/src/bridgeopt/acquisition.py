"""Expected improvement and its maximization over the subset lattice.

The lattice is too large to enumerate, so the proposal step runs tabu-aware
multi-start hill climbing over single-bit flips: cheap on the surrogate,
deterministic given the generator, and exact enough that on small lattices
it recovers the enumerated EI maximum almost always.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Collection

import numpy as np
from scipy.special import ndtr

from .pool import SubsetVector, sample_subset
from .surrogate import GPModel

_VAR_TOL = -1e-10
_REJECTION_ATTEMPTS = 1000
_ENUM_LIMIT_M = 16
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class SearchSpaceExhausted(RuntimeError):
    """Every non-empty subset of the lattice is tabu."""


@dataclass(frozen=True)
class ProposalConfig:
    """Hill-climbing budget. max_steps defaults to 2*m at call time."""

    n_starts: int = 16
    max_steps: int | None = None

    def __post_init__(self) -> None:
        if self.n_starts < 1:
            raise ValueError("n_starts must be at least 1")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be at least 1 when given")


def expected_improvement(mean: float, var: float, incumbent: float) -> float:
    """Closed-form EI of a Gaussian belief over a maximization target.

    Zero variance degenerates to the hinge max(0, mean - incumbent).
    Variance below -1e-10 is rejected; tiny negatives clamp to zero.
    """
    if var < _VAR_TOL:
        raise ValueError(f"variance {var!r} is negative beyond tolerance")
    sigma = math.sqrt(max(var, 0.0))
    if sigma == 0.0:
        return max(0.0, mean - incumbent)
    z = (mean - incumbent) / sigma
    phi = _INV_SQRT_2PI * math.exp(-0.5 * z * z)
    return sigma * (z * float(ndtr(z)) + phi)


def _ei_batch(means: np.ndarray, variances: np.ndarray, incumbent: float) -> np.ndarray:
    if np.any(variances < _VAR_TOL):
        bad = float(np.min(variances))
        raise ValueError(f"variance {bad!r} is negative beyond tolerance")
    var = np.maximum(variances, 0.0)
    sigma = np.sqrt(var)
    out = np.maximum(means - incumbent, 0.0)  # degenerate branch
    pos = sigma > 0.0
    if np.any(pos):
        z = (means[pos] - incumbent) / sigma[pos]
        phi = _INV_SQRT_2PI * np.exp(-0.5 * z * z)
        out[pos] = sigma[pos] * (z * ndtr(z) + phi)
    return out


def _ei_of_rows(model: GPModel, rows: np.ndarray, incumbent: float) -> np.ndarray:
    means, variances = model.posterior_internal(rows)
    return _ei_batch(means, variances, incumbent)


def propose(
    model: GPModel,
    incumbent: float,
    tabu: Collection[SubsetVector],
    cfg: ProposalConfig,
    rng: np.random.Generator,
) -> SubsetVector:
    """Next subset to evaluate: the best non-tabu EI the hill climb can find.

    incumbent is in the model's internal (standardized) target units. Starts
    are the best-evaluated training subset plus fresh cardinality-uniform
    draws. Each step scores every single-bit flip (empty subset and tabu
    members excluded) and moves on strict improvement, breaking ties toward
    the lowest flipped index. If the search never meets a non-tabu subset, a
    uniformly random non-tabu subset is returned; an exhausted lattice is an
    error.
    """
    m = model.m
    max_steps = cfg.max_steps if cfg.max_steps is not None else 2 * m
    tabu_set = frozenset(tabu)

    starts: list[SubsetVector] = []
    if model.n_train > 0:
        best_idx = int(np.argmax(model.targets_std))
        starts.append(SubsetVector.from_numpy(model.inputs[best_idx]))
    while len(starts) < cfg.n_starts:
        starts.append(sample_subset(m, rng))

    best_subset: SubsetVector | None = None
    best_ei = -math.inf

    def consider(subset: SubsetVector, ei: float) -> None:
        nonlocal best_subset, best_ei
        if subset.cardinality == 0 or subset in tabu_set:
            return
        if ei > best_ei:
            best_ei, best_subset = ei, subset

    for start in starts:
        current = start
        current_ei = float(_ei_of_rows(model, current.to_numpy()[None, :], incumbent)[0])
        consider(current, current_ei)
        for _ in range(max_steps):
            flips: list[tuple[int, SubsetVector]] = []
            for j in range(m):
                cand = current.flip(j)
                if cand.cardinality == 0 or cand in tabu_set:
                    continue
                flips.append((j, cand))
            if not flips:
                break
            rows = np.asarray([c.to_numpy() for _, c in flips])
            eis = _ei_of_rows(model, rows, incumbent)
            for (_, cand), ei in zip(flips, eis):
                consider(cand, float(ei))
            k = int(np.argmax(eis))  # argmax returns the first max: lowest flipped index
            if eis[k] > current_ei:
                current, current_ei = flips[k][1], float(eis[k])
            else:
                break

    if best_subset is not None:
        return best_subset
    return _uniform_non_tabu(m, tabu_set, rng)


def _uniform_non_tabu(m: int, tabu: frozenset, rng: np.random.Generator) -> SubsetVector:
    """Uniform over non-tabu non-empty subsets; exact by enumeration when small."""
    if m <= _ENUM_LIMIT_M:
        free = []
        for code in range(1, 1 << m):
            cand = SubsetVector(tuple((code >> j) & 1 for j in range(m)))
            if cand not in tabu:
                free.append(cand)
        if not free:
            raise SearchSpaceExhausted(
                f"search space exhausted: every subset over m={m} is tabu"
            )
        return free[int(rng.integers(len(free)))]
    for _ in range(_REJECTION_ATTEMPTS):
        bits = rng.integers(0, 2, size=m)
        if not bits.any():
            continue
        cand = SubsetVector(tuple(int(b) for b in bits))
        if cand not in tabu:
            return cand
    raise SearchSpaceExhausted(
        f"search space exhausted: no non-tabu subset found over m={m}"
    )
