"""Demonstration pools, subset vectors, and the line-delimited pool file format.

A pool is an ordered collection of worked examples (input, rationale, output)
with unique string ids. Subsets of a pool are binary membership vectors over
the pool's index space; they are the search space every other module operates
on.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

POOL_FIELDS = ("id", "input", "rationale", "output", "correct", "meta")

# Evaluation provenance labels used in run ledgers.
PHASES = ("init", "bo", "rs", "milestone", "sweep")

_ROUND_SUFFIX = re.compile(r"#r\d+$")


class PoolFormatError(ValueError):
    """A pool file violates the line-delimited record format."""


def base_id(example_id: str) -> str:
    """Strip the regeneration suffix: base_id("ex7#r2") == "ex7"."""
    return _ROUND_SUFFIX.sub("", example_id)


@dataclass(frozen=True)
class Example:
    """One worked demonstration: a task input with its rationale and answer."""

    id: str
    input: str
    rationale: str
    output: str
    correct: bool
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        for name in ("id", "input", "rationale", "output"):
            if not isinstance(getattr(self, name), str):
                raise ValueError(f"example field {name!r} must be a string")
        if not isinstance(self.correct, bool):
            raise ValueError("example field 'correct' must be a boolean")
        if not isinstance(self.meta, dict):
            raise ValueError("example field 'meta' must be an object")


class ExamplePool:
    """An ordered, id-unique collection of examples for one round."""

    def __init__(self, examples: Sequence[Example], round_index: int = 0):
        self.examples: tuple[Example, ...] = tuple(examples)
        self.round = int(round_index)
        seen: dict[str, int] = {}
        for i, ex in enumerate(self.examples):
            if ex.id in seen:
                raise PoolFormatError(f"duplicate example id {ex.id!r}")
            seen[ex.id] = i
        self._index = seen

    def __len__(self) -> int:
        return len(self.examples)

    def __iter__(self) -> Iterator[Example]:
        return iter(self.examples)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, ExamplePool)
            and self.examples == other.examples
            and self.round == other.round
        )

    @property
    def ids(self) -> tuple[str, ...]:
        return tuple(ex.id for ex in self.examples)

    def index_of(self, example_id: str) -> int:
        try:
            return self._index[example_id]
        except KeyError:
            raise KeyError(f"unknown example id {example_id!r}") from None

    def restrict_to(self, allowed_base_ids: Iterable[str], round_index: int | None = None) -> "ExamplePool":
        """Sub-pool keeping only examples whose base id is allowed."""
        allowed = set(allowed_base_ids)
        kept = [ex for ex in self.examples if base_id(ex.id) in allowed]
        return ExamplePool(kept, self.round if round_index is None else round_index)


@dataclass(frozen=True)
class SubsetVector:
    """Binary membership vector over a pool's index space."""

    bits: tuple[int, ...]

    def __post_init__(self) -> None:
        if any(b not in (0, 1) for b in self.bits):
            raise ValueError("subset bits must be 0 or 1")

    @classmethod
    def from_indices(cls, m: int, indices: Iterable[int]) -> "SubsetVector":
        bits = [0] * m
        for i in indices:
            bits[i] = 1
        return cls(tuple(bits))

    @classmethod
    def from_numpy(cls, arr: np.ndarray) -> "SubsetVector":
        return cls(tuple(int(round(float(v))) for v in np.asarray(arr).ravel()))

    @classmethod
    def full(cls, m: int) -> "SubsetVector":
        return cls((1,) * m)

    def to_numpy(self) -> np.ndarray:
        return np.asarray(self.bits, dtype=np.float64)

    def __len__(self) -> int:
        return len(self.bits)

    @property
    def cardinality(self) -> int:
        return sum(self.bits)

    @property
    def indices(self) -> tuple[int, ...]:
        return tuple(i for i, b in enumerate(self.bits) if b)

    def ids(self, pool: ExamplePool) -> tuple[str, ...]:
        if len(self.bits) != len(pool):
            raise ValueError("subset length does not match pool size")
        return tuple(pool.examples[i].id for i in self.indices)

    def flip(self, j: int) -> "SubsetVector":
        bits = list(self.bits)
        bits[j] = 1 - bits[j]
        return SubsetVector(tuple(bits))


@dataclass(frozen=True)
class EvaluationRecord:
    """One committed evaluator call, as it appears in the run ledger.

    beta is the scalarization weight that drove the proposal; it is None for
    phases that never scalarize (init, rs, milestone, sweep).
    """

    subset: SubsetVector
    metric: float
    phase: str
    round: int
    iteration: int
    wallclock_ms: int
    beta: float | None = None

    def __post_init__(self) -> None:
        if self.phase not in PHASES:
            raise ValueError(f"unknown phase {self.phase!r}; expected one of {PHASES}")
        if not math.isfinite(self.metric):
            raise ValueError(f"metric must be finite, got {self.metric!r}")
        if self.wallclock_ms < 0:
            raise ValueError("wallclock_ms must be non-negative")


def example_from_record(record, where: str = "record") -> Example:
    """Validate one parsed pool record: the six fields, exactly, well-typed."""
    if not isinstance(record, dict):
        raise PoolFormatError(f"{where}: record must be a JSON object")
    got = set(record)
    want = set(POOL_FIELDS)
    if got != want:
        missing = sorted(want - got)
        extra = sorted(got - want)
        parts = []
        if missing:
            parts.append(f"missing fields {missing}")
        if extra:
            parts.append(f"unexpected fields {extra}")
        raise PoolFormatError(f"{where}: " + ", ".join(parts))
    try:
        return Example(**record)
    except ValueError as err:
        raise PoolFormatError(f"{where}: {err}") from None


def load_pool(path: str | Path, round_index: int = 0) -> ExamplePool:
    """Parse a line-delimited pool file. Errors name the offending line."""
    text = Path(path).read_text(encoding="utf-8")
    examples: list[Example] = []
    seen: dict[str, int] = {}
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()  # trailing newline is canonical, not a record
    for lineno, line in enumerate(lines, start=1):
        if line.strip() == "":
            raise PoolFormatError(f"line {lineno}: empty line in pool file")
        try:
            record = json.loads(line)
        except json.JSONDecodeError as err:
            raise PoolFormatError(f"line {lineno}: invalid JSON: {err.msg}") from None
        ex = example_from_record(record, where=f"line {lineno}")
        if ex.id in seen:
            raise PoolFormatError(
                f"line {lineno}: duplicate example id {ex.id!r} (first seen on line {seen[ex.id]})"
            )
        seen[ex.id] = lineno
        examples.append(ex)
    if not examples:
        raise PoolFormatError(f"empty pool: {path}")
    return ExamplePool(examples, round_index)


def save_pool(pool: ExamplePool, path: str | Path) -> None:
    """Write the canonical line-delimited form (UTF-8, one record per line)."""
    with open(path, "w", encoding="utf-8") as fh:
        for ex in pool.examples:
            record = {
                "id": ex.id,
                "input": ex.input,
                "rationale": ex.rationale,
                "output": ex.output,
                "correct": ex.correct,
                "meta": ex.meta,
            }
            fh.write(json.dumps(record, ensure_ascii=False, separators=(",", ":")))
            fh.write("\n")


def subset_from_ids(pool: ExamplePool, ids: Iterable[str]) -> SubsetVector:
    """Membership vector for the given ids; duplicates collapse silently."""
    bits = [0] * len(pool)
    for example_id in ids:
        bits[pool.index_of(example_id)] = 1
    return SubsetVector(tuple(bits))


def sample_subset(m: int, rng: np.random.Generator) -> SubsetVector:
    """Draw a non-empty subset, uniform over cardinalities.

    Cardinality c is uniform on {1..m}; membership at fixed c is uniform via a
    partial Fisher-Yates shuffle, so every c-subset is equally likely.
    """
    if m < 1:
        raise ValueError("pool size must be at least 1")
    c = int(rng.integers(1, m + 1))
    idx = list(range(m))
    for i in range(c):
        j = int(rng.integers(i, m))
        idx[i], idx[j] = idx[j], idx[i]
    bits = [0] * m
    for i in idx[:c]:
        bits[i] = 1
    return SubsetVector(tuple(bits))
