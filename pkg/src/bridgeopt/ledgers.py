"""Append-only run artifacts: evaluation ledger, milestone ledger, snapshots.

Every artifact is written line-by-line as results are committed, so a killed
run leaves a valid prefix. Resume re-executes the run deterministically; a
LedgerWriter verifies replayed lines byte-for-byte against the existing
prefix and only appends beyond it, which is what makes kill-and-resume
reproduce the exact final ledger.
"""

from __future__ import annotations

import json
from collections import deque
from pathlib import Path
from typing import Callable

from .pool import EvaluationRecord, ExamplePool, load_pool, save_pool

RUN_LEDGER_NAME = "run_ledger.jsonl"
MILESTONES_NAME = "milestones.jsonl"
POOL_DIR_NAME = "pools"


class ResumeConflict(RuntimeError):
    """Replay diverged from the persisted artifacts: config or code drifted."""


def run_ledger_line(record: EvaluationRecord, pool: ExamplePool) -> str:
    payload = {
        "phase": record.phase,
        "round": record.round,
        "iteration": record.iteration,
        "subset_ids": list(record.subset.ids(pool)),
        "metric": record.metric,
        "beta": record.beta,
        "wallclock_ms": record.wallclock_ms,
    }
    return json.dumps(payload, ensure_ascii=False, separators=(",", ":"))


def milestone_line(round_index: int, milestone: str, subset_ids, pool_path, metric) -> str:
    payload = {
        "round": round_index,
        "milestone": milestone,
        "subset_ids": list(subset_ids),
        "pool_path": pool_path,
        "metric": metric,
    }
    return json.dumps(payload, ensure_ascii=False, separators=(",", ":"))


class LedgerWriter:
    """Verify-then-append line writer over one ledger file."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.existing: list[str] = []
        if self.path.exists():
            text = self.path.read_text(encoding="utf-8")
            if text and not text.endswith("\n"):
                # A kill mid-write leaves a partial final line; drop it.
                text = text[: text.rfind("\n") + 1]
                self.path.write_text(text, encoding="utf-8")
            self.existing = [line for line in text.split("\n") if line != ""]
        self._cursor = 0
        self._fh = None

    def write_line(self, line: str) -> bool:
        """True when the line was appended, False when it verified a replay."""
        if self._cursor < len(self.existing):
            if self.existing[self._cursor] != line:
                raise ResumeConflict(
                    f"{self.path.name} line {self._cursor + 1}: replay diverged from the "
                    f"persisted run (existing {self.existing[self._cursor]!r}, replayed {line!r})"
                )
            self._cursor += 1
            return False
        if self._fh is None:
            self._fh = open(self.path, "a", encoding="utf-8")
        self._fh.write(line + "\n")
        self._fh.flush()
        self._cursor += 1
        return True

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def load_run_ledger(path: str | Path) -> list[dict]:
    records = []
    text = Path(path).read_text(encoding="utf-8")
    for line in text.split("\n"):
        if line:
            records.append(json.loads(line))
    return records


class RunMemo:
    """FIFO of persisted evaluation records, consumed by a resumed run.

    Evaluations replay in the exact order they were committed; while records
    remain, the stored (metric, wallclock) pair answers the call and the
    evaluator is never invoked. The ledger writer verifies alignment on the
    very next write, so a diverging replay cannot silently consume records.
    """

    def __init__(self, records: list[dict]):
        self._queue = deque(records)

    def __len__(self) -> int:
        return len(self._queue)

    def pop(self) -> dict | None:
        if self._queue:
            return self._queue.popleft()
        return None


class RunIO:
    """The persistent artifacts of one run directory, resume-aware."""

    def __init__(self, out_dir: str | Path):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        (self.dir / POOL_DIR_NAME).mkdir(exist_ok=True)
        self.run_ledger = LedgerWriter(self.dir / RUN_LEDGER_NAME)
        self.milestones = LedgerWriter(self.dir / MILESTONES_NAME)
        persisted = [json.loads(line) for line in self.run_ledger.existing]
        self.memo = RunMemo(persisted)

    def write_record(self, record: EvaluationRecord, pool: ExamplePool) -> None:
        self.run_ledger.write_line(run_ledger_line(record, pool))

    def record_sink(self, pool: ExamplePool) -> Callable[[EvaluationRecord], None]:
        def sink(record: EvaluationRecord) -> None:
            self.write_record(record, pool)

        return sink

    def write_milestone(self, round_index: int, milestone: str, subset_ids, pool_path, metric) -> None:
        self.milestones.write_line(
            milestone_line(round_index, milestone, subset_ids, pool_path, metric)
        )

    def snapshot_path(self, round_index: int) -> str:
        return f"{POOL_DIR_NAME}/pool_round_{round_index}.jsonl"

    def snapshot_pool(self, pool: ExamplePool, round_index: int) -> str:
        """Persist the round's pool; an existing snapshot must match exactly."""
        rel = self.snapshot_path(round_index)
        path = self.dir / rel
        if path.exists():
            tmp = path.with_suffix(".verify")
            save_pool(pool, tmp)
            same = tmp.read_bytes() == path.read_bytes()
            tmp.unlink()
            if not same:
                raise ResumeConflict(
                    f"{rel}: replayed pool diverged from the persisted snapshot"
                )
        else:
            save_pool(pool, path)
        return rel

    def load_snapshot(self, round_index: int) -> ExamplePool | None:
        path = self.dir / self.snapshot_path(round_index)
        if not path.exists():
            return None
        return load_pool(path, round_index)

    def close(self) -> None:
        self.run_ledger.close()
        self.milestones.close()
