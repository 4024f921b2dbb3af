"""The outer loop: alternate subset optimization with pool regeneration.

Round k optimizes a subset of pool E_{k-1}, reports the kO milestone,
re-generates the pool seeded by that subset, and reports kG over the new
pool. Variants reuse the same engine: iterative reinforcement skips the
optimize slot and seeds generation with the whole pool; restricted mode
intersects every regenerated pool with the ids that were correct at round 0;
the translation setup draws the initial pool from an unlabeled set and seeds
generation with the optimized subset plus the gold train ids.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

from .baselines import Embedder, diverse_k, embed_pool, mean_query, retrieve_topk
from .ledgers import RunIO
from .optimizer import OptimizerConfig, bayes_opt, random_search
from .pool import EvaluationRecord, ExamplePool, SubsetVector, base_id
from .rng import STREAM_GENERATE, STREAM_OPTIMIZE, substream
from .runtime import EvaluationError, EvaluatorHandle, GeneratorHandle

OPTIMIZE_SLOTS = ("bo", "rs", "retrieval", "diversity")
MODES = ("standard", "iterative_reinforced", "restricted", "mt")


@dataclass(frozen=True)
class DatasetRefs:
    """Dataset handles as id collections; validation may alias train."""

    train: tuple[str, ...] = ()
    validation: tuple[str, ...] = ()
    unlabeled: tuple[str, ...] | None = None


@dataclass(frozen=True)
class OrchestratorConfig:
    rounds: int = 3
    optimize_slot: str = "bo"
    mode: str = "standard"
    milestones: tuple[str, ...] | None = None
    slot_k: "int | str" = 10
    embedding_dim: int = 32
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)

    def __post_init__(self) -> None:
        if self.rounds < 1:
            raise ValueError("rounds must be at least 1")
        if self.optimize_slot not in OPTIMIZE_SLOTS:
            raise ValueError(
                f"unknown optimize_slot {self.optimize_slot!r}; expected one of {OPTIMIZE_SLOTS}"
            )
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if isinstance(self.slot_k, str):
            if self.slot_k.lower() != "all":
                raise ValueError("slot_k must be a positive integer or 'all'")
        elif self.slot_k < 1:
            raise ValueError("slot_k must be a positive integer or 'all'")
        if self.embedding_dim < 1:
            raise ValueError("embedding_dim must be at least 1")

    def resolved_milestones(self, mode: str) -> tuple[str, ...]:
        if self.milestones is not None:
            return self.milestones
        if mode == "iterative_reinforced":
            return tuple(str(k) for k in range(1, self.rounds + 1))
        keys: list[str] = []
        for k in range(1, self.rounds + 1):
            keys.append(f"{k}O")
            if k < self.rounds:
                keys.append(f"{k}G")
        return tuple(keys)


@dataclass(frozen=True)
class MilestoneEntry:
    round: int
    milestone: str
    subset_ids: tuple[str, ...]
    pool_path: str | None
    metric: float | None


@dataclass
class MilestoneLedger:
    entries: list[MilestoneEntry]

    def metric_of(self, milestone: str) -> float | None:
        for e in self.entries:
            if e.milestone == milestone:
                return e.metric
        raise KeyError(f"no milestone {milestone!r} in ledger")


def _filter_correct(pool: ExamplePool) -> ExamplePool:
    kept = [ex for ex in pool.examples if ex.correct]
    return ExamplePool(kept, pool.round)


def _unpack_metric(out) -> tuple[float, int]:
    if isinstance(out, tuple):
        return float(out[0]), int(out[1])
    return float(out), 0


class _Engine:
    def __init__(
        self,
        cfg: OrchestratorConfig,
        data: DatasetRefs,
        evaluator: EvaluatorHandle,
        generator: GeneratorHandle,
        *,
        seed: int,
        mode: str,
        initial_pool: ExamplePool | None,
        milestone_evaluator: EvaluatorHandle | None,
        io: RunIO | None,
        embedder: Embedder | None,
    ):
        self.cfg = cfg
        self.data = data
        self.evaluator = evaluator
        self.generator = generator
        self.seed = seed
        self.mode = mode
        self.initial_pool = initial_pool
        self.milestone_evaluator = milestone_evaluator
        self.io = io
        self.embedder = embedder
        self.wanted = set(cfg.resolved_milestones(mode))
        self.entries: list[MilestoneEntry] = []
        self.snapshot_paths: dict[int, str | None] = {}

    # -- plumbing -----------------------------------------------------------

    def _memo_pop(self):
        if self.io is not None:
            return self.io.memo.pop()
        return None

    def _replay_eval(self, pool: ExamplePool):
        """Evaluator closure for the optimizer: persisted records answer first."""

        def call(subset: SubsetVector):
            stored = self._memo_pop()
            if stored is not None:
                return float(stored["metric"]), int(stored["wallclock_ms"])
            return self.evaluator.evaluate(pool, subset)

        return call

    def _sink(self, pool: ExamplePool):
        if self.io is None:
            return None
        return self.io.record_sink(pool)

    def _snapshot(self, pool: ExamplePool, k: int) -> str | None:
        if self.io is None:
            self.snapshot_paths[k] = None
            return None
        rel = self.io.snapshot_pool(pool, k)
        self.snapshot_paths[k] = rel
        return rel

    def _milestone(self, key: str, k: int, pool: ExamplePool, subset: SubsetVector,
                   iteration: int, fallback_metric: float | None) -> None:
        metric: float | None
        if self.milestone_evaluator is not None:
            stored = self._memo_pop()
            if stored is not None:
                metric, ms = float(stored["metric"]), int(stored["wallclock_ms"])
            else:
                metric, ms = _unpack_metric(self.milestone_evaluator.evaluate(pool, subset))
            record = EvaluationRecord(subset, metric, "milestone", k, iteration, ms)
            if self.io is not None:
                self.io.write_record(record, pool)
        else:
            metric = fallback_metric
        ids = subset.ids(pool)
        pool_path = self.snapshot_paths.get(pool.round)
        entry = MilestoneEntry(k, key, ids, pool_path, metric)
        self.entries.append(entry)
        if self.io is not None:
            self.io.write_milestone(k, key, list(ids), pool_path, metric)

    # -- slots ---------------------------------------------------------------

    def _optimize(self, pool: ExamplePool, k: int) -> tuple[SubsetVector, float | None]:
        slot = self.cfg.optimize_slot
        rng = substream(self.seed, k, STREAM_OPTIMIZE)
        if slot in ("bo", "rs"):
            fn = bayes_opt if slot == "bo" else random_search
            result = fn(
                self._replay_eval(pool),
                pool,
                self.cfg.optimizer,
                rng,
                round_index=k,
                on_record=self._sink(pool),
            )
            return result.best_subset, result.best_metric
        if self.embedder is None:
            raise ValueError(f"optimize_slot {slot!r} requires an embedder")
        emb = embed_pool(pool, self.embedder)
        m = len(pool)
        slot_k = self.cfg.slot_k
        if slot == "retrieval":
            k_eff = "all" if isinstance(slot_k, str) else min(slot_k, m)
            idxs = retrieve_topk(emb, mean_query(emb), k_eff)
        else:
            k_eff = m if isinstance(slot_k, str) else min(slot_k, m)
            idxs = diverse_k(emb, k_eff, rng)
        return SubsetVector.from_indices(m, idxs), None

    def _generate(self, k: int, prev: ExamplePool | None, seed_ids: Sequence[str]) -> ExamplePool:
        rng = substream(self.seed, k, STREAM_GENERATE)
        if self.io is not None and self.generator.prefers_snapshot:
            snap = self.io.load_snapshot(k)
            if snap is not None:
                return snap
        return self.generator.generate(prev, seed_ids, k, rng)

    # -- engine --------------------------------------------------------------

    def run(self) -> MilestoneLedger:
        cfg, mode = self.cfg, self.mode
        if mode == "mt":
            overlap = set(self.data.train) & set(self.data.validation)
            if overlap:
                raise ValueError(
                    f"mt mode requires disjoint train/validation sets; overlap: {sorted(overlap)}"
                )
            if not self.data.unlabeled:
                raise ValueError("mt mode requires a non-empty unlabeled set")
            if not self.data.train:
                raise ValueError("mt mode requires a non-empty train set")

        if self.initial_pool is not None:
            pool0 = self.initial_pool
        else:
            seeds0: tuple[str, ...] = ()
            if mode == "mt":
                seeds0 = tuple(self.data.train) + tuple(self.data.validation)
            pool0 = self._generate(0, None, seeds0)
        if mode != "mt":
            pool0 = _filter_correct(pool0)
        if len(pool0) == 0:
            raise EvaluationError("initial pool has no correct examples")
        allowed_base: set[str] | None = None
        if mode == "restricted":
            allowed_base = {base_id(eid) for eid in pool0.ids}
        self._snapshot(pool0, 0)

        pools: dict[int, ExamplePool] = {0: pool0}
        for k in range(1, cfg.rounds + 1):
            prev = pools[k - 1]
            e_star: SubsetVector | None = None
            slot_best: float | None = None
            if mode != "iterative_reinforced":
                e_star, slot_best = self._optimize(prev, k)
                if f"{k}O" in self.wanted:
                    self._milestone(f"{k}O", k, prev, e_star, 1, slot_best)

            if mode == "iterative_reinforced":
                need_generate = True
                g_key = str(k)
            else:
                g_key = f"{k}G"
                need_generate = k < cfg.rounds or g_key in self.wanted

            if not need_generate:
                continue
            if mode == "iterative_reinforced":
                seed_ids: tuple[str, ...] = prev.ids
            elif mode == "mt":
                seed_ids = e_star.ids(prev) + tuple(self.data.train)
            else:
                seed_ids = e_star.ids(prev)
            pool_k = self._generate(k, prev, seed_ids)
            if mode != "mt":
                pool_k = _filter_correct(pool_k)
            if allowed_base is not None:
                pool_k = pool_k.restrict_to(allowed_base)
            if len(pool_k) == 0:
                raise EvaluationError(f"no correct examples generated at round {k}")
            pools[k] = pool_k
            self._snapshot(pool_k, k)
            if g_key in self.wanted:
                self._milestone(g_key, k, pool_k, SubsetVector.full(len(pool_k)), 2, None)

        return MilestoneLedger(self.entries)


def _run(mode: str, cfg, data, evaluator, generator, *, seed, initial_pool=None,
         milestone_evaluator=None, io=None, embedder=None) -> MilestoneLedger:
    engine = _Engine(
        cfg,
        data,
        evaluator,
        generator,
        seed=seed,
        mode=mode,
        initial_pool=initial_pool,
        milestone_evaluator=milestone_evaluator,
        io=io,
        embedder=embedder,
    )
    return engine.run()


def run_bridge(cfg: OrchestratorConfig, data: DatasetRefs, evaluator, generator, *,
               seed: int, initial_pool: ExamplePool | None = None,
               milestone_evaluator=None, io: RunIO | None = None,
               embedder: Embedder | None = None) -> MilestoneLedger:
    """Standard outer loop: optimize, then regenerate from the optimized subset."""
    return _run("standard", cfg, data, evaluator, generator, seed=seed,
                initial_pool=initial_pool, milestone_evaluator=milestone_evaluator,
                io=io, embedder=embedder)


def run_iterative_reinforced(cfg: OrchestratorConfig, data: DatasetRefs, evaluator, generator, *,
                             seed: int, initial_pool: ExamplePool | None = None,
                             milestone_evaluator=None, io: RunIO | None = None,
                             embedder: Embedder | None = None) -> MilestoneLedger:
    """No subset optimization: every round reseeds generation with the whole pool."""
    return _run("iterative_reinforced", cfg, data, evaluator, generator, seed=seed,
                initial_pool=initial_pool, milestone_evaluator=milestone_evaluator,
                io=io, embedder=embedder)


def run_restricted(cfg: OrchestratorConfig, data: DatasetRefs, evaluator, generator, *,
                   seed: int, initial_pool: ExamplePool | None = None,
                   milestone_evaluator=None, io: RunIO | None = None,
                   embedder: Embedder | None = None) -> MilestoneLedger:
    """Outer loop where regenerated pools keep only ids correct at round 0."""
    return _run("restricted", cfg, data, evaluator, generator, seed=seed,
                initial_pool=initial_pool, milestone_evaluator=milestone_evaluator,
                io=io, embedder=embedder)


def run_mt(cfg: OrchestratorConfig, data: DatasetRefs, evaluator, generator, *,
           seed: int, initial_pool: ExamplePool | None = None,
           milestone_evaluator=None, io: RunIO | None = None,
           embedder: Embedder | None = None) -> MilestoneLedger:
    """Translation-style setup: pools from the unlabeled set, gold train ids as seeds.

    Requires disjoint train/validation handles and a non-empty unlabeled set;
    generated pools skip the correctness filter.
    """
    return _run("mt", cfg, data, evaluator, generator, seed=seed,
                initial_pool=initial_pool, milestone_evaluator=milestone_evaluator,
                io=io, embedder=embedder)


def dispatch_run(cfg: OrchestratorConfig, data: DatasetRefs, evaluator, generator, **kw) -> MilestoneLedger:
    """Run the mode named by the config."""
    ops = {
        "standard": run_bridge,
        "iterative_reinforced": run_iterative_reinforced,
        "restricted": run_restricted,
        "mt": run_mt,
    }
    return ops[cfg.mode](cfg, data, evaluator, generator, **kw)
