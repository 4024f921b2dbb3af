import numpy as np
import pytest

from bridgeopt.baselines import HashEmbedder
from bridgeopt.ledgers import RunIO
from bridgeopt.optimizer import OptimizerConfig
from bridgeopt.orchestrator import (
    DatasetRefs,
    MilestoneLedger,
    OrchestratorConfig,
    dispatch_run,
    run_bridge,
    run_iterative_reinforced,
    run_mt,
    run_restricted,
)
from bridgeopt.pool import Example, ExamplePool, base_id
from bridgeopt.runtime import (
    EvaluationError,
    EvaluatorSpec,
    GenerationModelSpec,
    SyntheticBackend,
)


def backend(q, *, slope=50.0, pull=0.5, qn=0.0, noise_sd=0.0, **kw):
    eval_spec = EvaluatorSpec(kind="additive", params={"q": list(q)}, noise_sd=noise_sd)
    gen_spec = GenerationModelSpec(
        pull_rate=pull, quality_noise_sd=qn, correctness_slope=slope
    )
    return SyntheticBackend(eval_spec, gen_spec, **kw)


class CountingEval:
    """Evaluator handle proxy that counts pass-through calls."""

    def __init__(self, inner):
        self.inner = inner
        self.calls = 0

    def evaluate(self, pool, subset, noise_tag=0):
        self.calls += 1
        return self.inner.evaluate(pool, subset, noise_tag)


class ListGenerator:
    """Fixed pool per round, for poking at engine edge cases."""

    prefers_snapshot = False

    def __init__(self, pools_by_round):
        self.pools = pools_by_round

    def generate(self, pool, seed_ids, round_index, rng):
        return self.pools[round_index]


def flat_pool(ids, round_index=0, correct=True):
    return ExamplePool(
        [
            Example(id=i, input=f"i-{i}", rationale="r", output="o", correct=correct, meta={})
            for i in ids
        ],
        round_index,
    )


SMALL_OPT = OptimizerConfig(n_eval=6)


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValueError, match="rounds"):
            OrchestratorConfig(rounds=0)
        with pytest.raises(ValueError, match="unknown optimize_slot"):
            OrchestratorConfig(optimize_slot="grid")
        with pytest.raises(ValueError, match="unknown mode"):
            OrchestratorConfig(mode="extreme")
        with pytest.raises(ValueError, match="slot_k"):
            OrchestratorConfig(slot_k=0)
        with pytest.raises(ValueError, match="slot_k"):
            OrchestratorConfig(slot_k="some")
        with pytest.raises(ValueError, match="embedding_dim"):
            OrchestratorConfig(embedding_dim=0)
        assert OrchestratorConfig(slot_k="ALL").slot_k == "ALL"

    def test_default_milestones_standard(self):
        cfg = OrchestratorConfig(rounds=3)
        assert cfg.resolved_milestones("standard") == ("1O", "1G", "2O", "2G", "3O")
        assert OrchestratorConfig(rounds=1).resolved_milestones("standard") == ("1O",)

    def test_default_milestones_iterative(self):
        cfg = OrchestratorConfig(rounds=3)
        assert cfg.resolved_milestones("iterative_reinforced") == ("1", "2", "3")

    def test_explicit_milestones_win(self):
        cfg = OrchestratorConfig(rounds=3, milestones=("2O", "3G"))
        assert cfg.resolved_milestones("standard") == ("2O", "3G")


class TestStandardMode:
    def test_three_round_milestone_sequence(self):
        be = backend([0.9, 0.8, 0.7, 0.6])
        cfg = OrchestratorConfig(rounds=3, optimizer=SMALL_OPT)
        led = run_bridge(
            cfg, DatasetRefs(), be.evaluator(), be, seed=3,
            milestone_evaluator=be.milestone_evaluator(),
        )
        assert [e.milestone for e in led.entries] == ["1O", "1G", "2O", "2G", "3O"]
        assert [e.round for e in led.entries] == [1, 1, 2, 2, 3]
        # the final round optimizes but does not regenerate
        assert set(be.populations) == {0, 1, 2}

    def test_generate_milestone_covers_whole_pool(self):
        be = backend([0.9, 0.8, 0.7])
        cfg = OrchestratorConfig(rounds=2, optimizer=SMALL_OPT)
        led = run_bridge(
            cfg, DatasetRefs(), be.evaluator(), be, seed=1,
            milestone_evaluator=be.milestone_evaluator(),
        )
        g1 = next(e for e in led.entries if e.milestone == "1G")
        assert all(eid.endswith("#r1") for eid in g1.subset_ids)
        assert len(g1.subset_ids) >= 1
        o1 = next(e for e in led.entries if e.milestone == "1O")
        assert all("#" not in eid for eid in o1.subset_ids)

    def test_exact_evaluator_call_budget(self):
        be = backend([0.9, 0.8, 0.7, 0.6])
        opt_eval = CountingEval(be.evaluator())
        mile_eval = CountingEval(be.milestone_evaluator())
        cfg = OrchestratorConfig(rounds=2, optimizer=OptimizerConfig(n_eval=8))
        led = run_bridge(
            cfg, DatasetRefs(), opt_eval, be, seed=7, milestone_evaluator=mile_eval
        )
        assert opt_eval.calls == 16  # two optimize slots, n_eval each
        assert mile_eval.calls == len(led.entries) == 3

    def test_deterministic_given_seed(self):
        def once():
            be = backend([0.9, 0.5, 0.7, 0.3, 0.8])
            cfg = OrchestratorConfig(rounds=2, optimizer=SMALL_OPT)
            return run_bridge(
                cfg, DatasetRefs(), be.evaluator(), be, seed=11,
                milestone_evaluator=be.milestone_evaluator(),
            )

        assert once().entries == once().entries

    def test_seed_changes_trajectory(self):
        def once(seed):
            be = backend([0.9, 0.5, 0.7, 0.3, 0.8], qn=0.05)
            cfg = OrchestratorConfig(rounds=2, optimizer=SMALL_OPT)
            return run_bridge(
                cfg, DatasetRefs(), be.evaluator(), be, seed=seed,
                milestone_evaluator=be.milestone_evaluator(),
            )

        assert once(1).entries != once(2).entries

    def test_initial_pool_must_have_correct_examples(self):
        be = backend([0.9, 0.8])
        cfg = OrchestratorConfig(rounds=1, optimizer=SMALL_OPT)
        with pytest.raises(EvaluationError, match="initial pool has no correct examples"):
            run_bridge(
                cfg, DatasetRefs(), be.evaluator(), be, seed=0,
                initial_pool=flat_pool(("a", "b"), correct=False),
            )

    def test_empty_regeneration_is_an_error(self):
        gen = ListGenerator({1: flat_pool(("x",), 1, correct=False)})

        class FlatEval:
            def evaluate(self, pool, subset, noise_tag=0):
                return subset.cardinality / len(pool)

        cfg = OrchestratorConfig(rounds=1, milestones=("1O", "1G"), optimizer=SMALL_OPT)
        with pytest.raises(EvaluationError, match="no correct examples generated at round 1"):
            run_bridge(
                cfg, DatasetRefs(), FlatEval(), gen, seed=0,
                initial_pool=flat_pool(("a", "b", "c")),
            )

    def test_milestone_ledger_lookup(self):
        led = MilestoneLedger([])
        with pytest.raises(KeyError, match="no milestone '9O'"):
            led.metric_of("9O")


class TestIterativeReinforced:
    def test_no_optimization_and_numeric_milestones(self):
        be = backend([0.9, 0.8, 0.7])
        opt_eval = CountingEval(be.evaluator())
        cfg = OrchestratorConfig(rounds=3, mode="iterative_reinforced", optimizer=SMALL_OPT)
        led = run_iterative_reinforced(
            cfg, DatasetRefs(), opt_eval, be, seed=5,
            milestone_evaluator=be.milestone_evaluator(),
        )
        assert opt_eval.calls == 0
        assert [e.milestone for e in led.entries] == ["1", "2", "3"]
        # every milestone is the full regenerated pool
        for e in led.entries:
            assert all(eid.endswith(f"#r{e.round}") for eid in e.subset_ids)
        assert set(be.populations) == {0, 1, 2, 3}


class TestRestrictedMode:
    def test_regenerated_pools_keep_only_round_zero_base_ids(self):
        # ex2 is hopeless at bootstrap, revived by the pull toward good seeds
        q = [0.9, 0.85, -0.5]
        cfg = OrchestratorConfig(rounds=2, optimizer=SMALL_OPT)

        be_std = backend(q, pull=1.0)
        led_std = run_bridge(
            cfg, DatasetRefs(), be_std.evaluator(), be_std, seed=2,
            milestone_evaluator=be_std.milestone_evaluator(),
        )
        g1_std = next(e for e in led_std.entries if e.milestone == "1G")
        assert "ex2#r1" in g1_std.subset_ids

        be_res = backend(q, pull=1.0)
        led_res = run_restricted(
            cfg, DatasetRefs(), be_res.evaluator(), be_res, seed=2,
            milestone_evaluator=be_res.milestone_evaluator(),
        )
        g1_res = next(e for e in led_res.entries if e.milestone == "1G")
        assert "ex2#r1" not in g1_res.subset_ids
        assert {base_id(i) for i in g1_res.subset_ids} <= {"ex0", "ex1"}


class TestMtMode:
    def make_backend(self):
        return backend(
            [0.9, -0.8, 0.7], aux_quality={"t1": 0.9, "v1": 0.8}, mt_mode=True
        )

    def test_preconditions(self):
        be = self.make_backend()
        cfg = OrchestratorConfig(rounds=1, mode="mt", optimizer=SMALL_OPT)
        with pytest.raises(ValueError, match="disjoint train/validation.*overlap: \\['t1'\\]"):
            run_mt(
                cfg, DatasetRefs(train=("t1",), validation=("t1",), unlabeled=("u0",)),
                be.evaluator(), be, seed=0,
            )
        with pytest.raises(ValueError, match="non-empty unlabeled set"):
            run_mt(
                cfg, DatasetRefs(train=("t1",), validation=("v1",)),
                be.evaluator(), be, seed=0,
            )
        with pytest.raises(ValueError, match="non-empty train set"):
            run_mt(
                cfg, DatasetRefs(train=(), validation=("v1",), unlabeled=("u0",)),
                be.evaluator(), be, seed=0,
            )

    def test_no_correctness_filtering(self):
        be = self.make_backend()
        cfg = OrchestratorConfig(rounds=2, mode="mt", optimizer=SMALL_OPT)
        data = DatasetRefs(train=("t1",), validation=("v1",), unlabeled=("u0", "u1"))
        led = run_mt(
            cfg, data, be.evaluator(), be, seed=4,
            milestone_evaluator=be.milestone_evaluator(),
        )
        assert [e.milestone for e in led.entries] == ["1O", "1G", "2O"]
        g1 = next(e for e in led.entries if e.milestone == "1G")
        # ex1 has strongly negative quality yet stays in the pool
        assert set(g1.subset_ids) == {"ex0#r1", "ex1#r1", "ex2#r1"}


class TestSlots:
    def test_embedding_slots_require_embedder(self):
        be = backend([0.9, 0.8, 0.7])
        for slot in ("retrieval", "diversity"):
            cfg = OrchestratorConfig(rounds=1, optimize_slot=slot, optimizer=SMALL_OPT)
            with pytest.raises(ValueError, match=f"optimize_slot {slot!r} requires an embedder"):
                run_bridge(cfg, DatasetRefs(), be.evaluator(), be, seed=0)

    @pytest.mark.parametrize("slot", ["retrieval", "diversity"])
    def test_embedding_slots_pick_slot_k_examples(self, slot):
        be = backend([0.9, 0.8, 0.7, 0.6, 0.5])
        cfg = OrchestratorConfig(
            rounds=1, optimize_slot=slot, slot_k=2, optimizer=SMALL_OPT
        )
        led = run_bridge(
            cfg, DatasetRefs(), be.evaluator(), be, seed=9,
            milestone_evaluator=be.milestone_evaluator(),
            embedder=HashEmbedder(dim=8),
        )
        o1 = led.entries[0]
        assert o1.milestone == "1O"
        assert len(o1.subset_ids) == 2
        assert o1.metric is not None

    def test_slot_k_all_selects_everything(self):
        be = backend([0.9, 0.8, 0.7])
        cfg = OrchestratorConfig(
            rounds=1, optimize_slot="retrieval", slot_k="all", optimizer=SMALL_OPT
        )
        led = run_bridge(
            cfg, DatasetRefs(), be.evaluator(), be, seed=9,
            milestone_evaluator=be.milestone_evaluator(),
            embedder=HashEmbedder(dim=8),
        )
        assert len(led.entries[0].subset_ids) == 3

    def test_rs_slot_runs_random_search(self):
        be = backend([0.9, 0.8, 0.7])
        opt_eval = CountingEval(be.evaluator())
        cfg = OrchestratorConfig(rounds=1, optimize_slot="rs", optimizer=OptimizerConfig(n_eval=5))
        led = run_bridge(cfg, DatasetRefs(), opt_eval, be, seed=9)
        assert opt_eval.calls == 5
        assert led.entries[0].metric is not None  # falls back to the slot's best

    def test_dispatch_run_honors_mode(self):
        be = backend([0.9, 0.8, 0.7])
        opt_eval = CountingEval(be.evaluator())
        cfg = OrchestratorConfig(rounds=2, mode="iterative_reinforced", optimizer=SMALL_OPT)
        led = dispatch_run(
            cfg, DatasetRefs(), opt_eval, be, seed=5,
            milestone_evaluator=be.milestone_evaluator(),
        )
        assert opt_eval.calls == 0
        assert [e.milestone for e in led.entries] == ["1", "2"]


class TestResume:
    def run_once(self, out_dir, *, truncate_after=None):
        be = backend([0.9, 0.5, 0.7, 0.3], noise_sd=0.02)
        opt_eval = CountingEval(be.evaluator())
        mile_eval = CountingEval(be.milestone_evaluator())
        io = RunIO(out_dir)
        cfg = OrchestratorConfig(rounds=2, optimizer=SMALL_OPT)
        led = run_bridge(
            cfg, DatasetRefs(), opt_eval, be, seed=13,
            milestone_evaluator=mile_eval, io=io,
        )
        io.close()
        return led, opt_eval.calls, mile_eval.calls

    def test_full_replay_consumes_memo_without_new_calls(self, tmp_path):
        run_dir = tmp_path / "run"
        led1, opt_calls, mile_calls = self.run_once(run_dir)
        assert opt_calls > 0 and mile_calls > 0
        ledger_bytes = (run_dir / "run_ledger.jsonl").read_bytes()
        milestones_bytes = (run_dir / "milestones.jsonl").read_bytes()

        led2, opt_calls2, mile_calls2 = self.run_once(run_dir)
        assert opt_calls2 == 0
        assert mile_calls2 == 0
        assert led2.entries == led1.entries
        assert (run_dir / "run_ledger.jsonl").read_bytes() == ledger_bytes
        assert (run_dir / "milestones.jsonl").read_bytes() == milestones_bytes

    def test_kill_and_resume_rebuilds_identical_ledger(self, tmp_path):
        run_dir = tmp_path / "run"
        self.run_once(run_dir)
        ledger_path = run_dir / "run_ledger.jsonl"
        final_bytes = ledger_path.read_bytes()
        milestones_bytes = (run_dir / "milestones.jsonl").read_bytes()

        lines = final_bytes.decode().splitlines(keepends=True)
        cut = len(lines) // 2
        # simulate a kill mid-write: valid prefix plus a torn final line
        ledger_path.write_bytes("".join(lines[:cut]).encode() + b'{"phase":"bo","rou')
        (run_dir / "milestones.jsonl").unlink()

        _, opt_calls, _ = self.run_once(run_dir)
        assert 0 < opt_calls < 12  # only the missing tail is recomputed
        assert ledger_path.read_bytes() == final_bytes
        assert (run_dir / "milestones.jsonl").read_bytes() == milestones_bytes
