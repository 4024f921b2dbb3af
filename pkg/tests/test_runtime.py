import numpy as np
import pytest

from bridgeopt.pool import SubsetVector
from bridgeopt.rng import substream
from bridgeopt.runtime import (
    EvaluatorSpec,
    GenerationModelSpec,
    SyntheticBackend,
    SyntheticPopulation,
    additive_oracle,
    default_normalizer,
    interference_oracle,
    population_from_spec,
    random_population,
    synthetic_bootstrap,
    synthetic_generate,
)


def pop(q, w=None, ids=None):
    q = np.asarray(q, dtype=np.float64)
    m = q.shape[0]
    w = np.zeros((m, m)) if w is None else np.asarray(w, dtype=np.float64)
    ids = tuple(ids or (f"ex{j}" for j in range(m)))
    return SyntheticPopulation(ids, q, w)


def bits(*values):
    return SubsetVector.from_numpy(np.asarray(values, dtype=np.float64))


class TestSpecs:
    def test_evaluator_spec_validation(self):
        with pytest.raises(ValueError, match="unknown evaluator kind"):
            EvaluatorSpec(kind="mystic")
        with pytest.raises(ValueError, match="noise_sd"):
            EvaluatorSpec(kind="additive", noise_sd=-0.1)
        with pytest.raises(ValueError, match="seed"):
            EvaluatorSpec(kind="additive", seed=-1)
        with pytest.raises(ValueError, match=r"unknown evaluator params.*\['command'\]"):
            EvaluatorSpec(kind="additive", params={"command": ["x"]})
        with pytest.raises(ValueError, match=r"unknown evaluator params.*\['m'\]"):
            EvaluatorSpec(kind="external", params={"m": 4})

    def test_generation_spec_validation(self):
        with pytest.raises(ValueError, match="unknown generation kind"):
            GenerationModelSpec(kind="magic")
        with pytest.raises(ValueError, match="pull_rate"):
            GenerationModelSpec(pull_rate=1.5)
        with pytest.raises(ValueError, match="quality_noise_sd"):
            GenerationModelSpec(quality_noise_sd=-0.01)
        with pytest.raises(ValueError, match="correctness_slope"):
            GenerationModelSpec(correctness_slope=0.0)
        with pytest.raises(ValueError, match="unknown generation params"):
            GenerationModelSpec(params={"m": 3})


class TestPopulation:
    def test_validation(self):
        with pytest.raises(ValueError, match="one entry per id"):
            SyntheticPopulation(("a", "b"), np.zeros(3), np.zeros((2, 2)))
        with pytest.raises(ValueError, match="square"):
            SyntheticPopulation(("a", "b"), np.zeros(2), np.zeros((2, 3)))
        with pytest.raises(ValueError, match="symmetric"):
            SyntheticPopulation(("a", "b"), np.zeros(2), np.array([[0.0, 1.0], [0.0, 0.0]]))
        with pytest.raises(ValueError, match="zero diagonal"):
            SyntheticPopulation(("a", "b"), np.zeros(2), np.array([[1.0, 0.0], [0.0, 0.0]]))
        with pytest.raises(ValueError, match="unique"):
            SyntheticPopulation(("a", "a"), np.zeros(2), np.zeros((2, 2)))
        with pytest.raises(KeyError, match="unknown population id"):
            pop([0.5]).index_of("nope")

    def test_random_population_structure(self):
        p = random_population(12, np.random.default_rng(7))
        assert p.size == 12
        assert p.ids == tuple(f"ex{j}" for j in range(12))
        assert np.all(p.q >= 0.05) and np.all(p.q <= 0.95)
        assert np.allclose(p.w, p.w.T)
        assert np.all(np.diag(p.w) == 0.0)
        assert np.all(p.w <= 0.0)  # interference is harmful, never helpful
        assert np.any(p.w < 0.0)

    def test_random_population_additive_has_zero_interactions(self):
        p = random_population(8, np.random.default_rng(3), interference=False)
        assert np.all(p.w == 0.0)

    def test_random_population_rejects_empty(self):
        with pytest.raises(ValueError, match="at least 1"):
            random_population(0, np.random.default_rng(0))


class TestOracles:
    def test_default_normalizer_positive_mass(self):
        assert default_normalizer(pop([0.5, -0.3, 0.2])) == pytest.approx(0.7)
        assert default_normalizer(pop([-0.5, -0.1])) == 1.0

    def test_additive_hand_value(self):
        p = pop([0.5, 0.3, 0.2])
        assert additive_oracle(p, bits(1, 0, 1)) == pytest.approx(0.7)
        assert additive_oracle(p, bits(1, 0, 1), normalizer=2.0) == pytest.approx(0.35)

    def test_additive_saturates_at_one_on_full_positive_selection(self):
        p = pop([0.4, 0.2, 0.9])
        assert additive_oracle(p, bits(1, 1, 1)) == 1.0

    def test_clamped_to_unit_interval(self):
        p = pop([0.5, -5.0])
        assert additive_oracle(p, bits(0, 1)) == 0.0

    def test_interference_reduces_to_additive_when_interactions_vanish(self):
        rng = np.random.default_rng(11)
        p = pop(rng.uniform(0, 1, 6))
        for _ in range(10):
            b = SubsetVector.from_numpy((rng.random(6) < 0.5).astype(float))
            if b.cardinality == 0:
                continue
            assert interference_oracle(p, b) == additive_oracle(p, b)

    def test_interference_pair_term_counted_once(self):
        w = np.array([[0.0, -0.4], [-0.4, 0.0]])
        p = pop([0.6, 0.6], w)
        # lin 1.2, pair contribution -0.4 once (not per ordered pair)
        assert interference_oracle(p, bits(1, 1), normalizer=1.0) == pytest.approx(0.8)

    def test_repeated_calls_bit_exact(self):
        p = pop([0.3, 0.8, 0.1])
        kw = dict(noise_sd=0.05, seed=9, noise_tag=1234)
        a = additive_oracle(p, bits(1, 1, 0), **kw)
        b = additive_oracle(p, bits(1, 1, 0), **kw)
        assert a == b

    def test_noise_varies_with_tag_and_bits(self):
        p = pop([0.3, 0.8, 0.1])
        base = additive_oracle(p, bits(1, 0, 0), noise_sd=0.05, seed=9, noise_tag=1)
        other_tag = additive_oracle(p, bits(1, 0, 0), noise_sd=0.05, seed=9, noise_tag=2)
        other_seed = additive_oracle(p, bits(1, 0, 0), noise_sd=0.05, seed=10, noise_tag=1)
        assert base != other_tag
        assert base != other_seed

    def test_subset_length_checked(self):
        p = pop([0.5, 0.5])
        with pytest.raises(ValueError, match="length"):
            additive_oracle(p, bits(1, 0, 1))
        with pytest.raises(ValueError, match="length"):
            interference_oracle(p, bits(1))


class TestBootstrapAndGenerate:
    def test_bootstrap_keeps_round_zero_ids_unsuffixed(self):
        p = pop([0.9] * 4)
        spec = GenerationModelSpec(correctness_slope=50.0)
        pool = synthetic_bootstrap(p, spec, np.random.default_rng(0))
        assert pool.round == 0
        assert pool.ids == ("ex0", "ex1", "ex2", "ex3")
        assert all(ex.correct for ex in pool)
        assert all(ex.meta["q"] == pytest.approx(0.9) for ex in pool)

    def test_bootstrap_filters_incorrect(self):
        # strongly negative quality: logistic(50 * -0.9) ~ 0, nothing survives
        p = pop([-0.9] * 6)
        spec = GenerationModelSpec(correctness_slope=50.0)
        pool = synthetic_bootstrap(p, spec, np.random.default_rng(0))
        assert len(pool) == 0
        unfiltered = synthetic_bootstrap(
            p, spec, np.random.default_rng(0), filter_correct=False
        )
        assert len(unfiltered) == 6
        assert all(ex.correct for ex in unfiltered)

    def test_bootstrap_deterministic(self):
        p = pop(np.random.default_rng(4).uniform(0, 1, 8))
        spec = GenerationModelSpec()
        a = synthetic_bootstrap(p, spec, np.random.default_rng(5))
        b = synthetic_bootstrap(p, spec, np.random.default_rng(5))
        assert a == b

    def test_zero_pull_is_identity_on_quality(self):
        p = pop([0.2, 0.5, 0.8])
        spec = GenerationModelSpec(pull_rate=0.0, quality_noise_sd=0.0, correctness_slope=50.0)
        new_pop, _ = synthetic_generate(p, bits(1, 0, 1), spec, np.random.default_rng(0))
        assert np.array_equal(new_pop.q, p.q)

    def test_full_pull_collapses_to_seed_mean(self):
        p = pop([0.2, 0.5, 0.8])
        spec = GenerationModelSpec(pull_rate=1.0, quality_noise_sd=0.0, correctness_slope=50.0)
        new_pop, _ = synthetic_generate(p, bits(1, 0, 1), spec, np.random.default_rng(0))
        assert new_pop.q == pytest.approx(np.full(3, 0.5))

    def test_pull_preserves_seed_subset_quality_sum(self):
        rng = np.random.default_rng(17)
        for _ in range(20):
            m = int(rng.integers(2, 10))
            p = pop(rng.uniform(-0.5, 1.0, m))
            b = (rng.random(m) < 0.5).astype(float)
            if b.sum() == 0:
                b[int(rng.integers(0, m))] = 1.0
            sv = SubsetVector.from_numpy(b)
            spec = GenerationModelSpec(
                pull_rate=float(rng.uniform(0, 1)), quality_noise_sd=0.0
            )
            new_pop, _ = synthetic_generate(p, sv, spec, np.random.default_rng(0))
            assert float(new_pop.q @ b) == pytest.approx(float(p.q @ b), abs=1e-12)

    def test_generated_ids_carry_round_suffix(self):
        p = pop([0.9, 0.9])
        spec = GenerationModelSpec(quality_noise_sd=0.0, correctness_slope=50.0)
        _, pool = synthetic_generate(
            p, bits(1, 0), spec, np.random.default_rng(0), round_index=2
        )
        assert pool.round == 2
        assert pool.ids == ("ex0#r2", "ex1#r2")

    def test_seed_subset_required_without_override(self):
        p = pop([0.5, 0.5])
        spec = GenerationModelSpec()
        with pytest.raises(ValueError, match="seed_subset is required"):
            synthetic_generate(p, None, spec, np.random.default_rng(0))
        with pytest.raises(ValueError, match="non-empty"):
            synthetic_generate(p, bits(0, 0), spec, np.random.default_rng(0))

    def test_seed_mean_override_used_verbatim(self):
        p = pop([0.2, 0.6])
        spec = GenerationModelSpec(pull_rate=1.0, quality_noise_sd=0.0)
        new_pop, _ = synthetic_generate(
            p, None, spec, np.random.default_rng(0), seed_mean_override=0.4
        )
        assert new_pop.q == pytest.approx([0.4, 0.4])


class TestPopulationFromSpec:
    def test_explicit_q(self):
        spec = EvaluatorSpec(kind="additive", params={"q": [0.1, 0.9]})
        p = population_from_spec(spec)
        assert p.ids == ("ex0", "ex1")
        assert p.q == pytest.approx([0.1, 0.9])
        assert np.all(p.w == 0.0)

    def test_explicit_w_requires_interference_kind(self):
        w = [[0.0, -0.2], [-0.2, 0.0]]
        spec = EvaluatorSpec(kind="interference", params={"q": [0.5, 0.5], "w": w})
        p = population_from_spec(spec)
        assert p.w[0, 1] == -0.2
        bad = EvaluatorSpec(kind="additive", params={"q": [0.5, 0.5], "w": w})
        with pytest.raises(ValueError, match="do not accept an interaction matrix"):
            population_from_spec(bad)

    def test_sampled_population_is_seed_deterministic(self):
        spec = EvaluatorSpec(kind="interference", params={"m": 6}, seed=42)
        a = population_from_spec(spec)
        b = population_from_spec(spec)
        assert np.array_equal(a.q, b.q)
        assert np.array_equal(a.w, b.w)
        other = population_from_spec(
            EvaluatorSpec(kind="interference", params={"m": 6}, seed=43)
        )
        assert not np.array_equal(a.q, other.q)

    def test_additive_kind_samples_without_interference(self):
        spec = EvaluatorSpec(kind="additive", params={"m": 5}, seed=1)
        assert np.all(population_from_spec(spec).w == 0.0)

    def test_missing_size_and_q_rejected(self):
        with pytest.raises(ValueError, match="either explicit 'q' or a size 'm'"):
            population_from_spec(EvaluatorSpec(kind="additive"))
        with pytest.raises(ValueError, match="no synthetic population"):
            population_from_spec(EvaluatorSpec(kind="external"))


class TestSyntheticBackend:
    def make(self, q, *, noise_sd=0.0, slope=50.0, pull=0.5, qn=0.0, **kw):
        eval_spec = EvaluatorSpec(kind="additive", params={"q": list(q)}, noise_sd=noise_sd)
        gen_spec = GenerationModelSpec(
            pull_rate=pull, quality_noise_sd=qn, correctness_slope=slope
        )
        return SyntheticBackend(eval_spec, gen_spec, **kw)

    def test_anchor_is_universe_size(self):
        be = self.make([0.9, 0.1, 0.4])
        assert be.anchor == 3.0

    def test_external_kind_rejected(self):
        with pytest.raises(ValueError, match="synthetic evaluator kind"):
            SyntheticBackend(EvaluatorSpec(kind="external"), GenerationModelSpec())

    def test_evaluate_round_zero_matches_oracle_with_anchor(self):
        be = self.make([0.9, 0.1, 0.4])
        pool = be.generate(None, (), 0, np.random.default_rng(0))
        assert len(pool) == 3
        sv = SubsetVector.from_indices(3, [0, 2])
        got = be.evaluator().evaluate(pool, sv)
        want = additive_oracle(be.populations[0], bits(1, 0, 1), normalizer=3.0)
        assert got == want == pytest.approx(1.3 / 3.0)

    def test_evaluate_resolves_suffixed_ids(self):
        be = self.make([0.9, 0.8], pull=0.0)
        pool0 = be.generate(None, (), 0, np.random.default_rng(0))
        pool1 = be.generate(pool0, ("ex0",), 1, np.random.default_rng(1))
        assert pool1.ids == ("ex0#r1", "ex1#r1")
        sv = SubsetVector.from_indices(2, [1])
        got = be.evaluator().evaluate(pool1, sv)
        assert got == pytest.approx(0.8 / 2.0)

    def test_namespaces_draw_independent_noise(self):
        be = self.make([0.5, 0.5], noise_sd=0.05)
        pool = be.generate(None, (), 0, np.random.default_rng(0))
        sv = SubsetVector.from_indices(2, [0])
        opt = be.evaluator().evaluate(pool, sv)
        milestone = be.milestone_evaluator().evaluate(pool, sv)
        analysis = be.analysis_evaluator().evaluate(pool, sv)
        assert len({opt, milestone, analysis}) == 3
        assert be.evaluator().evaluate(pool, sv) == opt

    def test_generate_tracks_population_per_round(self):
        be = self.make([0.2, 0.9], pull=1.0)
        pool0 = be.generate(None, (), 0, np.random.default_rng(0))
        be.generate(pool0, ("ex1",), 1, np.random.default_rng(1))
        assert set(be.populations) == {0, 1}
        assert be.populations[1].q == pytest.approx([0.9, 0.9])
        assert np.array_equal(be.populations[0].q, [0.2, 0.9])

    def test_aux_quality_feeds_seed_mean(self):
        be = self.make([0.2, 0.4], pull=1.0, aux_quality={"gold1": 0.9})
        pool0 = be.generate(None, (), 0, np.random.default_rng(0))
        be.generate(pool0, ("gold1",), 1, np.random.default_rng(1))
        assert be.populations[1].q == pytest.approx([0.9, 0.9])

    def test_round_zero_reseed_replaces_base_population(self):
        be = self.make([0.2, 0.8], pull=1.0)
        be.generate(None, ("ex1",), 0, np.random.default_rng(0))
        assert be.populations[0].q == pytest.approx([0.8, 0.8])

    def test_mt_mode_keeps_every_example(self):
        eval_spec = EvaluatorSpec(kind="additive", params={"q": [-0.9] * 4})
        gen_spec = GenerationModelSpec(correctness_slope=50.0, quality_noise_sd=0.0)
        be = SyntheticBackend(eval_spec, gen_spec, mt_mode=True)
        pool = be.generate(None, (), 0, np.random.default_rng(0))
        assert len(pool) == 4
        assert all(ex.correct for ex in pool)

    def test_prefers_snapshot_flag(self):
        assert self.make([0.5]).prefers_snapshot is False

    def test_substream_isolation(self):
        # distinct (seed, round, stream) tuples give distinct generators
        a = substream(7, 1, 2).integers(0, 2**31)
        b = substream(7, 1, 3).integers(0, 2**31)
        c = substream(7, 2, 2).integers(0, 2**31)
        assert len({int(a), int(b), int(c)}) == 3
