"""GA operators and the search loop."""

import numpy as np
import pytest

from convmod import search, store
from convmod.decoder import repair_bits
from convmod.grouping import round_half_up
from convmod.search import (
    SearchConfig,
    SearchError,
    crossover,
    flip_bits,
    init_population,
    mutate,
    run_search,
    select_parents,
)


class TestConfig:
    def test_defaults_follow_reported_settings(self):
        cfg = SearchConfig()
        assert cfg.population_size == 100
        assert cfg.parent_count == 50
        assert cfg.mutation_prob == 0.1
        assert cfg.max_generations == 200
        assert cfg.accuracy_weight == 0.9

    @pytest.mark.parametrize("kwargs", [
        {"mutation_prob": 0.0},
        {"mutation_prob": 1.0},
        {"accuracy_weight": 1.0},
        {"parent_count": 200},
        {"population_size": 0},
        {"patience": 0},
        {"init_mode": "magic"},
        {"grouping_mode": "magic"},
    ])
    def test_rejects_bad_values(self, kwargs):
        with pytest.raises(SearchError):
            SearchConfig(**kwargs)


class _ForcedUniformRng:
    """Delegates to a real generator but pins uniform() to the low bound."""

    def __init__(self, seed):
        self._rng = np.random.default_rng(seed)

    def uniform(self, lo, hi):
        return lo

    def __getattr__(self, name):
        return getattr(self._rng, name)


class TestInitPopulation:
    def test_sensitive_low_ratio_drops_one_of_ten(self, desk_analysis):
        gm = desk_analysis["grouping"]
        profile = desk_analysis["profile"]
        all_sensitive = type(profile)(
            baseline_accuracy=profile.baseline_accuracy,
            sensitive=[True] * len(profile.sensitive),
            curves=profile.curves, threshold=profile.threshold)
        cfg = SearchConfig(population_size=5, parent_count=2)
        pops = init_population(all_sensitive, gm, cfg, _ForcedUniformRng(0))
        # ratio forced to 0.10 on 10-group segments: exactly one zero bit each
        for pop in pops:
            for genome in pop:
                for seg in gm.layout.segments:
                    view = genome[seg.offset:seg.offset + seg.group_count]
                    assert view.sum() == seg.group_count - round_half_up(
                        0.10 * seg.group_count)

    def test_insensitive_layers_drop_at_least_half(self, desk_analysis):
        gm = desk_analysis["grouping"]
        profile = desk_analysis["profile"]
        none_sensitive = type(profile)(
            baseline_accuracy=profile.baseline_accuracy,
            sensitive=[False] * len(profile.sensitive),
            curves=profile.curves, threshold=profile.threshold)
        cfg = SearchConfig(population_size=8, parent_count=2, seed=1)
        pops = init_population(none_sensitive, gm, cfg,
                               np.random.default_rng(np.random.PCG64(1)))
        for pop in pops:
            for genome in pop:
                for seg in gm.layout.segments:
                    view = genome[seg.offset:seg.offset + seg.group_count]
                    zeros = seg.group_count - view.sum()
                    # >= 50% dropped, up to one bit restored by repair
                    assert zeros >= round_half_up(0.5 * seg.group_count) - 1

    def test_same_seed_identical(self, desk_analysis):
        gm = desk_analysis["grouping"]
        cfg = SearchConfig(population_size=6, parent_count=3)
        a = init_population(desk_analysis["profile"], gm, cfg,
                            np.random.default_rng(np.random.PCG64(5)))
        b = init_population(desk_analysis["profile"], gm, cfg,
                            np.random.default_rng(np.random.PCG64(5)))
        for pa, pb in zip(a, b):
            assert np.array_equal(pa, pb)

    def test_random_mode_repaired(self, desk_analysis):
        gm = desk_analysis["grouping"]
        cfg = SearchConfig(population_size=30, parent_count=3, init_mode="random")
        pops = init_population(None, gm, cfg,
                               np.random.default_rng(np.random.PCG64(2)))
        for pop in pops:
            for genome in pop:
                for seg in gm.layout.segments:
                    assert genome[seg.offset:seg.offset + seg.group_count].any()

    def test_sensitivity_mode_requires_profile(self, desk_analysis):
        cfg = SearchConfig(population_size=2, parent_count=1)
        with pytest.raises(SearchError, match="profile"):
            init_population(None, desk_analysis["grouping"], cfg,
                            np.random.default_rng(0))


class TestSelection:
    def test_whole_population(self):
        fit = np.array([0.3, 0.9, 0.1])
        assert select_parents(fit, 3).tolist() == [1, 0, 2]

    def test_distinct_values_take_largest(self):
        fit = np.array([0.1, 0.5, 0.9, 0.3])
        assert select_parents(fit, 2).tolist() == [2, 1]

    def test_ties_break_by_lower_index(self):
        fit = np.array([0.5, 0.5, 0.5, 0.5])
        assert select_parents(fit, 2).tolist() == [0, 1]


class TestCrossover:
    def test_half_cut(self):
        a = np.zeros(4, dtype=np.uint8)
        b = np.ones(4, dtype=np.uint8)
        ca, cb = crossover(a, b, 2)
        assert ca.tolist() == [0, 0, 1, 1]
        assert cb.tolist() == [1, 1, 0, 0]

    def test_identical_parents(self):
        a = np.array([1, 0, 1, 0], dtype=np.uint8)
        ca, cb = crossover(a, a.copy(), 1)
        assert np.array_equal(ca, a) and np.array_equal(cb, a)

    def test_positional_conservation(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            a = rng.integers(0, 2, 12, dtype=np.uint8)
            b = rng.integers(0, 2, 12, dtype=np.uint8)
            cut = int(rng.integers(1, 12))
            ca, cb = crossover(a, b, cut)
            np.testing.assert_array_equal(ca + cb, a + b)

    @pytest.mark.parametrize("cut", [0, 4, 7])
    def test_cut_out_of_range(self, cut):
        with pytest.raises(SearchError, match="cut"):
            crossover(np.zeros(4, dtype=np.uint8), np.ones(4, dtype=np.uint8), cut)


class TestMutation:
    def test_zero_probability_identity(self, desk_analysis):
        gm = desk_analysis["grouping"]
        bits = np.ones(gm.total_bits, dtype=np.uint8)
        out = mutate(bits, 0.0, np.random.default_rng(0), gm)
        assert np.array_equal(out, bits)

    def test_probability_one_complements_then_repairs(self, desk_analysis):
        gm = desk_analysis["grouping"]
        bits = np.ones(gm.total_bits, dtype=np.uint8)
        out = mutate(bits, 1.0, np.random.default_rng(0), gm)
        expected = repair_bits(np.zeros_like(bits), gm.layout)
        assert np.array_equal(out, expected)

    def test_monte_carlo_flip_rate(self):
        rng = np.random.default_rng(123)
        bits = np.zeros(100_000, dtype=np.uint8)
        flipped = flip_bits(bits, 0.1, rng)
        rate = flipped.mean()
        assert abs(rate - 0.1) < 0.01

    def test_length_preserved(self, desk_analysis):
        gm = desk_analysis["grouping"]
        rng = np.random.default_rng(3)
        bits = rng.integers(0, 2, gm.total_bits, dtype=np.uint8)
        out = mutate(repair_bits(bits, gm.layout), 0.3, rng, gm)
        assert len(out) == gm.total_bits


class TestRunSearch:
    def small_cfg(self, **kwargs):
        base = dict(population_size=6, parent_count=3, max_generations=2,
                    beam_width=5, patience=20, seed=11, threads=1)
        base.update(kwargs)
        return SearchConfig(**base)

    def test_single_generation_returns_initial_best(self, desk_spec, desk_model,
                                                    desk_data, desk_analysis):
        cfg = self.small_cfg(max_generations=1)
        result = run_search(desk_spec, desk_model["weights"],
                            desk_analysis["grouping"], desk_analysis["profile"],
                            desk_data["val"].subset(np.arange(90)), cfg)
        assert result.generations_run == 1
        assert len(result.history) == desk_spec.num_classes
        assert all(row["generation"] == 0 for row in result.history)

    def test_best_so_far_non_decreasing(self, desk_spec, desk_model, desk_data,
                                        desk_analysis):
        cfg = self.small_cfg(max_generations=4)
        result = run_search(desk_spec, desk_model["weights"],
                            desk_analysis["grouping"], desk_analysis["profile"],
                            desk_data["val"].subset(np.arange(90)), cfg)
        per_class = {}
        for row in result.history:
            seq = per_class.setdefault(row["class"], [])
            seq.append(row["best_fitness"])
        for seq in per_class.values():
            assert all(b >= a for a, b in zip(seq, seq[1:]))

    def test_same_seed_identical_best_genomes(self, desk_spec, desk_model,
                                              desk_data, desk_analysis):
        cfg = self.small_cfg(max_generations=3)
        args = (desk_spec, desk_model["weights"], desk_analysis["grouping"],
                desk_analysis["profile"], desk_data["val"].subset(np.arange(90)))
        r1 = run_search(*args, cfg)
        r2 = run_search(*args, cfg)
        for a, b in zip(r1.best_bits, r2.best_bits):
            assert np.array_equal(a, b)
        assert r1.history == r2.history

    def test_thread_count_does_not_change_results(self, desk_spec, desk_model,
                                                  desk_data, desk_analysis):
        args = (desk_spec, desk_model["weights"], desk_analysis["grouping"],
                desk_analysis["profile"], desk_data["val"].subset(np.arange(90)))
        r1 = run_search(*args, self.small_cfg(max_generations=3, threads=1))
        r8 = run_search(*args, self.small_cfg(max_generations=3, threads=8))
        for a, b in zip(r1.best_bits, r8.best_bits):
            assert np.array_equal(a, b)
        assert r1.history == r8.history

    def test_genomes_remain_valid_through_operators(self, desk_analysis):
        gm = desk_analysis["grouping"]
        cfg = SearchConfig(population_size=10, parent_count=4,
                           mutation_prob=0.4, init_mode="random")
        rng = np.random.default_rng(np.random.PCG64(7))
        pops = init_population(None, gm, cfg, rng)
        fitness = rng.random(10)
        for _ in range(5):
            pops = [search._next_generation(pop, fitness, cfg, gm, rng)
                    for pop in pops]
            for pop in pops:
                assert pop.shape == (10, gm.total_bits)
                for genome in pop:
                    for seg in gm.layout.segments:
                        assert genome[seg.offset:seg.offset + seg.group_count].any()

    def test_early_stop_on_stale_fitness(self, desk_spec, desk_model, desk_data,
                                         desk_analysis, monkeypatch):
        calls = []

        def fake_eval(populations, *args, **kwargs):
            calls.append(1)
            n = len(populations)
            size = len(populations[0])
            from convmod.evaluate import EvaluationOutcome, FitnessRecord
            rec = FitnessRecord(fitness=0.5, acc=0.5, diff=0.5, level=n,
                                class_ids=tuple(range(n)),
                                member_indices=tuple([0] * n))
            return EvaluationOutcome(
                genome_fitness=[np.full(size, 0.5) for _ in range(n)],
                genome_acc=[np.full(size, 0.5) for _ in range(n)],
                genome_diff=[np.full(size, 0.5) for _ in range(n)],
                best_record=rec, cm_evaluations=1,
                stages=[(tuple(range(n)), 1)],
            )

        monkeypatch.setattr(search, "pruned_evaluation", fake_eval)
        cfg = self.small_cfg(max_generations=50, patience=3)
        result = run_search(desk_spec, desk_model["weights"],
                            desk_analysis["grouping"], desk_analysis["profile"],
                            desk_data["val"], cfg)
        # constant fitness: first generation improves over -inf, then 3 stale
        assert result.generations_run == 4
        assert len(calls) == 4
