"""Search tests: genome codec round trips, technique proposal rules, the
bandit's selection order, the full loop against a deterministic synthetic
objective, and the Pareto frontier."""

import hashlib

import numpy as np
import pytest

from elastiseg.errors import ConfigError, FormatError, InputError
from elastiseg.model import ModelConfig, SubnetConfig
from elastiseg.search import (DE_POP, TECHNIQUES, SampleRecord, SearchConstraints,
                              auc_bandit_select, de_step, decode_genome,
                              encode_genome, greedy_mutation_step,
                              hill_climber_step, pareto_frontier, random_genome,
                              read_records, search, write_records)
from elastiseg.space import SearchSpace, param_count


def small_space(menu=(16, 32), prunable=(0,), shielded=(2,)):
    thetas = (0.5,) * len(prunable)
    return SearchSpace(model=ModelConfig(image_size=64, patch_size=16,
                                         embed_dim=16, num_heads=2,
                                         num_layers=3, mlp_dim=32),
                       shielded=shielded, prunable=prunable, thetas=thetas,
                       menu=menu, scorer="none", reordered=False)


def synthetic_miou(config: SubnetConfig) -> float:
    """Deterministic pseudo-random objective keyed on the config."""
    digest = hashlib.sha256(config.digest().encode()).digest()
    return int.from_bytes(digest[:4], "big") / 2 ** 32


@pytest.fixture
def fake_eval(monkeypatch):
    # the package re-exports a search() function that shadows the module
    # attribute, so resolve the module through importlib
    import importlib

    def fake(weights, config, eval_set, batch_size=16, **kw):
        return synthetic_miou(config)

    monkeypatch.setattr(importlib.import_module("elastiseg.search"),
                        "evaluate_miou", fake)
    return fake


def mk_record(i, params, miou, technique="hill_climber"):
    return SampleRecord(config=None, genome=(i,), params=params, miou=miou,
                        technique=technique, index=i)


class TestGenomeCodec:
    def test_round_trip_over_the_whole_space(self):
        sp = small_space()
        for cfg in sp.all_configs():
            assert decode_genome(sp, encode_genome(sp, cfg)) == cfg

    def test_genome_layout(self):
        sp = small_space()
        cfg = sp.make_config(drop=[0], window_index={1: 0})
        genome = encode_genome(sp, cfg)
        # one keep bit for the prunable layer, then windows for layers 0, 1
        np.testing.assert_array_equal(genome, [0, 0, 0])
        kept = sp.make_config(window_index={0: 1, 1: 0})
        np.testing.assert_array_equal(encode_genome(sp, kept), [1, 1, 0])

    def test_dropped_layer_window_gene_is_canonical_zero(self):
        sp = small_space()
        a = decode_genome(sp, [0, 0, 1])
        b = decode_genome(sp, [0, 1, 1])  # dropped layer's window ignored
        assert a == b
        np.testing.assert_array_equal(encode_genome(sp, a), [0, 0, 1])

    def test_random_genomes_decode_and_reencode(self):
        sp = small_space()
        rng = np.random.default_rng(0)
        for _ in range(1000):
            g = random_genome(sp, rng)
            cfg = decode_genome(sp, g)
            sp.validate_config(cfg)
            back = encode_genome(sp, cfg)
            # canonical form: dropped layers re-encode with window gene 0
            if g[0] == 1:
                np.testing.assert_array_equal(back, g)
            else:
                assert back[0] == 0 and back[2] == g[2]

    def test_decode_errors(self):
        sp = small_space()
        with pytest.raises(InputError):
            decode_genome(sp, [0, 0])
        with pytest.raises(InputError):
            decode_genome(sp, [2, 0, 0])
        with pytest.raises(InputError):
            decode_genome(sp, [1, 0, 5])


class TestHillClimber:
    def test_moves_exactly_one_gene(self):
        sp = small_space(menu=(8, 16, 32))
        rng = np.random.default_rng(1)
        for _ in range(200):
            cur = random_genome(sp, rng)
            nxt = hill_climber_step(cur, sp, rng)
            assert int((nxt != cur).sum()) == 1
            decode_genome(sp, nxt)  # stays in bounds

    def test_binary_gene_flips(self):
        sp = small_space(menu=(32,))  # only the keep bit is mutable
        rng = np.random.default_rng(2)
        for bit in (0, 1):
            nxt = hill_climber_step([bit, 0, 0], sp, rng)
            assert nxt[0] == 1 - bit

    def test_window_gene_bounces_off_the_edges(self):
        sp = small_space(menu=(8, 16, 32), prunable=(), shielded=(2,))
        rng = np.random.default_rng(3)
        for _ in range(100):
            top = hill_climber_step([2, 2], sp, rng)
            assert set(np.abs(top - np.array([2, 2]))) <= {0, 1}
            assert top.max() <= 2
            bottom = hill_climber_step([0, 0], sp, rng)
            assert bottom.min() >= 0

    def test_no_mutable_positions_returns_input(self):
        sp = small_space(menu=(32,), prunable=(), shielded=(2,))
        rng = np.random.default_rng(4)
        np.testing.assert_array_equal(hill_climber_step([0, 0], sp, rng), [0, 0])


class TestGreedyMutation:
    def test_explicit_k_changes_k_distinct_genes(self):
        sp = small_space(menu=(8, 16, 32))
        rng = np.random.default_rng(5)
        base = [1, 1, 1]
        for k in (1, 2, 3):
            changed = sum(int((greedy_mutation_step(base, sp, rng, k=k)
                               != np.array(base)).sum()) for _ in range(50)) / 50
            # binary flips always change; window steps always move by 1
            assert changed == k

    def test_geometric_k_stays_in_range(self):
        sp = small_space(menu=(8, 16, 32))
        rng = np.random.default_rng(6)
        base = [1, 1, 1]
        for _ in range(300):
            nxt = greedy_mutation_step(base, sp, rng)
            assert 1 <= int((nxt != np.array(base)).sum()) <= 3

    def test_huge_k_clamps_to_the_gene_count(self):
        sp = small_space()
        rng = np.random.default_rng(7)
        nxt = greedy_mutation_step([1, 0, 0], sp, rng, k=99)
        decode_genome(sp, nxt)


class TestDifferentialEvolution:
    def test_identical_population_returns_the_common_genome(self):
        sp = small_space(menu=(8, 16, 32))
        pop = [[1, 2, 1]] * 6
        for seed in range(10):
            trial = de_step(pop, sp, np.random.default_rng(seed))
            np.testing.assert_array_equal(trial, [1, 2, 1])

    def test_needs_four_genomes(self):
        sp = small_space()
        with pytest.raises(InputError):
            de_step([[1, 0, 0]] * 3, sp, np.random.default_rng(0))

    def test_zero_f_mixes_target_and_base(self):
        sp = small_space(menu=(8, 16, 32))
        pop = [[0, 0, 0], [1, 1, 1], [0, 2, 2], [1, 0, 2]]
        rng = np.random.default_rng(8)
        for _ in range(100):
            trial = de_step(pop, sp, rng, F=0.0)
            arr = np.array(pop)
            assert all(trial[j] in arr[:, j] for j in range(3))

    def test_trials_respect_gene_bounds(self):
        sp = small_space(menu=(8, 16, 32))
        rng = np.random.default_rng(9)
        for _ in range(10_000):
            pop = [random_genome(sp, rng) for _ in range(4)]
            trial = de_step(pop, sp, rng, F=1.9)
            decode_genome(sp, trial)  # raises if any gene left its range


class TestBandit:
    def test_unused_techniques_go_first_in_index_order(self):
        assert auc_bandit_select([[], [], []], t=1) == 0
        assert auc_bandit_select([[0], [], []], t=2) == 1
        assert auc_bandit_select([[0], [1], []], t=3) == 2

    def test_dominant_winrate_wins_without_exploration(self):
        windows = [[1, 1, 1, 1], [0, 0, 0, 0], [0, 0, 0, 0]]
        assert auc_bandit_select(windows, t=13, C=0.0) == 0

    def test_exploration_prefers_the_less_sampled_arm(self):
        windows = [[1, 0] * 10, [1, 0], [1, 0] * 10]
        assert auc_bandit_select(windows, t=43) == 1

    def test_exact_ties_resolve_to_the_lower_index(self):
        windows = [[1, 0], [1, 0], [1, 0]]
        assert auc_bandit_select(windows, t=7) == 0

    def test_time_index_contract(self):
        with pytest.raises(ConfigError):
            auc_bandit_select([[], [], []], t=0)


class TestSearchConstraints:
    def test_budget_floor(self):
        with pytest.raises(ConfigError):
            SearchConstraints(budget=2)

    def test_feasibility(self):
        c = SearchConstraints(budget=10, max_params=100, min_miou=0.5)
        assert c.feasible(mk_record(0, 100, 0.5))
        assert not c.feasible(mk_record(0, 101, 0.9))
        assert not c.feasible(mk_record(0, 50, 0.49))

    def test_record_validation(self):
        with pytest.raises(ConfigError):
            mk_record(0, 10, 1.5)
        with pytest.raises(ConfigError):
            mk_record(0, 0, 0.5)


class TestSearchLoop:
    def test_exhausts_small_spaces_and_finds_the_optimum(self, fake_eval):
        sp = small_space()
        result = search(sp, None, [object()], SearchConstraints(budget=100), seed=0)
        assert len(result.history) == sp.size() == 6
        assert len({r.genome for r in result.history}) == 6

        scored = [(synthetic_miou(c), -param_count(sp, c)) for c in sp.all_configs()]
        best_miou, neg_params = max(scored)
        assert result.feasible
        assert result.best.miou == best_miou
        assert result.best.params == -neg_params

    def test_history_budget_and_indices(self, fake_eval):
        sp = small_space(menu=(8, 16, 32), prunable=(0, 1), shielded=())
        result = search(sp, None, [object()], SearchConstraints(budget=10), seed=1)
        assert len(result.history) == 10
        assert [r.index for r in result.history] == list(range(10))
        assert sum(result.technique_uses.values()) == 10
        for r in result.history:
            assert r.technique in TECHNIQUES
            sp.validate_config(r.config)

    def test_first_three_evaluations_try_each_technique(self, fake_eval):
        sp = small_space(menu=(8, 16, 32), prunable=(0, 1), shielded=())
        result = search(sp, None, [object()], SearchConstraints(budget=3), seed=2)
        assert [r.technique for r in result.history] == list(TECHNIQUES)

    def test_never_evaluates_a_genome_twice(self, fake_eval):
        sp = small_space(menu=(8, 16, 32), prunable=(0, 1), shielded=())
        result = search(sp, None, [object()], SearchConstraints(budget=60), seed=3)
        genomes = [r.genome for r in result.history]
        assert len(genomes) == len(set(genomes))

    def test_param_cap_holds_for_best_but_not_history(self, fake_eval):
        sp = small_space()
        cap = min(param_count(sp, c) for c in sp.all_configs())
        result = search(sp, None, [object()],
                        SearchConstraints(budget=100, max_params=cap), seed=4)
        assert result.feasible and result.best.params <= cap
        assert any(r.params > cap for r in result.history)

    def test_unreachable_min_miou_reports_infeasible(self, fake_eval):
        sp = small_space()
        floor = max(synthetic_miou(c) for c in sp.all_configs()) + 1e-9
        result = search(sp, None, [object()],
                        SearchConstraints(budget=100, min_miou=floor), seed=5)
        assert result.best is None
        assert result.feasible is False
        assert len(result.history) == sp.size()

    def test_running_best_is_monotone(self, fake_eval):
        sp = small_space(menu=(8, 16, 32), prunable=(0, 1), shielded=())
        result = search(sp, None, [object()], SearchConstraints(budget=40), seed=6)
        running = -1.0
        for r in result.history:
            running = max(running, r.miou)
        assert result.best.miou == running

    def test_deterministic_under_seed(self, fake_eval):
        sp = small_space(menu=(8, 16, 32), prunable=(0, 1), shielded=())
        a = search(sp, None, [object()], SearchConstraints(budget=25), seed=7)
        b = search(sp, None, [object()], SearchConstraints(budget=25), seed=7)
        assert [r.genome for r in a.history] == [r.genome for r in b.history]
        assert a.best.genome == b.best.genome

    def test_empty_eval_set(self):
        sp = small_space()
        with pytest.raises(InputError):
            search(sp, None, [], SearchConstraints(budget=10))

    def test_real_model_search_smoke(self, tiny_space, dataset):
        """End to end on the trained tiny supernet: exhausts its 6-config
        space with real evaluations."""
        space, weights = tiny_space
        result = search(space, weights, list(dataset[1][:8]),
                        SearchConstraints(budget=20), seed=0, eval_batch=8)
        assert len(result.history) == space.size()
        assert result.feasible
        assert 0.0 <= result.best.miou <= 1.0


class TestParetoFrontier:
    def test_hand_case(self):
        records = [mk_record(0, 10, 0.5), mk_record(1, 20, 0.6),
                   mk_record(2, 15, 0.4)]
        front = pareto_frontier(records)
        assert [(r.params, r.miou) for r in front] == [(10, 0.5), (20, 0.6)]

    def test_single_and_duplicates(self):
        only = mk_record(0, 10, 0.5)
        assert pareto_frontier([only]) == [only]
        dupes = [mk_record(i, 10, 0.5) for i in range(4)]
        assert len(pareto_frontier(dupes)) == 1

    def test_equal_params_keeps_the_higher_miou(self):
        records = [mk_record(0, 10, 0.3), mk_record(1, 10, 0.7)]
        front = pareto_frontier(records)
        assert [(r.params, r.miou) for r in front] == [(10, 0.7)]

    def test_sorted_and_strictly_improving(self):
        rng = np.random.default_rng(10)
        records = [mk_record(i, int(rng.integers(1, 100)), float(rng.random()))
                   for i in range(100)]
        front = pareto_frontier(records)
        params = [r.params for r in front]
        mious = [r.miou for r in front]
        assert params == sorted(params)
        assert all(a < b for a, b in zip(mious, mious[1:]))

    def test_excluded_records_are_dominated(self):
        rng = np.random.default_rng(11)
        records = [mk_record(i, int(rng.integers(1, 50)), float(rng.random()))
                   for i in range(60)]
        front = pareto_frontier(records)
        kept = {id(r) for r in front}
        for r in records:
            if id(r) in kept:
                continue
            assert any(f.params <= r.params and f.miou >= r.miou for f in front)

    def test_empty_input(self):
        with pytest.raises(InputError):
            pareto_frontier([])


class TestRecordsIO:
    def test_round_trip(self, tmp_path, fake_eval):
        sp = small_space()
        result = search(sp, None, [object()], SearchConstraints(budget=6), seed=0)
        path = str(tmp_path / "records.csv")
        write_records(path, result.history)
        plain = read_records(path)
        assert [r.genome for r in plain] == [r.genome for r in result.history]
        assert [r.miou for r in plain] == [r.miou for r in result.history]
        assert all(r.config is None for r in plain)
        with_space = read_records(path, sp)
        assert [r.config for r in with_space] == [r.config for r in result.history]

    def test_float_fidelity(self, tmp_path):
        rec = mk_record(0, 7, 1 / 3)
        path = str(tmp_path / "r.csv")
        write_records(path, [rec])
        assert read_records(path)[0].miou == 1 / 3

    def test_header_and_shape_errors(self, tmp_path):
        bad_header = tmp_path / "h.csv"
        bad_header.write_text("genome,params,miou\n")
        with pytest.raises(FormatError, match="header"):
            read_records(str(bad_header))
        short_row = tmp_path / "s.csv"
        short_row.write_text("genome,params,miou,technique,index\n1-0,10,0.5\n")
        with pytest.raises(FormatError, match="columns"):
            read_records(str(short_row))
        bad_value = tmp_path / "v.csv"
        bad_value.write_text("genome,params,miou,technique,index\n1-0,ten,0.5,de,0\n")
        with pytest.raises(FormatError, match=":2"):
            read_records(str(bad_value))

    def test_missing_file(self, tmp_path):
        with pytest.raises(InputError):
            read_records(str(tmp_path / "absent.csv"))
