import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flowtune.catalog import catalog_from_frequencies
from flowtune.flownet import END, build_prefix_tree
from flowtune.policy import (
    CONTEXTUAL, TABULAR, InvalidStateError, edge_log_probs, encode_context, flow_optimal_params,
    init_params, item_log_probs, load_params, next_token_dist, sample_title, sample_titles,
    save_params, seq_log_prob,
)
from synth import random_tree, ref_all_item_logprobs, ref_context, ref_log_pi


class TestDistributions:
    def test_uniform_at_init(self, tinytree):
        p = init_params(tinytree)
        np.testing.assert_allclose(next_token_dist(tinytree.root, None, p), [0.5, 0.5])
        assert seq_log_prob("ab", None, p, tinytree) == pytest.approx(2 * math.log(0.5))
        assert seq_log_prob("d", None, p, tinytree) == pytest.approx(math.log(0.5))

    def test_contextual_zero_weights_match_tabular(self, tinytree):
        p = init_params(tinytree, CONTEXTUAL, dim=3)
        p.weight[:] = 0
        p.bias[:] = np.arange(tinytree.n_nodes) * 0.1
        q = init_params(tinytree)
        q.bias[:] = p.bias
        ctx = encode_context(["ab", "d"], p)
        np.testing.assert_allclose(edge_log_probs(tinytree, p, ctx), edge_log_probs(tinytree, q))

    def test_leaf_has_no_distribution(self, tinytree):
        with pytest.raises(InvalidStateError):
            next_token_dist(tinytree.root.children["D"].children[END], None, init_params(tinytree))

    def test_flow_optimal_realizes_rewards(self, tinytree):
        p = flow_optimal_params(tinytree)
        lp = item_log_probs(tinytree, p)
        assert lp["ab"] == pytest.approx(math.log(2 / 6), abs=1e-12)
        assert lp["ac"] == pytest.approx(math.log(1 / 6), abs=1e-12)
        assert lp["d"] == pytest.approx(math.log(3 / 6), abs=1e-12)

    def test_temperature_flattens(self, tinytree):
        p = flow_optimal_params(tinytree)
        p.bias[:] *= 3
        cold = next_token_dist(tinytree.nodes[0].children["A"], None, p, 0.5)
        hot = next_token_dist(tinytree.nodes[0].children["A"], None, p, 5.0)
        assert cold.max() > hot.max()

    def test_unknown_history_items_ignored(self, tinytree):
        p = init_params(tinytree, CONTEXTUAL, dim=2, seed=1)
        np.testing.assert_array_equal(encode_context(["zz"], p), np.zeros(2))
        np.testing.assert_array_equal(encode_context(["ab", "zz"], p), p.embedding[p.item_index["ab"]])

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.sampled_from([TABULAR, CONTEXTUAL]))
    def test_normalized_and_matches_reference(self, seed, mode):
        rng = np.random.default_rng(seed)
        cat, tree = random_tree(rng, 40)
        p = init_params(tree, mode, dim=3, seed=seed % 1000)
        p.bias[:] = rng.normal(0, 2, tree.n_nodes)
        if mode == CONTEXTUAL:
            p.weight[:] = rng.normal(0, 1, p.weight.shape)
            p.embedding[:] = rng.normal(0, 1, p.embedding.shape)
        hist = list(rng.choice(cat.item_ids, size=3))
        ctx = encode_context(hist, p)
        lp = edge_log_probs(tree, p, ctx)
        for s in range(tree.n_nodes):
            kids = list(tree.children(s))
            if kids:
                assert abs(np.exp(lp[kids]).sum() - 1) < 1e-12
                c = kids[int(rng.integers(len(kids)))]
                assert lp[c] == pytest.approx(ref_log_pi(tree, p, s, c, ref_context(hist, p)), abs=1e-10)
        # item probabilities sum to one as well
        assert math.fsum(math.exp(v) for v in item_log_probs(tree, p, ctx).values()) == pytest.approx(1, abs=1e-10)

    def test_item_log_probs_match_reference(self, rng):
        cat, tree = random_tree(rng, 60)
        p = init_params(tree)
        p.bias[:] = rng.normal(0, 1, tree.n_nodes)
        ref = ref_all_item_logprobs(tree, p, temperature=0.7)
        got = item_log_probs(tree, p, temperature=0.7)
        assert got.keys() == ref.keys()
        for k in ref:
            assert got[k] == pytest.approx(ref[k], abs=1e-10)


class TestSampling:
    def test_always_valid(self, rng):
        cat, tree = random_tree(rng, 80)
        p = init_params(tree)
        p.bias[:] = rng.normal(0, 3, tree.n_nodes)
        assert set(sample_titles(tree, None, p, 5000, rng=1)) <= set(cat.item_ids)

    def test_frequencies_match_probabilities(self, tinytree):
        # chi-square goodness of fit, 2 dof: critical value 13.82 at p = 0.001
        p = flow_optimal_params(tinytree)
        n = 100_000
        draws = sample_titles(tinytree, None, p, n, rng=2024)
        obs = np.array([draws.count(i) for i in ("ab", "ac", "d")])
        exp = n * np.array([2, 1, 3]) / 6
        assert ((obs - exp) ** 2 / exp).sum() < 13.82

    def test_high_temperature_is_uniform_per_node(self, tinytree):
        # root splits A/D, A splits B/C; 1 dof each, critical value 10.83 at p = 0.001
        p = init_params(tinytree)
        p.bias[1:] = np.linspace(-3, 3, tinytree.n_nodes - 1)
        n = 100_000
        draws = sample_titles(tinytree, None, p, n, temperature=1e6, rng=99)
        a = draws.count("ab") + draws.count("ac")
        assert (a - n / 2) ** 2 / (n / 4) < 10.83
        assert (draws.count("ab") - a / 2) ** 2 / (a / 4) < 10.83

    def test_seeded(self, tinytree):
        p = init_params(tinytree)
        a = [sample_title(tinytree, None, p, seed=s) for s in range(20)]
        b = [sample_title(tinytree, None, p, seed=s) for s in range(20)]
        assert a == b and len(set(a)) > 1

    def test_zero_probability_edge_never_taken(self):
        cat = catalog_from_frequencies({"a": "A", "b": "B"}, {"a": 1, "b": 1})
        tree = build_prefix_tree(cat)
        p = init_params(tree)
        p.bias[tree.root.children["B"].index] = -1e4
        assert set(sample_titles(tree, None, p, 2000, rng=0)) == {"a"}


class TestCheckpoint:
    @pytest.mark.parametrize("mode", [TABULAR, CONTEXTUAL])
    def test_bit_exact_round_trip(self, mode, tmp_path, rng):
        cat, tree = random_tree(rng, 30)
        p = init_params(tree, mode, dim=4, seed=3)
        p.bias[1:] = rng.normal(size=tree.n_nodes - 1) / 3
        save_params(p, tree, tmp_path / "ck.json")
        q = load_params(tmp_path / "ck.json", tree)
        for a, b in zip(p.arrays(), q.arrays()):
            np.testing.assert_array_equal(a, b)
        assert q.mode == mode and q.item_index == p.item_index

    def test_tree_mismatch(self, tmp_path, tinytree):
        save_params(init_params(tinytree), tinytree, tmp_path / "ck.json")
        other = build_prefix_tree(catalog_from_frequencies({"x": "X"}, {"x": 1}))
        with pytest.raises(ValueError):
            load_params(tmp_path / "ck.json", other)

    def test_rejects_foreign_json(self, tmp_path, tinytree):
        (tmp_path / "x.json").write_text('{"format": "other"}')
        with pytest.raises(ValueError):
            load_params(tmp_path / "x.json", tinytree)
