"""End-to-end acceptance checks; each test records one PASS/FAIL line in the terminal summary."""

import math
import time

import numpy as np
import pytest

from flowtune.catalog import Example, build_catalog, make_cluster_log, preprocess
from flowtune.decode import generate_topk
from flowtune.evaluation import aggregate_deviation, diversity, exact_fit, hr_ndcg, js_divergence, kl_divergence
from flowtune.flownet import RewardVariant, build_prefix_tree, path_log_reward
from flowtune.policy import (
    CONTEXTUAL, TABULAR, edge_log_probs, encode_context, flow_optimal_params, init_params, sample_nodes,
    seq_log_prob,
)
from flowtune.prefs import fit as fit_prefs
from flowtune.training import WHOLE, TrainConfig, flower_loss, gradients, subtb_loss, subtb_term, train
from synth import finite_difference, random_catalog, ref_all_item_logprobs

pytestmark = pytest.mark.acceptance


def zipf_fit_config(**kw):
    base = dict(batch_size=1, on_policy_samples=4, learning_rate=0.1, max_epochs=10_000, patience=0, seed=7)
    base.update(kw)
    return TrainConfig(**base)


def catalogs(n, max_items, seed):
    rng = np.random.default_rng(seed)
    for _ in range(n):
        yield random_catalog(rng, int(rng.integers(1, max_items + 1)))


class TestFlowExactness:
    def test_conservation_and_telescoping(self, acceptance_report):
        t0 = time.perf_counter()
        worst = 0.0
        for cat in catalogs(200, 500, seed=1):
            tree = build_prefix_tree(cat)
            kids_sum = np.zeros(tree.n_nodes)
            np.add.at(kids_sum, tree.parent[1:], tree.flow[1:])
            inner = tree.internal
            worst = max(worst, float(np.max(np.abs(kids_sum[inner] - tree.flow[inner]) / tree.flow[inner])))
            for item, it in cat.items.items():
                ratio = math.exp(path_log_reward(tree, item))
                worst = max(worst, abs(ratio - it.frequency / tree.Z) / (it.frequency / tree.Z))
        elapsed = time.perf_counter() - t0
        ok = worst < 1e-9 and elapsed < 10
        acceptance_report("1 flow exactness", ok, f"max rel err {worst:.2e}, {elapsed:.2f}s")
        assert worst < 1e-9
        assert elapsed < 10


class TestFlowOptimum:
    def test_zero_loss_and_reward_sampling(self, acceptance_report):
        worst_loss = worst_lp = 0.0
        for cat in catalogs(50, 500, seed=2):
            tree = build_prefix_tree(cat)
            p = flow_optimal_params(tree)
            for item, it in cat.items.items():
                worst_loss = max(worst_loss, subtb_loss(item, None, p, tree, RewardVariant.PLAIN))
                worst_lp = max(worst_lp, abs(seq_log_prob(item, None, p, tree) - math.log(it.frequency / tree.Z)))
        ok = worst_loss < 1e-12 and worst_lp < 1e-9
        acceptance_report("2 flow-optimum zero loss", ok, f"max loss {worst_loss:.1e}, max |dlogp| {worst_lp:.1e}")
        assert worst_loss < 1e-12
        assert worst_lp < 1e-9


class TestDistributionFitting:
    def test_subtb_fits_zipf_and_beats_sft(self, zipf100, acceptance_report):
        ds, cat, tree = zipf100
        t0 = time.perf_counter()
        sub, _ = train(ds, cat, tree, zipf_fit_config(lam=1.0, subtb_only=True, max_steps=5000))
        elapsed = time.perf_counter() - t0
        sft, _ = train(ds, cat, tree, zipf_fit_config(sft_only=True, max_steps=5000))
        f_sub, f_sft = exact_fit(tree, sub, cat), exact_fit(tree, sft, cat)
        ok = (f_sub["title_kl_t_r"] < 0.01 and f_sub["token_kl_t_r"] < 0.02
              and f_sft["title_kl_t_r"] > f_sub["title_kl_t_r"] and elapsed < 60)
        acceptance_report("3 distribution fitting", ok,
                          f"SubTB title KL {f_sub['title_kl_t_r']:.2e} token KL {f_sub['token_kl_t_r']:.2e}; "
                          f"SFT title KL {f_sft['title_kl_t_r']:.4f}; {elapsed:.1f}s")
        assert f_sub["title_kl_t_r"] < 0.01
        assert f_sub["token_kl_t_r"] < 0.02
        assert f_sft["title_kl_t_r"] > f_sub["title_kl_t_r"]
        assert elapsed < 60


class TestGradientCheck:
    @staticmethod
    def instance(n):
        rng = np.random.default_rng(1000 + n)
        mode = (TABULAR, CONTEXTUAL)[n % 2]
        variant = list(RewardVariant)[(n // 2) % 3]
        cat = random_catalog(rng, int(rng.integers(1, 16)))
        tree = build_prefix_tree(cat)
        p = init_params(tree, mode, dim=3, seed=n)
        p.bias[1:] = rng.normal(0, 1, tree.n_nodes - 1)
        if mode == CONTEXTUAL:
            p.weight[1:] = rng.normal(0, 0.5, p.weight[1:].shape)
            p.embedding[:] = rng.normal(0, 0.5, p.embedding.shape)
        ids = cat.item_ids
        batch = [Example(f"u{j}", tuple(rng.choice(ids, size=int(rng.integers(0, 4)))), ids[int(rng.integers(len(ids)))])
                 for j in range(4)]
        prefs = fit_prefs([list(rng.choice(ids, size=6)) for _ in range(5)], ids)
        samples = [list(rng.choice(ids, size=2)) for _ in batch]
        cfg = TrainConfig(lam=float(rng.choice([0.005, 0.1, 1.0])), reward_variant=variant,
                          granularity=int(rng.choice([1, 2, 3])), policy_mode=mode)
        return tree, p, batch, prefs, samples, cfg

    def test_finite_differences(self, acceptance_report):
        t0 = time.perf_counter()
        worst = 0.0
        covered = set()
        for n in range(100):
            tree, p, batch, prefs, samples, cfg = self.instance(n)
            covered.add((p.mode, cfg.reward_variant))
            g = gradients(batch, p, tree, cfg, prefs, samples).flat()
            fd = finite_difference(lambda q: flower_loss(batch, q, tree, cfg, prefs, samples), p, h=1e-5)
            # componentwise relative error; the 1e-6 floor keeps exact zeros from dividing by zero
            err = np.abs(g - fd) / np.maximum(np.maximum(np.abs(g), np.abs(fd)), 1e-6)
            worst = max(worst, float(err.max()))
        elapsed = time.perf_counter() - t0
        ok = worst < 1e-4 and elapsed < 60 and len(covered) == 6
        acceptance_report("4 gradient check", ok, f"max rel err {worst:.2e} over 100 instances, {elapsed:.1f}s")
        assert len(covered) == 6
        assert worst < 1e-4
        assert elapsed < 60


class TestLambdaZero:
    def test_trace_identical_to_sft_path(self, acceptance_report):
        ds = preprocess(make_cluster_log(n_users=30, seed=5))
        cat = build_catalog(ds)
        tree = build_prefix_tree(cat)
        traces = []
        for kw in (dict(lam=0.0), dict(lam=0.7, sft_only=True)):
            steps = []
            cfg = TrainConfig(policy_mode=CONTEXTUAL, dim=4, batch_size=8, max_epochs=3, patience=0, seed=11, **kw)
            params, log = train(ds, cat, tree, cfg, step_callback=lambda s, p: steps.append(p.flat().copy()))
            traces.append((steps, [(r.sft_loss, r.subtb_loss, r.total, r.valid_ndcg5) for r in log], params.flat()))
        (sa, la, pa), (sb, lb, pb) = traces
        same = len(sa) == len(sb) and all(np.array_equal(x, y) for x, y in zip(sa, sb)) and la == lb
        same = same and np.array_equal(pa, pb)
        acceptance_report("5 lambda=0 degeneracy", same, f"{len(sa)} steps compared bitwise")
        assert same


class TestLengthTwoReduction:
    def test_adjacent_pair_is_single_edge_square(self, acceptance_report):
        rng = np.random.default_rng(6)
        mismatches = 0
        for _ in range(1000):
            T = int(rng.integers(1, 8))
            log_pi = list(-rng.exponential(1.0, T))
            log_r = list(np.log(rng.uniform(0.01, 1.0, T)) / rng.uniform(0.05, 1.0))
            m = int(rng.integers(0, T))
            if subtb_term(log_pi, log_r, m, m + 1) != (log_pi[m] - log_r[m]) ** 2:
                mismatches += 1
        # the same reduction through the full loss: a one-token title at WHOLE granularity
        cat = random_catalog(rng, 30, max_words=1, vocab=[f"t{j}" for j in range(40)])
        tree = build_prefix_tree(cat)
        p = init_params(tree)
        p.bias[1:] = rng.normal(size=tree.n_nodes - 1)
        lp = edge_log_probs(tree, p)
        for item in cat.item_ids:
            path = tree.path(item)
            d = (lp[path[0]] - tree.log_rp[path[0]]) + (lp[path[1]] - tree.log_rp[path[1]])
            if not math.isclose(subtb_loss(item, None, p, tree, granularity=WHOLE), d * d, rel_tol=1e-14):
                mismatches += 1
        acceptance_report("6 length-2 reduction", mismatches == 0, f"{mismatches} mismatches over 1000 edges")
        assert mismatches == 0


class TestDecoding:
    def test_topk_matches_brute_force(self, acceptance_report):
        rng = np.random.default_rng(7)
        bad = 0
        for cat in catalogs(100, 200, seed=7):
            tree = build_prefix_tree(cat)
            p = init_params(tree)
            p.bias[1:] = rng.normal(0, 1.5, tree.n_nodes - 1)
            K = int(rng.integers(1, 21))
            ref = sorted(ref_all_item_logprobs(tree, p).items(), key=lambda kv: (-kv[1], kv[0]))[:K]
            got = generate_topk(tree, None, p, K)
            if got.items != [i for i, _ in ref] or not np.allclose(got.scores, [s for _, s in ref], atol=1e-10):
                bad += 1
        cat = random_catalog(rng, 200)
        tree = build_prefix_tree(cat)
        p = init_params(tree)
        p.bias[1:] = rng.normal(0, 2, tree.n_nodes - 1)
        leaves = sample_nodes(tree, edge_log_probs(tree, p), 1_000_000, np.random.default_rng(8))
        valid = bool(np.all(tree.is_leaf[leaves]))
        names = {tree.item_of_leaf[int(s)] for s in np.unique(leaves)}
        valid = valid and names <= set(cat.item_ids)
        acceptance_report("7 decoding", bad == 0 and valid,
                          f"top-K mismatches {bad}/100, 10^6 samples all catalog items: {valid}")
        assert bad == 0
        assert valid


class TestMetricOracles:
    def test_metrics(self, acceptance_report):
        rng = np.random.default_rng(8)
        problems = []
        for _ in range(1000):
            n_lists = int(rng.integers(1, 6))
            recs, targets = [], []
            for _ in range(n_lists):
                k = int(rng.integers(1, 11))
                recs.append([f"i{j}" for j in rng.permutation(30)[:k]])
                targets.append(f"i{int(rng.integers(30))}")
            hits = dcg = 0.0
            for rec, t in zip(recs, targets):
                for pos, item in enumerate(rec):
                    if item == t:
                        hits += 1
                        dcg += 1 / math.log2(pos + 2)
            if hr_ndcg(recs, targets) != (hits / n_lists, dcg / n_lists):
                problems.append("hr/ndcg")
        for _ in range(1000):
            size = int(rng.integers(2, 12))
            a = rng.integers(0, 20, size).astype(float)
            b = rng.integers(0, 20, size).astype(float)
            a[0] += 1
            b[-1] += 1
            p, q = a / a.sum(), b / b.sum()
            js_pq, js_qp = js_divergence(p, q), js_divergence(q, p)
            if kl_divergence(p, q) < 0 or kl_divergence(q, p) < 0 or js_pq < 0:
                problems.append("negative divergence")
            if js_pq != pytest.approx(js_qp, abs=1e-12) or js_pq > 1:
                problems.append("js symmetry/bound")
            dgu, mgu = aggregate_deviation(p, q)
            if dgu < mgu:
                problems.append("dgu < mgu")
        H, _ = diversity(["A B", "A C"])
        if H != 1.5:
            problems.append(f"H = {H}")
        acceptance_report("8 metric oracles", not problems, f"{len(problems)} violations")
        assert not problems


# Values measured on the first run of this fixture (200 steps, seed 7); regressions must stay in band.
GRANULARITY_RECORDED = {1: 0.005025405, WHOLE: 0.140124400}
GRANULARITY_BAND = 0.10


class TestGranularity:
    @staticmethod
    def final_kl(ds, tokenizer, k, steps=200):
        cat = build_catalog(ds, tokenizer)
        tree = build_prefix_tree(cat)
        params, _ = train(ds, cat, tree, zipf_fit_config(lam=1.0, subtb_only=True, granularity=k, max_steps=steps))
        return exact_fit(tree, params, cat)["title_kl_t_r"]

    def test_finer_granularity_fits_better(self, zipf100, acceptance_report, capsys):
        ds = zipf100[0]
        kl = {k: self.final_kl(ds, "word", k) for k in (1, 5, 10, WHOLE)}
        in_band = all(abs(kl[k] - v) <= GRANULARITY_BAND * v for k, v in GRANULARITY_RECORDED.items())
        ok = kl[1] <= kl[WHOLE] and in_band
        char_kl = {k: self.final_kl(ds, "char", k) for k in (1, 5, 10, WHOLE)}
        trend = ", ".join(f"k={k}: {v:.4g}" for k, v in kl.items())
        char_trend = ", ".join(f"k={k}: {v:.4g}" for k, v in char_kl.items())
        acceptance_report("9 granularity ablation", ok, f"word titles {trend}")
        acceptance_report("9 granularity trend report (not asserted)", True, f"char titles {char_trend}")
        assert kl[1] <= kl[WHOLE]
        assert in_band, kl


# HR@5 on the two-cluster fixture from the oracle run (seed 3); strict ordering is the criterion.
PERSONALIZATION_RECORDED = {"plain": 0.5833, "div": 0.8333}


class TestPersonalization:
    @staticmethod
    def hr5(variant):
        ds = preprocess(make_cluster_log(seed=0), k_core=5, max_len=10)
        cat = build_catalog(ds)
        tree = build_prefix_tree(cat)
        prefs = fit_prefs(ds.train_sequences(), cat.item_ids)
        cfg = TrainConfig(lam=0.005, reward_variant=variant, policy_mode=CONTEXTUAL, dim=8, batch_size=16,
                          max_epochs=10, patience=10, on_policy_samples=2, learning_rate=0.1, seed=3)
        params, _ = train(ds, cat, tree, cfg, prefs)
        recs = [generate_topk(tree, encode_context(ex.history, params), params, 5) for ex in ds.test]
        return hr_ndcg(recs, [ex.target for ex in ds.test])[0]

    def test_div_pref_beats_plain(self, acceptance_report):
        plain, div = self.hr5("plain"), self.hr5("div")
        ok = div > plain
        acceptance_report("10 personalization", ok, f"HR@5 div {div:.4f} vs plain {plain:.4f}")
        assert div > plain
        assert plain == pytest.approx(PERSONALIZATION_RECORDED["plain"], abs=0.05)
        assert div == pytest.approx(PERSONALIZATION_RECORDED["div"], abs=0.05)
