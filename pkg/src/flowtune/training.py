"""SFT, subtrajectory-balance and combined losses with exact gradients, plus the training loop.

All gradients are first collected as coefficients on edge log-probabilities
(``dL/d log pi_e``) and then pushed through the per-node softmax:
``dL/dlogit_e = a_e - pi_e * sum_{e' sibling of e} a_e'``.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .catalog import Catalog, Dataset, Example
from .flownet import FlowTree, RewardVariant, SingularityError, personalized_log_reward
from .policy import (
    CONTEXTUAL,
    TABULAR,
    PolicyParams,
    edge_log_probs,
    history_counts,
    init_params,
    sample_nodes,
)
from .prefs import PrefModel

logger = logging.getLogger(__name__)

WHOLE = "whole"
LOG_FIELDS = ("epoch", "step", "sft_loss", "subtb_loss", "total", "valid_ndcg5")


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lam: float = 0.005
    reward_variant: RewardVariant = RewardVariant.PLAIN
    granularity: int | str = 1
    learning_rate: float = 0.1
    momentum: float = 0.0
    batch_size: int = 16
    max_epochs: int = 7
    patience: int = 2
    on_policy_samples: int = 1
    seed: int = 0
    max_steps: int | None = None
    policy_mode: str = TABULAR
    dim: int = 8
    history_free: bool = False
    sft_only: bool = False
    subtb_only: bool = False
    subtb_normalize: bool = False
    eval_k: int = 5

    def __post_init__(self):
        self.reward_variant = RewardVariant(self.reward_variant)
        if isinstance(self.granularity, str) and self.granularity != WHOLE:
            self.granularity = int(self.granularity)
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.granularity != WHOLE and self.granularity < 1:
            raise ValueError("granularity must be >= 1 or 'whole'")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.on_policy_samples < 1:
            raise ValueError("learning_rate, batch_size and on_policy_samples must be positive")
        if self.patience > self.max_epochs:
            raise ValueError("patience cannot exceed max_epochs")
        if self.sft_only and self.subtb_only:
            raise ValueError("sft_only and subtb_only are mutually exclusive")
        if self.subtb_only and self.lam == 0:
            raise ValueError("subtb_only needs lambda > 0")

    @property
    def subtb_weight(self) -> float:
        return 0.0 if self.sft_only else self.lam

    def as_dict(self) -> dict:
        d = asdict(self)
        d["reward_variant"] = self.reward_variant.value
        return d


# ---------------------------------------------------------------------------
# subtrajectories
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SubtrajectorySet:
    boundaries: tuple[int, ...]
    pairs: tuple[tuple[int, int], ...] = field(repr=False)


def subtrajectory_boundaries(T: int, k: int | str = 1) -> np.ndarray:
    """Cut points ``{0, k, 2k, ...} | {T}`` over a path of ``T`` edges (END included)."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if k == WHOLE:
        return np.array([0, T])
    if k < 1:
        raise ValueError("k must be >= 1")
    b = list(range(0, T, k))
    b.append(T)
    return np.array(b)


def enumerate_subtrajectories(T: int, k: int | str = 1) -> SubtrajectorySet:
    b = tuple(int(x) for x in subtrajectory_boundaries(T, k))
    pairs = tuple((b[i], b[j]) for i in range(len(b)) for j in range(i + 1, len(b)))
    return SubtrajectorySet(b, pairs)


def subtb_term(log_pi: Sequence[float], log_r: Sequence[float], m: int, n: int) -> float:
    """Squared balance violation of the segment covering edges ``m .. n-1``."""
    return (math.fsum(log_pi[m:n]) - math.fsum(log_r[m:n])) ** 2


def _subtb_deltas(delta: np.ndarray, bounds: np.ndarray) -> tuple[float, np.ndarray]:
    """Sum over boundary pairs of squared segment sums of ``delta``, and its gradient."""
    D = np.concatenate([[0.0], np.cumsum(delta)])[bounds]
    diff = D[None, :] - D[:, None]
    upper = np.triu(diff, 1)
    loss = float((upper ** 2).sum())
    gD = 2.0 * (upper.sum(axis=0) - upper.sum(axis=1))
    # delta_t feeds every D_j with bounds[j] > t
    tail = np.cumsum(gD[::-1])[::-1]
    first = np.searchsorted(bounds, np.arange(delta.size), side="right")
    return loss, tail[first]


def _edge_targets(tree: FlowTree, path: np.ndarray, variant, p_ui) -> np.ndarray:
    log_rp = tree.log_rp[path]
    if not np.all(np.isfinite(log_rp)):
        raise SingularityError("zero flow on path")
    return personalized_log_reward(variant, log_rp, p_ui)


def subtb_loss(item_id: str, context, params: PolicyParams, tree: FlowTree,
               variant=RewardVariant.PLAIN, granularity: int | str = 1,
               p_ui: float | None = None) -> float:
    """SubTB objective of one title: squared log-ratio mismatch summed over all boundary pairs."""
    path = tree.path(item_id)
    lp = edge_log_probs(tree, params, context)
    delta = lp[path] - _edge_targets(tree, path, variant, p_ui)
    loss, _ = _subtb_deltas(delta, subtrajectory_boundaries(path.size, granularity))
    return loss


# ---------------------------------------------------------------------------
# batch losses and gradients
# ---------------------------------------------------------------------------


def _history(ex: Example, config: TrainConfig | None) -> tuple:
    return () if config is not None and config.history_free else ex.history


def _context(ex: Example, params: PolicyParams, config: TrainConfig | None):
    rows, w = history_counts(_history(ex, config), params)
    if params.mode != CONTEXTUAL:
        return rows, w, None
    c = w @ params.embedding[rows] if rows.size else np.zeros(params.dim)
    return rows, w, c


def _push_to_params(grad: PolicyParams, tree: FlowTree, params: PolicyParams, lp: np.ndarray,
                    coef: np.ndarray, rows, w, c) -> None:
    """Add the gradient implied by ``dL/dlog pi = coef`` (one context) into ``grad``."""
    node_sum = np.zeros(tree.n_nodes)
    np.add.at(node_sum, tree.parent[1:], coef[1:])
    g = np.zeros(tree.n_nodes)
    g[1:] = coef[1:] - np.exp(lp[1:]) * node_sum[tree.parent[1:]]
    grad.bias += g
    if params.mode == CONTEXTUAL:
        grad.weight += np.outer(g, c)
        if rows.size:
            dc = params.weight.T @ g
            grad.embedding[rows] += w[:, None] * dc[None, :]


def _check_targets(batch: Sequence[Example], tree: FlowTree) -> None:
    for ex in batch:
        if ex.target not in tree:
            raise KeyError(f"unknown target item {ex.target!r}")


def sft_loss(batch: Sequence[Example], params: PolicyParams, tree: FlowTree,
             config: TrainConfig | None = None) -> float:
    """Mean over the batch of the length-normalized negative log-likelihood of each target."""
    return sft_loss_and_grad(batch, params, tree, config, want_grad=False)[0]


def sft_loss_and_grad(batch: Sequence[Example], params: PolicyParams, tree: FlowTree,
                      config: TrainConfig | None = None, want_grad: bool = True):
    _check_targets(batch, tree)
    grad = params.zeros_like() if want_grad else None
    total = 0.0
    n = len(batch)
    shared_lp = None
    shared_coef = np.zeros(tree.n_nodes) if params.mode == TABULAR else None
    for ex in batch:
        rows, w, c = _context(ex, params, config)
        if params.mode == TABULAR:
            if shared_lp is None:
                shared_lp = edge_log_probs(tree, params)
            lp = shared_lp
        else:
            lp = edge_log_probs(tree, params, c)
        path = tree.path(ex.target)
        total += -lp[path].sum() / path.size
        if not want_grad:
            continue
        if params.mode == TABULAR:
            shared_coef[path] -= 1.0 / (path.size * n)
        else:
            coef = np.zeros(tree.n_nodes)
            coef[path] = -1.0 / (path.size * n)
            _push_to_params(grad, tree, params, lp, coef, rows, w, c)
    if want_grad and params.mode == TABULAR and n:
        _push_to_params(grad, tree, params, shared_lp, shared_coef, rows, w, None)
    return total / n if n else 0.0, grad


def draw_on_policy(batch: Sequence[Example], params: PolicyParams, tree: FlowTree,
                   config: TrainConfig, rng: np.random.Generator) -> list[list[str]]:
    """``on_policy_samples`` titles per example from the current policy at temperature 1."""
    B = config.on_policy_samples
    if params.mode == TABULAR:
        lp = edge_log_probs(tree, params)
        leaves = sample_nodes(tree, lp, B * len(batch), rng)
        names = [tree.item_of_leaf[int(s)] for s in leaves]
        return [names[i * B:(i + 1) * B] for i in range(len(batch))]
    out = []
    for ex in batch:
        _, _, c = _context(ex, params, config)
        lp = edge_log_probs(tree, params, c)
        out.append([tree.item_of_leaf[int(s)] for s in sample_nodes(tree, lp, B, rng)])
    return out


def _pref(prefs: PrefModel | None, ex: Example, item: str, config: TrainConfig) -> float | None:
    if config.reward_variant is RewardVariant.PLAIN:
        return None
    if prefs is None:
        raise ValueError(f"reward variant {config.reward_variant.value!r} needs a preference model")
    return prefs.score(_history(ex, config), item, user=ex.user_id)


def loss_terms(batch: Sequence[Example], params: PolicyParams, tree: FlowTree, config: TrainConfig,
               prefs: PrefModel | None = None, samples: list[list[str]] | None = None,
               rng: np.random.Generator | None = None, want_grad: bool = False):
    """``(sft, subtb, total, grad)`` of the combined objective.

    ``total = w_sft * sft + lam * subtb`` where ``subtb`` is the raw sum over
    every sampled title and every boundary pair (divided by the number of
    titles when ``subtb_normalize`` is set) and ``w_sft`` is 0 under
    ``subtb_only``.  The sampled titles are held fixed when differentiating.
    """
    lam = config.subtb_weight
    if lam == 0.0:
        sft, grad = sft_loss_and_grad(batch, params, tree, config, want_grad)
        return sft, 0.0, sft, grad

    _check_targets(batch, tree)
    if samples is None:
        samples = draw_on_policy(batch, params, tree, config, rng or np.random.default_rng(config.seed))
    n = len(batch)
    n_titles = sum(len(s) for s in samples)
    sub_scale = lam / n_titles if config.subtb_normalize and n_titles else lam
    sft_w = 0.0 if config.subtb_only else 1.0
    grad = params.zeros_like() if want_grad else None
    sft_total = 0.0
    sub_total = 0.0
    tab = params.mode == TABULAR
    shared_lp = edge_log_probs(tree, params) if tab else None
    shared_coef = np.zeros(tree.n_nodes) if tab else None
    rows = w = None
    for ex, titles in zip(batch, samples):
        rows, w, c = _context(ex, params, config)
        lp = shared_lp if tab else edge_log_probs(tree, params, c)
        coef = shared_coef if tab else np.zeros(tree.n_nodes)
        path = tree.path(ex.target)
        sft_total += -lp[path].sum() / path.size
        if sft_w:
            coef[path] -= sft_w / (path.size * n)
        for item in titles:
            path = tree.path(item)
            delta = lp[path] - _edge_targets(tree, path, config.reward_variant, _pref(prefs, ex, item, config))
            loss, g = _subtb_deltas(delta, subtrajectory_boundaries(path.size, config.granularity))
            sub_total += loss
            if want_grad:
                np.add.at(coef, path, sub_scale * g)
        if want_grad and not tab:
            _push_to_params(grad, tree, params, lp, coef, rows, w, c)
    if want_grad and tab:
        _push_to_params(grad, tree, params, shared_lp, shared_coef, rows, w, None)
    sft = sft_total / n if n else 0.0
    if config.subtb_normalize and n_titles:
        sub_total /= n_titles
    return sft, sub_total, sft_w * sft + lam * sub_total, grad


def flower_loss(batch, params, tree, config, prefs=None, samples=None, rng=None) -> float:
    return loss_terms(batch, params, tree, config, prefs, samples, rng)[2]


def gradients(batch, params, tree, config, prefs=None, samples=None, rng=None) -> PolicyParams:
    """Analytic gradient of :func:`flower_loss` with the sampled titles held fixed."""
    return loss_terms(batch, params, tree, config, prefs, samples, rng, want_grad=True)[3]


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class EpochLog:
    epoch: int
    step: int
    sft_loss: float
    subtb_loss: float
    total: float
    valid_ndcg5: float = float("nan")


def write_log(rows: Sequence[EpochLog], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(LOG_FIELDS)
        for r in rows:
            wr.writerow([r.epoch, r.step, repr(r.sft_loss), repr(r.subtb_loss), repr(r.total),
                         "" if math.isnan(r.valid_ndcg5) else repr(r.valid_ndcg5)])


def validation_ndcg(examples: Sequence[Example], params: PolicyParams, tree: FlowTree,
                    config: TrainConfig, k: int = 5) -> float:
    from .decode import generate_topk
    from .evaluation import hr_ndcg
    from .policy import encode_context

    recs = [generate_topk(tree, encode_context(_history(ex, config), params), params, k)
            for ex in examples]
    return hr_ndcg(recs, [ex.target for ex in examples])[1]


def train(dataset: Dataset, catalog: Catalog, tree: FlowTree, config: TrainConfig,
          prefs: PrefModel | None = None, init: PolicyParams | None = None,
          step_callback=None, epoch_callback=None) -> tuple[PolicyParams, list[EpochLog]]:
    """Mini-batch gradient descent on the combined objective.

    Each epoch shuffles the train examples; after it, NDCG@5 on the
    validation split decides early stopping and the best parameters are
    returned.  Without validation examples the final parameters are
    returned.  Runs are reproducible for a fixed ``config.seed``.
    """
    rng = np.random.default_rng(config.seed)
    params = init.copy() if init is not None else init_params(
        tree, config.policy_mode, config.dim, item_ids=catalog.item_ids, seed=config.seed)
    train_ex = [ex for ex in dataset.train if ex.target in tree]
    if len(train_ex) < len(dataset.train):
        logger.warning("%d train examples target items outside the tree; dropped",
                       len(dataset.train) - len(train_ex))
    if not train_ex:
        raise ValueError("no usable training examples")
    valid = [ex for ex in dataset.valid]
    velocity = params.zeros_like() if config.momentum else None

    log: list[EpochLog] = []
    best, best_score, bad = params.copy(), -math.inf, 0
    step = 0
    done = False
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(len(train_ex))
        acc = np.zeros(3)
        n_steps = 0
        for start in range(0, len(order), config.batch_size):
            batch = [train_ex[j] for j in order[start:start + config.batch_size]]
            sft, sub, total, grad = loss_terms(batch, params, tree, config, prefs, rng=rng, want_grad=True)
            if not (math.isfinite(total) and all(np.all(np.isfinite(a)) for a in grad.arrays())):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch} step {step}: sft={sft} subtb={sub}")
            if velocity is not None:
                for v, g in zip(velocity.arrays(), grad.arrays()):
                    v *= config.momentum
                    v += g
                params.axpy(-config.learning_rate, velocity)
            else:
                params.axpy(-config.learning_rate, grad)
            acc += (sft, sub, total)
            n_steps += 1
            step += 1
            if step_callback is not None:
                step_callback(step, params)
            if config.max_steps is not None and step >= config.max_steps:
                done = True
                break
        acc /= max(n_steps, 1)
        entry = EpochLog(epoch, step, float(acc[0]), float(acc[1]), float(acc[2]))
        if valid:
            entry.valid_ndcg5 = validation_ndcg(valid, params, tree, config, config.eval_k)
            if entry.valid_ndcg5 > best_score:
                best, best_score, bad = params.copy(), entry.valid_ndcg5, 0
            else:
                bad += 1
        log.append(entry)
        if epoch_callback is not None:
            epoch_callback(epoch, params)
        logger.info("epoch %d step %d sft %.5f subtb %.5f total %.5f ndcg5 %s",
                    epoch, step, *acc, entry.valid_ndcg5)
        if done or (valid and bad >= config.patience > 0):
            break
    return (best if valid else params), log
