"""Pruning strategies: one-step, iterative, regularized (auto-balanced and
play-and-prune), reconstruction-driven and progressive soft pruning.

All strategies select whole coupled channel groups, never prune a layer
below one channel, and follow deterministic floor arithmetic: at iteration
``i`` the cumulative removal per selection space is
``floor(min(i * fraction, target) * original_count)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .base import BaseEstimator, check_fraction, check_graph
from .criteria import ChannelScore, ProbeBatch, autobalanced_partition, score_lp_norm
from .graph import (
    ADD, CHANNEL_AFFINE, CONV, DENSE, EMBEDDING_HEAD, GLOBAL_AVG_POOL, MAX_POOL,
    AVG_POOL, PART_HEAD, RELU,
    ChannelGroup, NetworkGraph, PruneError, PruneMask,
    coupled_channel_groups, count_flops, count_params, group_spaces,
    hard_prune, materialize, soft_prune_apply, zeroize_channels,
)
from .training import Trainer, TrainingError

__all__ = [
    "PruneSchedule",
    "iteration_plan",
    "select_groups_by_rank",
    "OneStepPruner",
    "IterativePruner",
    "AutoBalancedState",
    "autobalanced_train_step",
    "AutoBalancedPruner",
    "PlayPruneState",
    "play_and_prune_epoch",
    "PlayAndPrunePruner",
    "PsfpState",
    "psfp_rate",
    "PsfpPruner",
    "prune_layerwise_frozen",
    "STRATEGIES",
    "make_pruner",
]


@dataclass
class PruneSchedule:
    """How much to prune, how often, and with how much retraining."""

    fraction_per_iteration: float = 0.05
    ranking_epochs: int = 1
    retrain_epochs: int = 4
    target_compression: float = 0.5
    scope: str = "per_layer"

    def __post_init__(self):
        check_fraction(self.fraction_per_iteration, "fraction_per_iteration")
        if not 0.0 <= self.target_compression < 1.0:
            raise ValueError(f"target_compression must be in [0, 1), got {self.target_compression}")
        if self.scope not in ("per_layer", "global"):
            raise ValueError(f"scope must be 'per_layer' or 'global', got '{self.scope}'")
        if self.ranking_epochs < 0 or self.retrain_epochs < 0:
            raise ValueError("epoch counts cannot be negative")

    def n_iterations(self) -> int:
        if self.target_compression == 0.0:
            return 0
        return math.ceil(self.target_compression / self.fraction_per_iteration)

    def cumulative_removed(self, original: int, iteration: int) -> int:
        """Channels removed from a pool of ``original`` after ``iteration`` steps."""
        frac = min(iteration * self.fraction_per_iteration, self.target_compression)
        return min(int(math.floor(frac * original)), original - 1)


def iteration_plan(space_sizes: dict, schedule: PruneSchedule) -> list:
    """Per-iteration removal counts per space; a pure function of the inputs."""
    plan = []
    removed = {key: 0 for key in space_sizes}
    for it in range(1, schedule.n_iterations() + 1):
        step = {}
        for key, size in space_sizes.items():
            want = schedule.cumulative_removed(size, it)
            step[key] = want - removed[key]
            removed[key] = want
        plan.append(step)
    return plan


def _score_map(scores: Sequence[ChannelScore]) -> dict:
    return {(s.layer, s.channel): s.score for s in scores}


def _group_score(group: ChannelGroup, smap: dict) -> float:
    vals = [smap[m] for m in group.members if m in smap]
    if not vals:
        return math.inf  # unscored channels are never selected
    return float(np.mean(vals))


def select_groups_by_rank(graph: NetworkGraph, scores: Sequence[ChannelScore],
                          schedule: PruneSchedule, iteration: int,
                          original_sizes: dict, global_original: int) -> list:
    """Pick the groups to prune this iteration from ranked channel scores.

    Per-layer scope fills each space's cumulative quota; global scope fills
    a single channel budget from the globally sorted group list. Ties break
    toward the lower (layer, channel) members.
    """
    smap = _score_map(scores)
    groups = [g for g in coupled_channel_groups(graph) if g.prunable]
    spaces = group_spaces(groups)
    selected: list[ChannelGroup] = []
    if schedule.scope == "per_layer":
        for key in sorted(spaces):
            original = original_sizes[key]
            current = len(spaces[key])
            removed_so_far = original - current
            want = schedule.cumulative_removed(original, iteration) - removed_so_far
            want = min(want, current - 1)
            if want <= 0:
                continue
            ranked = sorted(spaces[key], key=lambda g: (_group_score(g, smap), g.members))
            selected.extend(ranked[:want])
    else:
        current_total = sum(len(g.members) for g in groups)
        removed_so_far = global_original - current_total
        budget = schedule.cumulative_removed(global_original, iteration) - removed_so_far
        if budget <= 0:
            return []
        survivors = {key: len(gs) for key, gs in spaces.items()}
        taken = 0
        for g in sorted(groups, key=lambda g: (_group_score(g, smap), g.members)):
            if taken >= budget:
                break
            key = g.layers()
            if survivors[key] <= 1:
                continue
            if taken + len(g.members) > budget and taken > 0:
                continue
            selected.append(g)
            survivors[key] -= 1
            taken += len(g.members)
    return selected


def _select_with_subset_criterion(graph: NetworkGraph, criterion, probe,
                                  schedule: PruneSchedule, iteration: int,
                                  original_sizes: dict) -> list:
    """Per-space selection for reconstruction-style subset criteria.

    Spaces that span several layers, or whose layer has no direct conv
    consumer, fall back to the l2 weight norm.
    """
    groups = [g for g in coupled_channel_groups(graph) if g.prunable]
    spaces = group_spaces(groups)
    selected = []
    fallback_scores = None
    for key in sorted(spaces):
        original = original_sizes[key]
        current = len(spaces[key])
        want = schedule.cumulative_removed(original, iteration) - (original - current)
        want = min(want, current - 1)
        if want <= 0:
            continue
        chosen_channels = None
        if len(key) == 1:
            layer = key[0]
            try:
                chosen_channels = criterion.select_prune(graph, layer, current - want, probe)
            except Exception:
                chosen_channels = None
        if chosen_channels is not None:
            layer = key[0]
            by_channel = {m: g for g in spaces[key] for m in g.members}
            selected.extend(by_channel[(layer, int(c))] for c in chosen_channels[:want])
        else:
            if fallback_scores is None:
                fallback_scores = _score_map(score_lp_norm(graph, p=2))
            ranked = sorted(spaces[key], key=lambda g: (_group_score(g, fallback_scores), g.members))
            selected.extend(ranked[:want])
    return selected


def _threshold_selection(graph: NetworkGraph, criterion, probe) -> list:
    """Lift per-layer threshold selections (redundant channels) to groups.

    A multi-layer group is pruned only when every member layer voted to
    prune its channel; each space keeps at least one group.
    """
    votes = {}
    for layer in graph.conv_ids():
        votes[layer] = set(criterion.select_prune(graph, layer, probe))
    groups = [g for g in coupled_channel_groups(graph) if g.prunable]
    spaces = group_spaces(groups)
    selected = []
    for key in sorted(spaces):
        chosen = [g for g in spaces[key]
                  if all(c in votes[nid] for nid, c in g.members)]
        chosen.sort(key=lambda g: g.members)
        max_prune = len(spaces[key]) - 1
        selected.extend(chosen[:max_prune])
    return selected


# ---------------------------------------------------------------------------
# shared pruner plumbing


class _PrunerBase(BaseEstimator):
    def _setup(self, graph, data, input_shape):
        check_graph(graph)
        if input_shape is None:
            input_shape = tuple(data.images.shape[1:])
        groups = [g for g in coupled_channel_groups(graph) if g.prunable]
        spaces = group_spaces(groups)
        original_sizes = {key: len(gs) for key, gs in spaces.items()}
        global_original = sum(len(g.members) for g in groups)
        return input_shape, original_sizes, global_original

    @staticmethod
    def _record(stage, graph, input_shape, eval_fn, loss=None, pruned_channels=0) -> dict:
        rec = {
            "stage": stage,
            "pruned_channels": int(pruned_channels),
            "flops": count_flops(graph, input_shape),
            "params": count_params(graph),
            "rank1": math.nan,
            "map": math.nan,
            "loss": math.nan if loss is None else float(loss),
        }
        if eval_fn is not None:
            metrics = eval_fn(graph)
            rec["rank1"] = float(metrics["rank1"])
            rec["map"] = float(metrics["map"])
        return rec

    def transform(self, graph=None) -> NetworkGraph:
        if not hasattr(self, "graph_"):
            raise RuntimeError("call fit before transform")
        return self.graph_

    def fit_transform(self, graph, data, **kw) -> NetworkGraph:
        self.fit(graph, data, **kw)
        return self.graph_


def _rank_or_select(criterion, graph, probe, schedule, iteration,
                    original_sizes, global_original) -> list:
    style = getattr(criterion, "selection_style", None)
    if style == "subset":
        return _select_with_subset_criterion(graph, criterion, probe, schedule,
                                             iteration, original_sizes)
    scores = criterion.rank(graph, probe)
    sched = schedule
    if getattr(criterion, "global_ranking", False) and schedule.scope == "per_layer":
        sched = PruneSchedule(schedule.fraction_per_iteration, schedule.ranking_epochs,
                              schedule.retrain_epochs, schedule.target_compression, "global")
    return select_groups_by_rank(graph, scores, sched, iteration,
                                 original_sizes, global_original)


class OneStepPruner(_PrunerBase):
    """Rank once, prune to the target in a single rewrite, then retrain."""

    def __init__(self, criterion=None, schedule: Optional[PruneSchedule] = None,
                 trainer: Optional[Trainer] = None):
        self.criterion = criterion
        self.schedule = schedule
        self.trainer = trainer

    def fit(self, graph, data, probe: Optional[ProbeBatch] = None,
            eval_fn: Optional[Callable] = None, input_shape=None,
            rng: Optional[np.random.Generator] = None):
        schedule = self.schedule or PruneSchedule()
        input_shape, original_sizes, global_original = self._setup(graph, data, input_shape)
        report = [self._record("baseline", graph, input_shape, eval_fn)]
        if getattr(self.criterion, "selection_style", None) == "threshold":
            selections = _threshold_selection(graph, self.criterion, probe)
        elif schedule.target_compression == 0.0:
            selections = []
        else:
            one_shot = PruneSchedule(schedule.target_compression, schedule.ranking_epochs,
                                     schedule.retrain_epochs, schedule.target_compression,
                                     schedule.scope)
            selections = _rank_or_select(self.criterion, graph, probe, one_shot, 1,
                                         original_sizes, global_original)
        pruned_channels = sum(len(g.members) for g in selections)
        if selections:
            pruned = hard_prune(graph, selections)
            history = self.trainer.train(pruned, data, schedule.retrain_epochs, rng=rng) \
                if self.trainer and schedule.retrain_epochs else []
            loss = history[-1] if history else None
        else:
            pruned = graph.copy()
            loss = None
        report.append(self._record("pruned", pruned, input_shape, eval_fn, loss, pruned_channels))
        self.graph_ = pruned
        self.report_ = report
        return self


class IterativePruner(_PrunerBase):
    """Alternate ranking, pruning a schedule fraction, and retraining."""

    def __init__(self, criterion=None, schedule: Optional[PruneSchedule] = None,
                 trainer: Optional[Trainer] = None):
        self.criterion = criterion
        self.schedule = schedule
        self.trainer = trainer

    def fit(self, graph, data, probe: Optional[ProbeBatch] = None,
            eval_fn: Optional[Callable] = None, input_shape=None,
            rng: Optional[np.random.Generator] = None):
        schedule = self.schedule or PruneSchedule()
        input_shape, original_sizes, global_original = self._setup(graph, data, input_shape)
        if rng is None and self.trainer is not None:
            rng = np.random.default_rng(self.trainer.seed)
        report = [self._record("baseline", graph, input_shape, eval_fn)]
        work = graph
        for it in range(1, schedule.n_iterations() + 1):
            selections = _rank_or_select(self.criterion, work, probe, schedule, it,
                                         original_sizes, global_original)
            pruned_channels = sum(len(g.members) for g in selections)
            if selections:
                work = hard_prune(work, selections)
            loss = None
            if self.trainer is not None and schedule.retrain_epochs:
                history = self.trainer.train(work, data, schedule.retrain_epochs, rng=rng)
                loss = history[-1] if history else None
            rec = self._record(f"iteration_{it}", work, input_shape, eval_fn, loss, pruned_channels)
            if eval_fn is not None and math.isnan(rec["rank1"]):
                raise PruneError(f"evaluation metric became NaN at iteration {it}; "
                                 "aborting the pruning loop")
            report.append(rec)
        self.graph_ = work
        self.report_ = report
        return self


# ---------------------------------------------------------------------------
# auto-balanced regularization


@dataclass
class AutoBalancedState:
    """Per-iteration partition and penalty bookkeeping.

    ``lambdas`` follow the log-ratio form against the per-layer threshold;
    weak channels (set P) carry positive coefficients, strong ones (set R)
    negative, and ``tau`` rebalances so stimulating R cancels the penalty
    value of P at the operating point.
    """

    alpha: float
    epsilon: float = 1e-8
    partition: dict = field(default_factory=dict)   # layer -> bool array, True = prune set
    lambdas: dict = field(default_factory=dict)     # layer -> float64 array
    thetas: dict = field(default_factory=dict)      # layer -> float
    s_p: float = 0.0
    s_r: float = 0.0
    tau: float = 0.0
    penalty_skipped: bool = False

    def refresh(self, graph: NetworkGraph, remain_targets: dict) -> None:
        """Re-partition every conv layer against its remain target."""
        self.partition.clear()
        self.lambdas.clear()
        self.thetas.clear()
        for layer, r in remain_targets.items():
            c_out = graph.nodes[layer].attrs["out_channels"]
            if not 1 <= r < c_out:
                continue  # already at or past its target; no penalty pressure
            prune, remain, theta = autobalanced_partition(graph, layer, r)
            in_p = np.zeros(c_out, dtype=bool)
            in_p[prune] = True
            w = graph.nodes[layer].params["weight"].data.astype(np.float64)
            m = np.abs(w.reshape(c_out, -1)).sum(axis=1)
            lam = np.where(in_p,
                           1.0 + np.log(theta / (m + self.epsilon)),
                           -1.0 - np.log(m / (theta + self.epsilon)))
            self.partition[layer] = in_p
            self.lambdas[layer] = lam
            self.thetas[layer] = theta

    def penalty_terms(self, graph: NetworkGraph):
        """Current S(P), S(R) from the live weights with frozen lambdas."""
        s_p = 0.0
        s_r = 0.0
        for layer, in_p in self.partition.items():
            w = graph.nodes[layer].params["weight"].data.astype(np.float64)
            sq = (w.reshape(w.shape[0], -1) ** 2).sum(axis=1)
            lam = self.lambdas[layer]
            s_p += float((lam[in_p] * sq[in_p]).sum())
            s_r += float((lam[~in_p] * sq[~in_p]).sum())
        return s_p, s_r

    def apply_penalty(self, graph: NetworkGraph) -> float:
        """Inject penalty gradients; returns the penalty's loss value."""
        if self.alpha == 0.0 or not self.partition:
            return 0.0
        s_p, s_r = self.penalty_terms(graph)
        self.s_p, self.s_r = s_p, s_r
        if s_r == 0.0:
            self.penalty_skipped = True
            return 0.0
        self.tau = -self.alpha * s_p / s_r
        for layer, in_p in self.partition.items():
            weight = graph.nodes[layer].params["weight"]
            lam = self.lambdas[layer]
            coeff = np.where(in_p, self.alpha * lam, self.tau * lam)
            grad = (2.0 * coeff[:, None, None, None] * weight.data.astype(np.float64))
            weight.grad = weight.grad + grad.astype(np.float32)
        return self.alpha * s_p + self.tau * s_r


def autobalanced_train_step(graph: NetworkGraph, state: AutoBalancedState,
                            images: np.ndarray, labels: np.ndarray,
                            trainer: Trainer) -> float:
    """One SGD step of task loss plus the channel-rebalancing penalty."""
    for p in graph.parameters():
        p.zero_grad()
    tape = T.Tape()
    outs = graph.forward(images, tape=tape)
    with T.tape_scope(tape):
        loss = trainer._loss_value(graph, outs, labels)
    T.backward(tape, loss)
    penalty = state.apply_penalty(graph)
    T.sgd_step(graph.parameters(), trainer.lr, trainer.momentum, trainer.weight_decay)
    return loss.item() + penalty


class AutoBalancedPruner(_PrunerBase):
    """Iterative pruning with capacity-transfer regularization.

    Each iteration partitions channels into prune/remain sets against the
    final per-layer targets, retrains under the rebalancing penalty, then
    removes this iteration's quota of weakest groups by l1 mass.
    """

    def __init__(self, schedule: Optional[PruneSchedule] = None,
                 trainer: Optional[Trainer] = None, alpha: float = 1e-4):
        self.schedule = schedule
        self.trainer = trainer
        self.alpha = alpha

    def fit(self, graph, data, probe=None, eval_fn=None, input_shape=None,
            rng: Optional[np.random.Generator] = None):
        schedule = self.schedule or PruneSchedule()
        trainer = self.trainer or Trainer()
        input_shape, original_sizes, global_original = self._setup(graph, data, input_shape)
        if rng is None:
            rng = np.random.default_rng(trainer.seed)
        report = [self._record("baseline", graph, input_shape, eval_fn)]
        work = graph.copy()
        state = AutoBalancedState(alpha=self.alpha)
        self.state_ = state
        for it in range(1, schedule.n_iterations() + 1):
            remain_targets = self._layer_remain_targets(work, schedule, original_sizes)
            state.refresh(work, remain_targets)
            losses = []
            for _ in range(schedule.retrain_epochs):
                for images, labels in trainer._epoch_batches(data, rng):
                    losses.append(autobalanced_train_step(work, state, images, labels, trainer))
            scores = score_lp_norm(work, p=1)
            selections = select_groups_by_rank(work, scores, schedule, it,
                                               original_sizes, global_original)
            if selections:
                work = hard_prune(work, selections)
            report.append(self._record(f"iteration_{it}", work, input_shape, eval_fn,
                                       np.mean(losses) if losses else None,
                                       sum(len(g.members) for g in selections)))
        self.graph_ = work
        self.report_ = report
        return self

    @staticmethod
    def _layer_remain_targets(graph: NetworkGraph, schedule: PruneSchedule,
                              original_sizes: dict) -> dict:
        targets = {}
        groups = [g for g in coupled_channel_groups(graph) if g.prunable]
        for key, gs in group_spaces(groups).items():
            original = original_sizes[key]
            final_keep = original - schedule.cumulative_removed(original, schedule.n_iterations())
            for layer in key:
                targets[layer] = final_keep
        return targets


# ---------------------------------------------------------------------------
# play and prune


@dataclass
class PlayPruneState:
    """Adaptive filter pruning against a pruning rate controller.

    Accuracy is measured in points (0..100). While the model stays within
    ``epsilon`` points of the reference accuracy ``xi``, the controller
    keeps raising the per-layer l1 removal thresholds; once accuracy falls
    below the tolerance, pruning pressure drops to zero.
    """

    epsilon: float = 1.0
    delta_w: float = 1.1
    lam: float = 1e-4
    alpha_frac: float = 0.10
    xi: float = 0.0
    w_a: dict = field(default_factory=dict)          # layer -> threshold
    t_r: float = 0.0
    lam_a: float = 0.0
    paused: bool = False

    def controller_update(self, accuracy_points: Optional[float]) -> None:
        if accuracy_points is None:
            self.paused = True
            return
        self.paused = False
        surplus = accuracy_points - (self.xi - self.epsilon)
        self.t_r = surplus if surplus > 0 else 0.0
        self.lam_a = self.lam * self.t_r
        for layer in self.w_a:
            self.w_a[layer] = self.delta_w * self.t_r * self.w_a[layer]


def _channel_l1(graph: NetworkGraph, layer: str) -> np.ndarray:
    w = graph.nodes[layer].params["weight"].data.astype(np.float64)
    return np.abs(w.reshape(w.shape[0], -1)).sum(axis=1)


def _histogram_threshold(values: np.ndarray, target_count: int, iters: int = 40) -> float:
    """Binary search a threshold with ``target_count`` values strictly below."""
    lo, hi = 0.0, float(values.max()) + 1e-9
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if (values < mid).sum() <= target_count:
            lo = mid
        else:
            hi = mid
    return lo


def init_adaptive_thresholds(graph: NetworkGraph, alpha_frac: float) -> dict:
    """First-epoch thresholds: the alpha-percent point of each layer's l1 mass."""
    w_a = {}
    for layer in graph.conv_ids():
        l1 = _channel_l1(graph, layer)
        target = int(math.floor(alpha_frac * l1.shape[0]))
        w_a[layer] = _histogram_threshold(l1, target)
    return w_a


def play_and_prune_epoch(graph: NetworkGraph, state: PlayPruneState, trainer: Trainer,
                         data, evaluator: Optional[Callable], rng: np.random.Generator):
    """One adversarial round: penalized training, threshold removal, controller.

    Returns ``(graph, removed_channel_count, mean_loss)``; the state is
    updated in place with the controller's new pressure values.
    """
    unimportant = {}
    for layer in graph.conv_ids():
        l1 = _channel_l1(graph, layer)
        count = int(math.floor(state.alpha_frac * l1.shape[0]))
        unimportant[layer] = set(np.argsort(l1, kind="stable")[:count].tolist())

    def hook(g: NetworkGraph) -> float:
        if state.lam_a == 0.0:
            return 0.0
        value = 0.0
        for layer, channels in unimportant.items():
            if not channels:
                continue
            weight = g.nodes[layer].params["weight"]
            idx = sorted(channels)
            value += float(np.abs(weight.data[idx].astype(np.float64)).sum())
            weight.grad[idx] += np.float32(state.lam_a) * np.sign(weight.data[idx])
        return state.lam_a * value

    history = trainer.train(graph, data, 1, rng=rng, grad_hook=hook)
    mean_loss = history[-1] if history else math.nan

    removed = 0
    if not state.paused and state.w_a:
        groups = [g for g in coupled_channel_groups(graph) if g.prunable]
        spaces = group_spaces(groups)
        l1_cache = {layer: _channel_l1(graph, layer) for layer in graph.conv_ids()}
        selections = []
        for key in sorted(spaces):
            chosen = [g for g in spaces[key]
                      if all(l1_cache[nid][c] < state.w_a.get(nid, 0.0) for nid, c in g.members)]
            chosen.sort(key=lambda g: g.members)
            chosen = chosen[:len(spaces[key]) - 1]
            selections.extend(chosen)
        if selections:
            graph = hard_prune(graph, selections)
            removed = sum(len(g.members) for g in selections)

    accuracy = None
    if evaluator is not None:
        accuracy = float(evaluator(graph))
    state.controller_update(accuracy)
    return graph, removed, mean_loss


class PlayAndPrunePruner(_PrunerBase):
    """Min-max pruning: remove as much as accuracy tolerance allows."""

    def __init__(self, trainer: Optional[Trainer] = None, epsilon: float = 1.0,
                 delta_w: float = 1.1, lam: float = 1e-4, alpha_frac: float = 0.10,
                 max_epochs: int = 20, target_compression: float = 0.5):
        self.trainer = trainer
        self.epsilon = epsilon
        self.delta_w = delta_w
        self.lam = lam
        self.alpha_frac = alpha_frac
        self.max_epochs = max_epochs
        self.target_compression = target_compression

    def fit(self, graph, data, probe=None, eval_fn=None, input_shape=None,
            rng: Optional[np.random.Generator] = None):
        if eval_fn is None:
            raise ValueError("play-and-prune needs an eval_fn for its rate controller")
        trainer = self.trainer or Trainer()
        input_shape, _, global_original = self._setup(graph, data, input_shape)
        if rng is None:
            rng = np.random.default_rng(trainer.seed)

        def accuracy_points(g):
            return 100.0 * float(eval_fn(g)["rank1"])

        xi = accuracy_points(graph)
        state = PlayPruneState(epsilon=self.epsilon, delta_w=self.delta_w, lam=self.lam,
                               alpha_frac=self.alpha_frac, xi=xi)
        state.w_a = init_adaptive_thresholds(graph, self.alpha_frac)
        state.t_r = self.epsilon
        state.lam_a = self.lam * state.t_r
        self.state_ = state

        report = [self._record("baseline", graph, input_shape, eval_fn)]
        work = graph.copy()
        removed_total = 0
        for epoch in range(1, self.max_epochs + 1):
            work, removed, loss = play_and_prune_epoch(work, state, trainer, data,
                                                       accuracy_points, rng)
            removed_total += removed
            report.append(self._record(f"epoch_{epoch}", work, input_shape, eval_fn,
                                       loss, removed))
            if removed_total >= self.target_compression * global_original:
                break
        self.graph_ = work
        self.report_ = report
        return self


# ---------------------------------------------------------------------------
# progressive soft pruning


@dataclass
class PsfpState:
    """Progressive soft pruning schedule state.

    The per-epoch rate follows ``P_i * (1 - exp(-k * epoch))`` with
    ``k = ln(4) / (N_epoch * D)``: it starts at zero, is non-decreasing,
    reaches three quarters of the final rate at epoch ``N_epoch * D`` and
    approaches ``P_i`` asymptotically.
    """

    p_final: float
    decay: float
    n_epochs: int
    norm: int = 2
    k: float = field(init=False)
    a: float = field(init=False)
    b: float = field(init=False)
    epoch: int = 0
    mask: Optional[PruneMask] = None

    def __post_init__(self):
        if self.decay <= 0:
            raise ValueError("pruning rate decay must be positive")
        if not 0.0 <= self.p_final < 1.0:
            raise ValueError("final pruning rate must be in [0, 1)")
        if self.n_epochs < 1:
            raise ValueError("need at least one epoch")
        self.k = math.log(4.0) / (self.n_epochs * self.decay)
        self.b = self.p_final
        self.a = -self.p_final


def psfp_rate(state: PsfpState, epoch: int) -> float:
    """Current soft pruning rate at ``epoch`` (0 before any training)."""
    if epoch < 0:
        raise ValueError("epoch cannot be negative")
    return state.a * math.exp(-state.k * epoch) + state.b


class PsfpPruner(_PrunerBase):
    """Soft-prune progressively while training, then materialize.

    Every epoch the weakest channels (by lp norm of their weights) are
    zeroized per layer at the scheduled rate but stay in the architecture,
    free to recover through later updates. After the last epoch the final
    ranking is applied per coupled space at the full rate and the zeroized
    channels are removed for real.
    """

    def __init__(self, trainer: Optional[Trainer] = None, p_final: float = 0.5,
                 decay: float = 0.3, epochs: int = 10, norm: int = 2):
        self.trainer = trainer
        self.p_final = p_final
        self.decay = decay
        self.epochs = epochs
        self.norm = norm

    def fit(self, graph, data, probe=None, eval_fn=None, input_shape=None,
            rng: Optional[np.random.Generator] = None):
        if self.p_final >= 1.0:
            raise ValueError("final pruning rate must be below 1")
        trainer = self.trainer or Trainer()
        input_shape, original_sizes, _ = self._setup(graph, data, input_shape)
        if rng is None:
            rng = np.random.default_rng(trainer.seed)
        state = PsfpState(self.p_final, self.decay, self.epochs, self.norm)
        self.state_ = state
        report = [self._record("baseline", graph, input_shape, eval_fn)]
        work = graph.copy()
        for epoch in range(1, self.epochs + 1):
            history = trainer.train(work, data, 1, rng=rng)
            rate = psfp_rate(state, epoch)
            mask = self._layer_mask(work, rate)
            state.epoch = epoch
            state.mask = mask
            # weights-only zeroing keeps gradients alive so channels can recover
            zeroize_channels(work, mask)
            masked = sum(int((~keep).sum()) for keep in mask.keep.values())
            report.append(self._record(f"epoch_{epoch}", work, input_shape, eval_fn,
                                       history[-1] if history else None, masked))
        final_mask = self._space_mask(work, self.p_final, original_sizes)
        state.mask = final_mask
        compact = materialize(work, final_mask)
        report.append(self._record("materialized", compact, input_shape, eval_fn))
        self.graph_ = compact
        self.soft_graph_ = soft_prune_apply(work, final_mask)
        self.report_ = report
        return self

    def _norms(self, graph: NetworkGraph, layer: str) -> np.ndarray:
        w = graph.nodes[layer].params["weight"].data.astype(np.float64)
        flat = w.reshape(w.shape[0], -1)
        if self.norm == 1:
            return np.abs(flat).sum(axis=1)
        return np.sqrt((flat * flat).sum(axis=1))

    def _layer_mask(self, graph: NetworkGraph, rate: float) -> PruneMask:
        keep = {}
        for layer in graph.conv_ids():
            norms = self._norms(graph, layer)
            c = norms.shape[0]
            n_zero = min(int(math.floor(rate * c)), c - 1)
            mask = np.ones(c, dtype=bool)
            if n_zero > 0:
                mask[np.argsort(norms, kind="stable")[:n_zero]] = False
            keep[layer] = mask
        return PruneMask(keep)

    def _space_mask(self, graph: NetworkGraph, rate: float, original_sizes: dict) -> PruneMask:
        keep = {layer: np.ones(graph.nodes[layer].attrs["out_channels"], dtype=bool)
                for layer in graph.conv_ids()}
        groups = [g for g in coupled_channel_groups(graph) if g.prunable]
        smap = {}
        for layer in graph.conv_ids():
            norms = self._norms(graph, layer)
            for c in range(norms.shape[0]):
                smap[(layer, c)] = norms[c]
        for key, gs in group_spaces(groups).items():
            n_zero = min(int(math.floor(rate * original_sizes.get(key, len(gs)))), len(gs) - 1)
            if n_zero <= 0:
                continue
            ranked = sorted(gs, key=lambda g: (_group_score(g, smap), g.members))
            for g in ranked[:n_zero]:
                for nid, c in g.members:
                    keep[nid][c] = False
        return PruneMask(keep)


# ---------------------------------------------------------------------------
# layer-frozen pruning


def _slice_consumers(graph: NetworkGraph, layers: Sequence[str]) -> list:
    """Convs and dense-likes whose input slices shrink when ``layers`` lose
    channels; the walk crosses channel-preserving nodes and additions."""
    hit = []
    seen = set()
    frontier = list(layers)
    while frontier:
        nid = frontier.pop(0)
        for cid in graph.consumers(nid):
            if cid in seen:
                continue
            seen.add(cid)
            kind = graph.nodes[cid].kind
            if kind in (CONV, DENSE, EMBEDDING_HEAD, PART_HEAD):
                hit.append(cid)
            elif kind in (CHANNEL_AFFINE, RELU, AVG_POOL, MAX_POOL, GLOBAL_AVG_POOL, ADD):
                frontier.append(cid)
    return hit


def prune_layerwise_frozen(graph: NetworkGraph, layer: str, criterion, target: float,
                           trainer: Trainer, data, probe=None, epochs: int = 4,
                           rng: Optional[np.random.Generator] = None) -> NetworkGraph:
    """Prune one layer to ``target`` and retrain only the touched tensors.

    Trainable tensors are the pruned layer's own weights and bias plus the
    weights of every consumer whose input slices were removed; everything
    else stays bit-identical through retraining. If the layer's channels
    are coupled through a residual path, the coupled siblings are pruned
    with it (structural necessity) and count as pruned layers.
    """
    if layer not in graph.nodes or graph.nodes[layer].kind != CONV:
        raise PruneError(f"'{layer}' is not a conv layer")
    check_fraction(target, "target", closed_top=False)
    scores = _score_map(criterion.rank(graph, probe))
    groups = [g for g in coupled_channel_groups(graph) if g.prunable]
    mine = [g for g in groups if any(nid == layer for nid, _ in g.members)]
    if not mine:
        raise PruneError(f"layer '{layer}' has no prunable channels")
    c = len(mine)
    n_prune = min(int(math.floor(target * c)), c - 1)
    ranked = sorted(mine, key=lambda g: (_group_score(g, scores), g.members))
    selections = ranked[:n_prune]
    pruned = hard_prune(graph, selections)

    touched_layers = sorted({nid for g in selections for nid, _ in g.members}) or [layer]
    trainable = []
    for nid in touched_layers:
        node = pruned.nodes[nid]
        trainable.append(node.params["weight"])
        if "bias" in node.params:
            trainable.append(node.params["bias"])
    for cid in _slice_consumers(pruned, touched_layers):
        trainable.append(pruned.nodes[cid].params["weight"])
    if not trainable:
        raise TrainingError("freeze left no trainable parameters")
    if trainer is not None and epochs > 0:
        trainer.train(pruned, data, epochs, params=trainable, rng=rng)
    return pruned


STRATEGIES = {
    "one_step": OneStepPruner,
    "iterative": IterativePruner,
    "autobalanced": AutoBalancedPruner,
    "play_and_prune": PlayAndPrunePruner,
    "psfp": PsfpPruner,
}


def make_pruner(name: str, **params):
    if name not in STRATEGIES:
        raise ValueError(f"unknown strategy '{name}' (choose from {sorted(STRATEGIES)})")
    return STRATEGIES[name](**params)
