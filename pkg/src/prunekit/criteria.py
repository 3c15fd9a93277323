"""Channel importance criteria.

Every criterion maps a graph (plus, for feature-map criteria, a probe
batch) to per-channel scores or to explicit keep/prune selections.
Scores accumulate in float64 so rankings do not flip on summation noise;
lower score always means "prune first".
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .base import BaseEstimator, check_conv_layer, check_graph, check_probe
from .graph import (
    AVG_POOL, CHANNEL_AFFINE, CONV, DENSE, EMBEDDING_HEAD, GLOBAL_AVG_POOL,
    INPUT, MAX_POOL, PART_HEAD, RELU, GraphError, NetworkGraph,
)

__all__ = [
    "ChannelScore",
    "ProbeBatch",
    "score_lp_norm",
    "channel_similarity",
    "select_redundant",
    "score_fpgm",
    "autobalanced_partition",
    "score_entropy",
    "score_taylor",
    "select_thinet",
    "select_lasso",
    "score_nisp",
    "embedding_variance_importance",
    "classifier_weight_importance",
    "scores_to_csv",
    "WeightNormCriterion",
    "GeometricMedianCriterion",
    "EntropyCriterion",
    "TaylorCriterion",
    "NispCriterion",
    "RedundancyCriterion",
    "ThiNetCriterion",
    "LassoCriterion",
    "CRITERIA",
    "make_criterion",
]


@dataclass(frozen=True)
class ChannelScore:
    """Importance of one conv output channel. Lower is pruned first."""

    layer: str
    channel: int
    score: float


@dataclass
class ProbeBatch:
    """A labelled sample of the dataset a criterion is evaluated on."""

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"probe images must be [N,C,H,W], got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError("probe labels must match image count")
        if len(self) == 0:
            raise ValueError("probe batch is empty")

    def __len__(self) -> int:
        return self.images.shape[0]

    def batches(self, size: int):
        for start in range(0, len(self), size):
            yield self.images[start:start + size], self.labels[start:start + size]


def _channel_matrix(graph: NetworkGraph, layer: str) -> np.ndarray:
    """Conv weights flattened to [C_out, C_in*k*k] in float64."""
    node = check_conv_layer(graph, layer)
    w = node.params["weight"].data.astype(np.float64)
    return w.reshape(w.shape[0], -1)


# ---------------------------------------------------------------------------
# weight-based criteria


def score_lp_norm(graph: NetworkGraph, p: int = 1, layers: Optional[Sequence[str]] = None) -> list:
    """Per-channel weight norm: sum of |w| for p=1, Euclidean norm for p=2."""
    if p not in (1, 2):
        raise ValueError(f"p must be 1 or 2, got {p}")
    check_graph(graph)
    ids = list(layers) if layers is not None else graph.conv_ids()
    if not ids:
        raise GraphError("graph has no conv layers to score")
    out = []
    for nid in ids:
        w = _channel_matrix(graph, nid)
        if p == 1:
            s = np.abs(w).sum(axis=1)
        else:
            s = np.sqrt((w * w).sum(axis=1))
        out.extend(ChannelScore(nid, c, float(s[c])) for c in range(w.shape[0]))
    return out


def channel_similarity(wi: np.ndarray, wj: np.ndarray) -> float:
    """Cosine of the angle between two flattened channel weight vectors.

    A zero-norm channel has no direction; its similarity to anything is 0.
    """
    ni = np.linalg.norm(wi)
    nj = np.linalg.norm(wj)
    if ni == 0.0 or nj == 0.0:
        return 0.0
    return float(np.dot(wi, wj) / (ni * nj))


def select_redundant(graph: NetworkGraph, layer: str, tau: float,
                     keep_rule: str = "lowest_index", seed: int = 0) -> tuple:
    """Cluster channels by mean pairwise cosine similarity above ``tau``.

    Clusters are merged greedily while the best cross-cluster mean
    similarity exceeds the threshold; one representative per cluster is
    kept. ``keep_rule`` is 'lowest_index' for reproducible selections or
    'random' (seeded) to match sampling-based variants.
    """
    node = check_conv_layer(graph, layer)
    if not -1.0 < tau <= 1.0:
        raise ValueError(f"tau must be in (-1, 1], got {tau}")
    if keep_rule not in ("lowest_index", "random"):
        raise ValueError(f"unknown keep_rule '{keep_rule}'")
    c_out = node.attrs["out_channels"]
    if c_out == 1:
        return [0], []
    w = _channel_matrix(graph, layer)
    sim = np.zeros((c_out, c_out))
    for i in range(c_out):
        for j in range(i + 1, c_out):
            sim[i, j] = sim[j, i] = channel_similarity(w[i], w[j])

    clusters: list[list[int]] = [[c] for c in range(c_out)]
    while len(clusters) > 1:
        best = None
        for a in range(len(clusters)):
            for b in range(a + 1, len(clusters)):
                mean_sim = float(np.mean([sim[i, j] for i in clusters[a] for j in clusters[b]]))
                if best is None or mean_sim > best[0] + 1e-15:
                    best = (mean_sim, a, b)
        if best is None or best[0] <= tau:
            break
        _, a, b = best
        merged = sorted(clusters[a] + clusters[b])
        clusters = [cl for k, cl in enumerate(clusters) if k not in (a, b)] + [merged]
        clusters.sort(key=lambda cl: cl[0])

    rng = np.random.default_rng(seed)
    keep, prune = [], []
    for cl in clusters:
        pick = cl[0] if keep_rule == "lowest_index" else int(rng.choice(cl))
        keep.append(pick)
        prune.extend(c for c in cl if c != pick)
    return sorted(keep), sorted(prune)


def score_fpgm(graph: NetworkGraph, layer: str) -> list:
    """Distance-sum to all other channels; channels near the geometric
    median of the layer score lowest and are pruned first."""
    node = check_conv_layer(graph, layer)
    if node.attrs["out_channels"] < 2:
        raise GraphError(f"layer '{layer}' needs at least 2 channels for a median criterion")
    w = _channel_matrix(graph, layer)
    diff = w[:, None, :] - w[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=2))
    g = dist.sum(axis=1)
    return [ChannelScore(layer, c, float(g[c])) for c in range(w.shape[0])]


def autobalanced_partition(graph: NetworkGraph, layer: str, r: int) -> tuple:
    """Split channels into a prune set P and a remain set R of size ``r``.

    The threshold sits between the r-th and (r+1)-th largest l1 mass so
    the strict comparisons of the defining inequalities hold; exact ties
    are resolved toward keeping lower channel indices.
    """
    node = check_conv_layer(graph, layer)
    c_out = node.attrs["out_channels"]
    if not 1 <= r < c_out:
        raise ValueError(f"r must be in [1, {c_out - 1}], got {r}")
    w = _channel_matrix(graph, layer)
    m = np.abs(w).sum(axis=1)
    order = sorted(range(c_out), key=lambda c: (-m[c], c))
    remain = sorted(order[:r])
    prune = sorted(order[r:])
    m_r, m_next = m[order[r - 1]], m[order[r]]
    theta = float((m_r + m_next) / 2.0) if m_r > m_next else float(m_r)
    return prune, remain, theta


# ---------------------------------------------------------------------------
# feature-map criteria


_PROBE_CHUNK = 64


def _layer_activations(graph: NetworkGraph, probe: ProbeBatch, node_ids: Sequence[str]) -> dict:
    """Forward the probe (no tape) and collect selected node outputs."""
    wanted = {nid: [] for nid in node_ids}
    for images, _ in probe.batches(_PROBE_CHUNK):
        outs = graph.forward(images)
        for nid in node_ids:
            wanted[nid].append(outs[nid].data.copy())
    return {nid: np.concatenate(chunks, axis=0) for nid, chunks in wanted.items()}


def score_entropy(graph: NetworkGraph, layer: str, probe: ProbeBatch, m_bins: int = 32) -> list:
    """Entropy of the pooled activation distribution of each channel.

    Each sample contributes one globally average-pooled scalar per channel;
    the scalars are histogrammed into ``m_bins`` equal-width bins over the
    channel's observed [min, max]. Constant channels get entropy 0.
    """
    check_conv_layer(graph, layer)
    check_probe(probe, min_samples=2)
    if m_bins < 1:
        raise ValueError("m_bins must be positive")
    acts = _layer_activations(graph, probe, [layer])[layer]
    pooled = acts.astype(np.float64).mean(axis=(2, 3))          # [N, C]
    out = []
    for c in range(pooled.shape[1]):
        vals = pooled[:, c]
        lo, hi = float(vals.min()), float(vals.max())
        if hi <= lo:
            out.append(ChannelScore(layer, c, 0.0))
            continue
        counts, _ = np.histogram(vals, bins=m_bins, range=(lo, hi))
        p = counts.astype(np.float64) / counts.sum()
        nz = p[p > 0]
        out.append(ChannelScore(layer, c, float(-(nz * np.log(nz)).sum())))
    return out


def score_taylor(graph: NetworkGraph, loss_fn: Callable, probe: ProbeBatch,
                 layers: Optional[Sequence[str]] = None) -> list:
    """First-order estimate of the loss change from removing a channel.

    The raw score of a channel is the mean over probe samples and spatial
    positions of |gradient * activation| at the conv output. Raw scores
    are l2-normalized within each layer so the ranking is comparable
    across layers; an all-zero layer keeps its zero scores.

    ``loss_fn(outputs, labels)`` must build a scalar loss tensor from the
    forward results of one probe chunk.
    """
    check_graph(graph)
    check_probe(probe)
    ids = list(layers) if layers is not None else graph.conv_ids()
    sums = {nid: np.zeros(graph.nodes[nid].attrs["out_channels"], dtype=np.float64) for nid in ids}
    counts = {nid: 0 for nid in ids}
    for images, labels in probe.batches(_PROBE_CHUNK):
        tape = T.Tape()
        outs = graph.forward(images, tape=tape, retain=ids)
        with T.tape_scope(tape):
            loss = loss_fn(outs, labels)
        T.backward(tape, loss)
        for nid in ids:
            act = outs[nid]
            if act.grad is None:
                continue  # disconnected from the loss: contributes zero
            prod = np.abs(act.grad.astype(np.float64) * act.data.astype(np.float64))
            sums[nid] += prod.sum(axis=(0, 2, 3))
            counts[nid] += prod.shape[0] * prod.shape[2] * prod.shape[3]
    out = []
    for nid in ids:
        raw = sums[nid] / max(1, counts[nid])
        norm = float(np.sqrt((raw * raw).sum()))
        if norm > 0:
            raw = raw / norm
        out.extend(ChannelScore(nid, c, float(raw[c])) for c in range(raw.shape[0]))
    return out


def _direct_conv_consumer(graph: NetworkGraph, layer: str) -> Optional[str]:
    """The conv fed by this layer through channel-preserving nodes only."""
    frontier = [layer]
    seen = set()
    while frontier:
        nid = frontier.pop(0)
        for cid in graph.consumers(nid):
            node = graph.nodes[cid]
            if node.kind == CONV:
                return cid
            if node.kind in (CHANNEL_AFFINE, RELU, AVG_POOL, MAX_POOL) and cid not in seen:
                seen.add(cid)
                frontier.append(cid)
    return None


def _contribution_matrix(graph: NetworkGraph, layer: str, probe: ProbeBatch,
                         n_locations: int, seed: int) -> np.ndarray:
    """Per-channel additive contributions to sampled consumer outputs.

    Row s holds, for one sampled (image, output channel, y, x) of the
    consumer conv's pre-activation output, the term each input channel
    adds to that value. Summing a row over kept channels reconstructs the
    sampled output minus bias.
    """
    consumer_id = _direct_conv_consumer(graph, layer)
    if consumer_id is None:
        raise GraphError(f"layer '{layer}' has no direct conv consumer; "
                         "reconstruction criteria need one")
    consumer = graph.nodes[consumer_id]
    feed_id = consumer.inputs[0]
    feats = _layer_activations(graph, probe, [feed_id])[feed_id].astype(np.float64)
    n, c_in, h, w = feats.shape
    kern = consumer.attrs["kernel"]
    stride = consumer.attrs["stride"]
    pad = consumer.attrs["pad"]
    oh = (h + 2 * pad - kern) // stride + 1
    ow = (w + 2 * pad - kern) // stride + 1
    weight = consumer.params["weight"].data.astype(np.float64)
    c_out = weight.shape[0]
    if pad:
        padded = np.zeros((n, c_in, h + 2 * pad, w + 2 * pad))
        padded[:, :, pad:pad + h, pad:pad + w] = feats
    else:
        padded = feats
    rng = np.random.default_rng(seed)
    rows = []
    for img in range(n):
        for _ in range(n_locations):
            o = int(rng.integers(c_out))
            y = int(rng.integers(oh))
            x = int(rng.integers(ow))
            patch = padded[img, :, y * stride:y * stride + kern, x * stride:x * stride + kern]
            rows.append((weight[o] * patch).sum(axis=(1, 2)))
    return np.asarray(rows)                                      # [S, C_in]


def select_thinet(graph: NetworkGraph, layer: str, target_keep: int, probe: ProbeBatch,
                  n_locations: int = 10, seed: int = 0) -> list:
    """Greedy subset of channels whose removal least perturbs the consumer.

    Grows the prune set one channel at a time, always adding the channel
    that minimizes the squared sum of removed contributions over the
    sampled locations; ties break toward the lower channel index.
    """
    node = check_conv_layer(graph, layer)
    check_probe(probe)
    c_out = node.attrs["out_channels"]
    if not 1 <= target_keep < c_out:
        raise ValueError(f"target_keep must be in [1, {c_out - 1}], got {target_keep}")
    a = _contribution_matrix(graph, layer, probe, n_locations, seed)
    prune: list[int] = []
    removed = np.zeros(a.shape[0])
    while c_out - len(prune) > target_keep:
        best_c, best_cost = -1, np.inf
        for c in range(c_out):
            if c in prune:
                continue
            cost = float(((removed + a[:, c]) ** 2).sum())
            if cost < best_cost - 1e-15 or (abs(cost - best_cost) <= 1e-15 and c < best_c):
                best_c, best_cost = c, cost
        prune.append(best_c)
        removed = removed + a[:, best_c]
    return sorted(prune)


def _lasso_cd(a: np.ndarray, y: np.ndarray, lam: float, beta0: np.ndarray,
              tol: float = 1e-6, max_sweeps: int = 10_000) -> np.ndarray:
    """Cyclic coordinate descent for 1/(2N)||y - A b||^2 + lam ||b||_1."""
    n = a.shape[0]
    col_sq = (a * a).sum(axis=0) / n
    beta = beta0.copy()
    resid = y - a @ beta
    for _ in range(max_sweeps):
        max_delta = 0.0
        for j in range(a.shape[1]):
            if col_sq[j] == 0.0:
                continue
            old = beta[j]
            rho = (a[:, j] @ resid) / n + col_sq[j] * old
            new = np.sign(rho) * max(abs(rho) - lam, 0.0) / col_sq[j]
            if new != old:
                resid += a[:, j] * (old - new)
                beta[j] = new
                max_delta = max(max_delta, abs(new - old))
        if max_delta <= tol:
            break
    return beta


def select_lasso(graph: NetworkGraph, layer: str, target_keep: int, probe: ProbeBatch,
                 n_locations: int = 10, seed: int = 0) -> tuple:
    """Channel subset selection by l1-regularized reconstruction.

    Solves the channel-mask regression with coordinate descent (weights
    fixed) and bisects the regularization strength until exactly
    ``target_keep`` coefficients stay nonzero. Returns
    ``(beta, prune_set, lam, exact)``; ``exact`` is False when the
    bisection plateaus and the nearest achievable count was returned.
    """
    node = check_conv_layer(graph, layer)
    check_probe(probe)
    c_out = node.attrs["out_channels"]
    if not 1 <= target_keep < c_out:
        raise ValueError(f"target_keep must be in [1, {c_out - 1}], got {target_keep}")
    a = _contribution_matrix(graph, layer, probe, n_locations, seed)
    y = a.sum(axis=1)
    n = a.shape[0]
    lam_max = float(np.abs(a.T @ y).max() / n)
    beta = _lasso_cd(a, y, lam_max, np.zeros(c_out))
    lo, hi = 0.0, lam_max
    best = None                                                   # (count gap, lam, beta)
    for _ in range(50):
        mid = 0.5 * (lo + hi)
        beta = _lasso_cd(a, y, mid, beta)
        nonzero = int(np.count_nonzero(beta))
        gap = abs(nonzero - target_keep)
        if best is None or gap < best[0]:
            best = (gap, mid, beta.copy())
        if nonzero == target_keep:
            break
        if nonzero > target_keep:
            lo = mid
        else:
            hi = mid
    gap, lam, beta = best
    prune = [int(c) for c in np.flatnonzero(beta == 0.0)]
    return beta, prune, lam, gap == 0


# ---------------------------------------------------------------------------
# propagated importance


def score_nisp(graph: NetworkGraph, final_importance: np.ndarray) -> list:
    """Back-propagate feature importance to every conv channel.

    Dense-like layers transfer scores through the absolute weight matrix,
    channel-preserving layers pass them through unchanged, additions give
    both branches the full score, and fan-out sums contributions.
    """
    check_graph(graph)
    emb = graph.embedding_id()
    final_importance = np.asarray(final_importance, dtype=np.float64)
    if final_importance.ndim != 1 or np.any(final_importance < 0):
        raise ValueError("final importance must be a non-negative vector")
    emb_node = graph.nodes[emb]
    if emb_node.kind in (EMBEDDING_HEAD, DENSE):
        want = emb_node.attrs["out_features"]
    elif emb_node.kind == GLOBAL_AVG_POOL:
        want = graph.nodes[emb_node.inputs[0]].attrs.get("out_channels") or \
            graph.nodes[emb_node.inputs[0]].attrs.get("channels")
    else:
        want = None
    if want is not None and final_importance.shape[0] != want:
        raise ValueError(f"final importance length {final_importance.shape[0]} "
                         f"does not match embedding dimension {want}")

    incoming: dict[str, np.ndarray] = {emb: final_importance}
    scores: dict[str, np.ndarray] = {}
    for nid in reversed(graph.order):
        node = graph.nodes[nid]
        s = incoming.pop(nid, None)
        if s is None:
            continue
        if node.kind == CONV:
            scores[nid] = s
            w = np.abs(node.params["weight"].data.astype(np.float64)).sum(axis=(2, 3))
            push = w.T @ s
        elif node.kind in (DENSE, EMBEDDING_HEAD):
            push = np.abs(node.params["weight"].data.astype(np.float64)).T @ s
        elif node.kind == PART_HEAD:
            parts, cls, dpart = node.attrs["parts"], node.attrs["classes"], node.attrs["part_dim"]
            chunks = []
            for i in range(parts):
                wi = np.abs(node.params[f"weight_{i}"].data.astype(np.float64))
                chunks.append(wi.T @ s[i * cls:(i + 1) * cls])
            push = np.concatenate(chunks)
        elif node.kind == INPUT:
            continue
        else:
            push = s
        for src in node.inputs:
            if src in incoming:
                incoming[src] = incoming[src] + push
            else:
                incoming[src] = push.copy()
    out = []
    for nid in graph.conv_ids():
        s = scores.get(nid)
        if s is None:
            s = np.zeros(graph.nodes[nid].attrs["out_channels"])
        out.extend(ChannelScore(nid, c, float(s[c])) for c in range(s.shape[0]))
    return out


def embedding_variance_importance(graph: NetworkGraph, probe: ProbeBatch) -> np.ndarray:
    """Default final-feature ranking: per-feature variance over the probe."""
    check_probe(probe, min_samples=2)
    emb = graph.embedding_id()
    feats = _layer_activations(graph, probe, [emb])[emb].astype(np.float64)
    return feats.var(axis=0)


def classifier_weight_importance(graph: NetworkGraph, classifier_id: str = "classifier") -> np.ndarray:
    """Alternative ranking from a classifier head: column norms of |W|."""
    if classifier_id not in graph.nodes:
        raise GraphError(f"no classifier node '{classifier_id}' in graph")
    w = graph.nodes[classifier_id].params["weight"].data.astype(np.float64)
    return np.abs(w).sum(axis=0)


def scores_to_csv(scores: Sequence[ChannelScore], path: Optional[str] = None) -> str:
    """Export a score table as CSV (layer, channel, score, rank).

    Rank 0 is pruned first; rows keep (layer, channel) order while the
    rank column reflects the ascending-score ordering with deterministic
    ties.
    """
    rows = sorted(scores, key=lambda s: (s.layer, s.channel))
    order = sorted(range(len(rows)), key=lambda i: (rows[i].score, rows[i].layer, rows[i].channel))
    rank = {idx: pos for pos, idx in enumerate(order)}
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["layer", "channel", "score", "rank"])
    for i, s in enumerate(rows):
        writer.writerow([s.layer, s.channel, repr(s.score), rank[i]])
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    return text


# ---------------------------------------------------------------------------
# estimator wrappers


class _RankingCriterion(BaseEstimator):
    """Base for criteria that score every prunable channel."""

    requires_probe = False
    global_ranking = False

    def rank(self, graph: NetworkGraph, probe: Optional[ProbeBatch] = None) -> list:
        raise NotImplementedError

    def fit(self, graph: NetworkGraph, probe: Optional[ProbeBatch] = None):
        self.scores_ = self.rank(graph, probe)
        return self


class WeightNormCriterion(_RankingCriterion):
    """Rank channels by the lp norm of their weight slice."""

    def __init__(self, p: int = 1):
        self.p = p

    def rank(self, graph, probe=None):
        return score_lp_norm(graph, self.p)


class GeometricMedianCriterion(_RankingCriterion):
    """Rank channels by total distance to the other channels of the layer."""

    def rank(self, graph, probe=None):
        out = []
        for nid in graph.conv_ids():
            if graph.nodes[nid].attrs["out_channels"] < 2:
                continue  # a single channel can never be pruned
            out.extend(score_fpgm(graph, nid))
        return out


class EntropyCriterion(_RankingCriterion):
    """Rank channels by pooled-activation entropy over a probe."""

    requires_probe = True

    def __init__(self, bins: int = 32):
        self.bins = bins

    def rank(self, graph, probe=None):
        check_probe(probe, min_samples=2)
        out = []
        for nid in graph.conv_ids():
            out.extend(score_entropy(graph, nid, probe, self.bins))
        return out


class TaylorCriterion(_RankingCriterion):
    """Rank channels by |gradient x activation|, comparable across layers."""

    requires_probe = True
    global_ranking = True

    def __init__(self, loss_builder: Optional[Callable] = None):
        self.loss_builder = loss_builder

    def rank(self, graph, probe=None):
        check_probe(probe)
        loss_fn = self.loss_builder
        if loss_fn is None:
            sink = graph.sink_id()

            def loss_fn(outputs, labels):
                return T.cross_entropy_logits(outputs[sink], labels)

        return score_taylor(graph, loss_fn, probe)


class NispCriterion(_RankingCriterion):
    """Back-propagated final-feature importance."""

    requires_probe = True

    def __init__(self, importance: str = "variance"):
        self.importance = importance

    def rank(self, graph, probe=None):
        if self.importance == "variance":
            vec = embedding_variance_importance(graph, check_probe(probe, 2))
        elif self.importance == "classifier":
            vec = classifier_weight_importance(graph)
        else:
            raise ValueError(f"unknown importance mode '{self.importance}'")
        return score_nisp(graph, vec)


class RedundancyCriterion(BaseEstimator):
    """Threshold-based selection of near-duplicate channels."""

    requires_probe = False
    selection_style = "threshold"

    def __init__(self, tau: float = 0.7, keep_rule: str = "lowest_index", seed: int = 0):
        self.tau = tau
        self.keep_rule = keep_rule
        self.seed = seed

    def select_prune(self, graph: NetworkGraph, layer: str,
                     probe: Optional[ProbeBatch] = None) -> list:
        _, prune = select_redundant(graph, layer, self.tau, self.keep_rule, self.seed)
        return prune


class ThiNetCriterion(BaseEstimator):
    """Greedy reconstruction-error subset selection."""

    requires_probe = True
    selection_style = "subset"

    def __init__(self, locations: int = 10, seed: int = 0):
        self.locations = locations
        self.seed = seed

    def select_prune(self, graph: NetworkGraph, layer: str, keep: int,
                     probe: Optional[ProbeBatch] = None) -> list:
        return select_thinet(graph, layer, keep, check_probe(probe), self.locations, self.seed)


class LassoCriterion(BaseEstimator):
    """Reconstruction subset selection through an l1-regularized mask."""

    requires_probe = True
    selection_style = "subset"

    def __init__(self, locations: int = 10, seed: int = 0):
        self.locations = locations
        self.seed = seed

    def select_prune(self, graph: NetworkGraph, layer: str, keep: int,
                     probe: Optional[ProbeBatch] = None) -> list:
        beta, prune, lam, exact = select_lasso(graph, layer, keep, check_probe(probe),
                                               self.locations, self.seed)
        self.beta_ = beta
        self.lam_ = lam
        self.exact_ = exact
        return prune


CRITERIA = {
    "l1": lambda **kw: WeightNormCriterion(p=1, **kw),
    "l2": lambda **kw: WeightNormCriterion(p=2, **kw),
    "fpgm": GeometricMedianCriterion,
    "entropy": EntropyCriterion,
    "taylor": TaylorCriterion,
    "nisp": NispCriterion,
    "redundancy": RedundancyCriterion,
    "thinet": ThiNetCriterion,
    "lasso": LassoCriterion,
}


def make_criterion(name: str, **params):
    if name not in CRITERIA:
        raise ValueError(f"unknown criterion '{name}' (choose from {sorted(CRITERIA)})")
    return CRITERIA[name](**params)
