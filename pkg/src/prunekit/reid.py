"""Person re-identification losses, ranking evaluation and domain
similarity measures.

The losses are built from tensor-engine primitives so their gradients are
exact and finite-difference checkable. Evaluation (CMC curve and mAP)
follows the cross-camera protocol: gallery entries sharing both identity
and camera with the query are excluded, and queries left without any
valid match are skipped and counted.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from . import tensor as T

__all__ = [
    "ReidError",
    "EmbeddingBatch",
    "GalleryProbeSplit",
    "EvalReport",
    "loss_batch_hard_triplet",
    "loss_cross_entropy",
    "loss_contrastive",
    "loss_triplet",
    "loss_triplet_margin",
    "loss_quadruplet",
    "loss_hap2s",
    "loss_magnet",
    "loss_cosine_softmax",
    "loss_part_cross_entropy",
    "loss_metric",
    "eval_cmc_map",
    "domain_similarity",
    "finetune_policy",
    "LOSSES",
]


class ReidError(Exception):
    pass


def _as_tensor(x) -> T.Tensor:
    return x if isinstance(x, T.Tensor) else T.Tensor(np.asarray(x, dtype=np.float32))


@dataclass
class EmbeddingBatch:
    """A mini-batch of feature embeddings with identity labels.

    Optional fields carry per-loss hyperparameters: hinge margins, the
    cosine-softmax scale ``kappa`` and classifier ``weights``, the
    point-to-set temperature ``sigma_w`` and the part count for part-based
    heads (``logits`` then holds the stacked per-part class scores).
    """

    embeddings: Union[T.Tensor, np.ndarray]
    labels: np.ndarray
    cameras: Optional[np.ndarray] = None
    margin: float = 0.3
    margin2: float = 0.3
    kappa: float = 16.0
    sigma_w: float = 1.0
    parts: int = 1
    weights: Optional[T.Tensor] = None
    logits: Optional[T.Tensor] = None

    def __post_init__(self):
        self.embeddings = _as_tensor(self.embeddings)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.embeddings.data.ndim != 2:
            raise ReidError(f"embeddings must be [N,d], got {self.embeddings.shape}")
        if self.labels.shape != (self.embeddings.shape[0],):
            raise ReidError("labels must match embedding rows")
        if self.embeddings.shape[0] < 2:
            raise ReidError("pairwise losses need at least 2 samples")
        if self.kappa <= 0:
            raise ReidError("kappa must be positive")

    @property
    def n(self) -> int:
        return self.embeddings.shape[0]


def _distance_matrix(batch: EmbeddingBatch):
    d2 = T.pairwise_sqdist(batch.embeddings)
    return d2, T.sqrt_safe(d2)


def _hinge_mean(values: T.Tensor, margin: float) -> T.Tensor:
    return T.mean_all(T.relu(T.add_const(values, margin)))


# ---------------------------------------------------------------------------
# metric-learning losses


def loss_batch_hard_triplet(batch: EmbeddingBatch) -> T.Tensor:
    """Hardest-positive / hardest-negative triplet loss with margin.

    Each anchor contributes [m + max_pos d - min_neg d]+; anchors lacking
    a positive or a negative are excluded from the average.
    """
    labels = batch.labels
    n = batch.n
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(n, dtype=bool)
    neg_mask = ~same
    valid = pos_mask.any(axis=1) & neg_mask.any(axis=1)
    if not valid.any():
        raise ReidError("no anchor has both a positive and a negative")
    _, d = _distance_matrix(batch)
    dd = d.data
    rows = np.flatnonzero(valid)
    hardest_pos = np.where(pos_mask[rows], dd[rows], -np.inf).argmax(axis=1)
    hardest_neg = np.where(neg_mask[rows], dd[rows], np.inf).argmin(axis=1)
    hp = T.gather2d(d, rows, hardest_pos)
    hn = T.gather2d(d, rows, hardest_neg)
    return _hinge_mean(T.sub(hp, hn), batch.margin)


def loss_cross_entropy(logits: Union[T.Tensor, np.ndarray], labels) -> T.Tensor:
    """Mean negative log softmax at the true class."""
    return T.cross_entropy_logits(_as_tensor(logits), np.asarray(labels, dtype=np.int64))


def loss_contrastive(batch: EmbeddingBatch) -> T.Tensor:
    """Siamese pair loss on consecutive embedding rows (2i, 2i+1).

    Positive pairs (equal labels) contribute their squared distance;
    negative pairs contribute [m - d^2]+.
    """
    if batch.n % 2 != 0:
        raise ReidError("contrastive loss needs an even number of rows (stacked pairs)")
    left = np.arange(0, batch.n, 2)
    right = left + 1
    is_neg = (batch.labels[left] != batch.labels[right]).astype(np.float64)
    d2, _ = _distance_matrix(batch)
    pair_d2 = T.gather2d(d2, left, right)
    pos_part = T.mul(pair_d2, T.Tensor((1.0 - is_neg).astype(np.float32)))
    hinge = T.relu(T.add_const(T.scale(pair_d2, -1.0), batch.margin))
    neg_part = T.mul(hinge, T.Tensor(is_neg.astype(np.float32)))
    total = T.sum_all(T.add(pos_part, neg_part))
    return T.scale(total, 1.0 / (2.0 * left.size))


def _triplet_indices(labels: np.ndarray):
    same = labels[:, None] == labels[None, :]
    n = labels.shape[0]
    pos = same & ~np.eye(n, dtype=bool)
    a, p = np.nonzero(pos)
    trips = []
    for ai, pi in zip(a, p):
        negs = np.flatnonzero(~same[ai])
        trips.extend((ai, pi, ni) for ni in negs)
    if not trips:
        raise ReidError("batch contains no valid (anchor, positive, negative) triplet")
    arr = np.asarray(trips, dtype=np.int64)
    return arr[:, 0], arr[:, 1], arr[:, 2]


def loss_triplet(batch: EmbeddingBatch) -> T.Tensor:
    """Margin-free triplet loss averaged over all valid triplets."""
    a, p, n = _triplet_indices(batch.labels)
    _, d = _distance_matrix(batch)
    gap = T.sub(T.gather2d(d, a, p), T.gather2d(d, a, n))
    return _hinge_mean(gap, 0.0)


def loss_triplet_margin(batch: EmbeddingBatch) -> T.Tensor:
    """Triplet loss with margin averaged over all valid triplets."""
    a, p, n = _triplet_indices(batch.labels)
    _, d = _distance_matrix(batch)
    gap = T.sub(T.gather2d(d, a, p), T.gather2d(d, a, n))
    return _hinge_mean(gap, batch.margin)


def loss_quadruplet(batch: EmbeddingBatch) -> T.Tensor:
    """Quadruplet loss: the triplet term plus a (negative, other) term.

    The second hinge compares the anchor-positive distance against the
    distance between two samples from two further identities, pushing
    inter-class distances apart globally.
    """
    labels = batch.labels
    a, p, n = _triplet_indices(labels)
    _, d = _distance_matrix(batch)
    term1 = _hinge_mean(T.sub(T.gather2d(d, a, p), T.gather2d(d, a, n)), batch.margin)

    quad = []
    same = labels[:, None] == labels[None, :]
    nn = labels.shape[0]
    pos_pairs = np.argwhere(same & ~np.eye(nn, dtype=bool))
    for ai, pi in pos_pairs:
        la = labels[ai]
        for ni in range(nn):
            if labels[ni] == la:
                continue
            for ki in range(nn):
                if ki == ni or labels[ki] == la or labels[ki] == labels[ni]:
                    continue
                quad.append((ai, pi, ni, ki))
    if not quad:
        raise ReidError("batch cannot form (a, p, n, k) quadruplets over three identities")
    arr = np.asarray(quad, dtype=np.int64)
    gap2 = T.sub(T.gather2d(d, arr[:, 0], arr[:, 1]), T.gather2d(d, arr[:, 2], arr[:, 3]))
    term2 = _hinge_mean(gap2, batch.margin2)
    return T.add(term1, term2)


def loss_hap2s(batch: EmbeddingBatch) -> T.Tensor:
    """Hard-aware point-to-set loss.

    Point-to-set distances are softmax-weighted means of member distances:
    weights grow with distance toward the positive set (hard positives)
    and shrink with distance toward the negative set (hard negatives).
    """
    labels = batch.labels
    n = batch.n
    same = labels[:, None] == labels[None, :]
    pos_mask = same & ~np.eye(n, dtype=bool)
    neg_mask = ~same
    if not (pos_mask.any(axis=1).all() and neg_mask.any(axis=1).all()):
        raise ReidError("hap2s needs every anchor to have a positive and a negative")
    _, d = _distance_matrix(batch)
    d_pos = T.masked_soft_agg(d, pos_mask, +1.0, batch.sigma_w)
    d_neg = T.masked_soft_agg(d, neg_mask, -1.0, batch.sigma_w)
    return _hinge_mean(T.sub(d_pos, d_neg), batch.margin)


def loss_magnet(batch: EmbeddingBatch) -> T.Tensor:
    """Magnet loss with batch-level class statistics.

    Class means and the shared variance (mean squared distance of samples
    to their class mean) are estimated from the batch; each sample pays a
    hinged negative log-likelihood ratio against all class means.
    """
    labels = batch.labels
    classes, mapped = np.unique(labels, return_inverse=True)
    if classes.size < 2:
        raise ReidError("magnet loss needs at least two classes in the batch")
    mu = T.class_means(batch.embeddings, mapped, classes.size)
    d2 = T.cross_sqdist(batch.embeddings, mu)
    d = T.sqrt_safe(d2)
    own_d2 = T.gather2d(d2, np.arange(batch.n), mapped)
    sigma2 = T.mean_all(own_d2)
    inv_two_sigma2 = T.scale(T.recip(sigma2), 0.5)
    scaled = T.scale_by(d, inv_two_sigma2)                      # d / (2 sigma^2)
    lse = T.row_logsumexp(T.scale(scaled, -1.0))
    own = T.gather2d(scaled, np.arange(batch.n), mapped)
    return _hinge_mean(T.add(own, lse), batch.margin)


def loss_cosine_softmax(batch: EmbeddingBatch) -> T.Tensor:
    """Scaled cosine softmax against a normalized classifier matrix."""
    if batch.weights is None:
        raise ReidError("cosine softmax needs classifier weights on the batch")
    w = _as_tensor(batch.weights)
    fn = T.rows_l2_normalize(batch.embeddings)
    wn = T.rows_l2_normalize(w)
    logits = T.scale(T.dense(fn, wn, None), batch.kappa)
    return T.cross_entropy_logits(logits, batch.labels)


def loss_part_cross_entropy(batch: EmbeddingBatch) -> T.Tensor:
    """Sum of per-part cross entropies over stacked part logits [N, P*C]."""
    if batch.logits is None:
        raise ReidError("part-based cross entropy needs part logits on the batch")
    logits = _as_tensor(batch.logits)
    p = batch.parts
    if p < 1 or logits.shape[1] % p != 0:
        raise ReidError(f"part count {p} does not divide logit width {logits.shape[1]}")
    width = logits.shape[1] // p
    total = None
    for i in range(p):
        piece = logits if p == 1 else T.slice_cols(logits, i * width, (i + 1) * width)
        ce = T.cross_entropy_logits(piece, batch.labels)
        total = ce if total is None else T.add(total, ce)
    return total


LOSSES = {
    "batch_hard": loss_batch_hard_triplet,
    "contrastive": loss_contrastive,
    "triplet": loss_triplet,
    "triplet_margin": loss_triplet_margin,
    "quadruplet": loss_quadruplet,
    "hap2s": loss_hap2s,
    "magnet": loss_magnet,
    "cosine_softmax": loss_cosine_softmax,
    "part_ce": loss_part_cross_entropy,
}


def loss_metric(kind: str, batch: EmbeddingBatch) -> T.Tensor:
    if kind not in LOSSES:
        raise ReidError(f"unknown metric loss '{kind}' (choose from {sorted(LOSSES)})")
    return LOSSES[kind](batch)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class GalleryProbeSplit:
    gallery: np.ndarray
    gallery_pids: np.ndarray
    gallery_camids: np.ndarray
    query: np.ndarray
    query_pids: np.ndarray
    query_camids: np.ndarray

    def __post_init__(self):
        self.gallery = np.asarray(self.gallery, dtype=np.float64)
        self.query = np.asarray(self.query, dtype=np.float64)
        self.gallery_pids = np.asarray(self.gallery_pids, dtype=np.int64)
        self.gallery_camids = np.asarray(self.gallery_camids, dtype=np.int64)
        self.query_pids = np.asarray(self.query_pids, dtype=np.int64)
        self.query_camids = np.asarray(self.query_camids, dtype=np.int64)
        if self.gallery.shape[0] == 0 or self.query.shape[0] == 0:
            raise ReidError("gallery and query must be non-empty")
        if self.gallery.shape[1] != self.query.shape[1]:
            raise ReidError("gallery/query dimension mismatch")


@dataclass
class EvalReport:
    """CMC curve, mAP and per-query average precisions."""

    cmc: np.ndarray
    map: float
    average_precisions: list = field(default_factory=list)
    skipped_queries: int = 0

    @property
    def rank1(self) -> float:
        return float(self.cmc[0])

    def rank_k(self, k: int) -> float:
        return float(self.cmc[min(k, len(self.cmc)) - 1])

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["rank", "cmc"])
        for k, v in enumerate(self.cmc, start=1):
            writer.writerow([k, repr(float(v))])
        writer.writerow([])
        writer.writerow(["rank1", "rank5", "rank10", "map"])
        writer.writerow([repr(self.rank1), repr(self.rank_k(5)), repr(self.rank_k(10)),
                         repr(self.map)])
        return buf.getvalue()


def eval_cmc_map(split: GalleryProbeSplit, max_rank: int = 20) -> EvalReport:
    """Cross-camera CMC and mAP over a gallery/probe split.

    Gallery items are ranked by ascending Euclidean distance per query;
    same-identity same-camera entries are excluded. AP is non-interpolated
    (mean of precision at each relevant rank).
    """
    if max_rank < 1:
        raise ReidError("max_rank must be positive")
    g, q = split.gallery, split.query
    max_rank = min(max_rank, g.shape[0])
    d2 = ((q * q).sum(1)[:, None] + (g * g).sum(1)[None, :] - 2.0 * (q @ g.T))
    cmc_sum = np.zeros(max_rank, dtype=np.float64)
    aps = []
    skipped = 0
    for i in range(q.shape[0]):
        order = np.argsort(d2[i], kind="stable")
        remove = (split.gallery_pids[order] == split.query_pids[i]) & \
                 (split.gallery_camids[order] == split.query_camids[i])
        kept = order[~remove]
        matches = (split.gallery_pids[kept] == split.query_pids[i]).astype(np.float64)
        if not matches.any():
            skipped += 1
            continue
        hits = matches.cumsum()
        first = int(np.flatnonzero(matches)[0])
        if first < max_rank:
            cmc_sum[first:] += 1.0
        precision = hits / np.arange(1, matches.size + 1)
        aps.append(float((precision * matches).sum() / matches.sum()))
    n_valid = q.shape[0] - skipped
    if n_valid == 0:
        raise ReidError("no query has a valid cross-camera match in the gallery")
    return EvalReport(cmc=cmc_sum / n_valid, map=float(np.mean(aps)),
                      average_precisions=aps, skipped_queries=skipped)


# ---------------------------------------------------------------------------
# domain similarity and fine-tuning policy


def domain_similarity(source_embeddings, target_embeddings) -> tuple:
    """(cosine distance between mean embeddings, RBF maximum mean discrepancy).

    The MMD uses the unbiased squared estimator with a median pairwise
    distance bandwidth; the returned value is sqrt(max(0, mmd2)).
    """
    src = np.asarray(source_embeddings, dtype=np.float64)
    tgt = np.asarray(target_embeddings, dtype=np.float64)
    if src.ndim != 2 or tgt.ndim != 2 or src.shape[1] != tgt.shape[1]:
        raise ReidError("embedding sets must be 2-D with a common dimension")
    if src.shape[0] < 2 or tgt.shape[0] < 2:
        raise ReidError("each set needs at least 2 samples")
    mean_s = src.mean(axis=0)
    mean_t = tgt.mean(axis=0)
    ns, nt = np.linalg.norm(mean_s), np.linalg.norm(mean_t)
    if ns == 0.0 or nt == 0.0:
        raise ReidError("a mean embedding has zero norm; cosine distance is undefined")
    cos_dist = float(1.0 - np.dot(mean_s, mean_t) / (ns * nt))

    pooled = np.concatenate([src, tgt], axis=0)
    sq = ((pooled[:, None, :] - pooled[None, :, :]) ** 2).sum(axis=2)
    off_diag = sq[~np.eye(sq.shape[0], dtype=bool)]
    bw2 = float(np.median(off_diag))
    if bw2 <= 0.0:
        bw2 = 1.0  # all points identical; any bandwidth gives mmd 0

    def k(a, b):
        d = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
        return np.exp(-d / (2.0 * bw2))

    m, n = src.shape[0], tgt.shape[0]
    kxx = k(src, src)
    kyy = k(tgt, tgt)
    kxy = k(src, tgt)
    mmd2 = (kxx.sum() - np.trace(kxx)) / (m * (m - 1)) \
        + (kyy.sum() - np.trace(kyy)) / (n * (n - 1)) \
        - 2.0 * kxy.mean()
    return cos_dist, float(np.sqrt(max(mmd2, 0.0)))


def finetune_policy(cos_dist: float, mmd: float, samples_per_class: float,
                    threshold_n: float = 20, threshold_c: float = 0.1) -> str:
    """Choose how much of the network to fine-tune on the target domain.

    Freeze the feature extractor only when the target data is scarce and
    the domains are close; otherwise train everything.
    """
    if samples_per_class < threshold_n and cos_dist < threshold_c:
        return "freeze_extractor"
    return "train_all"
