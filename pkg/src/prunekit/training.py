"""Mini-batch SGD training over network graphs.

The trainer binds a loss to a graph: plain cross entropy on the sink node
for classification, or one of the metric losses on the embedding node with
PK sampling (P identities x K samples per batch). A gradient hook lets
strategies add regularization penalties without rebuilding the loss.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import tensor as T
from .base import BaseEstimator
from .graph import NetworkGraph
from .reid import EmbeddingBatch, loss_metric

__all__ = ["Trainer", "TrainingError", "PK_LOSSES"]

PK_LOSSES = ("batch_hard", "triplet", "triplet_margin", "quadruplet", "hap2s", "magnet")


class TrainingError(Exception):
    pass


class Trainer(BaseEstimator):
    """SGD with momentum over a graph's parameters.

    ``loss`` is 'cross_entropy' (labels against the sink logits) or one of
    the PK-sampled metric losses. The learning rate is constant within a
    phase; callers re-instantiate or set_params for new phases.
    """

    def __init__(self, lr: float = 0.05, momentum: float = 0.9, weight_decay: float = 5e-4,
                 batch_size: int = 32, loss: str = "cross_entropy", margin: float = 0.5,
                 pk_p: int = 8, pk_k: int = 4, seed: int = 0):
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.loss = loss
        self.margin = margin
        self.pk_p = pk_p
        self.pk_k = pk_k
        self.seed = seed

    # -- batch construction -------------------------------------------------

    def _epoch_batches(self, data, rng: np.random.Generator):
        images = data.images
        labels = data.labels
        n = images.shape[0]
        if self.loss == "cross_entropy":
            perm = rng.permutation(n)
            for start in range(0, n, self.batch_size):
                idx = perm[start:start + self.batch_size]
                yield images[idx], labels[idx]
        elif self.loss in PK_LOSSES:
            ids = np.unique(labels)
            if ids.size < 2:
                raise TrainingError("metric losses need at least 2 identities")
            p = min(self.pk_p, ids.size)
            k = self.pk_k
            n_batches = max(1, n // (p * k))
            by_id = {i: np.flatnonzero(labels == i) for i in ids}
            for _ in range(n_batches):
                chosen = rng.choice(ids, size=p, replace=False)
                idx = []
                for pid in chosen:
                    pool = by_id[pid]
                    take = rng.choice(pool, size=k, replace=pool.size < k)
                    idx.extend(take.tolist())
                idx = np.asarray(idx)
                yield images[idx], labels[idx]
        else:
            raise TrainingError(f"trainer does not support loss '{self.loss}'")

    def _loss_value(self, graph: NetworkGraph, outs: dict, labels: np.ndarray) -> T.Tensor:
        if self.loss == "cross_entropy":
            return T.cross_entropy_logits(outs[graph.sink_id()], labels)
        emb = outs[graph.embedding_id()]
        batch = EmbeddingBatch(emb, labels, margin=self.margin)
        return loss_metric(self.loss, batch)

    # -- main loop -----------------------------------------------------------

    def train(self, graph: NetworkGraph, data, epochs: int,
              params: Optional[Sequence[T.Tensor]] = None,
              rng: Optional[np.random.Generator] = None,
              grad_hook: Optional[Callable[[NetworkGraph], float]] = None) -> list:
        """Run ``epochs`` passes; returns per-epoch mean loss history.

        ``params`` restricts which tensors move (defaults to all graph
        parameters); ``grad_hook`` runs after backward and may inject
        penalty gradients, returning the penalty's loss value.
        """
        if epochs <= 0:
            return []
        if rng is None:
            rng = np.random.default_rng(self.seed)
        step_params = list(params) if params is not None else graph.parameters()
        if not step_params:
            raise TrainingError("nothing to train: the trainable parameter set is empty")
        all_params = graph.parameters()
        history = []
        for _ in range(epochs):
            losses = []
            for images, labels in self._epoch_batches(data, rng):
                for p in all_params:
                    p.zero_grad()
                tape = T.Tape()
                outs = graph.forward(images, tape=tape)
                with T.tape_scope(tape):
                    loss = self._loss_value(graph, outs, labels)
                T.backward(tape, loss)
                value = loss.item()
                if grad_hook is not None:
                    value += float(grad_hook(graph))
                stepped = [p for p in step_params if p.grad is not None]
                if not stepped:
                    raise TrainingError("no trainable parameter received a gradient")
                T.sgd_step(stepped, self.lr, self.momentum, self.weight_decay)
                losses.append(value)
            history.append(float(np.mean(losses)))
        return history


def embed_dataset(graph: NetworkGraph, images: np.ndarray, batch_size: int = 128,
                  node_id: Optional[str] = None) -> np.ndarray:
    """Embeddings for a stack of images, computed without a tape."""
    nid = node_id or graph.embedding_id()
    chunks = []
    for start in range(0, images.shape[0], batch_size):
        outs = graph.forward(images[start:start + batch_size])
        chunks.append(outs[nid].data.copy())
    return np.concatenate(chunks, axis=0)
