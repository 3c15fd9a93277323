"""Synthetic desk-scale datasets.

Images are rendered from latent class/identity prototypes through a fixed
random linear map and a tanh nonlinearity, with Gaussian latent noise.
Re-identification data adds per-camera affine latent transforms to mimic
viewpoint shift, and keeps train and test identity sets disjoint.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .criteria import ProbeBatch
from .reid import GalleryProbeSplit, ReidError

__all__ = [
    "SourceSpec",
    "ReidSpec",
    "ClassificationDataset",
    "ReidDataset",
    "gen_source_dataset",
    "gen_target_reid_dataset",
    "probe_from",
]


@dataclass
class SourceSpec:
    """Classification pre-training data (stand-in for a large source set).

    ``world_seed`` fixes the latent-to-pixel renderer. Source and target
    specs sharing a world render into the same visual domain, so features
    learned on one transfer to the other.
    """

    classes: int = 24
    samples_per_class: int = 24
    image_shape: tuple = (3, 16, 8)
    prototype_dim: int = 6
    prototype_scale: float = 1.0
    noise: float = 0.25
    seed: int = 0
    world_seed: int = 1234


@dataclass
class ReidSpec:
    """Cross-camera re-identification data with disjoint test identities."""

    identities: int = 64
    test_identities: int = 16
    cameras: int = 2
    samples_per_identity_per_camera: int = 4
    image_shape: tuple = (3, 16, 8)
    prototype_dim: int = 6
    prototype_scale: float = 1.0
    camera_strength: float = 0.2
    noise: float = 0.1
    seed: int = 0
    world_seed: int = 1234


@dataclass
class ClassificationDataset:
    images: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0

    @property
    def samples_per_class(self) -> float:
        return len(self) / max(1, self.n_classes)


@dataclass
class ReidDataset:
    images: np.ndarray
    labels: np.ndarray
    cameras: np.ndarray
    gallery_images: np.ndarray
    gallery_pids: np.ndarray
    gallery_camids: np.ndarray
    query_images: np.ndarray
    query_pids: np.ndarray
    query_camids: np.ndarray

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def n_identities(self) -> int:
        return np.unique(self.labels).size

    @property
    def samples_per_class(self) -> float:
        return len(self) / max(1, self.n_identities)

    def split_embeddings(self, embed_fn) -> GalleryProbeSplit:
        """Apply an embedding function to the test images."""
        return GalleryProbeSplit(
            gallery=embed_fn(self.gallery_images), gallery_pids=self.gallery_pids,
            gallery_camids=self.gallery_camids,
            query=embed_fn(self.query_images), query_pids=self.query_pids,
            query_camids=self.query_camids)


def _renderer(rng: np.random.Generator, latent_dim: int, image_shape) -> np.ndarray:
    n_pixels = int(np.prod(image_shape))
    return rng.normal(0.0, 1.0 / np.sqrt(latent_dim), size=(n_pixels, latent_dim))


def _render(render_map: np.ndarray, latents: np.ndarray, image_shape) -> np.ndarray:
    flat = np.tanh(latents @ render_map.T)
    return flat.reshape(latents.shape[0], *image_shape).astype(np.float32)


def gen_source_dataset(spec: SourceSpec) -> ClassificationDataset:
    """Balanced labelled images from class prototypes; deterministic per seed."""
    if spec.classes < 1:
        raise ValueError("need at least one class")
    if spec.samples_per_class < 1:
        raise ValueError("need at least one sample per class")
    rng = np.random.default_rng(spec.seed)
    protos = spec.prototype_scale * rng.normal(size=(spec.classes, spec.prototype_dim))
    if spec.classes >= 2:
        gaps = protos[:, None, :] - protos[None, :, :]
        min_gap = np.sqrt((gaps ** 2).sum(-1))[~np.eye(spec.classes, dtype=bool)].min()
        if spec.noise == 0.0 and min_gap == 0.0:
            warnings.warn("identical class prototypes with zero noise: "
                          "the dataset is unlearnable beyond chance")
    render_map = _renderer(np.random.default_rng(spec.world_seed), spec.prototype_dim,
                           spec.image_shape)
    latents, labels = [], []
    for c in range(spec.classes):
        eps = rng.normal(size=(spec.samples_per_class, spec.prototype_dim))
        latents.append(protos[c] + spec.noise * eps)
        labels.extend([c] * spec.samples_per_class)
    images = _render(render_map, np.concatenate(latents, axis=0), spec.image_shape)
    return ClassificationDataset(images, np.asarray(labels, dtype=np.int64))


def gen_target_reid_dataset(spec: ReidSpec) -> ReidDataset:
    """Train split plus a cross-camera gallery/probe test split.

    Test identities never appear in training. Per camera, one image of
    each test identity goes to the probe set and the rest to the gallery,
    so every probe has a correct match under a different camera.
    """
    if spec.cameras < 2:
        raise ReidError("re-identification needs at least 2 cameras "
                        "(the protocol excludes same-camera matches)")
    if spec.samples_per_identity_per_camera < 2:
        raise ReidError("need at least 2 samples per identity per camera "
                        "to fill both probe and gallery")
    rng = np.random.default_rng(spec.seed)
    total_ids = spec.identities + spec.test_identities
    protos = spec.prototype_scale * rng.normal(size=(total_ids, spec.prototype_dim))
    render_map = _renderer(np.random.default_rng(spec.world_seed), spec.prototype_dim,
                           spec.image_shape)
    cam_rot = rng.normal(size=(spec.cameras, spec.prototype_dim, spec.prototype_dim))
    cam_shift = rng.normal(size=(spec.cameras, spec.prototype_dim))

    def sample(pid: int, cam: int, count: int) -> np.ndarray:
        eps = rng.normal(size=(count, spec.prototype_dim))
        z = protos[pid] + spec.noise * eps
        z = z @ (np.eye(spec.prototype_dim) + spec.camera_strength * cam_rot[cam]).T
        z = z + spec.camera_strength * cam_shift[cam]
        return z

    tr_imgs, tr_pids, tr_cams = [], [], []
    g_imgs, g_pids, g_cams = [], [], []
    q_imgs, q_pids, q_cams = [], [], []
    per = spec.samples_per_identity_per_camera
    for pid in range(total_ids):
        for cam in range(spec.cameras):
            z = sample(pid, cam, per)
            if pid < spec.identities:
                tr_imgs.append(z)
                tr_pids.extend([pid] * per)
                tr_cams.extend([cam] * per)
            else:
                q_imgs.append(z[:1])
                q_pids.append(pid)
                q_cams.append(cam)
                g_imgs.append(z[1:])
                g_pids.extend([pid] * (per - 1))
                g_cams.extend([cam] * (per - 1))

    def finish(latents_list):
        return _render(render_map, np.concatenate(latents_list, axis=0), spec.image_shape)

    return ReidDataset(
        images=finish(tr_imgs), labels=np.asarray(tr_pids, dtype=np.int64),
        cameras=np.asarray(tr_cams, dtype=np.int64),
        gallery_images=finish(g_imgs), gallery_pids=np.asarray(g_pids, dtype=np.int64),
        gallery_camids=np.asarray(g_cams, dtype=np.int64),
        query_images=finish(q_imgs), query_pids=np.asarray(q_pids, dtype=np.int64),
        query_camids=np.asarray(q_cams, dtype=np.int64))


def probe_from(data, size: int = 256, seed: int = 0) -> ProbeBatch:
    """Draw a seeded probe batch from any dataset with images and labels."""
    n = data.images.shape[0]
    rng = np.random.default_rng(seed)
    idx = rng.permutation(n)[:min(size, n)]
    return ProbeBatch(data.images[idx], data.labels[idx])
