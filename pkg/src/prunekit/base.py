"""Shared estimator base and input validation helpers."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .graph import CONV, GraphError, NetworkGraph

__all__ = ["BaseEstimator", "check_graph", "check_conv_layer", "check_probe", "check_fraction"]


def check_graph(graph) -> NetworkGraph:
    if not isinstance(graph, NetworkGraph):
        raise TypeError(f"expected a NetworkGraph, got {type(graph).__name__}")
    return graph


def check_conv_layer(graph: NetworkGraph, layer: str):
    check_graph(graph)
    if layer not in graph.nodes:
        raise GraphError(f"no node '{layer}' in graph")
    node = graph.nodes[layer]
    if node.kind != CONV:
        raise GraphError(f"node '{layer}' is a {node.kind}, expected a conv layer")
    return node


def check_probe(probe, min_samples: int = 1):
    if probe is None:
        raise ValueError("this operation needs a probe batch")
    n = len(probe)
    if n < min_samples:
        raise ValueError(f"probe has {n} samples, need at least {min_samples}")
    return probe


def check_fraction(value: float, name: str, closed_top: bool = True) -> float:
    value = float(value)
    top_ok = value <= 1.0 if closed_top else value < 1.0
    if not (0.0 < value and top_ok):
        raise ValueError(f"{name} must be in (0, 1{']' if closed_top else ')'}, got {value}")
    return value


def as_float32_images(images) -> np.ndarray:
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim != 4:
        raise ValueError(f"expected [N,C,H,W] images, got shape {arr.shape}")
    return arr
