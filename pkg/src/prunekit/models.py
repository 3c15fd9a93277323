"""Model builders: desk-scale residual toy nets, ResNet shape models and a
declarative text format for custom architectures."""

from __future__ import annotations

import os
from typing import Optional

import numpy as np

from . import tensor as T
from .graph import (
    ADD, AVG_POOL, CHANNEL_AFFINE, CONV, DENSE, EMBEDDING_HEAD, GLOBAL_AVG_POOL,
    INPUT, MAX_POOL, PART_HEAD, RELU,
    GraphError, LayerNode, NetworkGraph,
)

__all__ = [
    "build_toy",
    "build_resnet_shape",
    "graph_from_layer_dicts",
    "load_architecture",
    "ARCHITECTURES",
]


class _Builder:
    """Accumulates layer nodes with seeded parameter init."""

    def __init__(self, in_channels: int, seed: int):
        self.rng = np.random.default_rng(seed)
        self.nodes = [LayerNode("input", INPUT, [], {"channels": in_channels})]
        self.last = "input"

    def _add(self, node: LayerNode) -> str:
        self.nodes.append(node)
        self.last = node.id
        return node.id

    def conv(self, nid: str, cout: int, cin: int, k: int, stride: int = 1, pad: int = 0,
             bias: bool = False, src: Optional[str] = None) -> str:
        w = T.kaiming_normal(self.rng, (cout, cin, k, k), fan_in=cin * k * k, name=f"{nid}.weight")
        params = {"weight": w}
        if bias:
            params["bias"] = T.Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True,
                                      name=f"{nid}.bias")
        return self._add(LayerNode(nid, CONV, [src or self.last],
                                   {"out_channels": cout, "in_channels": cin, "kernel": k,
                                    "stride": stride, "pad": pad, "bias": bias}, params))

    def affine(self, nid: str, channels: int, src: Optional[str] = None) -> str:
        gamma = T.Tensor(np.ones(channels, dtype=np.float32), requires_grad=True, name=f"{nid}.gamma")
        beta = T.Tensor(np.zeros(channels, dtype=np.float32), requires_grad=True, name=f"{nid}.beta")
        return self._add(LayerNode(nid, CHANNEL_AFFINE, [src or self.last],
                                   {"channels": channels}, {"gamma": gamma, "beta": beta}))

    def relu(self, nid: str, src: Optional[str] = None) -> str:
        return self._add(LayerNode(nid, RELU, [src or self.last], {}))

    def add(self, nid: str, a: str, b: str) -> str:
        return self._add(LayerNode(nid, ADD, [a, b], {}))

    def pool(self, nid: str, kind: str, k: int, stride: int, pad: int = 0,
             src: Optional[str] = None) -> str:
        return self._add(LayerNode(nid, kind, [src or self.last],
                                   {"kernel": k, "stride": stride, "pad": pad}))

    def gap(self, nid: str, src: Optional[str] = None) -> str:
        return self._add(LayerNode(nid, GLOBAL_AVG_POOL, [src or self.last], {}))

    def dense_like(self, nid: str, kind: str, dout: int, din: int, bias: bool = True,
                   src: Optional[str] = None) -> str:
        w = T.kaiming_normal(self.rng, (dout, din), fan_in=din, name=f"{nid}.weight")
        params = {"weight": w}
        attrs = {"out_features": dout, "in_features": din, "bias": bias}
        if bias:
            params["bias"] = T.Tensor(np.zeros(dout, dtype=np.float32), requires_grad=True,
                                      name=f"{nid}.bias")
        return self._add(LayerNode(nid, kind, [src or self.last], attrs, params))

    def part_head(self, nid: str, parts: int, classes: int, part_dim: int,
                  src: Optional[str] = None) -> str:
        params = {}
        for i in range(parts):
            params[f"weight_{i}"] = T.kaiming_normal(self.rng, (classes, part_dim), fan_in=part_dim,
                                                     name=f"{nid}.weight_{i}")
            params[f"bias_{i}"] = T.Tensor(np.zeros(classes, dtype=np.float32), requires_grad=True,
                                           name=f"{nid}.bias_{i}")
        return self._add(LayerNode(nid, PART_HEAD, [src or self.last],
                                   {"parts": parts, "classes": classes, "part_dim": part_dim}, params))

    def graph(self) -> NetworkGraph:
        return NetworkGraph(self.nodes)


def _conv_affine_relu(b: _Builder, name: str, cout: int, cin: int, k: int,
                      stride: int, pad: int, relu: bool = True,
                      src: Optional[str] = None) -> str:
    b.conv(f"{name}", cout, cin, k, stride, pad, src=src)
    b.affine(f"{name}.bn", cout)
    if relu:
        b.relu(f"{name}.relu")
    return b.last


def _toy_block(b: _Builder, name: str, channels: int) -> str:
    entry = b.last
    _conv_affine_relu(b, f"{name}.conv1", channels, channels, 3, 1, 1)
    b.conv(f"{name}.conv2", channels, channels, 3, 1, 1)
    b.affine(f"{name}.conv2.bn", channels)
    b.add(f"{name}.add", b.last, entry)
    return b.relu(f"{name}.relu")


def build_toy(variant: str = "toy", in_channels: int = 3, embedding_dim: int = 64,
              seed: int = 0) -> NetworkGraph:
    """Small residual net for 3x16x8 inputs.

    Two residual blocks on a stride-2 trunk exercise coupled-channel
    pruning; the embedding head keeps a fixed output dimension so pruned
    and unpruned models stay comparable.
    """
    widths = {"toy": (16, 32), "toy_small": (8, 16)}
    if variant not in widths:
        raise GraphError(f"unknown toy variant '{variant}'")
    c0, c1 = widths[variant]
    b = _Builder(in_channels, seed)
    _conv_affine_relu(b, "stem", c0, in_channels, 3, 1, 1)
    _conv_affine_relu(b, "down", c1, c0, 3, 2, 1)
    _toy_block(b, "block1", c1)
    _toy_block(b, "block2", c1)
    b.gap("gap")
    b.dense_like("embed", EMBEDDING_HEAD, embedding_dim, c1)
    return b.graph()


_RESNET_BLOCKS = {18: ("basic", (2, 2, 2, 2)), 34: ("basic", (3, 4, 6, 3)),
                  50: ("bottleneck", (3, 4, 6, 3))}


def build_resnet_shape(variant: int, in_channels: int = 3, seed: int = 0) -> NetworkGraph:
    """Standard ResNet layout with the classifier removed.

    Intended for complexity accounting and structural stress tests; the
    embedding is the global-average-pooled feature map (2048-D for the
    bottleneck variant, 512-D otherwise).
    """
    if variant not in _RESNET_BLOCKS:
        raise GraphError(f"unknown resnet variant '{variant}' (use 18, 34 or 50)")
    kind, stages = _RESNET_BLOCKS[variant]
    expansion = 4 if kind == "bottleneck" else 1
    b = _Builder(in_channels, seed)
    _conv_affine_relu(b, "stem", 64, in_channels, 7, 2, 3)
    b.pool("stem.pool", MAX_POOL, 3, 2, 1)
    cin = 64
    for si, n_blocks in enumerate(stages):
        width = 64 * (2 ** si)
        cout = width * expansion
        for bi in range(n_blocks):
            name = f"s{si + 1}b{bi + 1}"
            stride = 2 if (si > 0 and bi == 0) else 1
            entry = b.last
            if bi == 0 and (stride != 1 or cin != cout):
                b.conv(f"{name}.down", cout, cin, 1, stride, 0, src=entry)
                skip = b.affine(f"{name}.down.bn", cout)
            else:
                skip = entry
            if kind == "basic":
                _conv_affine_relu(b, f"{name}.conv1", width, cin, 3, stride, 1, relu=True, src=entry)
                b.conv(f"{name}.conv2", cout, width, 3, 1, 1)
                b.affine(f"{name}.conv2.bn", cout)
            else:
                _conv_affine_relu(b, f"{name}.conv1", width, cin, 1, 1, 0, relu=True, src=entry)
                _conv_affine_relu(b, f"{name}.conv2", width, width, 3, stride, 1, relu=True)
                b.conv(f"{name}.conv3", cout, width, 1, 1, 0)
                b.affine(f"{name}.conv3.bn", cout)
            b.add(f"{name}.add", b.last, skip)
            b.relu(f"{name}.relu")
            cin = cout
    b.gap("gap")
    return b.graph()


ARCHITECTURES = {
    "toy": lambda seed: build_toy("toy", seed=seed),
    "toy_small": lambda seed: build_toy("toy_small", seed=seed),
    "resnet18": lambda seed: build_resnet_shape(18, seed=seed),
    "resnet34": lambda seed: build_resnet_shape(34, seed=seed),
    "resnet50": lambda seed: build_resnet_shape(50, seed=seed),
}


def graph_from_layer_dicts(layers: list, in_channels: int, seed: int = 0) -> NetworkGraph:
    """Build a graph from declarative layer descriptions.

    Each entry needs ``id`` and ``kind`` plus the kind's hyperparameters;
    ``inputs`` defaults to the previous layer. Parameters are random-
    initialised from ``seed``.
    """
    b = _Builder(in_channels, seed)
    for spec in layers:
        spec = dict(spec)
        nid = spec.pop("id")
        kind = spec.pop("kind")
        inputs = spec.pop("inputs", None)
        src = inputs[0] if inputs else None
        if kind == CONV:
            b.conv(nid, spec["out_channels"], spec["in_channels"], spec["kernel"],
                   spec.get("stride", 1), spec.get("pad", 0), spec.get("bias", False), src=src)
        elif kind == CHANNEL_AFFINE:
            b.affine(nid, spec["channels"], src=src)
        elif kind == RELU:
            b.relu(nid, src=src)
        elif kind == ADD:
            if not inputs or len(inputs) != 2:
                raise GraphError(f"add layer '{nid}' needs exactly two inputs")
            b.add(nid, inputs[0], inputs[1])
        elif kind in (AVG_POOL, MAX_POOL):
            b.pool(nid, kind, spec["kernel"], spec.get("stride", spec["kernel"]),
                   spec.get("pad", 0), src=src)
        elif kind == GLOBAL_AVG_POOL:
            b.gap(nid, src=src)
        elif kind in (DENSE, EMBEDDING_HEAD):
            b.dense_like(nid, kind, spec["out_features"], spec["in_features"],
                         spec.get("bias", True), src=src)
        elif kind == PART_HEAD:
            b.part_head(nid, spec["parts"], spec["classes"], spec["part_dim"], src=src)
        else:
            raise GraphError(f"layer '{nid}' has unknown kind '{kind}'")
    return b.graph()


def load_architecture(name_or_path: str, seed: int = 0) -> NetworkGraph:
    """Resolve a registered architecture name or a TOML layer-list file."""
    if name_or_path in ARCHITECTURES:
        return ARCHITECTURES[name_or_path](seed)
    if os.path.exists(name_or_path):
        import tomli

        with open(name_or_path, "rb") as fh:
            doc = tomli.load(fh)
        if doc.get("version", 1) != 1:
            raise GraphError(f"unsupported architecture file version {doc.get('version')}")
        return graph_from_layer_dicts(doc["layer"], doc["input_channels"], seed)
    raise GraphError(f"unknown architecture '{name_or_path}' "
                     f"(not a registered name and not a file)")
