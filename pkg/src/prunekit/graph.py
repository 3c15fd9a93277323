"""Network graph IR: layer nodes, shape inference, channel coupling and
structural prune rewrites.

A :class:`NetworkGraph` is a DAG of layer nodes executed with the tensor
engine. Graph structure is immutable once built; every rewrite returns a
new graph. Parameter values are plain tensors and may be updated in place
by trainers.
"""

from __future__ import annotations

import copy as _copy
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from . import tensor as T

__all__ = [
    "GraphError",
    "ValidationError",
    "ShapeInferenceError",
    "PruneError",
    "LayerNode",
    "NetworkGraph",
    "ChannelGroup",
    "PruneMask",
    "infer_shapes",
    "count_flops",
    "count_params",
    "coupled_channel_groups",
    "group_spaces",
    "hard_prune",
    "soft_prune_apply",
    "zeroize_channels",
    "materialize",
    "append_classifier",
    "strip_heads",
]

CONV = "conv"
DENSE = "dense"
EMBEDDING_HEAD = "embedding_head"
PART_HEAD = "part_head"
CHANNEL_AFFINE = "channel_affine"
RELU = "relu"
AVG_POOL = "avg_pool"
MAX_POOL = "max_pool"
GLOBAL_AVG_POOL = "global_avg_pool"
ADD = "add"
INPUT = "input"

KINDS = {
    CONV, DENSE, EMBEDDING_HEAD, PART_HEAD, CHANNEL_AFFINE, RELU,
    AVG_POOL, MAX_POOL, GLOBAL_AVG_POOL, ADD, INPUT,
}

# kinds whose output channel c is the same physical channel as input channel c
_CHANNEL_PRESERVING = {CHANNEL_AFFINE, RELU, AVG_POOL, MAX_POOL, GLOBAL_AVG_POOL}


class GraphError(Exception):
    """Base class for graph failures."""


class ValidationError(GraphError):
    pass


class ShapeInferenceError(GraphError):
    def __init__(self, node_id: str, message: str):
        super().__init__(f"node '{node_id}': {message}")
        self.node_id = node_id


class PruneError(GraphError):
    pass


@dataclass
class LayerNode:
    """One layer of the network.

    ``attrs`` holds structural hyperparameters (channel counts, kernel,
    stride, pad, ...); ``params`` maps parameter names to tensors. The
    declared channel counts always equal the parameter tensor dimensions.
    """

    id: str
    kind: str
    inputs: list = field(default_factory=list)
    attrs: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())


class NetworkGraph:
    """A DAG of layer nodes with a cached topological order."""

    def __init__(self, nodes: Sequence[LayerNode]):
        self.nodes: dict[str, LayerNode] = {}
        for node in nodes:
            if node.id in self.nodes:
                raise ValidationError(f"duplicate node id '{node.id}'")
            if node.kind not in KINDS:
                raise ValidationError(f"node '{node.id}' has unknown kind '{node.kind}'")
            self.nodes[node.id] = node
        self.order: list[str] = self._toposort()
        self._validate()

    # -- structure ---------------------------------------------------------

    def _toposort(self) -> list[str]:
        indeg = {nid: 0 for nid in self.nodes}
        consumers: dict[str, list[str]] = {nid: [] for nid in self.nodes}
        for node in self.nodes.values():
            for src in node.inputs:
                if src not in self.nodes:
                    raise ValidationError(f"node '{node.id}' references missing input '{src}'")
                indeg[node.id] += 1
                consumers[src].append(node.id)
        ready = [nid for nid in self.nodes if indeg[nid] == 0]
        order: list[str] = []
        while ready:
            nid = ready.pop(0)
            order.append(nid)
            for peer in consumers[nid]:
                indeg[peer] -= 1
                if indeg[peer] == 0:
                    ready.append(peer)
        if len(order) != len(self.nodes):
            cyclic = sorted(set(self.nodes) - set(order))
            raise ValidationError(f"graph contains a cycle through {cyclic}")
        return order

    def _validate(self) -> None:
        inputs = [n for n in self.nodes.values() if n.kind == INPUT]
        if len(inputs) != 1:
            raise ValidationError(f"graph must have exactly one input node, found {len(inputs)}")
        if inputs[0].inputs:
            raise ValidationError("input node cannot have predecessors")
        if "channels" not in inputs[0].attrs:
            raise ValidationError("input node must declare 'channels'")
        for node in self.nodes.values():
            n_in = len(node.inputs)
            if node.kind == ADD and n_in != 2:
                raise ValidationError(f"add node '{node.id}' needs exactly 2 inputs, has {n_in}")
            if node.kind not in (ADD, INPUT) and n_in != 1:
                raise ValidationError(f"node '{node.id}' ({node.kind}) needs exactly 1 input, has {n_in}")
            self._check_param_shapes(node)

    def _check_param_shapes(self, node: LayerNode) -> None:
        a = node.attrs
        if node.kind == CONV:
            k = a["kernel"]
            want = (a["out_channels"], a["in_channels"], k, k)
            got = node.params["weight"].shape
            if got != want:
                raise ValidationError(f"conv '{node.id}' weight shape {got} != declared {want}")
            if a.get("bias", True) and node.params["bias"].shape != (a["out_channels"],):
                raise ValidationError(f"conv '{node.id}' bias shape mismatch")
        elif node.kind in (DENSE, EMBEDDING_HEAD):
            want = (a["out_features"], a["in_features"])
            if node.params["weight"].shape != want:
                raise ValidationError(f"{node.kind} '{node.id}' weight shape != declared {want}")
        elif node.kind == CHANNEL_AFFINE:
            c = a["channels"]
            if node.params["gamma"].shape != (c,) or node.params["beta"].shape != (c,):
                raise ValidationError(f"channel_affine '{node.id}' param length != {c}")
        elif node.kind == PART_HEAD:
            p, cls, dpart = a["parts"], a["classes"], a["part_dim"]
            for i in range(p):
                if node.params[f"weight_{i}"].shape != (cls, dpart):
                    raise ValidationError(f"part_head '{node.id}' weight_{i} shape mismatch")

    def consumers(self, node_id: str) -> list[str]:
        return [n.id for n in self.nodes.values() if node_id in n.inputs]

    @property
    def input_id(self) -> str:
        return next(n.id for n in self.nodes.values() if n.kind == INPUT)

    def sink_id(self) -> str:
        sinks = [nid for nid in self.order if not self.consumers(nid)]
        if len(sinks) != 1:
            raise ValidationError(f"graph has {len(sinks)} sink nodes, expected 1: {sinks}")
        return sinks[0]

    def conv_ids(self) -> list[str]:
        return [nid for nid in self.order if self.nodes[nid].kind == CONV]

    def parameters(self) -> list[T.Tensor]:
        out = []
        for nid in self.order:
            for name in sorted(self.nodes[nid].params):
                out.append(self.nodes[nid].params[name])
        return out

    def copy(self) -> "NetworkGraph":
        nodes = []
        for nid in self.order:
            node = self.nodes[nid]
            params = {}
            for name, p in node.params.items():
                q = T.Tensor(p.data.copy(), requires_grad=p.requires_grad, name=p.name)
                q.update_mask = None if p.update_mask is None else p.update_mask.copy()
                params[name] = q
            nodes.append(LayerNode(nid, node.kind, list(node.inputs),
                                   _copy.deepcopy(node.attrs), params))
        return NetworkGraph(nodes)

    # -- execution ----------------------------------------------------------

    def forward(self, x, tape: Optional[T.Tape] = None, retain: Iterable[str] = ()) -> dict:
        """Run the graph on a [N,C,H,W] batch; returns node id -> Tensor.

        ``retain`` lists node ids whose output gradient should survive the
        backward pass (feature-map criteria read them).
        """
        if isinstance(x, T.Tensor):
            xt = x
        else:
            xt = T.Tensor(np.asarray(x, dtype=np.float32))
        retain = set(retain)
        outs: dict[str, T.Tensor] = {}

        def run():
            for nid in self.order:
                node = self.nodes[nid]
                ins = [outs[s] for s in node.inputs]
                out = self._forward_node(node, ins, xt)
                if nid in retain:
                    out.retain_grad = True
                outs[nid] = out

        if tape is not None:
            with T.tape_scope(tape):
                run()
        else:
            run()
        return outs

    def _forward_node(self, node: LayerNode, ins: list, xt: T.Tensor) -> T.Tensor:
        kind = node.kind
        a = node.attrs
        if kind == INPUT:
            if xt.data.ndim != 4 or xt.shape[1] != a["channels"]:
                raise T.ShapeMismatch(
                    f"input node expects [N,{a['channels']},H,W], got {xt.shape}")
            return xt
        if kind == CONV:
            bias = node.params.get("bias")
            return T.conv2d(ins[0], node.params["weight"], bias, a["stride"], a["pad"])
        if kind in (DENSE, EMBEDDING_HEAD):
            return T.dense(ins[0], node.params["weight"], node.params.get("bias"))
        if kind == CHANNEL_AFFINE:
            return T.channel_affine(ins[0], node.params["gamma"], node.params["beta"])
        if kind == RELU:
            return T.relu(ins[0])
        if kind == AVG_POOL:
            return T.avg_pool(ins[0], a["kernel"], a["stride"], a.get("pad", 0))
        if kind == MAX_POOL:
            return T.max_pool(ins[0], a["kernel"], a["stride"], a.get("pad", 0))
        if kind == GLOBAL_AVG_POOL:
            return T.global_avg_pool(ins[0])
        if kind == ADD:
            return T.add(ins[0], ins[1])
        if kind == PART_HEAD:
            p, dpart = a["parts"], a["part_dim"]
            chunks = []
            for i in range(p):
                piece = T.slice_cols(ins[0], i * dpart, (i + 1) * dpart)
                chunks.append(T.dense(piece, node.params[f"weight_{i}"], node.params.get(f"bias_{i}")))
            return chunks[0] if p == 1 else T.concat_cols(chunks)
        raise GraphError(f"no forward rule for kind '{kind}'")

    def embed(self, x, node_id: Optional[str] = None) -> np.ndarray:
        """Convenience: forward without a tape, return one node's ndarray."""
        outs = self.forward(x)
        return outs[node_id or self.sink_id()].data

    def embedding_id(self) -> str:
        """The node whose output is the feature embedding."""
        heads = [nid for nid in self.order if self.nodes[nid].kind == EMBEDDING_HEAD]
        if heads:
            return heads[-1]
        gaps = [nid for nid in self.order if self.nodes[nid].kind == GLOBAL_AVG_POOL]
        if gaps:
            return gaps[-1]
        return self.sink_id()


# ---------------------------------------------------------------------------
# shape inference and complexity accounting


def _norm_input_shape(input_shape) -> tuple:
    shape = tuple(int(v) for v in input_shape)
    if len(shape) == 3:
        shape = (1,) + shape
    if len(shape) != 4:
        raise ShapeInferenceError("input", f"input shape must be (C,H,W) or (N,C,H,W), got {input_shape}")
    return shape


def infer_shapes(graph: NetworkGraph, input_shape) -> dict:
    """Annotate every node with its output shape; fail on the first bad node."""
    n, c, h, w = _norm_input_shape(input_shape)
    shapes: dict[str, tuple] = {}
    for nid in graph.order:
        node = graph.nodes[nid]
        a = node.attrs
        ins = [shapes[s] for s in node.inputs]
        if node.kind == INPUT:
            if c != a["channels"]:
                raise ShapeInferenceError(nid, f"declared {a['channels']} channels, input has {c}")
            shapes[nid] = (n, c, h, w)
        elif node.kind == CONV:
            ni, ci, hi, wi = _expect4(nid, ins[0])
            if ci != a["in_channels"]:
                raise ShapeInferenceError(nid, f"input channels {ci} != declared in_channels {a['in_channels']}")
            k, s, p = a["kernel"], a["stride"], a["pad"]
            if k > hi + 2 * p or k > wi + 2 * p:
                raise ShapeInferenceError(nid, f"kernel {k} exceeds padded input {hi + 2 * p}x{wi + 2 * p}")
            oh = (hi + 2 * p - k) // s + 1
            ow = (wi + 2 * p - k) // s + 1
            shapes[nid] = (ni, a["out_channels"], oh, ow)
        elif node.kind in (AVG_POOL, MAX_POOL):
            ni, ci, hi, wi = _expect4(nid, ins[0])
            k, s, p = a["kernel"], a["stride"], a.get("pad", 0)
            if k > hi + 2 * p or k > wi + 2 * p:
                raise ShapeInferenceError(nid, f"pool window {k} exceeds padded input")
            shapes[nid] = (ni, ci, (hi + 2 * p - k) // s + 1, (wi + 2 * p - k) // s + 1)
        elif node.kind == GLOBAL_AVG_POOL:
            ni, ci, hi, wi = _expect4(nid, ins[0])
            shapes[nid] = (ni, ci)
        elif node.kind == CHANNEL_AFFINE:
            if ins[0][1] != a["channels"]:
                raise ShapeInferenceError(nid, f"channel count {ins[0][1]} != declared {a['channels']}")
            shapes[nid] = ins[0]
        elif node.kind == RELU:
            shapes[nid] = ins[0]
        elif node.kind == ADD:
            if ins[0] != ins[1]:
                raise ShapeInferenceError(nid, f"add inputs differ: {ins[0]} vs {ins[1]}")
            shapes[nid] = ins[0]
        elif node.kind in (DENSE, EMBEDDING_HEAD):
            if len(ins[0]) != 2:
                raise ShapeInferenceError(nid, f"{node.kind} needs a 2-D input, got {ins[0]}")
            if ins[0][1] != a["in_features"]:
                raise ShapeInferenceError(nid, f"input features {ins[0][1]} != declared {a['in_features']}")
            shapes[nid] = (ins[0][0], a["out_features"])
        elif node.kind == PART_HEAD:
            if len(ins[0]) != 2:
                raise ShapeInferenceError(nid, "part_head needs a 2-D input")
            if ins[0][1] != a["parts"] * a["part_dim"]:
                raise ShapeInferenceError(
                    nid, f"input features {ins[0][1]} != parts*part_dim {a['parts'] * a['part_dim']}")
            shapes[nid] = (ins[0][0], a["parts"] * a["classes"])
        else:  # pragma: no cover - guarded by KINDS
            raise ShapeInferenceError(nid, f"no shape rule for kind '{node.kind}'")
    return shapes


def _expect4(nid: str, shape: tuple) -> tuple:
    if len(shape) != 4:
        raise ShapeInferenceError(nid, f"expected a 4-D input, got {shape}")
    return shape


def count_flops(graph: NetworkGraph, input_shape) -> int:
    """Total FLOPs for one input, counting 2 ops per multiply-accumulate.

    Only conv and dense-like layers contribute; affine, activation, pooling
    and additions are excluded from the count by convention.
    """
    shape = _norm_input_shape(input_shape)
    shapes = infer_shapes(graph, (1,) + shape[1:])
    total = 0
    for nid in graph.order:
        node = graph.nodes[nid]
        a = node.attrs
        if node.kind == CONV:
            _, cout, oh, ow = shapes[nid]
            total += 2 * a["kernel"] * a["kernel"] * a["in_channels"] * cout * oh * ow
        elif node.kind in (DENSE, EMBEDDING_HEAD):
            total += 2 * a["in_features"] * a["out_features"]
        elif node.kind == PART_HEAD:
            total += 2 * a["parts"] * a["part_dim"] * a["classes"]
    return int(total)


def count_params(graph: NetworkGraph) -> int:
    """Sum of all parameter tensor lengths, biases and affine params included."""
    return sum(node.param_count() for node in graph.nodes.values())


# ---------------------------------------------------------------------------
# channel coupling


@dataclass(frozen=True)
class ChannelGroup:
    """Conv output channels that must be pruned together.

    ``members`` is a sorted tuple of (conv node id, channel index). Groups
    tied to the graph input are not prunable.
    """

    members: tuple
    prunable: bool = True

    def layers(self) -> tuple:
        return tuple(sorted({nid for nid, _ in self.members}))


class _UnionFind:
    def __init__(self):
        self.parent: dict = {}

    def find(self, x):
        self.parent.setdefault(x, x)
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            # deterministic root: smaller key wins
            lo, hi = sorted((ra, rb))
            self.parent[hi] = lo


def _channel_keys(graph: NetworkGraph) -> dict:
    """Per node: list of union-find keys describing its output channels,
    or None for nodes without tracked channels (dense-like outputs)."""
    uf = _UnionFind()
    keys: dict[str, Optional[list]] = {}
    for nid in graph.order:
        node = graph.nodes[nid]
        if node.kind == INPUT:
            keys[nid] = [("#input", nid, c) for c in range(node.attrs["channels"])]
        elif node.kind == CONV:
            keys[nid] = [("conv", nid, c) for c in range(node.attrs["out_channels"])]
        elif node.kind in _CHANNEL_PRESERVING:
            keys[nid] = keys[node.inputs[0]]
        elif node.kind == ADD:
            left, right = (keys[s] for s in node.inputs)
            if left is None or right is None:
                keys[nid] = left if left is not None else right
                continue
            if len(left) != len(right):
                raise ValidationError(
                    f"add node '{nid}' joins mismatched channel counts {len(left)} vs {len(right)}")
            for ka, kb in zip(left, right):
                uf.union(ka, kb)
            keys[nid] = left
        else:  # dense-like: channels are consumed
            keys[nid] = None
    # resolve to final roots
    resolved = {}
    for nid, ks in keys.items():
        resolved[nid] = None if ks is None else [uf.find(k) for k in ks]
    return resolved


def coupled_channel_groups(graph: NetworkGraph) -> list:
    """Partition all conv output channels into coupled groups.

    Channels joined by any add node (through any chain of channel-preserving
    layers) share a group; everything else is a singleton. Groups that also
    contain graph-input channels are flagged non-prunable.
    """
    resolved = _channel_keys(graph)
    members: dict = {}
    tainted: set = set()
    for nid in graph.order:
        node = graph.nodes[nid]
        if node.kind == CONV:
            for c, root in enumerate(resolved[nid]):
                members.setdefault(root, []).append((nid, c))
        elif node.kind == INPUT:
            for root in resolved[nid]:
                tainted.add(root)
    groups = []
    for root in sorted(members, key=lambda r: members[r][0]):
        groups.append(ChannelGroup(tuple(sorted(members[root])), prunable=root not in tainted))
    return groups


def group_spaces(groups: Sequence[ChannelGroup]) -> dict:
    """Bucket groups by the set of layers they span.

    Within a space every member layer has exactly one channel per group, so
    a per-space prune fraction is a per-layer prune fraction.
    """
    spaces: dict[tuple, list] = {}
    for g in groups:
        spaces.setdefault(g.layers(), []).append(g)
    return spaces


# ---------------------------------------------------------------------------
# prune rewrites


class PruneMask:
    """Per conv layer, a boolean keep vector over output channels."""

    def __init__(self, keep: dict):
        self.keep = {nid: np.asarray(v, dtype=bool).copy() for nid, v in keep.items()}

    @classmethod
    def all_keep(cls, graph: NetworkGraph) -> "PruneMask":
        return cls({nid: np.ones(graph.nodes[nid].attrs["out_channels"], dtype=bool)
                    for nid in graph.conv_ids()})

    def validate(self, graph: NetworkGraph) -> None:
        for nid in graph.conv_ids():
            if nid not in self.keep:
                raise PruneError(f"mask missing conv layer '{nid}'")
            want = graph.nodes[nid].attrs["out_channels"]
            if self.keep[nid].shape != (want,):
                raise PruneError(
                    f"mask for '{nid}' has length {self.keep[nid].shape[0]}, layer has {want} channels")

    def masked_channels(self) -> list:
        out = []
        for nid in sorted(self.keep):
            for c in np.flatnonzero(~self.keep[nid]):
                out.append((nid, int(c)))
        return out


def _keep_masks_from_groups(graph: NetworkGraph, selections: Iterable[ChannelGroup]) -> dict:
    current = {g.members: g for g in coupled_channel_groups(graph)}
    keep = {nid: np.ones(graph.nodes[nid].attrs["out_channels"], dtype=bool)
            for nid in graph.conv_ids()}
    for g in selections:
        match = current.get(tuple(sorted(g.members)))
        if match is None:
            raise PruneError(f"selection {g.members} is not a whole coupled group of this graph")
        if not match.prunable:
            raise PruneError(f"group {g.members} is tied to the graph input and cannot be pruned")
        for nid, c in g.members:
            keep[nid][c] = False
    for nid, mask in keep.items():
        if not mask.any():
            raise PruneError(f"pruning would remove every channel of layer '{nid}'")
    return keep


def _propagate_channel_masks(graph: NetworkGraph, conv_keep: dict) -> dict:
    """Output-channel keep mask per node (None for dense-like outputs)."""
    masks: dict[str, Optional[np.ndarray]] = {}
    for nid in graph.order:
        node = graph.nodes[nid]
        if node.kind == INPUT:
            masks[nid] = np.ones(node.attrs["channels"], dtype=bool)
        elif node.kind == CONV:
            masks[nid] = conv_keep[nid]
        elif node.kind in _CHANNEL_PRESERVING:
            masks[nid] = masks[node.inputs[0]]
        elif node.kind == ADD:
            ma, mb = (masks[s] for s in node.inputs)
            if ma is None or mb is None:
                masks[nid] = ma if ma is not None else mb
                continue
            if not np.array_equal(ma, mb):
                raise PruneError(f"add node '{nid}' would join different keep masks; "
                                 "selection does not respect coupled groups")
            masks[nid] = ma
        else:
            masks[nid] = None
    return masks


def _clone_param(p: T.Tensor, data: np.ndarray) -> T.Tensor:
    return T.Tensor(np.ascontiguousarray(data), requires_grad=p.requires_grad, name=p.name)


def hard_prune(graph: NetworkGraph, selections: Iterable[ChannelGroup]) -> NetworkGraph:
    """Structurally remove whole coupled groups of conv output channels.

    Removed channels drop their weight slice, bias and matching affine
    entries; every consumer loses the corresponding input slices. The
    result is a new graph that passes shape inference.
    """
    selections = list(selections)
    conv_keep = _keep_masks_from_groups(graph, selections)
    masks = _propagate_channel_masks(graph, conv_keep)

    nodes = []
    for nid in graph.order:
        node = graph.nodes[nid]
        a = dict(node.attrs)
        params = {}
        in_mask = masks[node.inputs[0]] if node.inputs else None
        if node.kind == CONV:
            out_keep = conv_keep[nid]
            w = node.params["weight"].data[out_keep]
            if in_mask is not None:
                w = w[:, in_mask]
            params["weight"] = _clone_param(node.params["weight"], w)
            if a.get("bias", True):
                params["bias"] = _clone_param(node.params["bias"], node.params["bias"].data[out_keep])
            a["out_channels"] = int(out_keep.sum())
            a["in_channels"] = int(in_mask.sum()) if in_mask is not None else a["in_channels"]
        elif node.kind == CHANNEL_AFFINE:
            keep = in_mask if in_mask is not None else np.ones(a["channels"], dtype=bool)
            params["gamma"] = _clone_param(node.params["gamma"], node.params["gamma"].data[keep])
            params["beta"] = _clone_param(node.params["beta"], node.params["beta"].data[keep])
            a["channels"] = int(keep.sum())
        elif node.kind in (DENSE, EMBEDDING_HEAD):
            w = node.params["weight"].data
            if in_mask is not None:
                if w.shape[1] != in_mask.shape[0]:
                    raise PruneError(f"node '{nid}' input features {w.shape[1]} do not align "
                                     f"with producer channels {in_mask.shape[0]}")
                w = w[:, in_mask]
                a["in_features"] = int(in_mask.sum())
            params["weight"] = _clone_param(node.params["weight"], w)
            if "bias" in node.params:
                params["bias"] = _clone_param(node.params["bias"], node.params["bias"].data)
        elif node.kind == PART_HEAD:
            if in_mask is not None and not in_mask.all():
                raise PruneError(f"part_head '{nid}' input cannot be pruned")
            for name, p in node.params.items():
                params[name] = _clone_param(p, p.data)
        elif node.kind == INPUT and node.inputs:
            raise ValidationError("input node cannot have predecessors")
        else:
            for name, p in node.params.items():
                params[name] = _clone_param(p, p.data)
        nodes.append(LayerNode(nid, node.kind, list(node.inputs), a, params))
    return NetworkGraph(nodes)


def _direct_conv_origin(graph: NetworkGraph, nid: str) -> Optional[str]:
    """Walk up through channel-preserving nodes to the producing conv.

    Stops (returns None) at add nodes, where a single conv no longer owns
    the channel identity.
    """
    node = graph.nodes[nid]
    while True:
        if not node.inputs:
            return None
        node = graph.nodes[node.inputs[0]]
        if node.kind == CONV:
            return node.id
        if node.kind not in _CHANNEL_PRESERVING:
            return None


def soft_prune_apply(graph: NetworkGraph, mask: PruneMask) -> NetworkGraph:
    """Zeroize masked channels in a copy of the graph.

    The architecture is unchanged; masked conv channels get exactly-zero
    weights and bias, and per-channel affine entries owned by those channels
    are zeroed as well (including affines behind an add when the whole
    coupled group is masked).
    """
    mask.validate(graph)
    out = graph.copy()
    for nid, keep in mask.keep.items():
        node = out.nodes[nid]
        node.params["weight"].data[~keep] = 0.0
        if "bias" in node.params:
            node.params["bias"].data[~keep] = 0.0

    # channels whose whole coupled group is masked
    group_masked: set = set()
    for g in coupled_channel_groups(graph):
        if all(not mask.keep[nid][c] for nid, c in g.members):
            group_masked.update(g.members)
    resolved = _channel_keys(graph)
    root_masked = {resolved[nid][c] for nid, c in group_masked} if group_masked else set()

    for nid in out.order:
        node = out.nodes[nid]
        if node.kind != CHANNEL_AFFINE:
            continue
        zero = np.zeros(node.attrs["channels"], dtype=bool)
        origin = _direct_conv_origin(graph, nid)
        if origin is not None and origin in mask.keep:
            zero |= ~mask.keep[origin]
        if root_masked:
            roots = resolved[graph.nodes[nid].inputs[0]]
            if roots is not None:
                zero |= np.array([r in root_masked for r in roots], dtype=bool)
        node.params["gamma"].data[zero] = 0.0
        node.params["beta"].data[zero] = 0.0
    return out


def zeroize_channels(graph: NetworkGraph, mask: PruneMask) -> None:
    """In-place weights-only zeroing of masked conv channels.

    Used by progressive soft pruning between epochs: the downstream affine
    parameters stay live, so a zeroized channel still produces its affine
    shift and keeps receiving gradient, which is what lets it recover if a
    later ranking re-selects it. Momentum buffers are cleared for masked
    channels so a stale velocity cannot resurrect them within the same
    update.
    """
    mask.validate(graph)
    for nid, keep in mask.keep.items():
        node = graph.nodes[nid]
        weight = node.params["weight"]
        weight.data[~keep] = 0.0
        if weight._velocity is not None:
            weight._velocity[~keep] = 0.0
        if "bias" in node.params:
            bias = node.params["bias"]
            bias.data[~keep] = 0.0
            if bias._velocity is not None:
                bias._velocity[~keep] = 0.0


def materialize(graph: NetworkGraph, mask: PruneMask) -> NetworkGraph:
    """Hard-remove all channels a soft mask zeroized.

    The mask must be consistent with the coupled groups (no partially
    masked group); the result equals ``hard_prune`` of those groups.
    """
    mask.validate(graph)
    selections = []
    for g in coupled_channel_groups(graph):
        flags = [not mask.keep[nid][c] for nid, c in g.members]
        if all(flags):
            selections.append(g)
        elif any(flags):
            raise PruneError(f"mask splits coupled group {g.members}; "
                             "channels joined by an add must be masked together")
    return hard_prune(soft_prune_apply(graph, mask), selections)


# ---------------------------------------------------------------------------
# head management for training stages


def append_classifier(graph: NetworkGraph, n_classes: int, seed: int = 0,
                      node_id: str = "classifier") -> NetworkGraph:
    """Return a copy with a dense classifier attached to the embedding node."""
    if node_id in graph.nodes:
        raise ValidationError(f"graph already has a node '{node_id}'")
    g = graph.copy()
    emb = g.embedding_id()
    if g.consumers(emb):
        raise ValidationError(f"embedding node '{emb}' already has consumers")
    emb_node = g.nodes[emb]
    if emb_node.kind == EMBEDDING_HEAD:
        dim = emb_node.attrs["out_features"]
    else:
        raise ValidationError("append_classifier needs an embedding_head sink")
    rng = np.random.default_rng(seed)
    weight = T.kaiming_normal(rng, (n_classes, dim), fan_in=dim, name=f"{node_id}.weight")
    bias = T.Tensor(np.zeros(n_classes, dtype=np.float32), requires_grad=True, name=f"{node_id}.bias")
    nodes = [g.nodes[nid] for nid in g.order]
    nodes.append(LayerNode(node_id, DENSE, [emb],
                           {"out_features": n_classes, "in_features": dim, "bias": True},
                           {"weight": weight, "bias": bias}))
    return NetworkGraph(nodes)


def strip_heads(graph: NetworkGraph, keep_until: Optional[str] = None) -> NetworkGraph:
    """Drop nodes after the embedding node (classifier or part heads)."""
    g = graph.copy()
    stop = keep_until or g.embedding_id()
    keep_ids = set()
    stack = [stop]
    while stack:
        nid = stack.pop()
        if nid in keep_ids:
            continue
        keep_ids.add(nid)
        stack.extend(g.nodes[nid].inputs)
    nodes = [g.nodes[nid] for nid in g.order if nid in keep_ids]
    return NetworkGraph(nodes)
