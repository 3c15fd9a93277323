"""Dense float32 tensors with reverse-mode differentiation.

The engine is deliberately small: a fixed vocabulary of operations, no
broadcasting, no dynamic shapes. Every op validates its input shapes,
refuses to emit non-finite values, and (when a :class:`Tape` is active)
records enough state to replay the exact reverse pass. Accumulating
reductions run in float64 internally so results are reproducible bit for
bit regardless of how the backing BLAS chunks the work.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "EngineError",
    "ShapeMismatch",
    "NonFiniteValue",
    "tape_scope",
    "backward",
    "sgd_step",
    "kaiming_normal",
    "conv2d",
    "dense",
    "relu",
    "add",
    "sub",
    "mul",
    "scale",
    "add_const",
    "scale_by",
    "recip",
    "sqrt_safe",
    "channel_affine",
    "global_avg_pool",
    "avg_pool",
    "max_pool",
    "sum_all",
    "mean_all",
    "pairwise_sqdist",
    "cross_sqdist",
    "class_means",
    "row_logsumexp",
    "gather2d",
    "masked_soft_agg",
    "cross_entropy_logits",
    "rows_l2_normalize",
    "slice_cols",
    "concat_cols",
]

_EPS = 1e-12


class EngineError(Exception):
    """Base class for tensor-engine failures."""


class ShapeMismatch(EngineError):
    """An operation received tensors whose shapes cannot be combined."""


class NonFiniteValue(EngineError):
    """An operation produced NaN or Inf."""


class Tensor:
    """A dense float32 array with an optional gradient buffer.

    ``requires_grad`` marks trainable parameters; ``retain_grad`` asks the
    backward pass to keep the gradient of an intermediate result (used by
    criteria that inspect feature-map gradients).
    """

    __slots__ = ("data", "grad", "requires_grad", "retain_grad", "name", "_velocity", "update_mask")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.ascontiguousarray(data, dtype=np.float32)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteValue(f"tensor '{name}' initialised with non-finite values")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.retain_grad = False
        self.name = name
        self._velocity: Optional[np.ndarray] = None
        self.update_mask: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeMismatch(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detached_copy(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=self.requires_grad, name=self.name)

    def __repr__(self) -> str:  # pragma: no cover - debug aid
        tag = " param" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag}, name={self.name!r})"


class _OpRecord:
    __slots__ = ("name", "inputs", "output", "backward_fn")

    def __init__(self, name, inputs, output, backward_fn):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of executed ops, consumed exactly once by backward."""

    def __init__(self):
        self.records: list[_OpRecord] = []
        self.consumed = False

    def __len__(self) -> int:
        return len(self.records)


_TAPE_STACK: list[Tape] = []


def _active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


@contextmanager
def tape_scope(tape: Tape):
    """Make ``tape`` the recording target for ops run inside the block."""
    _TAPE_STACK.append(tape)
    try:
        yield tape
    finally:
        _TAPE_STACK.pop()


def _emit(name: str, inputs: Sequence[Tensor], out_data: np.ndarray,
          backward_fn: Callable[[np.ndarray], Iterable[tuple]]) -> Tensor:
    out_data = np.ascontiguousarray(out_data, dtype=np.float32)
    if not np.all(np.isfinite(out_data)):
        raise NonFiniteValue(f"op '{name}' produced non-finite values")
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None:
        tape.records.append(_OpRecord(name, tuple(inputs), out, backward_fn))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Replay ``tape`` in reverse, accumulating gradients of ``loss``.

    Gradients are written to ``.grad`` of every tensor with
    ``requires_grad`` or ``retain_grad`` set. The tape is single use.
    """
    if tape.consumed:
        raise EngineError("tape already consumed by a previous backward pass")
    if loss.data.size != 1:
        raise ShapeMismatch(f"backward needs a scalar loss, got shape {loss.shape}")
    produced = any(rec.output is loss for rec in tape.records)
    if not produced:
        raise EngineError("loss tensor was not produced by this tape")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        gout = grads.pop(id(rec.output), None)
        if gout is None:
            continue
        if rec.output.retain_grad or rec.output.requires_grad:
            _accumulate_tensor_grad(rec.output, gout)
        for tensor, gin in rec.backward_fn(gout):
            if gin is None:
                continue
            key = id(tensor)
            if key in grads:
                grads[key] = grads[key] + gin
            else:
                grads[key] = gin
    # leaves that never appear as an op output
    remaining = {}
    for rec in tape.records:
        for t in rec.inputs:
            remaining[id(t)] = t
    for key, g in grads.items():
        t = remaining.get(key)
        if t is not None and (t.requires_grad or t.retain_grad):
            _accumulate_tensor_grad(t, g)


def _accumulate_tensor_grad(t: Tensor, g: np.ndarray) -> None:
    g32 = np.asarray(g, dtype=np.float32)
    if t.grad is None:
        t.grad = g32.copy()
    else:
        t.grad = t.grad + g32


def sgd_step(params: Iterable[Tensor], lr: float, momentum: float = 0.0,
             weight_decay: float = 0.0) -> None:
    """v <- momentum*v + grad + wd*param; param <- param - lr*v.

    Tensors carrying an ``update_mask`` only move where the mask is set.
    """
    if lr < 0:
        raise EngineError("negative learning rate")
    if not 0.0 <= momentum < 1.0:
        raise EngineError("momentum must be in [0, 1)")
    for p in params:
        if p.grad is None:
            raise EngineError(f"parameter '{p.name}' has no gradient")
        step = p.grad
        if weight_decay:
            step = step + np.float32(weight_decay) * p.data
        if p._velocity is None:
            p._velocity = np.zeros_like(p.data)
        p._velocity = np.float32(momentum) * p._velocity + step
        delta = np.float32(lr) * p._velocity
        if p.update_mask is not None:
            delta = delta * p.update_mask
        p.data = p.data - delta


def kaiming_normal(rng: np.random.Generator, shape: Sequence[int], fan_in: int,
                   name: str = "") -> Tensor:
    """Fan-in scaled normal init, std = sqrt(2 / fan_in)."""
    std = math.sqrt(2.0 / max(1, fan_in))
    data = rng.normal(0.0, std, size=tuple(shape)).astype(np.float32)
    return Tensor(data, requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# shape helpers


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ShapeMismatch(msg)


def _out_hw(h: int, w: int, k: int, stride: int, pad: int) -> tuple[int, int]:
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    return oh, ow


def _im2col(x: np.ndarray, k: int, stride: int, pad: int, fill: float = 0.0):
    """Return patches of shape [N, OH, OW, C*k*k] plus padded-input shape."""
    n, c, h, w = x.shape
    if pad:
        xp = np.full((n, c, h + 2 * pad, w + 2 * pad), fill, dtype=x.dtype)
        xp[:, :, pad:pad + h, pad:pad + w] = x
    else:
        xp = x
    windows = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride, :, :]          # [N,C,OH,OW,k,k]
    patches = np.ascontiguousarray(windows.transpose(0, 2, 3, 1, 4, 5))
    oh, ow = patches.shape[1], patches.shape[2]
    return patches.reshape(n, oh, ow, c * k * k), xp.shape


def _col2im(grad_cols: np.ndarray, xp_shape, x_shape, k: int, stride: int, pad: int):
    """Scatter-add column gradients back to the (unpadded) input layout."""
    n, c, h, w = x_shape
    _, _, hp, wp = xp_shape
    oh, ow = grad_cols.shape[1], grad_cols.shape[2]
    gxp = np.zeros((n, c, hp, wp), dtype=np.float64)
    gcols = grad_cols.reshape(n, oh, ow, c, k, k)
    for ki in range(k):
        for kj in range(k):
            gxp[:, :, ki:ki + oh * stride:stride, kj:kj + ow * stride:stride] += \
                gcols[:, :, :, :, ki, kj].transpose(0, 3, 1, 2)
    if pad:
        gxp = gxp[:, :, pad:pad + h, pad:pad + w]
    return gxp.astype(np.float32)


# ---------------------------------------------------------------------------
# core ops


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor], stride: int = 1,
           pad: int = 0) -> Tensor:
    """2-D cross-correlation over [N,C_in,H,W] with an OIHW weight."""
    _require(x.data.ndim == 4, f"conv2d input must be 4-D, got {x.shape}")
    _require(weight.data.ndim == 4, f"conv2d weight must be 4-D, got {weight.shape}")
    n, cin, h, w = x.shape
    cout, cin_w, kh, kw = weight.shape
    _require(kh == kw, f"conv2d supports square kernels, got {kh}x{kw}")
    _require(cin == cin_w, f"conv2d input channels {cin} != weight input channels {cin_w}")
    _require(stride >= 1, "conv2d stride must be >= 1")
    _require(pad >= 0, "conv2d pad must be >= 0")
    _require(kh <= h + 2 * pad, f"kernel {kh} exceeds padded height {h + 2 * pad}")
    _require(kw <= w + 2 * pad, f"kernel {kw} exceeds padded width {w + 2 * pad}")
    if bias is not None:
        _require(bias.shape == (cout,), f"conv2d bias shape {bias.shape} != ({cout},)")

    cols, xp_shape = _im2col(x.data, kh, stride, pad)
    oh, ow = cols.shape[1], cols.shape[2]
    w2 = weight.data.reshape(cout, cin * kh * kw)
    out64 = cols.astype(np.float64).reshape(-1, cin * kh * kw) @ w2.astype(np.float64).T
    out = out64.reshape(n, oh, ow, cout).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data.astype(np.float64)[None, :, None, None]

    saved_cols = cols
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bwd(gout):
        g = gout.astype(np.float64)
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, cout)                 # [N*OH*OW, C_out]
        gw = (g2.T @ saved_cols.astype(np.float64).reshape(-1, cin * kh * kw))
        gw = gw.reshape(cout, cin, kh, kw).astype(np.float32)
        gcols = (g2 @ w2.astype(np.float64)).reshape(n, oh, ow, cin * kh * kw)
        gx = _col2im(gcols, xp_shape, x.shape, kh, stride, pad)
        grads = [(x, gx), (weight, gw)]
        if bias is not None:
            grads.append((bias, g.sum(axis=(0, 2, 3)).astype(np.float32)))
        return grads

    return _emit("conv2d", inputs, out, bwd)


def dense(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map of row vectors: [N,D_in] x [D_out,D_in]^T + bias."""
    _require(x.data.ndim == 2, f"dense input must be 2-D, got {x.shape}")
    _require(weight.data.ndim == 2, f"dense weight must be 2-D, got {weight.shape}")
    n, din = x.shape
    dout, din_w = weight.shape
    _require(din == din_w, f"dense input dim {din} != weight input dim {din_w}")
    if bias is not None:
        _require(bias.shape == (dout,), f"dense bias shape {bias.shape} != ({dout},)")

    out = x.data.astype(np.float64) @ weight.data.astype(np.float64).T
    if bias is not None:
        out = out + bias.data.astype(np.float64)[None, :]
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bwd(gout):
        g = gout.astype(np.float64)
        gx = (g @ weight.data.astype(np.float64)).astype(np.float32)
        gw = (g.T @ x.data.astype(np.float64)).astype(np.float32)
        grads = [(x, gx), (weight, gw)]
        if bias is not None:
            grads.append((bias, g.sum(axis=0).astype(np.float32)))
        return grads

    return _emit("dense", inputs, out, bwd)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bwd(gout):
        return [(x, gout * mask)]

    return _emit("relu", (x,), np.where(mask, x.data, 0.0), bwd)


def add(x: Tensor, y: Tensor) -> Tensor:
    _require(x.shape == y.shape, f"add shapes differ: {x.shape} vs {y.shape}")

    def bwd(gout):
        return [(x, gout), (y, gout)]

    return _emit("add", (x, y), x.data + y.data, bwd)


def sub(x: Tensor, y: Tensor) -> Tensor:
    _require(x.shape == y.shape, f"sub shapes differ: {x.shape} vs {y.shape}")

    def bwd(gout):
        return [(x, gout), (y, -gout)]

    return _emit("sub", (x, y), x.data - y.data, bwd)


def mul(x: Tensor, y: Tensor) -> Tensor:
    _require(x.shape == y.shape, f"mul shapes differ: {x.shape} vs {y.shape}")

    def bwd(gout):
        return [(x, gout * y.data), (y, gout * x.data)]

    return _emit("mul", (x, y), x.data * y.data, bwd)


def scale(x: Tensor, c: float) -> Tensor:
    c32 = np.float32(c)

    def bwd(gout):
        return [(x, gout * c32)]

    return _emit("scale", (x,), x.data * c32, bwd)


def add_const(x: Tensor, c: float) -> Tensor:
    def bwd(gout):
        return [(x, gout)]

    return _emit("add_const", (x,), x.data + np.float32(c), bwd)


def scale_by(x: Tensor, s: Tensor) -> Tensor:
    """Multiply a tensor by a scalar tensor (gradient flows into both)."""
    _require(s.data.size == 1, f"scale_by needs a scalar tensor, got shape {s.shape}")
    sval = s.data.reshape(())

    def bwd(gout):
        g64 = gout.astype(np.float64)
        gs = np.array((g64 * x.data).sum(), dtype=np.float32).reshape(s.shape)
        return [(x, gout * sval), (s, gs)]

    return _emit("scale_by", (x, s), x.data * sval, bwd)


def recip(x: Tensor) -> Tensor:
    """Elementwise 1/x; zero inputs are an error by the finite-value rule."""
    out = 1.0 / x.data.astype(np.float64)

    def bwd(gout):
        return [(x, (-gout.astype(np.float64) / (x.data.astype(np.float64) ** 2)).astype(np.float32))]

    return _emit("recip", (x,), out, bwd)


def sqrt_safe(x: Tensor) -> Tensor:
    """Exact sqrt forward; derivative clamped near zero so 0 stays usable."""
    _require(bool(np.all(x.data >= 0)), "sqrt_safe input must be non-negative")
    root = np.sqrt(x.data.astype(np.float64))

    def bwd(gout):
        denom = np.sqrt(np.maximum(x.data.astype(np.float64), _EPS))
        return [(x, (0.5 * gout.astype(np.float64) / denom).astype(np.float32))]

    return _emit("sqrt_safe", (x,), root, bwd)


def channel_affine(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Per-channel scale and shift on [N,C,H,W] or [N,C]."""
    _require(x.data.ndim in (2, 4), f"channel_affine input must be 2-D or 4-D, got {x.shape}")
    c = x.shape[1]
    _require(gamma.shape == (c,), f"gamma length {gamma.shape} != channel count {c}")
    _require(beta.shape == (c,), f"beta length {beta.shape} != channel count {c}")
    if x.data.ndim == 4:
        gview = gamma.data[None, :, None, None]
        bview = beta.data[None, :, None, None]
        red_axes = (0, 2, 3)
    else:
        gview = gamma.data[None, :]
        bview = beta.data[None, :]
        red_axes = (0,)
    out = x.data * gview + bview

    def bwd(gout):
        g64 = gout.astype(np.float64)
        ggamma = (g64 * x.data).sum(axis=red_axes).astype(np.float32)
        gbeta = g64.sum(axis=red_axes).astype(np.float32)
        return [(x, gout * gview), (gamma, ggamma), (beta, gbeta)]

    return _emit("channel_affine", (x, gamma, beta), out, bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    """[N,C,H,W] -> [N,C] spatial mean."""
    _require(x.data.ndim == 4, f"global_avg_pool input must be 4-D, got {x.shape}")
    n, c, h, w = x.shape
    _require(h * w > 0, "global_avg_pool on empty spatial extent")
    out = x.data.astype(np.float64).mean(axis=(2, 3))

    def bwd(gout):
        g = gout.astype(np.float32) / np.float32(h * w)
        return [(x, np.broadcast_to(g[:, :, None, None], x.shape).copy())]

    return _emit("global_avg_pool", (x,), out, bwd)


def avg_pool(x: Tensor, k: int, stride: int, pad: int = 0) -> Tensor:
    """Average pooling with a k*k window; padded cells count in the divisor."""
    _require(x.data.ndim == 4, f"avg_pool input must be 4-D, got {x.shape}")
    n, c, h, w = x.shape
    _require(k >= 1 and k <= h + 2 * pad and k <= w + 2 * pad, f"pool window {k} too large for {x.shape}")
    cols, xp_shape = _im2col(x.data, k, stride, pad)
    oh, ow = cols.shape[1], cols.shape[2]
    cols = cols.reshape(n, oh, ow, c, k * k)
    out = cols.astype(np.float64).mean(axis=4).transpose(0, 3, 1, 2)

    def bwd(gout):
        g = gout.transpose(0, 2, 3, 1)[..., None] / np.float32(k * k)
        gcols = np.broadcast_to(g, (n, oh, ow, c, k * k)).reshape(n, oh, ow, c * k * k)
        return [(x, _col2im(gcols, xp_shape, x.shape, k, stride, pad))]

    return _emit("avg_pool", (x,), out, bwd)


def max_pool(x: Tensor, k: int, stride: int, pad: int = 0) -> Tensor:
    """Max pooling; padding is filled with -inf so it never wins."""
    _require(x.data.ndim == 4, f"max_pool input must be 4-D, got {x.shape}")
    n, c, h, w = x.shape
    _require(k >= 1 and k <= h + 2 * pad and k <= w + 2 * pad, f"pool window {k} too large for {x.shape}")
    cols, xp_shape = _im2col(x.data, k, stride, pad, fill=-np.inf)
    oh, ow = cols.shape[1], cols.shape[2]
    cols = cols.reshape(n, oh, ow, c, k * k)
    arg = np.argmax(cols, axis=4)
    out = np.take_along_axis(cols, arg[..., None], axis=4)[..., 0].transpose(0, 3, 1, 2)

    def bwd(gout):
        gcols = np.zeros((n, oh, ow, c, k * k), dtype=np.float32)
        np.put_along_axis(gcols, arg[..., None], gout.transpose(0, 2, 3, 1)[..., None], axis=4)
        return [(x, _col2im(gcols.reshape(n, oh, ow, c * k * k), xp_shape, x.shape, k, stride, pad))]

    return _emit("max_pool", (x,), out, bwd)


def sum_all(x: Tensor) -> Tensor:
    out = np.array(x.data.astype(np.float64).sum())

    def bwd(gout):
        return [(x, np.full(x.shape, float(gout.reshape(())), dtype=np.float32))]

    return _emit("sum_all", (x,), out.reshape(()), bwd)


def mean_all(x: Tensor) -> Tensor:
    _require(x.data.size > 0, "mean of empty tensor")
    out = np.array(x.data.astype(np.float64).mean())

    def bwd(gout):
        return [(x, np.full(x.shape, float(gout.reshape(())) / x.data.size, dtype=np.float32))]

    return _emit("mean_all", (x,), out.reshape(()), bwd)


# ---------------------------------------------------------------------------
# embedding-space ops used by the re-identification losses


def pairwise_sqdist(f: Tensor) -> Tensor:
    """All-pairs squared Euclidean distances of row vectors, [N,N]."""
    _require(f.data.ndim == 2, f"pairwise_sqdist input must be 2-D, got {f.shape}")
    x = f.data.astype(np.float64)
    sq = (x * x).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.fill_diagonal(d2, 0.0)
    d2 = np.maximum(d2, 0.0)

    def bwd(gout):
        s = gout.astype(np.float64)
        s = s + s.T
        gx = 2.0 * (s.sum(axis=1)[:, None] * x - s @ x)
        return [(f, gx.astype(np.float32))]

    return _emit("pairwise_sqdist", (f,), d2, bwd)


def cross_sqdist(f: Tensor, g: Tensor) -> Tensor:
    """Squared distances between two row-vector families, [N,M]."""
    _require(f.data.ndim == 2 and g.data.ndim == 2, "cross_sqdist inputs must be 2-D")
    _require(f.shape[1] == g.shape[1], f"dim mismatch {f.shape} vs {g.shape}")
    a = f.data.astype(np.float64)
    b = g.data.astype(np.float64)
    d2 = (a * a).sum(axis=1)[:, None] + (b * b).sum(axis=1)[None, :] - 2.0 * (a @ b.T)
    d2 = np.maximum(d2, 0.0)

    def bwd(gout):
        s = gout.astype(np.float64)
        ga = 2.0 * (s.sum(axis=1)[:, None] * a - s @ b)
        gb = 2.0 * (s.sum(axis=0)[:, None] * b - s.T @ a)
        return [(f, ga.astype(np.float32)), (g, gb.astype(np.float32))]

    return _emit("cross_sqdist", (f, g), d2, bwd)


def class_means(f: Tensor, labels: np.ndarray, n_classes: int) -> Tensor:
    """Per-class mean rows, [C,d]. Every class in [0, n_classes) must occur."""
    _require(f.data.ndim == 2, "class_means input must be 2-D")
    labels = np.asarray(labels, dtype=np.int64)
    _require(labels.shape == (f.shape[0],), "labels length must match rows")
    counts = np.bincount(labels, minlength=n_classes)
    _require(labels.min() >= 0 and labels.max() < n_classes, "label out of range")
    _require(bool(np.all(counts > 0)), "every class needs at least one sample")
    means = np.zeros((n_classes, f.shape[1]), dtype=np.float64)
    np.add.at(means, labels, f.data.astype(np.float64))
    means /= counts[:, None]

    def bwd(gout):
        gf = (gout.astype(np.float64)[labels] / counts[labels][:, None]).astype(np.float32)
        return [(f, gf)]

    return _emit("class_means", (f,), means, bwd)


def row_logsumexp(m: Tensor) -> Tensor:
    """Stable log-sum-exp of each row, [N]."""
    _require(m.data.ndim == 2, "row_logsumexp input must be 2-D")
    x = m.data.astype(np.float64)
    mx = x.max(axis=1, keepdims=True)
    ex = np.exp(x - mx)
    out = (mx[:, 0] + np.log(ex.sum(axis=1)))
    soft = ex / ex.sum(axis=1, keepdims=True)

    def bwd(gout):
        return [(m, (gout.astype(np.float64)[:, None] * soft).astype(np.float32))]

    return _emit("row_logsumexp", (m,), out, bwd)


def gather2d(m: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Pick entries m[rows[t], cols[t]] into a vector."""
    _require(m.data.ndim == 2, "gather2d input must be 2-D")
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    _require(rows.shape == cols.shape and rows.ndim == 1, "index arrays must be equal-length vectors")
    _require(rows.size == 0 or (rows.min() >= 0 and rows.max() < m.shape[0]), "row index out of range")
    _require(cols.size == 0 or (cols.min() >= 0 and cols.max() < m.shape[1]), "col index out of range")
    out = m.data[rows, cols]

    def bwd(gout):
        gm = np.zeros(m.shape, dtype=np.float64)
        np.add.at(gm, (rows, cols), gout.astype(np.float64))
        return [(m, gm.astype(np.float32))]

    return _emit("gather2d", (m,), out, bwd)


def masked_soft_agg(d: Tensor, mask: np.ndarray, sign: float, sigma: float) -> Tensor:
    """Softmax-weighted row aggregate of distances over a boolean mask.

    Row a yields sum_j w_aj * d_aj with w ~ exp(sign * d_aj / sigma)
    restricted to mask[a]. Positive sign emphasises large entries, negative
    sign small ones. Every row must select at least one entry.
    """
    _require(d.data.ndim == 2, "masked_soft_agg input must be 2-D")
    mask = np.asarray(mask, dtype=bool)
    _require(mask.shape == tuple(d.shape), "mask shape must match distances")
    _require(bool(mask.any(axis=1).all()), "a row selects no entries")
    _require(sigma > 0, "sigma must be positive")
    x = d.data.astype(np.float64)
    logits = np.where(mask, sign * x / sigma, -np.inf)
    mx = logits.max(axis=1, keepdims=True)
    ex = np.exp(logits - mx)
    w = ex / ex.sum(axis=1, keepdims=True)
    out = (w * np.where(mask, x, 0.0)).sum(axis=1)

    def bwd(gout):
        # d(out_a)/d(d_ak) = w_ak * (1 + sign/sigma * (d_ak - out_a)) on the mask
        jac = w * (1.0 + (sign / sigma) * (x - out[:, None]))
        gd = gout.astype(np.float64)[:, None] * np.where(mask, jac, 0.0)
        return [(d, gd.astype(np.float32))]

    return _emit("masked_soft_agg", (d,), out, bwd)


def cross_entropy_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-softmax at the true class."""
    _require(logits.data.ndim == 2, "cross_entropy_logits needs [N,C] logits")
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    _require(labels.shape == (n,), "labels length must match batch")
    _require(labels.min() >= 0 and labels.max() < c, f"label out of range for {c} classes")
    x = logits.data.astype(np.float64)
    mx = x.max(axis=1, keepdims=True)
    ex = np.exp(x - mx)
    logz = mx[:, 0] + np.log(ex.sum(axis=1))
    nll = logz - x[np.arange(n), labels]
    out = np.array(nll.mean())
    soft = ex / ex.sum(axis=1, keepdims=True)

    def bwd(gout):
        g = soft.copy()
        g[np.arange(n), labels] -= 1.0
        g *= float(gout.reshape(())) / n
        return [(logits, g.astype(np.float32))]

    return _emit("cross_entropy_logits", (logits,), out.reshape(()), bwd)


def rows_l2_normalize(x: Tensor) -> Tensor:
    """Scale each row to unit Euclidean norm (rows must be nonzero)."""
    _require(x.data.ndim == 2, "rows_l2_normalize input must be 2-D")
    v = x.data.astype(np.float64)
    r = np.sqrt((v * v).sum(axis=1))
    _require(bool(np.all(r > 0)), "cannot normalize a zero row")
    y = v / r[:, None]

    def bwd(gout):
        g = gout.astype(np.float64)
        proj = (g * y).sum(axis=1, keepdims=True)
        return [(x, ((g - proj * y) / r[:, None]).astype(np.float32))]

    return _emit("rows_l2_normalize", (x,), y, bwd)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    _require(x.data.ndim == 2, "slice_cols input must be 2-D")
    _require(0 <= start < stop <= x.shape[1], f"bad column slice [{start}:{stop}] for {x.shape}")
    out = x.data[:, start:stop].copy()

    def bwd(gout):
        gx = np.zeros(x.shape, dtype=np.float32)
        gx[:, start:stop] = gout
        return [(x, gx)]

    return _emit("slice_cols", (x,), out, bwd)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    _require(len(parts) >= 1, "concat_cols needs at least one tensor")
    for p in parts:
        _require(p.data.ndim == 2, "concat_cols inputs must be 2-D")
        _require(p.shape[0] == parts[0].shape[0], "concat_cols row counts differ")
    widths = [p.shape[1] for p in parts]
    offsets = np.cumsum([0] + widths)
    out = np.concatenate([p.data for p in parts], axis=1)

    def bwd(gout):
        return [(p, gout[:, offsets[i]:offsets[i + 1]].copy()) for i, p in enumerate(parts)]

    return _emit("concat_cols", tuple(parts), out, bwd)
