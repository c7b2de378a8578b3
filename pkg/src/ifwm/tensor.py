"""Dense rank-4 tensors with reverse-mode autodiff on an explicit tape.

Everything is (batch, channel, height, width), float64 by default (float32
supported for the fast path).  Ops record onto the currently active Tape; with
no tape active they are plain forward computations.  A Tape is owned by one
training step: record the forward, call tape.backward(loss), apply sgd_step,
throw the tape away.
"""

from __future__ import annotations

import hashlib
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from ifwm import kernels
from ifwm.errors import (
    ChannelCountError,
    ContractError,
    DataError,
    GeometryError,
)

IGNORE_LABEL = 255


class Tensor:
    """A rank-4 array plus autodiff bookkeeping.

    data is always C-contiguous float64 or float32.  grad is allocated only
    for requires_grad tensors, and only by Tape.backward.  node_id is the
    position on the tape that last registered this tensor.
    """

    __slots__ = ("data", "requires_grad", "grad", "node_id")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        arr = np.ascontiguousarray(arr)
        if arr.ndim != 4:
            raise GeometryError(f"tensor data must be rank-4 (n, c, h, w), got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node_id: Optional[int] = None

    @classmethod
    def zeros(cls, shape, dtype=np.float64, requires_grad: bool = False) -> "Tensor":
        return cls(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def n(self):
        return self.data.shape[0]

    @property
    def c(self):
        return self.data.shape[1]

    @property
    def h(self):
        return self.data.shape[2]

    @property
    def w(self):
        return self.data.shape[3]

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError("item() requires a single-element tensor")
        return float(self.data.reshape(()))

    def __repr__(self):
        flags = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flags})"


@dataclass
class TapeNode:
    """One recorded operation: input ids, output id, and a backward rule."""

    op: str
    input_ids: tuple
    output_id: int
    backward: Callable[[np.ndarray], tuple]
    inputs: tuple
    output: Tensor


class Tape:
    """Ordered record of operations; backward replays it in exact reverse."""

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self._ids: dict[int, int] = {}
        self._tensors: list[Tensor] = []

    def _register(self, t: Tensor) -> int:
        nid = self._ids.get(id(t))
        if nid is None:
            nid = len(self._tensors)
            self._ids[id(t)] = nid
            self._tensors.append(t)
            t.node_id = nid
        return nid

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor,
               backward: Callable[[np.ndarray], tuple]) -> None:
        in_ids = tuple(self._register(t) for t in inputs)
        out_id = self._register(output)
        self.nodes.append(TapeNode(op, in_ids, out_id, backward, tuple(inputs), output))

    def backward(self, root: Tensor) -> None:
        """Populate .grad of every requires_grad tensor reachable from root."""
        if id(root) not in self._ids:
            raise ContractError("backward root was not recorded on this tape")
        if root.data.size != 1:
            raise ContractError(f"backward requires a scalar root, got shape {root.data.shape}")
        bufs: dict[int, np.ndarray] = {self._ids[id(root)]: np.ones_like(root.data)}
        for node in reversed(self.nodes):
            g = bufs.pop(node.output_id, None)
            if g is None:
                continue
            grads = node.backward(g)
            for t, gi in zip(node.inputs, grads):
                if gi is None:
                    continue
                nid = self._ids[id(t)]
                if nid in bufs:
                    bufs[nid] = bufs[nid] + gi
                else:
                    bufs[nid] = gi
        for t in self._tensors:
            if not t.requires_grad:
                continue
            g = bufs.get(self._ids[id(t)])
            if g is not None:
                t.grad = g if t.grad is None else t.grad + g


_ACTIVE: list[Tape] = []


def active_tape() -> Optional[Tape]:
    return _ACTIVE[-1] if _ACTIVE else None


@contextmanager
def record_on(tape: Tape):
    _ACTIVE.append(tape)
    try:
        yield tape
    finally:
        _ACTIVE.pop()


# ---------------------------------------------------------------------------
# parameters


@dataclass
class ConvParams:
    """Weight (out_c, in_c, k, k), bias (1, out_c, 1, 1), stride, padding."""

    weight: Tensor
    bias: Tensor
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        oc, ic, kh, kw = self.weight.shape
        if kh != kw:
            raise ContractError(f"square kernels only, got {kh}x{kw}")
        if kh % 2 != 1:
            raise ContractError(f"kernel size must be odd, got {kh}")
        if self.bias.shape != (1, oc, 1, 1):
            raise GeometryError(f"bias shape {self.bias.shape} does not match out_c={oc}")
        if self.stride < 1 or self.padding < 0:
            raise ContractError("stride must be >= 1 and padding >= 0")

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[2]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]


@dataclass
class BatchNormState:
    """Per-channel scale/shift plus running statistics (eval-mode source)."""

    gamma: Tensor
    beta: Tensor
    running_mean: Tensor
    running_var: Tensor
    eps: float = 1e-5
    momentum: float = 0.1

    @property
    def channels(self) -> int:
        return self.gamma.shape[1]


def param_rng(seed: int, name: str) -> np.random.Generator:
    """Independent stream per (seed, parameter name).

    Keyed by name so two networks built from the same seed draw identical
    values for identically named parameters, regardless of build order.
    """
    digest = hashlib.sha256(name.encode()).digest()
    words = [int(x) for x in np.frombuffer(digest[:16], dtype=np.uint32)]
    return np.random.default_rng([int(seed)] + words)


def kaiming_conv(seed: int, name: str, in_c: int, out_c: int, k: int,
                 stride: int = 1, padding: Optional[int] = None,
                 dtype=np.float64) -> ConvParams:
    """Fan-in scaled normal weights, zero bias; padding defaults to (k-1)/2."""
    rng = param_rng(seed, f"{name}.weight")
    std = float(np.sqrt(2.0 / (in_c * k * k)))
    w = rng.normal(0.0, std, size=(out_c, in_c, k, k)).astype(dtype)
    b = np.zeros((1, out_c, 1, 1), dtype=dtype)
    if padding is None:
        padding = (k - 1) // 2
    return ConvParams(Tensor(w, requires_grad=True), Tensor(b, requires_grad=True),
                      stride=stride, padding=padding)


def make_batch_norm(c: int, dtype=np.float64, eps: float = 1e-5,
                    momentum: float = 0.1) -> BatchNormState:
    return BatchNormState(
        gamma=Tensor(np.ones((1, c, 1, 1), dtype=dtype), requires_grad=True),
        beta=Tensor(np.zeros((1, c, 1, 1), dtype=dtype), requires_grad=True),
        running_mean=Tensor(np.zeros((1, c, 1, 1), dtype=dtype)),
        running_var=Tensor(np.ones((1, c, 1, 1), dtype=dtype)),
        eps=eps,
        momentum=momentum,
    )


# ---------------------------------------------------------------------------
# ops


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    n, c, h, w = x.shape
    out_c = p.out_channels
    k = p.kernel_size
    if c != p.in_channels:
        raise ChannelCountError(f"conv2d expects {p.in_channels} input channels, got {c}")
    oh = kernels.conv_out_len(h, k, p.stride, p.padding)
    ow = kernels.conv_out_len(w, k, p.stride, p.padding)
    if oh < 1 or ow < 1:
        raise GeometryError(f"conv2d output extent {oh}x{ow} is empty for input {h}x{w}")
    cols = kernels.im2col(x.data, k, p.stride, p.padding)
    w2 = p.weight.data.reshape(out_c, -1)
    out2 = cols @ w2.T
    out2 += p.bias.data.reshape(1, out_c)
    out = Tensor(np.ascontiguousarray(out2.reshape(n, oh, ow, out_c).transpose(0, 3, 1, 2)))

    tape = active_tape()
    if tape is not None and (x.requires_grad or p.weight.requires_grad or p.bias.requires_grad):
        need_x, need_w, need_b = x.requires_grad, p.weight.requires_grad, p.bias.requires_grad
        shape_x, stride, pad = x.shape, p.stride, p.padding

        def backward(g):
            g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, out_c)
            gx = gw = gb = None
            if need_x:
                gx = kernels.col2im(np.ascontiguousarray(g2 @ w2), shape_x, k, stride, pad)
            if need_w:
                gw = (g2.T @ cols).reshape(out_c, c, k, k)
            if need_b:
                gb = g2.sum(axis=0).reshape(1, out_c, 1, 1)
            return gx, gw, gb

        out.requires_grad = True
        tape.record("conv2d", (x, p.weight, p.bias), out, backward)
    return out


def batch_norm(x: Tensor, bn: BatchNormState, training: bool) -> Tensor:
    if x.c != bn.channels:
        raise ChannelCountError(f"batch_norm has {bn.channels} channels, input has {x.c}")
    axes = (0, 2, 3)
    if training:
        mu = x.data.mean(axis=axes, keepdims=True)
        var = x.data.var(axis=axes, keepdims=True)
        # biased variance throughout; running stats only need to be
        # self-consistent with eval mode
        m = bn.momentum
        bn.running_mean.data[:] = (1 - m) * bn.running_mean.data + m * mu
        bn.running_var.data[:] = (1 - m) * bn.running_var.data + m * var
    else:
        mu = bn.running_mean.data
        var = bn.running_var.data
    inv = 1.0 / np.sqrt(var + bn.eps)
    xhat = (x.data - mu) * inv
    out = Tensor(bn.gamma.data * xhat + bn.beta.data)

    tape = active_tape()
    if tape is not None and (x.requires_grad or bn.gamma.requires_grad or bn.beta.requires_grad):
        need_x = x.requires_grad
        gamma = bn.gamma.data

        def backward(g):
            gg = (g * xhat).sum(axis=axes, keepdims=True)
            gb = g.sum(axis=axes, keepdims=True)
            gx = None
            if need_x:
                dxhat = g * gamma
                if training:
                    gx = inv * (dxhat - dxhat.mean(axis=axes, keepdims=True)
                                - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True))
                else:
                    gx = dxhat * inv
            return gx, gg, gb

        out.requires_grad = True
        tape.record("batch_norm", (x, bn.gamma, bn.beta), out, backward)
    return out


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0))
    tape = active_tape()
    if tape is not None and x.requires_grad:
        mask = x.data > 0

        def backward(g):
            return (g * mask,)

        out.requires_grad = True
        tape.record("relu", (x,), out, backward)
    return out


def bilinear_upsample(x: Tensor, factor: int) -> Tensor:
    """Half-pixel bilinear upsampling by an integral factor in {2, 4, 8}."""
    if factor not in (2, 4, 8):
        raise ContractError(f"upsample factor must be 2, 4 or 8, got {factor}")
    out = Tensor(kernels.upsample_fwd(x.data, factor))
    tape = active_tape()
    if tape is not None and x.requires_grad:

        def backward(g):
            return (kernels.upsample_bwd(np.ascontiguousarray(g), factor),)

        out.requires_grad = True
        tape.record("bilinear_upsample", (x,), out, backward)
    return out


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    if not xs:
        raise ContractError("concat_channels needs at least one input")
    n, _, h, w = xs[0].shape
    for t in xs:
        if (t.n, t.h, t.w) != (n, h, w):
            raise GeometryError(
                f"concat_channels inputs disagree on (n, h, w): {t.shape} vs {xs[0].shape}")
    out = Tensor(np.concatenate([t.data for t in xs], axis=1))
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in xs):
        needs = [t.requires_grad for t in xs]
        edges = np.cumsum([0] + [t.c for t in xs])

        def backward(g):
            return tuple(
                g[:, edges[i]:edges[i + 1]] if needs[i] else None for i in range(len(needs)))

        out.requires_grad = True
        tape.record("concat_channels", tuple(xs), out, backward)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise GeometryError(f"add shape mismatch: {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data)
    tape = active_tape()
    if tape is not None and (a.requires_grad or b.requires_grad):
        na, nb = a.requires_grad, b.requires_grad

        def backward(g):
            return (g if na else None, g if nb else None)

        out.requires_grad = True
        tape.record("add", (a, b), out, backward)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise GeometryError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    out = Tensor(a.data * b.data)
    tape = active_tape()
    if tape is not None and (a.requires_grad or b.requires_grad):
        na, nb = a.requires_grad, b.requires_grad
        da, db = a.data, b.data

        def backward(g):
            return (g * db if na else None, g * da if nb else None)

        out.requires_grad = True
        tape.record("mul", (a, b), out, backward)
    return out


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(np.full((1, 1, 1, 1), x.data.sum(), dtype=x.data.dtype))
    tape = active_tape()
    if tape is not None and x.requires_grad:
        shape, dt = x.shape, x.data.dtype

        def backward(g):
            return (np.full(shape, g.reshape(())[()], dtype=dt),)

        out.requires_grad = True
        tape.record("sum_all", (x,), out, backward)
    return out


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray,
                          ignore_label: int = IGNORE_LABEL) -> Tensor:
    """Mean negative log-likelihood over non-ignored pixels.

    labels is an integer (n, h, w) raster with values in [0, C) or
    ignore_label.  All pixels ignored is defined as loss 0 with zero gradient.
    """
    n, C, h, w = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise GeometryError(f"labels shape {labels.shape} does not match logits {(n, h, w)}")
    valid = labels != ignore_label
    vals = labels[valid]
    if vals.size and (vals.min() < 0 or vals.max() >= C):
        bad = vals[(vals < 0) | (vals >= C)][0]
        raise DataError(f"label value {bad} outside [0, {C})")

    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    sez = ez.sum(axis=1, keepdims=True)
    logp = (z - zmax) - np.log(sez)
    n_valid = int(valid.sum())
    if n_valid == 0:
        loss_val = 0.0
    else:
        safe = np.where(valid, labels, 0).astype(np.intp)
        picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
        loss_val = -float(picked[valid].sum()) / n_valid
    out = Tensor(np.full((1, 1, 1, 1), loss_val, dtype=z.dtype))

    tape = active_tape()
    if tape is not None and logits.requires_grad:

        def backward(g):
            if n_valid == 0:
                return (np.zeros_like(z),)
            p = ez / sez
            safe = np.where(valid, labels, 0).astype(np.intp)
            onehot = np.zeros_like(z)
            np.put_along_axis(onehot, safe[:, None], 1.0, axis=1)
            dz = (p - onehot) * valid[:, None] / n_valid
            return (dz * g.reshape(())[()],)

        out.requires_grad = True
        tape.record("softmax_cross_entropy", (logits,), out, backward)
    return out


def sgd_step(params: Sequence[Tensor], lr: float) -> None:
    """p <- p - lr * grad for each parameter, then clear the grads."""
    for p in params:
        if p.grad is not None:
            p.data -= lr * p.grad
            p.grad = None


class SGD:
    """Momentum SGD; velocity buffers are allocated on first use."""

    def __init__(self, params: Sequence[Tensor], momentum: float = 0.0):
        if not 0.0 <= momentum < 1.0:
            raise ContractError(f"momentum must be in [0, 1), got {momentum}")
        self.params = list(params)
        self.momentum = momentum
        self._vel: list = [None] * len(self.params)

    def step(self, lr: float) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            if self.momentum:
                v = self._vel[i]
                if v is None:
                    v = np.zeros_like(p.data)
                    self._vel[i] = v
                v *= self.momentum
                v += g
                g = v
            p.data -= lr * g
            p.grad = None
