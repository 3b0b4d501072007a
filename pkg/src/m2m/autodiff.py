"""Reverse-mode automatic differentiation engine, Adam, and a gradient checker.

Tensors wrap numpy arrays and record the closures needed to backpropagate
through exactly the operators the restoration pipeline uses. Graphs run in
float32 for training or float64 for finite-difference verification; the dtype
follows the tensors a graph is built from.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateLossError, ShapeError


class Tensor:
    """Node of the computation graph: value, optional gradient accumulator.

    Gradient accumulation across fan-out is additive; backward() visits nodes
    in reverse topological order exactly once.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self):
        self.grad = None

    def accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        """Backpropagate from a scalar output through the recorded graph."""
        if self.data.size != 1:
            raise ShapeError("backward() requires a scalar tensor")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward
    return out


def conv3x3(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """3x3 cross-correlation, stride 1, zero padding 1; spatial size preserved.

    x is (B, Cin, H, W), w is (Cout, Cin, 3, 3), b is (Cout,) or None (layers
    feeding a batch norm carry no bias since the mean subtraction cancels it).
    Implemented as a direct convolution looping over the nine taps with the
    contraction over channels vectorized per tap.
    """
    if x.data.ndim != 4 or w.data.ndim != 4 or w.shape[2:] != (3, 3):
        raise ShapeError(f"conv3x3 got x{x.shape}, w{w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"channel mismatch: x has {x.shape[1]}, w expects {w.shape[1]}")
    bsz, _, h, wd = x.shape
    cout = w.shape[0]
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"bias shape {b.shape} does not match {cout} output channels")
    xpad = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    acc = np.zeros((cout, bsz, h, wd), dtype=x.dtype)
    for dy in range(3):
        for dx in range(3):
            # (Cout, Cin) x (B, Cin, H, W) -> (Cout, B, H, W)
            acc += np.tensordot(
                w.data[:, :, dy, dx], xpad[:, :, dy : dy + h, dx : dx + wd], axes=([1], [1])
            )
    out_data = acc.transpose(1, 0, 2, 3)
    if b is not None:
        out_data = out_data + b.data[None, :, None, None]

    def backward(g):
        if x.requires_grad:
            gxpad = np.zeros_like(xpad)
            for dy in range(3):
                for dx in range(3):
                    gxpad[:, :, dy : dy + h, dx : dx + wd] += np.tensordot(
                        g, w.data[:, :, dy, dx], axes=([1], [0])
                    ).transpose(0, 3, 1, 2)
            x.accumulate(gxpad[:, :, 1:-1, 1:-1])
        if w.requires_grad:
            gw = np.empty_like(w.data)
            for dy in range(3):
                for dx in range(3):
                    gw[:, :, dy, dx] = np.tensordot(
                        g, xpad[:, :, dy : dy + h, dx : dx + wd], axes=([0, 2, 3], [0, 2, 3])
                    )
            w.accumulate(gw)
        if b is not None and b.requires_grad:
            b.accumulate(g.sum(axis=(0, 2, 3)))

    parents = (x, w) if b is None else (x, w, b)
    return _node(out_data, parents, backward)


@dataclass
class BNState:
    """Running statistics of one normalization layer; mutated in train mode."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5

    @staticmethod
    def create(channels: int, dtype=np.float32) -> "BNState":
        return BNState(
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
        )

    def copy(self) -> "BNState":
        return BNState(self.running_mean.copy(), self.running_var.copy(), self.momentum, self.eps)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BNState, mode: str) -> Tensor:
    """Per-channel normalization over batch and spatial dims, then affine.

    mode='train' normalizes by batch statistics and updates the running ones;
    mode='eval' normalizes by the running statistics.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if x.data.ndim != 4 or x.shape[0] * x.shape[2] * x.shape[3] == 0:
        raise ShapeError(f"batch_norm needs a non-empty (B, C, H, W) input, got {x.shape}")
    eps = state.eps
    xd = x.data
    if mode == "train":
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        m = state.momentum
        state.running_mean = ((1 - m) * state.running_mean + m * mean).astype(xd.dtype)
        state.running_var = ((1 - m) * state.running_var + m * var).astype(xd.dtype)
    else:
        mean = state.running_mean.astype(xd.dtype)
        var = state.running_var.astype(xd.dtype)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out_data = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def backward(g):
        if gamma.requires_grad:
            gamma.accumulate((g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            beta.accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gxhat = g * gamma.data[None, :, None, None]
            if mode == "eval":
                x.accumulate(gxhat * inv_std[None, :, None, None])
            else:
                n = xd.shape[0] * xd.shape[2] * xd.shape[3]
                sum_g = gxhat.sum(axis=(0, 2, 3))
                sum_gx = (gxhat * xhat).sum(axis=(0, 2, 3))
                gx = (
                    gxhat
                    - (sum_g / n)[None, :, None, None]
                    - xhat * (sum_gx / n)[None, :, None, None]
                ) * inv_std[None, :, None, None]
                x.accumulate(gx)

    return _node(out_data, (x, gamma, beta), backward)


def relu(x: Tensor) -> Tensor:
    out_data = np.maximum(x.data, 0)

    def backward(g):
        if x.requires_grad:
            x.accumulate(g * (x.data > 0))

    return _node(out_data, (x,), backward)


def add(x: Tensor, y: Tensor) -> Tensor:
    if x.shape != y.shape:
        raise ShapeError(f"add shape mismatch: {x.shape} vs {y.shape}")

    def backward(g):
        if x.requires_grad:
            x.accumulate(g)
        if y.requires_grad:
            y.accumulate(g)

    return _node(x.data + y.data, (x, y), backward)


def sub(x: Tensor, y: Tensor) -> Tensor:
    if x.shape != y.shape:
        raise ShapeError(f"sub shape mismatch: {x.shape} vs {y.shape}")

    def backward(g):
        if x.requires_grad:
            x.accumulate(g)
        if y.requires_grad:
            y.accumulate(-g)

    return _node(x.data - y.data, (x, y), backward)


def depth_to_space(x: Tensor, factor: int = 2) -> Tensor:
    """Rearrange (B, C*f^2, H, W) into (B, C, f*H, f*W); inverse of space_to_depth."""
    bsz, ch, h, w = x.shape
    f = factor
    if ch % (f * f):
        raise ShapeError(f"channels {ch} not divisible by {f}^2")
    cout = ch // (f * f)
    out_data = (
        x.data.reshape(bsz, cout, f, f, h, w)
        .transpose(0, 1, 4, 2, 5, 3)
        .reshape(bsz, cout, h * f, w * f)
    )

    def backward(g):
        if x.requires_grad:
            x.accumulate(
                g.reshape(bsz, cout, h, f, w, f)
                .transpose(0, 1, 3, 5, 2, 4)
                .reshape(bsz, ch, h, w)
            )

    return _node(out_data, (x,), backward)


def space_to_depth(x: Tensor, factor: int = 2) -> Tensor:
    """Rearrange (B, C, f*H, f*W) into (B, C*f^2, H, W)."""
    bsz, ch, h, w = x.shape
    f = factor
    if h % f or w % f:
        raise ShapeError(f"spatial dims {h}x{w} not divisible by {f}")
    hh, ww = h // f, w // f
    out_data = (
        x.data.reshape(bsz, ch, hh, f, ww, f)
        .transpose(0, 1, 3, 5, 2, 4)
        .reshape(bsz, ch * f * f, hh, ww)
    )

    def backward(g):
        if x.requires_grad:
            x.accumulate(
                g.reshape(bsz, ch, f, f, hh, ww)
                .transpose(0, 1, 4, 2, 5, 3)
                .reshape(bsz, ch, h, w)
            )

    return _node(out_data, (x,), backward)


def tensor_sum(x: Tensor) -> Tensor:
    """Sum of all elements; mostly a test helper for scalar-valued graphs."""

    def backward(g):
        if x.requires_grad:
            x.accumulate(np.full_like(x.data, float(g)))

    return _node(np.asarray(x.data.sum(), dtype=x.dtype), (x,), backward)


def masked_loss(pred: Tensor, target: Tensor, mask: Tensor, p: int) -> Tensor:
    """Mean of |pred - target|^p over the samples where mask is 1.

    The subgradient convention sign(0) = 0 applies for p = 1. Raises when the
    mask selects nothing.
    """
    if p not in (1, 2):
        raise ValueError(f"p must be 1 or 2, got {p}")
    if pred.shape != target.shape or pred.shape != mask.shape:
        raise ShapeError(
            f"masked_loss shapes differ: {pred.shape}, {target.shape}, {mask.shape}"
        )
    count = mask.data.sum()
    if count == 0:
        raise DegenerateLossError("mask selects no samples")
    diff = (pred.data - target.data) * mask.data
    if p == 1:
        out_data = np.abs(diff).sum() / count
    else:
        out_data = (diff * diff).sum() / count

    def backward(g):
        if p == 1:
            gp = np.sign(diff) * mask.data * (g / count)
        else:
            gp = 2.0 * diff * mask.data * (g / count)
        if pred.requires_grad:
            pred.accumulate(gp.astype(pred.dtype))
        if target.requires_grad:
            target.accumulate(-gp.astype(target.dtype))

    return _node(np.asarray(out_data, dtype=pred.dtype), (pred, target, mask), backward)


@dataclass
class AdamState:
    """Adam moment accumulators, keyed by parameter name."""

    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], state: AdamState) -> None:
    """One Adam update with bias correction, in place; missing grads count as 0."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        state.m[name] = b1 * state.m[name] + (1 - b1) * g
        state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        mhat = state.m[name] / (1 - b1**t)
        vhat = state.v[name] / (1 - b2**t)
        p.data -= (state.learning_rate * mhat / (np.sqrt(vhat) + state.eps)).astype(p.dtype)


def grad_check(f, inputs: list[Tensor], h: float = 1e-5) -> float:
    """Compare analytic gradients of a scalar-valued graph to central differences.

    f must rebuild its graph from `inputs` on every call. Returns the max over
    all coordinates of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    Inputs must be float64; finite differences are meaningless in float32.
    """
    for inp in inputs:
        if inp.dtype != np.float64:
            raise ValueError("grad_check requires float64 inputs")
        inp.zero_grad()
    out = f(inputs)
    if out.data.size != 1:
        raise ShapeError("grad_check requires a scalar-valued function")
    out.backward()
    analytic = [
        inp.grad.copy() if inp.grad is not None else np.zeros_like(inp.data)
        for inp in inputs
    ]

    worst = 0.0
    for inp, ana in zip(inputs, analytic):
        if not inp.requires_grad:
            continue
        flat = inp.data.ravel()
        ana_flat = ana.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(f(inputs).data)
            flat[i] = orig - h
            down = float(f(inputs).data)
            flat[i] = orig
            numeric = (up - down) / (2 * h)
            denom = max(abs(ana_flat[i]), abs(numeric), 1e-8)
            worst = max(worst, abs(ana_flat[i] - numeric) / denom)
    return worst
