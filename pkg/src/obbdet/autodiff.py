"""Dense float64 tensors with reverse-mode differentiation.

Every operation evaluates eagerly with numpy and, when any input requires
gradients, records its input tensors plus a vector-Jacobian closure on the
output node.  ``backward`` walks that recorded graph in reverse topological
order and accumulates gradients additively across fan-out, so a tensor used
twice receives the sum of both contributions.

Broadcasting is deliberately restricted: ``elementwise`` accepts equal shapes
or a second operand with a trailing singleton dimension (the per-token mask
multiply).  Everything else that needs shape juggling (bias adds, scalar
scaling) is its own operation with its own backward rule.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

Array = np.ndarray

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """A float64 array plus an optional gradient buffer of the same shape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Array | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[Array], tuple[Array | None, ...]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # Arithmetic sugar; Tensor-Tensor routes through `elementwise`,
    # python scalars through the *_const ops.
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_const(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_const(self, -float(other))

    def __rsub__(self, other):
        return add_const(mul_const(self, -1.0), float(other))

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else mul_const(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return mul(self, reciprocal(other))
        return mul_const(self, 1.0 / float(other))

    def __neg__(self):
        return mul_const(self, -1.0)


_grad_enabled = True


class no_grad:
    """Context manager that pauses tape recording (inference passes)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _make(data: Array, parents: Sequence[Tensor], vjp) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def constant(values) -> Tensor:
    return Tensor(values)


def parameter(values) -> Tensor:
    return Tensor(values, requires_grad=True)


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    """Seeded uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) parameter."""
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# backward engine


def backward(loss: Tensor) -> None:
    """Populate .grad on every requires_grad tensor reachable from `loss`.

    Repeated calls without zeroing accumulate additively.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    flows: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = flows.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._vjp is None:
            continue
        for p, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not p.requires_grad:
                continue
            k = id(p)
            flows[k] = flows[k] + pg if k in flows else pg


# ---------------------------------------------------------------------------
# core binary / shape ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.data.shape} x {b.data.shape}")

    def vjp(g: Array):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _make(a.data @ b.data, (a, b), vjp)


def elementwise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    """Pointwise add/sub/mul; b may carry a trailing singleton dim to broadcast."""
    if kind not in ("add", "sub", "mul"):
        raise ValueError(f"unknown elementwise kind: {kind!r}")
    bcast = a.data.ndim >= 1 and b.data.shape == a.data.shape[:-1] + (1,)
    if b.data.shape != a.data.shape and not bcast:
        raise ValueError(f"elementwise shapes incompatible: {a.data.shape} vs {b.data.shape}")

    if kind == "add":
        data = a.data + b.data
    elif kind == "sub":
        data = a.data - b.data
    else:
        data = a.data * b.data

    def vjp(g: Array):
        if kind == "mul":
            ga = g * b.data if a.requires_grad else None
            gb = g * a.data if b.requires_grad else None
        else:
            ga = g if a.requires_grad else None
            gb = (g if kind == "add" else -g) if b.requires_grad else None
        if gb is not None and bcast:
            gb = gb.sum(axis=-1, keepdims=True)
        return ga, gb

    return _make(data, (a, b), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    return elementwise(a, b, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    return elementwise(a, b, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    return elementwise(a, b, "mul")


def add_const(x: Tensor, c: float) -> Tensor:
    return _make(x.data + c, (x,), lambda g: (g,))


def mul_const(x: Tensor, c: float) -> Tensor:
    return _make(x.data * c, (x,), lambda g: (g * c,))


def add_scalar(x: Tensor, s: Tensor) -> Tensor:
    """x + s with s a single-element tensor broadcast over all of x."""
    if s.data.size != 1:
        raise ValueError(f"add_scalar needs a scalar second operand, got shape {s.data.shape}")
    sval = float(s.data.reshape(()))

    def vjp(g: Array):
        gx = g if x.requires_grad else None
        gs = np.asarray(g.sum()).reshape(s.data.shape) if s.requires_grad else None
        return gx, gs

    return _make(x.data + sval, (x, s), vjp)


def mul_scalar(x: Tensor, s: Tensor) -> Tensor:
    """x * s with s a single-element tensor broadcast over all of x."""
    if s.data.size != 1:
        raise ValueError(f"mul_scalar needs a scalar second operand, got shape {s.data.shape}")
    sval = float(s.data.reshape(()))

    def vjp(g: Array):
        gx = g * sval if x.requires_grad else None
        gs = np.asarray((g * x.data).sum()).reshape(s.data.shape) if s.requires_grad else None
        return gx, gs

    return _make(x.data * sval, (x, s), vjp)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.data.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ValueError(f"transpose expects a matrix, got shape {x.data.shape}")
    return _make(x.data.T.copy(), (x,), lambda g: (g.T,))


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inverse),))


def slice_cols(x: Tensor, lo: int, hi: int) -> Tensor:
    if x.data.ndim != 2:
        raise ValueError(f"slice_cols expects a matrix, got shape {x.data.shape}")

    def vjp(g: Array):
        gx = np.zeros_like(x.data)
        gx[:, lo:hi] = g
        return (gx,)

    return _make(x.data[:, lo:hi].copy(), (x,), vjp)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ValueError("concat_cols needs at least one part")
    widths = [p.data.shape[1] for p in parts]
    offsets = np.cumsum([0] + widths)

    def vjp(g: Array):
        return tuple(g[:, offsets[i]:offsets[i + 1]] for i in range(len(parts)))

    return _make(np.concatenate([p.data for p in parts], axis=1), tuple(parts), vjp)


def take(x: Tensor, index: int) -> Tensor:
    """Select along the first axis: a scalar from a vector, a row from a matrix."""
    idx = int(index)
    if not 0 <= idx < x.data.shape[0]:
        raise ValueError(f"take index {idx} out of range for axis of size {x.data.shape[0]}")

    def vjp(g: Array):
        gx = np.zeros_like(x.data)
        gx[idx] = g
        return (gx,)

    return _make(np.array(x.data[idx]), (x,), vjp)


def stack0(parts: Sequence[Tensor]) -> Tensor:
    """Stack same-shape tensors along a new leading axis."""
    if not parts:
        raise ValueError("stack0 needs at least one part")

    def vjp(g: Array):
        return tuple(g[i] for i in range(len(parts)))

    return _make(np.stack([p.data for p in parts]), tuple(parts), vjp)


def add_broadcast0(x: Tensor, b: Tensor) -> Tensor:
    """x + b with b broadcast over x's leading axis (position embeddings)."""
    if b.data.shape != x.data.shape[1:]:
        raise ValueError(f"cannot broadcast {b.data.shape} over leading axis of {x.data.shape}")

    def vjp(g: Array):
        gx = g if x.requires_grad else None
        gb = g.sum(axis=0) if b.requires_grad else None
        return gx, gb

    return _make(x.data + b.data, (x, b), vjp)


def sum_all(x: Tensor) -> Tensor:
    shape = x.data.shape
    return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),))


# ---------------------------------------------------------------------------
# unary nonlinearities


def _unary(x: Tensor, data: Array, dfun: Callable[[Array], Array]) -> Tensor:
    return _make(data, (x,), lambda g: (dfun(g),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _unary(x, out, lambda g: g * out)


def sin(x: Tensor) -> Tensor:
    return _unary(x, np.sin(x.data), lambda g: g * np.cos(x.data))


def cos(x: Tensor) -> Tensor:
    return _unary(x, np.cos(x.data), lambda g: -g * np.sin(x.data))


def sigmoid(x: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-x.data))
    return _unary(x, out, lambda g: g * out * (1.0 - out))


def absolute(x: Tensor) -> Tensor:
    return _unary(x, np.abs(x.data), lambda g: g * np.sign(x.data))


def reciprocal(x: Tensor) -> Tensor:
    out = 1.0 / x.data
    return _unary(x, out, lambda g: -g * out * out)


def gelu(x: Tensor) -> Tensor:
    """Exact erf-form GELU."""
    phi = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = x.data * phi

    def vjp(g: Array):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT_2PI
        return (g * (phi + x.data * pdf),)

    return _make(out, (x,), vjp)


def softmax_lastdim(x: Tensor) -> Tensor:
    """Shift-stable softmax over the last dimension."""
    if x.data.ndim < 1:
        raise ValueError("softmax_lastdim needs at least one dimension")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def vjp(g: Array):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make(s, (x,), vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each trailing feature vector to zero mean / unit variance, then affine."""
    if eps <= 0.0:
        raise ValueError("layer_norm eps must be positive")
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ValueError(f"layer_norm affine shapes {gain.data.shape}/{bias.data.shape} do not match width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def vjp(g: Array):
        dxhat = g * gain.data
        gx = None
        if x.requires_grad:
            gx = inv * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        ggain = (g * xhat).reshape(-1, d).sum(axis=0) if gain.requires_grad else None
        gbias = g.reshape(-1, d).sum(axis=0) if bias.requires_grad else None
        return gx, ggain, gbias

    return _make(out, (x, gain, bias), vjp)


# ---------------------------------------------------------------------------
# layers


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b for x of shape (..., in) with up to one batch axis; w is (in, out), b is (out,)."""
    if x.data.ndim not in (1, 2, 3) or w.data.ndim != 2 or x.data.shape[-1] != w.data.shape[0]:
        raise ValueError(f"linear shape mismatch: x {x.data.shape}, w {w.data.shape}")
    if b.data.shape != (w.data.shape[1],):
        raise ValueError(f"linear bias shape {b.data.shape} does not match output width {w.data.shape[1]}")
    data = x.data @ w.data + b.data

    def vjp(g: Array):
        gx = g @ w.data.T if x.requires_grad else None
        if not w.requires_grad:
            gw = None
        elif x.data.ndim == 1:
            gw = np.outer(x.data, g)
        else:
            n_in = x.data.shape[-1]
            gw = x.data.reshape(-1, n_in).T @ g.reshape(-1, g.shape[-1])
        if not b.requires_grad:
            gb = None
        elif g.ndim == 1:
            gb = g
        else:
            gb = g.reshape(-1, g.shape[-1]).sum(axis=0)
        return gx, gw, gb

    return _make(data, (x, w, b), vjp)


def conv2d_3x3(x: Tensor, kernels: Tensor, bias: Tensor) -> Tensor:
    """3x3 convolution with padding 1 and stride 1; spatial size is preserved.

    x is (C, H, W) or batched (B, C, H, W); kernels (O, C, 3, 3), bias (O,).
    Implemented as one GEMM over gathered 3x3 patches.
    """
    if x.data.ndim not in (3, 4) or kernels.data.ndim != 4 or kernels.data.shape[2:] != (3, 3):
        raise ValueError(f"conv2d_3x3 shape mismatch: x {x.data.shape}, kernels {kernels.data.shape}")
    batched = x.data.ndim == 4
    x4 = x.data if batched else x.data[None]
    nb, c, h, w = x4.shape
    o = kernels.data.shape[0]
    if kernels.data.shape[1] != c or bias.data.shape != (o,):
        raise ValueError(f"conv2d_3x3 channel mismatch: x {x.data.shape}, kernels {kernels.data.shape}, bias {bias.data.shape}")

    xp = np.zeros((nb, c, h + 2, w + 2))
    xp[:, :, 1:-1, 1:-1] = x4
    patches = np.empty((nb, c, 3, 3, h, w))
    for di in range(3):
        for dj in range(3):
            patches[:, :, di, dj] = xp[:, :, di:di + h, dj:dj + w]
    flat = patches.reshape(nb, c * 9, h * w)
    kflat = kernels.data.reshape(o, c * 9)
    data = (kflat @ flat).reshape(nb, o, h, w) + bias.data[:, None, None]
    if not batched:
        data = data[0]

    def vjp(g: Array):
        gf = g.reshape(nb, o, h * w)
        gk = None
        if kernels.requires_grad:
            gk = (gf @ flat.transpose(0, 2, 1)).sum(axis=0).reshape(o, c, 3, 3)
        gb = g.reshape(nb, o, h * w).sum(axis=(0, 2)) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gpatch = (kflat.T @ gf).reshape(nb, c, 3, 3, h, w)
            gxp = np.zeros((nb, c, h + 2, w + 2))
            for di in range(3):
                for dj in range(3):
                    gxp[:, :, di:di + h, dj:dj + w] += gpatch[:, :, di, dj]
            gx = gxp[:, :, 1:-1, 1:-1]
            gx = gx.copy() if batched else gx[0].copy()
        return gx, gk, gb

    return _make(data, (x, kernels, bias), vjp)


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean: (C, H, W) -> (C,), or batched (B, C, H, W) -> (B, C)."""
    if x.data.ndim not in (3, 4):
        raise ValueError(f"global_avg_pool expects (C, H, W) or (B, C, H, W), got {x.data.shape}")
    h, w = x.data.shape[-2:]
    scale = 1.0 / (h * w)

    def vjp(g: Array):
        return (np.broadcast_to(g[..., None, None] * scale, x.data.shape).copy(),)

    return _make(x.data.mean(axis=(-2, -1)), (x,), vjp)


# ---------------------------------------------------------------------------
# losses


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    """Softmax cross-entropy of a single logit vector against an integer label."""
    if logits.data.ndim != 1:
        raise ValueError(f"cross_entropy expects a logit vector, got shape {logits.data.shape}")
    n = logits.data.shape[0]
    if not 0 <= label < n:
        raise ValueError(f"class label {label} out of range for {n} logits")
    z = logits.data - logits.data.max()
    lse = math.log(np.exp(z).sum())
    loss = lse - z[label]

    def vjp(g: Array):
        p = np.exp(z - lse)
        p[label] -= 1.0
        return (float(g) * p,)

    return _make(np.asarray(loss), (logits,), vjp)


def smooth_l1(pred: Tensor, target, beta: float = 1.0) -> Tensor:
    """Mean Huber-style loss; quadratic within `beta` of the target, linear outside."""
    if beta <= 0.0:
        raise ValueError("smooth_l1 beta must be positive")
    tgt = target if isinstance(target, Tensor) else Tensor(target)
    if tgt.data.shape != pred.data.shape:
        raise ValueError(f"smooth_l1 shape mismatch: {pred.data.shape} vs {tgt.data.shape}")
    d = pred.data - tgt.data
    ad = np.abs(d)
    q = np.where(ad < beta, 0.5 * d * d / beta, ad - 0.5 * beta)
    size = max(d.size, 1)

    def vjp(g: Array):
        base = np.where(ad < beta, d / beta, np.sign(d)) * (float(g) / size)
        gp = base if pred.requires_grad else None
        gt = -base if tgt.requires_grad else None
        return gp, gt

    return _make(np.asarray(q.mean()), (pred, tgt), vjp)


def straight_through(hard, soft: Tensor) -> Tensor:
    """Forward the constant `hard` values; route gradients to `soft` unchanged.

    Used for binary activation masks: the emitted values stay exactly 0/1
    while the backward pass sees a smooth surrogate.
    """
    hard = np.asarray(hard, dtype=np.float64)
    if hard.shape != soft.data.shape:
        raise ValueError(f"straight_through shape mismatch: {hard.shape} vs {soft.data.shape}")
    return _make(hard.copy(), (soft,), lambda g: (g,))
