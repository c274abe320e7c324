"""Multi-head self-attention with activation-mask modulation, plus the
pre-norm transformer block around it.

The mask enters as a per-token scale on the projected tensors selected by
``MaskTargets`` (default: values only), so the attention distribution itself
stays a plain softmax; an all-ones mask reduces bit-for-bit to unmasked
attention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class MaskTargets:
    """Which projections get row-scaled by the activation mask."""

    q: bool = False
    k: bool = False
    v: bool = True

    @classmethod
    def none(cls) -> "MaskTargets":
        return cls(q=False, k=False, v=False)

    @classmethod
    def from_string(cls, text: str) -> "MaskTargets":
        """Parse a subset string like "v", "qk", "qkv" (empty = no masking)."""
        letters = set(text.strip().lower())
        if not letters <= {"q", "k", "v"}:
            raise ValueError(f"mask targets must be drawn from q/k/v, got {text!r}")
        return cls(q="q" in letters, k="k" in letters, v="v" in letters)

    def __str__(self) -> str:
        return "".join(c for c, on in zip("qkv", (self.q, self.k, self.v)) if on)


@dataclass
class AttentionParams:
    """Projection weights for one multi-head self-attention layer."""

    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    heads: int

    @property
    def d_model(self) -> int:
        return self.wq.shape[0]

    @classmethod
    def init(cls, rng: np.random.Generator, d_model: int, heads: int) -> "AttentionParams":
        if d_model % heads != 0:
            raise ValueError(f"d_model {d_model} not divisible by {heads} heads")

        def proj():
            return (ad.uniform_init(rng, (d_model, d_model), d_model),
                    ad.uniform_init(rng, (d_model,), d_model))

        wq, bq = proj()
        wk, bk = proj()
        wv, bv = proj()
        wo, bo = proj()
        return cls(wq, bq, wk, bk, wv, bv, wo, bo, heads)

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {
            f"{prefix}.wq": self.wq, f"{prefix}.bq": self.bq,
            f"{prefix}.wk": self.wk, f"{prefix}.bk": self.bk,
            f"{prefix}.wv": self.wv, f"{prefix}.bv": self.bv,
            f"{prefix}.wo": self.wo, f"{prefix}.bo": self.bo,
        }


@dataclass
class BlockParams:
    """One pre-norm transformer block: attention + 4x-expansion MLP."""

    attn: AttentionParams
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    mlp_w1: Tensor
    mlp_b1: Tensor
    mlp_w2: Tensor
    mlp_b2: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, d_model: int, heads: int,
             mlp_ratio: int = 4) -> "BlockParams":
        hidden = mlp_ratio * d_model
        return cls(
            attn=AttentionParams.init(rng, d_model, heads),
            ln1_gain=ad.parameter(np.ones(d_model)),
            ln1_bias=ad.parameter(np.zeros(d_model)),
            ln2_gain=ad.parameter(np.ones(d_model)),
            ln2_bias=ad.parameter(np.zeros(d_model)),
            mlp_w1=ad.uniform_init(rng, (d_model, hidden), d_model),
            mlp_b1=ad.uniform_init(rng, (hidden,), d_model),
            mlp_w2=ad.uniform_init(rng, (hidden, d_model), hidden),
            mlp_b2=ad.uniform_init(rng, (d_model,), hidden),
        )

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = self.attn.named(f"{prefix}.attn")
        out.update({
            f"{prefix}.ln1.gain": self.ln1_gain, f"{prefix}.ln1.bias": self.ln1_bias,
            f"{prefix}.ln2.gain": self.ln2_gain, f"{prefix}.ln2.bias": self.ln2_bias,
            f"{prefix}.mlp.w1": self.mlp_w1, f"{prefix}.mlp.b1": self.mlp_b1,
            f"{prefix}.mlp.w2": self.mlp_w2, f"{prefix}.mlp.b2": self.mlp_b2,
        })
        return out


def _mask_column(am, token_shape: tuple[int, ...]) -> Tensor:
    """Coerce a mask (tensor or array) to token_shape[:-1] + (1,)."""
    if not isinstance(am, Tensor):
        am = Tensor(am)
    col_shape = token_shape[:-1] + (1,)
    n = int(np.prod(col_shape))
    if am.data.size != n:
        raise ValueError(f"mask has {am.data.size} cells but there are {n} tokens")
    return ad.reshape(am, col_shape)


def _mha(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    """All heads of softmax(Q Kᵀ / sqrt(d)) V in one tape node.

    Accepts (n, d_model) or batched (B, n, d_model) inputs; attention always
    runs within a sample.  Numerically equivalent to slicing heads out and
    running them one by one (the `return_probs` path in `tbam` does exactly
    that); fused here with stacked matmuls because attention sits on the
    training hot path.
    """
    batched = q.data.ndim == 3
    q3 = q.data if batched else q.data[None]
    nb, n, dm = q3.shape
    dh = dm // heads
    scale = 1.0 / math.sqrt(dh)

    def split(t: np.ndarray) -> np.ndarray:
        return np.ascontiguousarray(t.reshape(nb, n, heads, dh).transpose(0, 2, 1, 3))

    def merge(t: np.ndarray) -> np.ndarray:
        flat = t.transpose(0, 2, 1, 3).reshape(nb, n, dm)
        return flat if batched else flat[0]

    qh, kh, vh = split(q3), split(k.data.reshape(q3.shape)), split(v.data.reshape(q3.shape))
    a = qh @ kh.transpose(0, 1, 3, 2) * scale
    a -= a.max(axis=-1, keepdims=True)
    np.exp(a, out=a)
    a /= a.sum(axis=-1, keepdims=True)
    out = merge(a @ vh)

    def vjp(g: Array):
        go = split(g.reshape(q3.shape))
        gv = merge(a.transpose(0, 1, 3, 2) @ go) if v.requires_grad else None
        gq = gk = None
        if q.requires_grad or k.requires_grad:
            gp = go @ vh.transpose(0, 1, 3, 2)
            ga = a * (gp - (gp * a).sum(axis=-1, keepdims=True))
            ga *= scale
            if q.requires_grad:
                gq = merge(ga @ kh)
            if k.requires_grad:
                gk = merge(ga.transpose(0, 1, 3, 2) @ qh)
        return gq, gk, gv

    return ad._make(out, (q, k, v), vjp)


def tbam(tokens: Tensor, am, params: AttentionParams, targets: MaskTargets,
         return_probs: bool = False):
    """Mask-modulated multi-head self-attention (pre-residual output).

    Each projection flagged in `targets` is row-scaled by the mask before the
    usual softmax(Q Kᵀ / sqrt(d)) V aggregation; heads are concatenated and
    output-projected.
    """
    d_model = tokens.shape[-1]
    col = _mask_column(am, tokens.shape)
    q = ad.linear(tokens, params.wq, params.bq)
    k = ad.linear(tokens, params.wk, params.bk)
    v = ad.linear(tokens, params.wv, params.bv)
    if targets.q:
        q = ad.mul(q, col)
    if targets.k:
        k = ad.mul(k, col)
    if targets.v:
        v = ad.mul(v, col)

    if not return_probs:
        return ad.linear(_mha(q, k, v, params.heads), params.wo, params.bo)

    # per-head composed route, exposing the attention distributions
    if tokens.data.ndim != 2:
        raise ValueError("return_probs path handles a single token matrix, not a batch")
    dh = d_model // params.heads
    scale = 1.0 / math.sqrt(dh)
    outs = []
    probs = []
    for h in range(params.heads):
        lo, hi = h * dh, (h + 1) * dh
        qh = ad.slice_cols(q, lo, hi)
        kh = ad.slice_cols(k, lo, hi)
        vh = ad.slice_cols(v, lo, hi)
        attn = ad.softmax_lastdim(ad.mul_const(ad.matmul(qh, ad.transpose(kh)), scale))
        probs.append(attn)
        outs.append(ad.matmul(attn, vh))
    out = ad.linear(ad.concat_cols(outs), params.wo, params.bo)
    return out, probs


def transformer_block(tokens: Tensor, am, params: BlockParams,
                      targets: MaskTargets) -> Tensor:
    """x + attention(norm(x)), then + MLP(norm(.)); shape-preserving."""
    normed = ad.layer_norm(tokens, params.ln1_gain, params.ln1_bias)
    x = ad.add(tokens, tbam(normed, am, params.attn, targets))
    normed2 = ad.layer_norm(x, params.ln2_gain, params.ln2_bias)
    hidden = ad.gelu(ad.linear(normed2, params.mlp_w1, params.mlp_b1))
    return ad.add(x, ad.linear(hidden, params.mlp_w2, params.mlp_b2))
