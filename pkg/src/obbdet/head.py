"""Decoupled oriented-box prediction head.

Four masked-attention blocks process the RoI tokens.  In decoupled mode the
branch after block k (k = 1..3) predicts one group of regression components
-- center shift, angle, or log-size, in a configurable order -- and the delta
accumulated so far is rasterized into a binary activation mask for the next
block.  Class logits always come from the block-4 tokens.  In coupled mode a
single branch at one chosen block predicts all five components at once.

The rasterized masks stay exactly binary in the forward pass.  Their backward
contribution is routed through a smooth sigmoid surrogate of the same
cell-containment test (a straight-through estimator), which is what lets
losses computed after stage k reach the stage-k branch parameters when
masking is enabled.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .attention import BlockParams, MaskTargets, transformer_block
from .autodiff import Tensor
from .geometry import (
    BoxDelta,
    HorizontalBox,
    OrientedBox,
    affine_from_delta,
    decode_delta,
    grid_centers,
    rasterize_mask,
)

STAGE_KINDS = ("xy", "alpha", "wh")
KIND_SLOTS = {"xy": ("dx", "dy"), "alpha": ("dalpha",), "wh": ("dw", "dh")}
DELTA_SLOTS = ("dx", "dy", "dw", "dh", "dalpha")
NUM_BLOCKS = 4
PATCH_DIM = 16  # 4x4 pixel patches from RoI extraction


@dataclass
class HeadConfig:
    """The ablation surface: stage order, per-branch conv depth, mask wiring."""

    decoupling_order: tuple[str, ...] = ("xy", "alpha", "wh")
    conv_counts: tuple[int, int, int] = (3, 2, 1)  # keyed (xy, alpha, wh)
    class_convs: int = 0
    grid: int = 7
    d_model: int = 64
    heads: int = 4
    num_classes: int = 3  # foreground classes; a background logit is appended
    mask_targets: MaskTargets = field(default_factory=MaskTargets)
    cam_enabled: bool = True
    coupled_stage: int | None = None
    surrogate_steepness: float = 8.0

    def __post_init__(self):
        self.decoupling_order = tuple(self.decoupling_order)
        self.conv_counts = tuple(int(c) for c in self.conv_counts)
        if sorted(self.decoupling_order) != sorted(STAGE_KINDS):
            raise ValueError(
                f"decoupling_order must be a permutation of {STAGE_KINDS}, got {self.decoupling_order}")
        if len(self.conv_counts) != 3 or any(c < 0 for c in self.conv_counts):
            raise ValueError(f"conv_counts must be three nonnegative ints, got {self.conv_counts}")
        if self.class_convs < 0:
            raise ValueError(f"class_convs must be nonnegative, got {self.class_convs}")
        if self.grid < 1:
            raise ValueError(f"grid must be at least 1, got {self.grid}")
        if self.d_model % self.heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by {self.heads} heads")
        if self.num_classes < 1:
            raise ValueError(f"need at least one foreground class, got {self.num_classes}")
        if self.coupled_stage is not None and not 1 <= self.coupled_stage <= NUM_BLOCKS:
            raise ValueError(f"coupled_stage must be in 1..{NUM_BLOCKS}, got {self.coupled_stage}")
        if self.surrogate_steepness <= 0:
            raise ValueError("surrogate_steepness must be positive")

    @property
    def n_tokens(self) -> int:
        return self.grid * self.grid

    def conv_count_for(self, kind: str) -> int:
        return self.conv_counts[STAGE_KINDS.index(kind)]

    def to_dict(self) -> dict:
        """Plain-JSON form, the inverse of `HeadConfig.from_dict`."""
        return {
            "decoupling_order": list(self.decoupling_order),
            "conv_counts": list(self.conv_counts),
            "class_convs": self.class_convs,
            "grid": self.grid,
            "d_model": self.d_model,
            "heads": self.heads,
            "num_classes": self.num_classes,
            "mask_targets": str(self.mask_targets),
            "cam_enabled": self.cam_enabled,
            "coupled_stage": self.coupled_stage,
            "surrogate_steepness": self.surrogate_steepness,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HeadConfig":
        kw = dict(d)
        if "mask_targets" in kw:
            kw["mask_targets"] = MaskTargets.from_string(kw["mask_targets"])
        return cls(**kw)


@dataclass
class BranchParams:
    """Conv stack over the 7x7 token map, pooled, then one affine map."""

    convs: list[tuple[Tensor, Tensor]]
    fc_w: Tensor
    fc_b: Tensor

    @classmethod
    def init(cls, rng: np.random.Generator, d_model: int, n_convs: int,
             n_out: int) -> "BranchParams":
        fan = d_model * 9
        convs = [(ad.uniform_init(rng, (d_model, d_model, 3, 3), fan),
                  ad.uniform_init(rng, (d_model,), fan))
                 for _ in range(n_convs)]
        # final affine starts at zero: the initial delta is the identity and
        # the first masks are all-ones
        return cls(convs,
                   ad.parameter(np.zeros((d_model, n_out))),
                   ad.parameter(np.zeros(n_out)))

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        for i, (k, b) in enumerate(self.convs):
            out[f"{prefix}.conv{i}.k"] = k
            out[f"{prefix}.conv{i}.b"] = b
        out[f"{prefix}.fc.w"] = self.fc_w
        out[f"{prefix}.fc.b"] = self.fc_b
        return out


@dataclass
class HeadParams:
    embed_w: Tensor
    embed_b: Tensor
    pos: Tensor
    blocks: list[BlockParams]
    branches: dict[str, BranchParams]
    class_branch: BranchParams

    @classmethod
    def init(cls, rng: np.random.Generator, cfg: HeadConfig,
             patch_dim: int = PATCH_DIM) -> "HeadParams":
        branches = {}
        if cfg.coupled_stage is None:
            for kind in STAGE_KINDS:
                branches[kind] = BranchParams.init(
                    rng, cfg.d_model, cfg.conv_count_for(kind), len(KIND_SLOTS[kind]))
        else:
            branches["coupled"] = BranchParams.init(
                rng, cfg.d_model, cfg.conv_counts[0], len(DELTA_SLOTS))
        return cls(
            embed_w=ad.uniform_init(rng, (patch_dim, cfg.d_model), patch_dim),
            embed_b=ad.uniform_init(rng, (cfg.d_model,), patch_dim),
            pos=ad.parameter(rng.normal(0.0, 0.02, (cfg.n_tokens, cfg.d_model))),
            blocks=[BlockParams.init(rng, cfg.d_model, cfg.heads) for _ in range(NUM_BLOCKS)],
            branches=branches,
            class_branch=BranchParams.init(rng, cfg.d_model, cfg.class_convs,
                                           cfg.num_classes + 1),
        )

    def named(self) -> dict[str, Tensor]:
        out = {"embed.w": self.embed_w, "embed.b": self.embed_b, "pos": self.pos}
        for i, bp in enumerate(self.blocks):
            out.update(bp.named(f"block{i + 1}"))
        for kind, bp in self.branches.items():
            out.update(bp.named(f"branch.{kind}"))
        out.update(self.class_branch.named("branch.cls"))
        return out

    @classmethod
    def from_named(cls, named: dict[str, Tensor], cfg: HeadConfig) -> "HeadParams":
        """Rebuild structured parameters from a flat name -> tensor map.

        The map must cover exactly the names this configuration produces (as
        saved in a checkpoint); values are copied in.
        """
        patch_dim = named["embed.w"].shape[0] if "embed.w" in named else PATCH_DIM
        params = cls.init(np.random.default_rng(0), cfg, patch_dim=patch_dim)
        mine = params.named()
        if set(mine) != set(named):
            missing = sorted(set(mine) - set(named))
            extra = sorted(set(named) - set(mine))
            raise ValueError(
                f"parameter names do not match the head configuration "
                f"(missing {missing}, unexpected {extra})")
        for name, t in mine.items():
            if t.shape != named[name].shape:
                raise ValueError(
                    f"parameter {name!r} has shape {named[name].shape}, expected {t.shape}")
            t.data[...] = named[name].data
        return params


@dataclass
class HeadOutput:
    delta: BoxDelta
    delta_tensors: dict[str, Tensor]
    class_logits: Tensor
    stage_masks: list[np.ndarray]  # the grids fed to blocks 2..4
    stage_partials: list[BoxDelta]  # accumulated delta after blocks 1..3


def _run_branch(x: Tensor, bp: BranchParams, grid: int) -> Tensor:
    """Token matrix (or batch of them) -> per-sample output vector.

    Tokens are laid back out as d_model x grid x grid feature maps, refined by
    the 3x3 conv stack, pooled, and affinely projected.
    """
    if x.data.ndim == 2:
        d_model = x.shape[1]
        maps = ad.reshape(ad.transpose(x), (d_model, grid, grid))
    else:
        nb, _, d_model = x.shape
        maps = ad.reshape(ad.permute(x, (0, 2, 1)), (nb, d_model, grid, grid))
    for kernels, bias in bp.convs:
        maps = ad.gelu(ad.conv2d_3x3(maps, kernels, bias))
    return ad.linear(ad.global_avg_pool(maps), bp.fc_w, bp.fc_b)


def _partial_delta(comps: dict[str, Tensor]) -> BoxDelta:
    values = [float(comps[s].data) if s in comps else 0.0 for s in DELTA_SLOTS]
    return BoxDelta(*values)


def _surrogate_mask(comps: dict[str, Tensor], proposal: HorizontalBox,
                    grid: int, steepness: float) -> Tensor:
    """Differentiable stand-in for the binary mask: inverse-transform the cell
    centers with the delta tensors and score each against the unit square with
    a product of sigmoids."""
    centers = grid_centers(grid, grid)
    cx = ad.constant(centers[:, 0])
    cy = ad.constant(centers[:, 1])

    def comp(name):
        t = comps.get(name)
        return t if t is not None else ad.constant(0.0)

    dx, dy = comp("dx"), comp("dy")
    dw, dh = comp("dw"), comp("dh")
    da = comp("dalpha")
    cosd, sind = ad.cos(da), ad.sin(da)
    iew = ad.exp(ad.mul_const(dw, -1.0))
    ieh = ad.exp(ad.mul_const(dh, -1.0))
    ratio = proposal.h / proposal.w

    sx = ad.add_scalar(cx, ad.mul_const(dx, -2.0))
    sy = ad.add_scalar(cy, ad.mul_const(dy, -2.0))
    # rows of the inverse linear map, as scalar tensors
    a00 = ad.mul(cosd, iew)
    a01 = ad.mul_const(ad.mul(sind, iew), ratio)
    a10 = ad.mul_const(ad.mul(sind, ieh), -1.0 / ratio)
    a11 = ad.mul(cosd, ieh)
    ux = ad.add(ad.mul_scalar(sx, a00), ad.mul_scalar(sy, a01))
    uy = ad.add(ad.mul_scalar(sx, a10), ad.mul_scalar(sy, a11))

    def edge(u):
        slack = ad.add_const(ad.mul_const(ad.absolute(u), -1.0), 1.0)  # 1 - |u|
        return ad.sigmoid(ad.mul_const(slack, steepness))

    return ad.reshape(ad.mul(edge(ux), edge(uy)), (grid * grid, 1))


def _cam_mask(hard: np.ndarray, comps: dict[str, Tensor], proposal: HorizontalBox,
              grid: int, steepness: float) -> Tensor:
    """Single tape node for the straight-through mask.

    Forward emits the exact binary cells; backward applies the analytic
    gradient of the sigmoid surrogate (the fused equivalent of running
    ``straight_through(hard, _surrogate_mask(...))``, kept to one node because
    this sits on the hot path of every training step).
    """
    n = grid * grid
    centers = grid_centers(grid, grid)
    cx, cy = centers[:, 0], centers[:, 1]

    def comp(name):
        t = comps.get(name)
        return t if t is not None else ad.constant(0.0)

    parents = tuple(comp(s) for s in DELTA_SLOTS)  # dx, dy, dw, dh, dalpha
    dx, dy, dw, dh, da = (float(t.data) for t in parents)
    c, s = np.cos(da), np.sin(da)
    iw, ih = np.exp(-dw), np.exp(-dh)
    r = proposal.h / proposal.w
    sx = cx - 2.0 * dx
    sy = cy - 2.0 * dy
    a00, a01 = c * iw, s * iw * r
    a10, a11 = -s * ih / r, c * ih
    ux = a00 * sx + a01 * sy
    uy = a10 * sx + a11 * sy
    ex = 1.0 / (1.0 + np.exp(-steepness * (1.0 - np.abs(ux))))
    ey = 1.0 / (1.0 + np.exp(-steepness * (1.0 - np.abs(uy))))
    dex = -steepness * np.sign(ux) * ex * (1.0 - ex)  # d(ex)/d(ux)
    dey = -steepness * np.sign(uy) * ey * (1.0 - ey)

    def vjp(g: Array):
        gf = g.reshape(n)
        gx = gf * dex * ey  # dL/d(ux) per cell
        gy = gf * ex * dey
        g_dx = -2.0 * (a00 * gx.sum() + a10 * gy.sum())
        g_dy = -2.0 * (a01 * gx.sum() + a11 * gy.sum())
        g_dw = -(gx * ux).sum()  # ux scales with e^{-dw}
        g_dh = -(gy * uy).sum()
        g_da = ((gx * (-s * iw * sx + c * iw * r * sy)).sum()
                + (gy * (-c * ih / r * sx - s * ih * sy)).sum())
        return tuple(np.asarray(v) for v in (g_dx, g_dy, g_dw, g_dh, g_da))

    return ad._make(hard.reshape(n, 1).copy(), parents, vjp)


def forward_head(roi_tokens, proposal: HorizontalBox, params: HeadParams,
                 cfg: HeadConfig) -> HeadOutput:
    """Run the four blocks, the stage branches, and the class branch."""
    n = cfg.n_tokens
    tokens = roi_tokens if isinstance(roi_tokens, Tensor) else ad.constant(roi_tokens)
    if tokens.data.ndim != 2 or tokens.shape[0] != n:
        raise ValueError(f"expected {n} tokens, got shape {tokens.data.shape}")
    batch = ad.reshape(tokens, (1,) + tokens.data.shape)
    return forward_head_batch(batch, [proposal], params, cfg)[0]


def forward_head_batch(roi_tokens, proposals: Sequence[HorizontalBox],
                       params: HeadParams, cfg: HeadConfig) -> list[HeadOutput]:
    """`forward_head` over a batch of samples sharing one tape.

    Token mixing, projections, and branch convolutions run batched; the
    activation masks and output components are still per sample.  Returns one
    `HeadOutput` per proposal, in order.
    """
    n = cfg.n_tokens
    nb = len(proposals)
    tokens = roi_tokens if isinstance(roi_tokens, Tensor) else ad.constant(roi_tokens)
    if tokens.data.ndim != 3 or tokens.data.shape[:2] != (nb, n):
        raise ValueError(
            f"expected token batch of shape ({nb}, {n}, ...), got {tokens.data.shape}")

    x = ad.add_broadcast0(ad.linear(tokens, params.embed_w, params.embed_b), params.pos)

    ones_grid = np.ones((cfg.grid, cfg.grid))
    mask: Tensor | np.ndarray = np.ones((nb, n, 1))
    comps_per: list[dict[str, Tensor]] = [{} for _ in range(nb)]
    masks_per: list[list[np.ndarray]] = [[] for _ in range(nb)]
    partials_per: list[list[BoxDelta]] = [[] for _ in range(nb)]

    for k in range(NUM_BLOCKS):
        x = transformer_block(x, mask, params.blocks[k], cfg.mask_targets)
        slots = ()
        if cfg.coupled_stage is None and k < NUM_BLOCKS - 1:
            kind = cfg.decoupling_order[k]
            vec = _run_branch(x, params.branches[kind], cfg.grid)
            slots = KIND_SLOTS[kind]
        elif cfg.coupled_stage == k + 1:
            vec = _run_branch(x, params.branches["coupled"], cfg.grid)
            slots = DELTA_SLOTS
        if slots:
            for b in range(nb):
                row = ad.take(vec, b)
                for i, slot in enumerate(slots):
                    comps_per[b][slot] = ad.take(row, i)

        if k < NUM_BLOCKS - 1:
            if cfg.cam_enabled and comps_per[0]:
                cols = []
                for b in range(nb):
                    partial = _partial_delta(comps_per[b])
                    partials_per[b].append(partial)
                    hard = rasterize_mask(affine_from_delta(partial, proposals[b]),
                                          cfg.grid, cfg.grid)
                    masks_per[b].append(hard)
                    cols.append(_cam_mask(hard, comps_per[b], proposals[b],
                                          cfg.grid, cfg.surrogate_steepness))
                mask = ad.stack0(cols)
            else:
                for b in range(nb):
                    partials_per[b].append(_partial_delta(comps_per[b]))
                    masks_per[b].append(ones_grid.copy())
                mask = np.ones((nb, n, 1))

    logits = _run_branch(x, params.class_branch, cfg.grid)
    return [
        HeadOutput(
            delta=_partial_delta(comps_per[b]),
            delta_tensors=dict(comps_per[b]),
            class_logits=ad.take(logits, b),
            stage_masks=masks_per[b],
            stage_partials=partials_per[b],
        )
        for b in range(nb)
    ]


DEFAULT_LOSS_WEIGHTS = {"xy": 1.0, "alpha": 1.0, "wh": 1.0, "cls": 1.0}


def head_loss(out: HeadOutput, target: BoxDelta | None, class_target: int,
              weights: dict[str, float] | None = None, beta: float = 1.0):
    """Weighted sum of per-component smooth-L1 terms and class cross-entropy.

    `target` is None for background samples (class-only supervision).
    Returns the scalar loss tensor and a {term: value} breakdown.
    """
    w = dict(DEFAULT_LOSS_WEIGHTS)
    w.update(weights or {})
    t = out.delta_tensors
    terms: dict[str, Tensor] = {}
    if target is not None:
        terms["xy"] = ad.add(ad.smooth_l1(t["dx"], target.dx, beta),
                             ad.smooth_l1(t["dy"], target.dy, beta))
        terms["alpha"] = ad.smooth_l1(t["dalpha"], target.dalpha, beta)
        terms["wh"] = ad.add(ad.smooth_l1(t["dw"], target.dw, beta),
                             ad.smooth_l1(t["dh"], target.dh, beta))
    else:
        zero = ad.constant(0.0)
        terms["xy"] = terms["alpha"] = terms["wh"] = zero
    terms["cls"] = ad.cross_entropy(out.class_logits, class_target)

    total = None
    for name in ("xy", "alpha", "wh", "cls"):
        piece = ad.mul_const(terms[name], w[name])
        total = piece if total is None else ad.add(total, piece)
    breakdown = {name: float(terms[name].data) for name in terms}
    return total, breakdown


def predict(out: HeadOutput, proposal: HorizontalBox) -> tuple[OrientedBox, np.ndarray]:
    """Decode the delta against its proposal and softmax the class logits."""
    box = decode_delta(proposal, out.delta)
    z = out.class_logits.data
    e = np.exp(z - z.max())
    return box, e / e.sum()
