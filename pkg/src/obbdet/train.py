"""Training loop, run configuration files, and the ablation grid runner.

A run is fully determined by its `RunConfig` (which embeds the head
configuration) — parameter init, data order, and logging all derive from the
single seed, so reruns produce byte-identical metric logs and checkpoints.
Configs serialize to a flat ``key=value`` text format with a version line.

`run_ablation` trains one model per (grid cell, seed) and reports mean ± sd
validation mAP per cell; the built-in grids cover coupled-vs-decoupled stages,
all decoupling orders, mask-target subsets, and branch conv depths.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from itertools import permutations
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .checkpoint import save_checkpoint
from .evaluate import evaluate_dataset
from .head import HeadConfig, HeadParams, forward_head_batch, head_loss
from .optim import AdamW
from .scenes import Dataset, load_dataset

CONFIG_FORMAT = "obbdet-config"
CONFIG_VERSION = 1
METRICS_HEADER = "epoch,loss_xy,loss_alpha,loss_wh,loss_cls,total,val_mAP"
LOSS_TERMS = ("xy", "alpha", "wh", "cls")


@dataclass
class RunConfig:
    """Everything one training run needs; see `to_text` for the file form."""

    head: HeadConfig = field(default_factory=HeadConfig)
    train_data: str = ""
    val_data: str = ""  # empty: no validation column in the metric log
    out_dir: str = "run"
    lr: float = 1e-4
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    epochs: int = 20
    batch_size: int = 8
    seed: int = 0
    eleven_point: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr < 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")

    def to_text(self) -> str:
        """Flat key=value serialization with a leading version line."""
        pairs = {
            "train_data": self.train_data,
            "val_data": self.val_data,
            "out_dir": self.out_dir,
            "lr": repr(self.lr),
            "weight_decay": repr(self.weight_decay),
            "beta1": repr(self.beta1),
            "beta2": repr(self.beta2),
            "epochs": str(self.epochs),
            "batch_size": str(self.batch_size),
            "seed": str(self.seed),
            "eleven_point": _format_value(self.eleven_point),
        }
        for key, value in self.head.to_dict().items():
            pairs[f"head.{key}"] = _format_value(value)
        lines = [f"{CONFIG_FORMAT} {CONFIG_VERSION}"]
        lines += [f"{k}={pairs[k]}" for k in sorted(pairs)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        lines = [ln.strip() for ln in text.splitlines()]
        lines = [ln for ln in lines if ln and not ln.startswith("#")]
        if not lines:
            raise ValueError("empty config")
        head_line = lines[0].split()
        if len(head_line) != 2 or head_line[0] != CONFIG_FORMAT:
            raise ValueError(f"config must start with {CONFIG_FORMAT!r} and a version")
        if head_line[1] != str(CONFIG_VERSION):
            raise ValueError(f"unsupported config version {head_line[1]!r}")
        run_kw: dict = {}
        head_kw: dict = {}
        for ln in lines[1:]:
            if "=" not in ln:
                raise ValueError(f"malformed config line {ln!r}")
            key, raw = ln.split("=", 1)
            key, raw = key.strip(), raw.strip()
            if key.startswith("head."):
                sub = key[len("head."):]
                if sub not in _HEAD_PARSERS:
                    raise ValueError(f"unknown config key {key!r}")
                head_kw[sub] = _HEAD_PARSERS[sub](raw)
            elif key in _RUN_PARSERS:
                run_kw[key] = _RUN_PARSERS[key](raw)
            else:
                raise ValueError(f"unknown config key {key!r}")
        return cls(head=HeadConfig.from_dict(head_kw), **run_kw)


def _parse_bool(raw: str) -> bool:
    if raw not in ("true", "false"):
        raise ValueError(f"expected true/false, got {raw!r}")
    return raw == "true"


def _parse_optional_int(raw: str):
    return None if raw == "none" else int(raw)


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    if isinstance(value, (list, tuple)):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


_RUN_PARSERS = {
    "train_data": str, "val_data": str, "out_dir": str,
    "lr": float, "weight_decay": float, "beta1": float, "beta2": float,
    "epochs": int, "batch_size": int, "seed": int,
    "eleven_point": _parse_bool,
}

_HEAD_PARSERS = {
    "decoupling_order": lambda raw: tuple(raw.split(",")),
    "conv_counts": lambda raw: tuple(int(v) for v in raw.split(",")),
    "class_convs": int, "grid": int, "d_model": int, "heads": int,
    "num_classes": int, "mask_targets": str,
    "cam_enabled": _parse_bool,
    "coupled_stage": _parse_optional_int,
    "surrogate_steepness": float,
}


@dataclass
class TrainResult:
    checkpoint_path: Path | None
    metrics_path: Path | None
    history: list[dict]
    final_val_map: float | None
    params: HeadParams
    config: RunConfig


def train(cfg: RunConfig, train_ds: Dataset | None = None,
          val_ds: Dataset | None = None, write_outputs: bool = True) -> TrainResult:
    """Train a head on a dataset; log per-epoch losses (and val mAP) to CSV.

    Datasets may be passed in-memory; otherwise they load from the config
    paths.  With ``write_outputs`` the metric log and final checkpoint land in
    ``cfg.out_dir``.  A non-finite loss aborts with a diagnostic.
    """
    if train_ds is None:
        train_ds = load_dataset(cfg.train_data)
    if val_ds is None and cfg.val_data:
        val_ds = load_dataset(cfg.val_data)
    if cfg.head.num_classes != train_ds.num_classes:
        raise ValueError(
            f"class-count mismatch: model has {cfg.head.num_classes} foreground "
            f"classes, dataset has {train_ds.num_classes}")

    rng = np.random.default_rng(cfg.seed)
    params = HeadParams.init(rng, cfg.head)
    named = params.named()
    opt = AdamW(named, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2),
                weight_decay=cfg.weight_decay)

    samples = train_ds.flat_samples()
    if not samples:
        raise ValueError("training dataset has no proposal samples")
    background = train_ds.num_classes
    n = len(samples)

    history: list[dict] = []
    lines = [METRICS_HEADER]
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        term_sums = np.zeros((len(LOSS_TERMS), n))  # filled by sample index
        totals = np.zeros(n)
        for start in range(0, n, cfg.batch_size):
            chunk = order[start:start + cfg.batch_size]
            batch = [samples[int(i)] for i in chunk]
            tokens = np.stack([s.tokens for s in batch])
            outs = forward_head_batch(tokens, [s.proposal for s in batch],
                                      params, cfg.head)
            batch_loss = None
            for sample, out, idx in zip(batch, outs, chunk):
                label = sample.class_id if sample.class_id >= 0 else background
                loss, terms = head_loss(out, sample.target, label)
                value = loss.item()
                if not math.isfinite(value):
                    raise RuntimeError(
                        f"non-finite loss at epoch {epoch}, sample {int(idx)}: "
                        f"total={value}, terms={terms}")
                totals[int(idx)] = value
                for t, term in enumerate(LOSS_TERMS):
                    term_sums[t, int(idx)] = terms[term]
                batch_loss = loss if batch_loss is None else ad.add(batch_loss, loss)
            ad.backward(ad.mul_const(batch_loss, 1.0 / len(batch)))
            opt.step()

        row = {"epoch": epoch, "total": float(totals.mean())}
        for t, term in enumerate(LOSS_TERMS):
            row[f"loss_{term}"] = float(term_sums[t].mean())
        if val_ds is not None:
            report = evaluate_dataset(params, cfg.head, val_ds,
                                      eleven_point=cfg.eleven_point)
            row["val_mAP"] = report.mean_ap
        history.append(row)
        val_text = f"{row['val_mAP']:.6f}" if "val_mAP" in row else ""
        lines.append(
            f"{epoch},{row['loss_xy']:.6f},{row['loss_alpha']:.6f},"
            f"{row['loss_wh']:.6f},{row['loss_cls']:.6f},{row['total']:.6f},{val_text}")

    metrics_path = checkpoint_path = None
    if write_outputs:
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        metrics_path = out / "metrics.csv"
        metrics_path.write_text("\n".join(lines) + "\n")
        checkpoint_path = out / "checkpoint.json"
        meta = {
            "head_config": cfg.head.to_dict(),
            "seed": cfg.seed,
            "epochs": cfg.epochs,
            "final_total_loss": history[-1]["total"],
        }
        if "val_mAP" in history[-1]:
            meta["final_val_map"] = history[-1]["val_mAP"]
        save_checkpoint(checkpoint_path, named, meta)

    return TrainResult(
        checkpoint_path=checkpoint_path,
        metrics_path=metrics_path,
        history=history,
        final_val_map=history[-1].get("val_mAP"),
        params=params,
        config=cfg,
    )


# ---------------------------------------------------------------------------
# ablation grids


def _order_permutations() -> list[dict]:
    return [{"decoupling_order": p} for p in permutations(("xy", "alpha", "wh"))]


ABLATION_GRIDS: dict[str, list[dict]] = {
    # coupled prediction at each block, and decoupled, each with and without
    # activation masks
    "stage-grid": [
        {"coupled_stage": s, "cam_enabled": cam}
        for s in (1, 2, 3, 4, None) for cam in (False, True)
    ],
    "orders": _order_permutations(),
    "mask-targets": [
        {"mask_targets": t} for t in ("q", "qk", "qkv", "kv", "v")
    ],
    "conv-counts": [
        {"conv_counts": c} for c in (
            (0, 0, 0),
            (1, 0, 0), (0, 1, 0), (0, 0, 1),
            (2, 0, 0), (0, 2, 0), (0, 0, 2),
            (3, 0, 0), (0, 3, 0), (0, 0, 3),
            (3, 2, 1), (2, 2, 2), (1, 2, 3),
        )
    ],
    # the headline comparison: decoupled+CAM vs coupled at the last block
    "headline": [
        {"coupled_stage": 4, "cam_enabled": True},
        {"coupled_stage": None, "cam_enabled": True},
    ],
}

ABLATION_HEADER = ("cell,coupled_stage,cam_enabled,decoupling_order,"
                   "mask_targets,conv_counts,seeds,map_mean,map_sd,per_seed")


@dataclass
class AblationRow:
    label: str
    head: HeadConfig
    maps: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.maps))

    @property
    def sd(self) -> float:
        return float(np.std(self.maps))


def _cell_label(overrides: dict) -> str:
    parts = []
    for key in sorted(overrides):
        parts.append(f"{key}={_format_value(overrides[key]).replace(',', '-')}")
    return ";".join(parts)


def run_ablation(base: RunConfig, grid, seeds,
                 train_ds: Dataset | None = None, val_ds: Dataset | None = None,
                 csv_path=None) -> tuple[list[AblationRow], Path]:
    """Train/evaluate every cell of a grid over a shared seed set.

    ``grid`` is a built-in grid name or an explicit list of head-config
    override dicts.  Each cell's validation mAP is aggregated over the seeds
    (mean and population sd) and the comparison table is written as CSV.
    """
    if isinstance(grid, str):
        if grid not in ABLATION_GRIDS:
            raise ValueError(
                f"unknown ablation grid {grid!r}; available: {sorted(ABLATION_GRIDS)}")
        cells = ABLATION_GRIDS[grid]
        grid_name = grid
    else:
        cells = list(grid)
        grid_name = "custom"
    seeds = [int(s) for s in seeds]
    if len(seeds) < 3:
        raise ValueError(f"ablation needs at least 3 seeds, got {len(seeds)}")
    if train_ds is None:
        train_ds = load_dataset(base.train_data)
    if val_ds is None:
        if not base.val_data:
            raise ValueError("ablation needs a validation dataset for mAP")
        val_ds = load_dataset(base.val_data)

    rows: list[AblationRow] = []
    base_head = base.head.to_dict()
    for ci, overrides in enumerate(cells):
        head = HeadConfig.from_dict({**base_head,
                                     **{k: _jsonable_override(v) for k, v in overrides.items()}})
        maps = []
        for seed in seeds:
            # final-checkpoint mAP is what the table reports, so skip the
            # per-epoch validation pass and evaluate once after training
            cfg = replace(base, head=head, seed=seed, val_data="",
                          out_dir=str(Path(base.out_dir) / f"cell{ci:02d}-seed{seed}"))
            result = train(cfg, train_ds, None, write_outputs=False)
            report = evaluate_dataset(result.params, head, val_ds,
                                      eleven_point=base.eleven_point)
            maps.append(report.mean_ap)
        rows.append(AblationRow(label=_cell_label(overrides), head=head, maps=maps))

    lines = [ABLATION_HEADER]
    for row in rows:
        h = row.head
        lines.append(",".join([
            row.label,
            _format_value(h.coupled_stage),
            _format_value(h.cam_enabled),
            "-".join(h.decoupling_order),
            str(h.mask_targets),
            "-".join(str(c) for c in h.conv_counts),
            ";".join(str(s) for s in seeds),
            f"{row.mean:.6f}",
            f"{row.sd:.6f}",
            ";".join(f"{m:.6f}" for m in row.maps),
        ]))
    out = Path(csv_path) if csv_path else Path(base.out_dir) / f"ablation-{grid_name}.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n".join(lines) + "\n")
    return rows, out


def _jsonable_override(value):
    if isinstance(value, tuple):
        return list(value)
    return value
