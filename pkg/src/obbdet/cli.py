"""Command-line entry point.

Subcommands: gen-data, train, eval, ablate, mask-dump, iou, affine-check.
Results go to stdout, diagnostics to stderr; exit codes are 0 (success),
1 (usage error), 2 (runtime error).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .evaluate import evaluate_checkpoint
from .geometry import (
    BoxDelta,
    HorizontalBox,
    OrientedBox,
    affine_five_step,
    affine_from_delta,
    rasterize_mask,
    rotated_iou,
)
from .scenes import ProposalConfig, SceneConfig, build_dataset, save_dataset
from .train import ABLATION_GRIDS, RunConfig, run_ablation, train


class UsageError(ValueError):
    """Bad user-supplied values (exit code 1, like argparse errors)."""


class _Parser(argparse.ArgumentParser):
    """argparse with usage failures mapped to exit code 1 instead of 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _parse_floats(text: str, n: int, what: str) -> list[float]:
    parts = text.split(",")
    if len(parts) != n:
        raise UsageError(f"{what} needs {n} comma-separated numbers, got {text!r}")
    try:
        return [float(p) for p in parts]
    except ValueError:
        raise UsageError(f"{what} contains a non-numeric field: {text!r}") from None


def _parse_obox(text: str) -> OrientedBox:
    return OrientedBox(*_parse_floats(text, 5, "oriented box (cx,cy,w,h,alpha)"))


def _parse_hbox(text: str) -> HorizontalBox:
    return HorizontalBox(*_parse_floats(text, 4, "horizontal box (cx,cy,w,h)"))


def _parse_delta(text: str) -> BoxDelta:
    return BoxDelta(*_parse_floats(text, 5, "delta (dx,dy,dw,dh,dalpha)"))


def _parse_seeds(text: str) -> list[int]:
    try:
        return [int(p) for p in text.split(",")]
    except ValueError:
        raise UsageError(f"seeds must be comma-separated integers, got {text!r}") from None


def write_pgm(path, cells: np.ndarray) -> None:
    """Binary-cell grid as plain (P2) PGM, 0 outside and 255 inside."""
    cells = np.asarray(cells)
    h, w = cells.shape
    lines = ["P2", f"{w} {h}", "255"]
    lines += [" ".join("255" if v else "0" for v in row) for row in cells]
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# subcommand handlers


def _cmd_gen_data(args) -> int:
    scene_cfg = SceneConfig(num_classes=args.classes,
                            min_objects=args.min_objects,
                            max_objects=args.max_objects)
    ds = build_dataset(args.seed, args.scenes, scene_cfg,
                       ProposalConfig(background_per_scene=args.background))
    out = Path(args.out)
    if out.parent and not out.parent.exists():
        out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(out, ds)
    n_samples = sum(len(s) for s in ds.samples)
    print(f"wrote {args.scenes} scenes / {n_samples} proposal samples to {out}",
          file=sys.stderr)
    return 0


def _cmd_train(args) -> int:
    cfg = RunConfig.from_text(Path(args.config).read_text())
    if args.out:
        from dataclasses import replace
        cfg = replace(cfg, out_dir=args.out)
    result = train(cfg)
    last = result.history[-1]
    print(f"checkpoint={result.checkpoint_path}")
    print(f"metrics={result.metrics_path}")
    print(f"final_total_loss={last['total']:.6f}")
    if result.final_val_map is not None:
        print(f"final_val_mAP={result.final_val_map:.6f}")
    return 0


def _cmd_eval(args) -> int:
    report = evaluate_checkpoint(args.ckpt, args.data, iou_threshold=args.iou,
                                 eleven_point=args.eleven_point)
    for c in sorted(report.counts):
        n_gt, n_pred, n_tp = report.counts[c]
        ap = report.per_class_ap.get(c)
        ap_text = f"{ap:.6f}" if ap is not None else "n/a"
        print(f"class {c}: AP {ap_text} (gt={n_gt}, pred={n_pred}, tp={n_tp})")
    print(f"mAP@{report.iou_threshold:.2f} {report.mean_ap:.6f}")
    return 0


def _cmd_ablate(args) -> int:
    base = RunConfig.from_text(Path(args.config).read_text())
    if args.out:
        from dataclasses import replace
        base = replace(base, out_dir=args.out)
    csv_path = Path(base.out_dir) / f"ablation-{args.grid}.csv"
    rows, path = run_ablation(base, args.grid, _parse_seeds(args.seeds),
                              csv_path=csv_path)
    sys.stdout.write(path.read_text())
    print(f"table written to {path}", file=sys.stderr)
    return 0


def _cmd_mask_dump(args) -> int:
    proposal = _parse_hbox(args.proposal)
    delta = _parse_delta(args.delta)
    mask = rasterize_mask(affine_from_delta(delta, proposal), args.grid, args.grid)
    write_pgm(args.out, mask)
    print(f"wrote {args.grid}x{args.grid} mask to {args.out}", file=sys.stderr)
    return 0


def _cmd_iou(args) -> int:
    print(f"{rotated_iou(_parse_obox(args.a), _parse_obox(args.b)):.9f}")
    return 0


def _cmd_affine_check(args) -> int:
    if (args.proposal is None) != (args.delta is None):
        raise UsageError("--proposal and --delta must be given together")
    if args.proposal is not None:
        pairs = [(_parse_hbox(args.proposal), _parse_delta(args.delta))]
    else:
        rng = np.random.default_rng(args.seed)
        pairs = []
        for _ in range(args.n):
            p = HorizontalBox(rng.uniform(10, 110), rng.uniform(10, 110),
                              rng.uniform(5, 60), rng.uniform(5, 60))
            d = BoxDelta(rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5),
                         rng.uniform(-0.6, 0.6), rng.uniform(-0.6, 0.6),
                         rng.uniform(-np.pi / 2, np.pi / 2))
            pairs.append((p, d))
    worst = 0.0
    for p, d in pairs:
        direct = affine_from_delta(d, p)
        composed = affine_five_step(d, p)
        worst = max(worst,
                    float(np.abs(direct.m - composed.m).max()),
                    float(np.abs(direct.t - composed.t).max()))
    print(f"max abs diff {worst:.3e} over {len(pairs)} pair(s)")
    if worst >= 1e-9:
        print("closed-form affine disagrees with the five-step composition",
              file=sys.stderr)
        return 2
    return 0


# ---------------------------------------------------------------------------
# parser wiring


def build_parser() -> _Parser:
    parser = _Parser(prog="obbdet", description=__doc__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("gen-data", help="generate a synthetic scene dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--scenes", type=int, required=True)
    p.add_argument("--classes", type=int, default=SceneConfig.num_classes)
    p.add_argument("--min-objects", type=int, default=SceneConfig.min_objects)
    p.add_argument("--max-objects", type=int, default=SceneConfig.max_objects)
    p.add_argument("--background", type=int, default=1,
                   help="background proposals per scene")
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train a head from a run-config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None, help="override the config's out_dir")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--iou", type=float, default=0.5)
    p.add_argument("--eleven-point", action="store_true",
                   help="11-point AP instead of all-point interpolation")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="run an ablation grid")
    p.add_argument("--grid", required=True, choices=sorted(ABLATION_GRIDS))
    p.add_argument("--config", required=True, help="base run-config file")
    p.add_argument("--out", default=None, help="override the config's out_dir")
    p.add_argument("--seeds", default="0,1,2")
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("mask-dump", help="rasterize a delta's mask to PGM")
    p.add_argument("--proposal", required=True, help="cx,cy,w,h")
    p.add_argument("--delta", required=True, help="dx,dy,dw,dh,dalpha")
    p.add_argument("--grid", type=int, default=7)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_mask_dump)

    p = sub.add_parser("iou", help="rotated IoU of two oriented boxes")
    p.add_argument("--a", required=True, help="cx,cy,w,h,alpha")
    p.add_argument("--b", required=True, help="cx,cy,w,h,alpha")
    p.set_defaults(func=_cmd_iou)

    p = sub.add_parser("affine-check",
                       help="closed-form affine vs the five-step composition")
    p.add_argument("--proposal", default=None, help="cx,cy,w,h")
    p.add_argument("--delta", default=None, help="dx,dy,dw,dh,dalpha")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_affine_check)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except (ValueError, RuntimeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
