"""Rotated-box detection metrics: greedy matching, VOC-style AP, and the
model-on-dataset evaluation driver.

Predictions are ranked globally per class by descending score (ties broken by
insertion index, so evaluation is a pure function of the ordered input) and
matched greedily to ground truth at a rotated-IoU threshold, each ground-truth
box claimable once.  AP uses all-point interpolation by default, with the
older 11-point average as an option.  mAP averages AP over the foreground
classes that actually appear in the ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .checkpoint import load_checkpoint
from .geometry import OrientedBox, rotated_iou, rotated_nms
from .head import HeadConfig, HeadParams, forward_head_batch, predict
from .scenes import Dataset, load_dataset

DEFAULT_NMS_IOU = 0.5


@dataclass(frozen=True)
class Detection:
    """One scored, classified box prediction on one image."""

    box: OrientedBox
    score: float
    class_id: int


@dataclass
class EvalReport:
    """Per-class AP at a fixed rotated-IoU threshold, plus curves and counts."""

    iou_threshold: float
    per_class_ap: dict[int, float]
    mean_ap: float
    curves: dict[int, tuple[np.ndarray, np.ndarray]]  # class -> (recall, precision)
    counts: dict[int, tuple[int, int, int]]  # class -> (n_gt, n_pred, n_tp)


def average_precision(matches: np.ndarray, n_gt: int,
                      eleven_point: bool = False) -> tuple[float, np.ndarray, np.ndarray]:
    """AP from rank-ordered true-positive flags against ``n_gt`` ground truths.

    Returns (ap, recall, precision) with one curve point per prediction.
    """
    matches = np.asarray(matches, dtype=bool)
    if n_gt <= 0:
        raise ValueError("average_precision needs at least one ground truth")
    if matches.size == 0:
        return 0.0, np.zeros(0), np.zeros(0)
    tp = np.cumsum(matches)
    fp = np.cumsum(~matches)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    if eleven_point:
        ap = 0.0
        for t in np.linspace(0.0, 1.0, 11):
            mask = recall >= t - 1e-12
            ap += precision[mask].max() if mask.any() else 0.0
        return ap / 11.0, recall, precision
    mrec = np.concatenate(([0.0], recall, [recall[-1]]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]  # precision envelope
    step = np.nonzero(mrec[1:] != mrec[:-1])[0]
    ap = float(np.sum((mrec[step + 1] - mrec[step]) * mpre[step + 1]))
    return ap, recall, precision


def _match_class(dets: list[tuple[int, OrientedBox]], gts_per_image: list[list[OrientedBox]],
                 iou_threshold: float) -> np.ndarray:
    """Greedy matching of rank-ordered (image, box) predictions to ground truth.

    Each prediction claims its highest-IoU ground-truth box in that image if
    the IoU clears the threshold and the box is unclaimed; otherwise it is a
    false positive (duplicates included).
    """
    claimed = [np.zeros(len(g), dtype=bool) for g in gts_per_image]
    matches = np.zeros(len(dets), dtype=bool)
    for rank, (img, box) in enumerate(dets):
        gts = gts_per_image[img]
        if not gts:
            continue
        ious = np.array([rotated_iou(box, g) for g in gts])
        best = int(np.argmax(ious))
        if ious[best] >= iou_threshold and not claimed[img][best]:
            claimed[img][best] = True
            matches[rank] = True
    return matches


def evaluate_detections(detections: list[list[Detection]],
                        ground_truth: list[list[tuple[OrientedBox, int]]],
                        num_classes: int, iou_threshold: float = 0.5,
                        eleven_point: bool = False) -> EvalReport:
    """Score per-image detection lists against per-image (box, class) truth."""
    if len(detections) != len(ground_truth):
        raise ValueError(
            f"{len(detections)} detection lists vs {len(ground_truth)} ground-truth lists")
    per_class_ap: dict[int, float] = {}
    curves: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    counts: dict[int, tuple[int, int, int]] = {}
    present: list[int] = []
    for c in range(num_classes):
        gts = [[box for box, cid in per_img if cid == c] for per_img in ground_truth]
        n_gt = sum(len(g) for g in gts)
        pool = [(i, d.box, d.score)
                for i, per_img in enumerate(detections)
                for d in per_img if d.class_id == c]
        order = np.argsort(-np.array([p[2] for p in pool]), kind="stable") if pool else []
        ranked = [(pool[int(i)][0], pool[int(i)][1]) for i in order]
        if n_gt == 0:
            counts[c] = (0, len(ranked), 0)
            continue
        present.append(c)
        matches = _match_class(ranked, gts, iou_threshold)
        ap, recall, precision = average_precision(matches, n_gt, eleven_point)
        per_class_ap[c] = ap
        curves[c] = (recall, precision)
        counts[c] = (n_gt, len(ranked), int(matches.sum()))
    mean_ap = float(np.mean([per_class_ap[c] for c in present])) if present else 0.0
    return EvalReport(iou_threshold=iou_threshold, per_class_ap=per_class_ap,
                      mean_ap=mean_ap, curves=curves, counts=counts)


def predict_dataset(params: HeadParams, cfg: HeadConfig, ds: Dataset,
                    nms_iou: float = DEFAULT_NMS_IOU) -> list[list[Detection]]:
    """Run the head over every proposal and apply per-class rotated NMS per image.

    Each proposal contributes one detection: the decoded box, the argmax
    foreground class, and the maximum foreground softmax probability as score.
    """
    out: list[list[Detection]] = []
    for per_scene in ds.samples:
        if not per_scene:
            out.append([])
            continue
        tokens = np.stack([s.tokens for s in per_scene])
        proposals = [s.proposal for s in per_scene]
        with ad.no_grad():
            heads = forward_head_batch(tokens, proposals, params, cfg)
        dets: list[Detection] = []
        for sample, head_out in zip(per_scene, heads):
            box, probs = predict(head_out, sample.proposal)
            fg = probs[:-1]
            dets.append(Detection(box=box, score=float(fg.max()),
                                  class_id=int(np.argmax(fg))))
        kept: list[Detection] = []
        for c in range(cfg.num_classes):
            idx = [i for i, d in enumerate(dets) if d.class_id == c]
            boxes = [dets[i].box for i in idx]
            scores = [dets[i].score for i in idx]
            kept.extend(dets[idx[k]] for k in rotated_nms(boxes, scores, nms_iou))
        out.append(kept)
    return out


def evaluate_dataset(params: HeadParams, cfg: HeadConfig, ds: Dataset,
                     iou_threshold: float = 0.5, eleven_point: bool = False,
                     nms_iou: float = DEFAULT_NMS_IOU) -> EvalReport:
    """Predict on a dataset and score against its annotations."""
    if cfg.num_classes != ds.num_classes:
        raise ValueError(
            f"class-count mismatch: model has {cfg.num_classes} foreground classes, "
            f"dataset has {ds.num_classes}")
    detections = predict_dataset(params, cfg, ds, nms_iou=nms_iou)
    ground_truth = [scene.annotations for scene in ds.scenes]
    return evaluate_detections(detections, ground_truth, cfg.num_classes,
                               iou_threshold, eleven_point)


def evaluate_checkpoint(ckpt_path, dataset, iou_threshold: float = 0.5,
                        eleven_point: bool = False) -> EvalReport:
    """Load a trained head from a checkpoint file and evaluate it.

    ``dataset`` may be a loaded `Dataset` or a path to a dataset file.
    """
    named, meta = load_checkpoint(ckpt_path)
    if "head_config" not in meta:
        raise ValueError(f"checkpoint {ckpt_path} has no head configuration in its metadata")
    cfg = HeadConfig.from_dict(meta["head_config"])
    params = HeadParams.from_named(named, cfg)
    if not isinstance(dataset, Dataset):
        dataset = load_dataset(dataset)
    return evaluate_dataset(params, cfg, dataset, iou_threshold, eleven_point)
