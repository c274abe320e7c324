"""Synthetic oriented-rectangle scenes: rendering, proposal synthesis, and
RoI token extraction.

Scenes are grayscale images of filled rotated rectangles over a dim noise
floor, with class identity encoded as an intensity band.  Proposals are the
axis-aligned hulls of the ground-truth boxes, jittered in center and scale,
plus a few low-overlap background rectangles.  Each proposal yields a 49x16
token matrix: its crop resampled to 28x28 and cut into 4x4 pixel patches.

Everything here is a pure function of (seed, config), so datasets regenerate
byte-for-byte.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import map_coordinates

from .checkpoint import stable_json
from .geometry import (
    BoxDelta,
    HorizontalBox,
    OrientedBox,
    box_contains,
    box_corners,
    encode_delta,
    rotated_iou,
)

DATASET_FORMAT = "obbdet-dataset"
DATASET_VERSION = 1

CROP_SIZE = 28
PATCH = 4
GRID = CROP_SIZE // PATCH


@dataclass(frozen=True)
class SceneConfig:
    """Geometry and appearance ranges for one generated scene."""

    size: int = 128
    min_objects: int = 2
    max_objects: int = 3
    width_range: tuple[float, float] = (40.0, 64.0)
    aspect_range: tuple[float, float] = (1.4, 3.0)
    angle_range: tuple[float, float] = (-1.5, 1.5)
    num_classes: int = 3
    intensity_bands: tuple[tuple[float, float], ...] = (
        (0.30, 0.40), (0.55, 0.65), (0.80, 0.90))
    noise_level: float = 0.15
    max_tries: int = 100

    def __post_init__(self):
        if self.size < 32:
            raise ValueError(f"scene size {self.size} too small")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("need 1 <= min_objects <= max_objects")
        for name in ("width_range", "aspect_range", "angle_range"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ValueError(f"{name} is empty: ({lo}, {hi})")
        if self.aspect_range[0] < 1.0:
            raise ValueError("aspect_range must keep the first side the long one")
        if self.num_classes < 1 or len(self.intensity_bands) < self.num_classes:
            raise ValueError("need one intensity band per class")
        if not 0.0 <= self.noise_level < min(b[0] for b in self.intensity_bands):
            raise ValueError("noise floor must sit below every class intensity band")


@dataclass
class Scene:
    """A rendered image plus its (box, class id) annotations."""

    image: np.ndarray  # (H, W) float64 in [0, 1], quantized to 1/255 steps
    annotations: list[tuple[OrientedBox, int]]


def _rotated_half_extent(w: float, h: float, alpha: float) -> tuple[float, float]:
    c, s = abs(np.cos(alpha)), abs(np.sin(alpha))
    return 0.5 * (w * c + h * s), 0.5 * (w * s + h * c)


def _paint_box(img: np.ndarray, box: OrientedBox, value: float) -> None:
    """Fill pixels whose centers fall inside the box (pixel i,j center = j+.5, i+.5)."""
    size_y, size_x = img.shape
    ex, ey = _rotated_half_extent(box.w, box.h, box.alpha)
    x0 = max(int(np.floor(box.x - ex)), 0)
    x1 = min(int(np.ceil(box.x + ex)) + 1, size_x)
    y0 = max(int(np.floor(box.y - ey)), 0)
    y1 = min(int(np.ceil(box.y + ey)) + 1, size_y)
    ys, xs = np.mgrid[y0:y1, x0:x1]
    pts = np.stack([xs.ravel() + 0.5, ys.ravel() + 0.5], axis=1)
    inside = box_contains(box, pts).reshape(ys.shape)
    img[y0:y1, x0:x1][inside] = value


def generate_scene(seed, cfg: SceneConfig) -> Scene:
    """Render one scene: noise floor, then overlap-free rotated rectangles.

    Placement is rejection-sampled; an object that cannot be placed in
    ``cfg.max_tries`` attempts is dropped (the first one always fits, so every
    scene keeps at least one annotation).
    """
    rng = np.random.default_rng(seed)
    img = rng.uniform(0.0, cfg.noise_level, (cfg.size, cfg.size))
    n_objects = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    annotations: list[tuple[OrientedBox, int]] = []
    for _ in range(n_objects):
        for _ in range(cfg.max_tries):
            w = rng.uniform(*cfg.width_range)
            h = w / rng.uniform(*cfg.aspect_range)
            alpha = rng.uniform(*cfg.angle_range)
            ex, ey = _rotated_half_extent(w, h, alpha)
            if 2 * ex >= cfg.size - 2 or 2 * ey >= cfg.size - 2:
                continue
            x = rng.uniform(ex + 1, cfg.size - ex - 1)
            y = rng.uniform(ey + 1, cfg.size - ey - 1)
            box = OrientedBox(x, y, w, h, alpha)
            # keep a 2-pixel moat between objects
            fat = OrientedBox(x, y, w + 4, h + 4, alpha)
            if any(rotated_iou(fat, prev) > 0 for prev, _ in annotations):
                continue
            class_id = int(rng.integers(cfg.num_classes))
            lo, hi = cfg.intensity_bands[class_id]
            _paint_box(img, box, rng.uniform(lo, hi))
            annotations.append((box, class_id))
            break
    img = np.round(img * 255.0) / 255.0
    return Scene(image=img, annotations=annotations)


@dataclass(frozen=True)
class ProposalConfig:
    """Jitter applied to ground-truth hulls and the background-sample budget."""

    center_jitter: float = 0.15
    scale_range: tuple[float, float] = (0.8, 1.25)
    background_per_scene: int = 1
    background_iou_max: float = 0.3
    background_size_range: tuple[float, float] = (16.0, 48.0)
    max_tries: int = 100

    def __post_init__(self):
        if self.center_jitter < 0:
            raise ValueError("center_jitter must be >= 0")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError(f"scale_range is invalid: ({lo}, {hi})")
        if self.background_per_scene < 0:
            raise ValueError("background_per_scene must be >= 0")
        if not 0 <= self.background_iou_max <= 1:
            raise ValueError("background_iou_max must lie in [0, 1]")


@dataclass
class ProposalSample:
    """One training/eval sample: a proposal, its tokens, and its target.

    Background samples carry ``target=None`` and ``class_id=-1``.
    """

    proposal: HorizontalBox
    tokens: np.ndarray  # (49, 16)
    target: BoxDelta | None
    class_id: int

    @property
    def is_background(self) -> bool:
        return self.target is None


def axis_aligned_hull(box: OrientedBox) -> HorizontalBox:
    """Smallest axis-aligned rectangle containing the oriented box."""
    corners = box_corners(box)
    x0, y0 = corners.min(axis=0)
    x1, y1 = corners.max(axis=0)
    return HorizontalBox(0.5 * (x0 + x1), 0.5 * (y0 + y1), x1 - x0, y1 - y0)


def _clip_to_image(x0: float, x1: float, size: int, min_side: float = 4.0):
    x0, x1 = max(x0, 0.0), min(x1, float(size))
    if x1 - x0 < min_side:  # grow back inside the image
        mid = min(max(0.5 * (x0 + x1), 0.5 * min_side), size - 0.5 * min_side)
        x0, x1 = mid - 0.5 * min_side, mid + 0.5 * min_side
    return x0, x1


def make_proposals(scene: Scene, cfg: ProposalConfig, seed,
                   image_size: int | None = None) -> list[ProposalSample]:
    """One jittered positive proposal per annotation, then background boxes.

    The positive proposal starts from the ground truth's axis-aligned hull,
    shifts its center by up to ``center_jitter`` of the hull size per axis,
    rescales each side by a factor from ``scale_range``, and is clipped to the
    image.  Background proposals are rejection-sampled to keep rotated IoU
    with every ground-truth box below ``background_iou_max``.
    """
    rng = np.random.default_rng(seed)
    size = image_size or scene.image.shape[0]
    samples: list[ProposalSample] = []
    for gt, class_id in scene.annotations:
        hull = axis_aligned_hull(gt)
        cx = hull.x + rng.uniform(-cfg.center_jitter, cfg.center_jitter) * hull.w
        cy = hull.y + rng.uniform(-cfg.center_jitter, cfg.center_jitter) * hull.h
        w = hull.w * rng.uniform(*cfg.scale_range)
        h = hull.h * rng.uniform(*cfg.scale_range)
        x0, x1 = _clip_to_image(cx - 0.5 * w, cx + 0.5 * w, size)
        y0, y1 = _clip_to_image(cy - 0.5 * h, cy + 0.5 * h, size)
        proposal = HorizontalBox(0.5 * (x0 + x1), 0.5 * (y0 + y1), x1 - x0, y1 - y0)
        samples.append(ProposalSample(
            proposal=proposal,
            tokens=extract_roi_tokens(scene.image, proposal),
            target=encode_delta(proposal, gt),
            class_id=class_id,
        ))
    for _ in range(cfg.background_per_scene):
        for _ in range(cfg.max_tries):
            w = rng.uniform(*cfg.background_size_range)
            h = rng.uniform(*cfg.background_size_range)
            x = rng.uniform(0.5 * w, size - 0.5 * w)
            y = rng.uniform(0.5 * h, size - 0.5 * h)
            probe = OrientedBox(x, y, w, h, 0.0)
            if max((rotated_iou(probe, gt) for gt, _ in scene.annotations),
                   default=0.0) < cfg.background_iou_max:
                proposal = HorizontalBox(x, y, w, h)
                samples.append(ProposalSample(
                    proposal=proposal,
                    tokens=extract_roi_tokens(scene.image, proposal),
                    target=None,
                    class_id=-1,
                ))
                break
    return samples


def extract_roi_tokens(image: np.ndarray, proposal: HorizontalBox) -> np.ndarray:
    """Bilinear crop of the proposal to 28x28, cut into a (49, 16) patch matrix.

    Sample points sit at the centers of a 28x28 grid spanning the proposal;
    a proposal aligned to an integer 28x28 window reproduces those pixels
    exactly.  Token t = 7*ti + tj holds the 4x4 block at (ti, tj), flattened
    row-major.
    """
    if proposal.w < 1e-6 or proposal.h < 1e-6:
        raise ValueError(f"degenerate proposal: w={proposal.w}, h={proposal.h}")
    x0 = proposal.x - 0.5 * proposal.w
    y0 = proposal.y - 0.5 * proposal.h
    sx = x0 + (np.arange(CROP_SIZE) + 0.5) * (proposal.w / CROP_SIZE)
    sy = y0 + (np.arange(CROP_SIZE) + 0.5) * (proposal.h / CROP_SIZE)
    # pixel (i, j) has its center at x = j + 0.5, y = i + 0.5
    cols, rows = np.meshgrid(sx - 0.5, sy - 0.5)
    crop = map_coordinates(image, [rows, cols], order=1, mode="nearest")
    return (crop.reshape(GRID, PATCH, GRID, PATCH)
                .transpose(0, 2, 1, 3)
                .reshape(GRID * GRID, PATCH * PATCH))


# ---------------------------------------------------------------------------
# dataset container and serialization


@dataclass
class Dataset:
    """Scenes, their proposal samples, and the class count they share."""

    scenes: list[Scene]
    samples: list[list[ProposalSample]]  # parallel to scenes
    num_classes: int
    meta: dict = field(default_factory=dict)

    def flat_samples(self) -> list[ProposalSample]:
        return [s for per_scene in self.samples for s in per_scene]


def build_dataset(seed: int, n_scenes: int,
                  scene_cfg: SceneConfig | None = None,
                  proposal_cfg: ProposalConfig | None = None) -> Dataset:
    """Generate ``n_scenes`` scenes with proposals, deterministically in ``seed``.

    Each scene and its proposals use child seeds derived from (seed, index),
    so scenes are independent of each other and of ``n_scenes``.
    """
    scene_cfg = scene_cfg or SceneConfig()
    proposal_cfg = proposal_cfg or ProposalConfig()
    scenes, samples = [], []
    for i in range(n_scenes):
        scene = generate_scene((seed, i, 0), scene_cfg)
        scenes.append(scene)
        samples.append(make_proposals(scene, proposal_cfg, (seed, i, 1)))
    meta = {
        "seed": seed,
        "n_scenes": n_scenes,
        "scene_config": _config_dict(scene_cfg),
        "proposal_config": _config_dict(proposal_cfg),
    }
    return Dataset(scenes, samples, scene_cfg.num_classes, meta)


def _jsonable(value):
    if isinstance(value, tuple):
        return [_jsonable(v) for v in value]
    return value


def _config_dict(cfg) -> dict:
    return {name: _jsonable(value) for name, value in vars(cfg).items()}


def _image_to_b64(img: np.ndarray) -> str:
    levels = np.round(img * 255.0)
    if not np.array_equal(levels / 255.0, img):
        raise ValueError("image is not quantized to 1/255 steps; cannot store losslessly")
    return base64.b64encode(levels.astype(np.uint8).tobytes()).decode("ascii")


def _image_from_b64(text: str, h: int, w: int) -> np.ndarray:
    flat = np.frombuffer(base64.b64decode(text), dtype=np.uint8)
    if flat.size != h * w:
        raise ValueError(f"image payload has {flat.size} bytes, expected {h * w}")
    return flat.reshape(h, w).astype(np.float64) / 255.0


def save_dataset(path: str | Path, ds: Dataset) -> None:
    """Write the dataset as versioned JSON with base64 uint8 images."""
    doc = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "num_classes": ds.num_classes,
        "meta": ds.meta,
        "scenes": [
            {
                "h": scene.image.shape[0],
                "w": scene.image.shape[1],
                "image": _image_to_b64(scene.image),
                "annotations": [
                    [b.x, b.y, b.w, b.h, b.alpha, c] for b, c in scene.annotations
                ],
                "samples": [
                    {
                        "proposal": [s.proposal.x, s.proposal.y,
                                     s.proposal.w, s.proposal.h],
                        "target": None if s.target is None else
                        [s.target.dx, s.target.dy, s.target.dw,
                         s.target.dh, s.target.dalpha],
                        "class": s.class_id,
                    }
                    for s in per_scene
                ],
            }
            for scene, per_scene in zip(ds.scenes, ds.samples)
        ],
    }
    Path(path).write_text(stable_json(doc))


def load_dataset(path: str | Path) -> Dataset:
    """Read a dataset file; tokens are re-extracted from the stored images."""
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"no dataset file at {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ValueError(f"{p} is not valid JSON: {e}") from e
    if not isinstance(doc, dict) or doc.get("format") != DATASET_FORMAT:
        raise ValueError(f"{p} is not a recognized dataset file")
    if doc.get("version") != DATASET_VERSION:
        raise ValueError(f"unsupported dataset version {doc.get('version')!r}")
    scenes, samples = [], []
    for rec in doc["scenes"]:
        image = _image_from_b64(rec["image"], rec["h"], rec["w"])
        annotations = [(OrientedBox(x, y, w, h, a), int(c))
                       for x, y, w, h, a, c in rec["annotations"]]
        scenes.append(Scene(image=image, annotations=annotations))
        per_scene = []
        for s in rec["samples"]:
            proposal = HorizontalBox(*s["proposal"])
            target = None if s["target"] is None else BoxDelta(*s["target"])
            per_scene.append(ProposalSample(
                proposal=proposal,
                tokens=extract_roi_tokens(image, proposal),
                target=target,
                class_id=int(s["class"]),
            ))
        samples.append(per_scene)
    return Dataset(scenes, samples, int(doc["num_classes"]), doc.get("meta", {}))
