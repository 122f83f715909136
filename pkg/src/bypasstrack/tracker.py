"""Synthetic tracking sequences, search/template cropping, the tracking loop and metrics."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence as Seq

import numpy as np
from scipy import ndimage

from .head import BBox

SHAPES = ("square", "circle")
MIN_BOX_PX = 2.0
SUCCESS_THRESHOLDS = np.round(np.arange(21) * 0.05, 2)

# seed namespaces keep training and held-out sequences disjoint
TRAIN_NAMESPACE = 1
EVAL_NAMESPACE = 2


class ConfigurationError(ValueError):
    pass


class TrackingError(ValueError):
    """A crop was requested around a degenerate box."""


@dataclass(frozen=True)
class SceneSpec:
    image_size: int = 160
    shape: str | None = None  # None: drawn per sequence
    color: tuple | None = None  # None: drawn per sequence
    size_range: tuple[int, int] = (16, 32)
    distractor_count: int = 0
    background: str = "flat"
    noise_std: float = 0.02
    motion_std: float = 3.0
    difficulty: str = "easy"

    def __post_init__(self):
        if self.shape is not None and self.shape not in SHAPES:
            raise ConfigurationError(f"unknown shape {self.shape!r}")
        if self.background not in ("flat", "textured"):
            raise ConfigurationError(f"unknown background {self.background!r}")
        lo, hi = self.size_range
        if not 0 < lo <= hi:
            raise ConfigurationError(f"bad size range {self.size_range}")
        if hi >= self.image_size:
            raise ConfigurationError(f"target size {hi} does not fit a {self.image_size}px frame")

    @classmethod
    def easy(cls, image_size: int = 160, **kw) -> SceneSpec:
        return cls(image_size=image_size, distractor_count=0, background="flat", difficulty="easy", **kw)

    @classmethod
    def hard(cls, image_size: int = 160, distractors: int = 4, **kw) -> SceneSpec:
        return cls(image_size=image_size, distractor_count=max(4, distractors), background="textured",
                   difficulty="hard", **kw)


@dataclass
class _Sprite:
    shape: str
    size: int
    track: np.ndarray  # (L, 2) integer top-left corners


@dataclass
class Sequence:
    """Lazily rendered frames; ``boxes`` are normalised to the full frame."""

    spec: SceneSpec
    seed: int
    boxes: list[BBox]
    background: np.ndarray
    color: np.ndarray
    target: _Sprite
    distractors: list[_Sprite] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.boxes)

    def frame(self, t: int) -> np.ndarray:
        img = self.background.copy()
        for sprite in self.distractors + [self.target]:
            _draw(img, sprite.shape, sprite.track[t], sprite.size, self.color)
        if self.spec.noise_std > 0:
            noise_rng = np.random.default_rng([self.seed, 7, t])
            img += noise_rng.normal(0.0, self.spec.noise_std, img.shape).astype(np.float32)
            np.clip(img, 0.0, 1.0, out=img)
        return img

    @property
    def frames(self) -> list[np.ndarray]:
        return [self.frame(t) for t in range(len(self))]

    def box_px(self, t: int) -> np.ndarray:
        return box_to_px(self.boxes[t], self.spec.image_size)


def _draw(img: np.ndarray, shape: str, corner: np.ndarray, size: int, color: np.ndarray) -> None:
    x0, y0 = int(corner[0]), int(corner[1])
    patch = img[y0:y0 + size, x0:x0 + size]
    if shape == "square":
        patch[...] = color
    else:
        c = (np.arange(size) + 0.5) - size / 2
        inside = c[:, None] ** 2 + c[None, :] ** 2 <= (size / 2) ** 2
        patch[inside] = color


def _random_walk(rng, start, steps, std, limit):
    track = np.empty((steps, 2), dtype=np.int64)
    pos = np.asarray(start, dtype=np.float64)
    for t in range(steps):
        if t:
            pos = pos + rng.normal(0.0, std, 2) if std > 0 else pos
            pos = np.clip(pos, 0, limit)
        track[t] = np.rint(pos)
    return track


def _textured_background(rng, size: int) -> np.ndarray:
    noise = rng.random((size, size, 3))
    smooth = np.stack([ndimage.gaussian_filter(noise[..., c], sigma=4.0) for c in range(3)], axis=-1)
    smooth = (smooth - smooth.min()) / max(smooth.max() - smooth.min(), 1e-6)
    return (0.2 + 0.6 * smooth).astype(np.float32)


def _pick_colors(rng) -> tuple[np.ndarray, np.ndarray]:
    while True:
        bg = rng.uniform(0.1, 0.9, 3)
        fg = rng.uniform(0.0, 1.0, 3)
        if np.abs(fg - bg).sum() >= 0.6:
            return bg.astype(np.float32), fg.astype(np.float32)


def generate_sequence(spec: SceneSpec, length: int, seed: int) -> Sequence:
    """Deterministic in ``seed``; ground-truth boxes are tight on the target."""
    if length < 2:
        raise ConfigurationError("sequence length must be >= 2")
    rng = np.random.default_rng(seed)
    n = spec.image_size
    bg_color, fg_color = _pick_colors(rng)
    if spec.color is not None:
        fg_color = np.asarray(spec.color, dtype=np.float32)
    if spec.background == "flat":
        background = np.broadcast_to(bg_color, (n, n, 3)).astype(np.float32)
    else:
        background = _textured_background(rng, n)
    shape = spec.shape or SHAPES[int(rng.integers(len(SHAPES)))]
    size = int(rng.integers(spec.size_range[0], spec.size_range[1] + 1))
    limit = n - size
    start = rng.uniform(0.25 * limit, 0.75 * limit, 2)
    target = _Sprite(shape, size, _random_walk(rng, start, length, spec.motion_std, limit))
    distractors = []
    for _ in range(spec.distractor_count):
        dsize = int(rng.integers(spec.size_range[0], spec.size_range[1] + 1))
        dshape = SHAPES[int(rng.integers(len(SHAPES)))]
        dstart = rng.uniform(0, n - dsize, 2)
        distractors.append(_Sprite(dshape, dsize, _random_walk(rng, dstart, length, spec.motion_std, n - dsize)))
    boxes = [
        BBox((x + size / 2) / n, (y + size / 2) / n, size / n, size / n) for x, y in target.track
    ]
    return Sequence(spec, seed, boxes, background, fg_color, target, distractors)


def sequence_seed(base_seed: int, namespace: int, index: int) -> int:
    return int(np.random.SeedSequence([base_seed, namespace, index]).generate_state(1)[0])


HARD_INDEX_OFFSET = 1000


def evaluation_sequences(data, seed: int, difficulty: str) -> list[Sequence]:
    """Held-out sequences of one difficulty; seeds live in their own namespace."""
    if difficulty not in ("easy", "hard"):
        raise ConfigurationError(f"unknown difficulty {difficulty!r}")
    offset = 0 if difficulty == "easy" else HARD_INDEX_OFFSET
    make = SceneSpec.easy if difficulty == "easy" else SceneSpec.hard
    return [generate_sequence(make(data.frame_size), data.sequence_length,
                              sequence_seed(seed, EVAL_NAMESPACE, offset + i))
            for i in range(data.eval_sequences)]


def evaluate(model, data, seed: int, difficulty: str, policy=None) -> tuple[dict, list, list[TrackResult]]:
    """Track every held-out sequence of ``difficulty``; returns ``(metrics, sequences, results)``."""
    seqs = evaluation_sequences(data, seed, difficulty)
    results = [track_sequence(model, s, policy, template_factor=data.template_factor,
                              search_factor=data.search_factor) for s in seqs]
    return eval_metrics(results), seqs, results


def box_to_px(box: BBox, frame_size: int) -> np.ndarray:
    return box.as_array() * frame_size


def px_to_box(px, frame_size: int) -> BBox:
    return BBox.from_array(np.asarray(px, dtype=np.float64) / frame_size)


@dataclass(frozen=True)
class CropTransform:
    """Square crop ``[x0, x0 + side) x [y0, y0 + side)`` of the frame, resampled to ``out_size``."""

    x0: float
    y0: float
    side: float
    out_size: int

    def to_frame_px(self, crop_box) -> np.ndarray:
        """Crop-normalised ``(x, y, w, h)`` -> frame pixels."""
        b = np.asarray(crop_box, dtype=np.float64)
        return np.array([self.x0 + b[0] * self.side, self.y0 + b[1] * self.side, b[2] * self.side, b[3] * self.side])

    def from_frame_px(self, px) -> np.ndarray:
        p = np.asarray(px, dtype=np.float64)
        return np.array([(p[0] - self.x0) / self.side, (p[1] - self.y0) / self.side, p[2] / self.side, p[3] / self.side])


def crop(frame: np.ndarray, box_px, factor: float, out_size: int, pad_value=None) -> tuple[np.ndarray, CropTransform]:
    """Square crop of side ``factor * sqrt(w * h)`` centred on ``box_px``; bilinear resampling."""
    if factor < 1:
        raise ConfigurationError(f"crop factor must be >= 1, got {factor}")
    cx, cy, w, h = (float(v) for v in box_px)
    if not (w > 0 and h > 0 and np.isfinite(w * h)):
        raise TrackingError(f"cannot crop around a degenerate box {tuple(box_px)}")
    side = factor * np.sqrt(w * h)
    tf = CropTransform(cx - side / 2, cy - side / 2, side, out_size)
    if pad_value is None:
        pad_value = frame.reshape(-1, frame.shape[-1]).mean(axis=0)
    pad_value = np.broadcast_to(np.asarray(pad_value, dtype=np.float64), (frame.shape[-1],))
    step = side / out_size
    coords = tf.x0 + (np.arange(out_size) + 0.5) * step - 0.5
    rows = tf.y0 + (np.arange(out_size) + 0.5) * step - 0.5
    grid = np.stack(np.meshgrid(rows, coords, indexing="ij"))
    out = np.empty((out_size, out_size, frame.shape[-1]), dtype=np.float32)
    for c in range(frame.shape[-1]):
        out[..., c] = ndimage.map_coordinates(
            frame[..., c].astype(np.float64), grid, order=1, mode="grid-constant", cval=float(pad_value[c])
        )
    return out, tf


def crop_regions(frame, prev_box: BBox, template_factor: float = 2.0, search_factor: float = 4.0,
                 template_size: int = 64, search_size: int = 128):
    """Template and search crops around ``prev_box`` plus the search crop transform."""
    n = frame.shape[0]
    px = box_to_px(prev_box, n)
    template, _ = crop(frame, px, template_factor, template_size)
    search, tf = crop(frame, px, search_factor, search_size)
    return template, search, tf


@dataclass
class TrackResult:
    boxes: list[BBox]
    ious: np.ndarray
    traces: list  # BypassTrace per frame; None for the initialisation frame
    difficulty: str = ""

    def __len__(self) -> int:
        return len(self.boxes)

    def executed_counts(self) -> np.ndarray:
        return np.array([int(t.executed_count()[0]) for t in self.traces if t is not None])


def box_iou(a: BBox, b: BBox) -> float:
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = a.w * a.h + b.w * b.h - inter
    return inter / union if union > 0 else 0.0


def _clamp_box(px: np.ndarray, n: int) -> np.ndarray:
    cx, cy, w, h = px
    w = float(np.clip(w, MIN_BOX_PX, n))
    h = float(np.clip(h, MIN_BOX_PX, n))
    cx = float(np.clip(cx, 0.0, n))
    cy = float(np.clip(cy, 0.0, n))
    return np.array([cx, cy, w, h])


def track_sequence(model, seq: Sequence, policy=None, *, template_factor=2.0, search_factor=4.0,
                   gt_centered: bool = False, force_skip=()) -> TrackResult:
    """Run the tracker over ``seq``; frame 0 is initialised from ground truth.

    ``gt_centered`` centres every search crop on the ground-truth box (oracle
    variant) instead of the previous prediction.
    """
    n = seq.spec.image_size
    msize = model.cfg.template_size
    ssize = model.cfg.search_size
    template, _ = crop(seq.frame(0), seq.box_px(0), template_factor, msize)
    prev = seq.box_px(0)
    boxes = [seq.boxes[0]]
    ious = [1.0]
    traces: list = [None]
    for t in range(1, len(seq)):
        frame = seq.frame(t)
        centre = seq.box_px(t) if gt_centered else prev
        search, tf = crop(frame, centre, search_factor, ssize)
        crop_box, trace = model.predict(template, search, policy=policy, force_skip=force_skip)
        px = _clamp_box(tf.to_frame_px(crop_box), n)
        box = px_to_box(px, n)
        boxes.append(box)
        ious.append(box_iou(box, seq.boxes[t]))
        traces.append(trace)
        prev = px
    return TrackResult(boxes, np.asarray(ious), traces, seq.spec.difficulty)


def eval_metrics(results: Seq[TrackResult]) -> dict[str, float]:
    """AO, SR@0.5, SR@0.75, AUC of the success curve and mean executed blocks.

    Initialisation frames are excluded.  Success is strict (IoU > t); the AUC
    averages the success rate over t = 0.00, 0.05, ..., 1.00.
    """
    if not results:
        raise ValueError("no tracking results")
    ious = np.concatenate([r.ious[1:] for r in results])
    counts = np.concatenate([r.executed_counts() for r in results])
    return metrics_from_ious(ious, counts)


def metrics_from_ious(ious, executed_counts=None) -> dict[str, float]:
    ious = np.asarray(ious, dtype=np.float64)
    if ious.size == 0:
        raise ValueError("no frames to evaluate")
    success = np.array([(ious > t).mean() for t in SUCCESS_THRESHOLDS])
    counts = np.asarray(executed_counts if executed_counts is not None else [], dtype=np.float64)
    return {
        "ao": float(ious.mean()),
        "sr_0.5": float((ious > 0.5).mean()),
        "sr_0.75": float((ious > 0.75).mean()),
        "auc": float(success.mean()),
        "mean_executed_blocks": float(counts.mean()) if counts.size else float("nan"),
    }


def write_sequence_csv(seq: Sequence, result: TrackResult, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", "gt_x", "gt_y", "gt_w", "gt_h", "pred_x", "pred_y", "pred_w", "pred_h",
                         "iou", "executed_count"])
        for t, (box, iou, trace) in enumerate(zip(result.boxes, result.ious, result.traces)):
            gt = seq.boxes[t].as_array()
            count = "" if trace is None else int(trace.executed_count()[0])
            writer.writerow([t, *(f"{v:.6f}" for v in gt), *(f"{v:.6f}" for v in box.as_array()),
                             f"{iou:.6f}", count])


def write_summary(metrics: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")


def sample_training_pairs(sequences: Seq[Sequence], count: int, rng: np.random.Generator, *,
                          template_factor=2.0, search_factor=4.0, template_size=64, search_size=128,
                          center_jitter=3.0, scale_jitter=0.25):
    """Template/search crops with the search crop jittered around the ground truth.

    Returns ``(templates, searches, boxes, difficulties)`` where ``boxes`` are
    search-crop-normalised ``(x, y, w, h)``.
    """
    templates = np.empty((count, template_size, template_size, 3), np.float32)
    searches = np.empty((count, search_size, search_size, 3), np.float32)
    boxes = np.empty((count, 4), np.float64)
    hard = np.zeros(count, dtype=bool)
    for k in range(count):
        seq = sequences[int(rng.integers(len(sequences)))]
        i, j = (int(v) for v in rng.integers(len(seq), size=2))
        templates[k], _ = crop(seq.frame(i), seq.box_px(i), template_factor, template_size)
        gt = seq.box_px(j)
        scale = np.exp(rng.normal(0.0, scale_jitter, 2))
        ref_w, ref_h = gt[2] * scale[0], gt[3] * scale[1]
        shift = (rng.random(2) - 0.5) * np.sqrt(ref_w * ref_h) * center_jitter
        ref = np.array([gt[0] + shift[0], gt[1] + shift[1], ref_w, ref_h])
        searches[k], tf = crop(seq.frame(j), ref, search_factor, search_size)
        boxes[k] = tf.from_frame_px(gt)
        hard[k] = seq.spec.difficulty == "hard"
    return templates, searches, boxes, hard
