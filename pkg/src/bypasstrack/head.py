"""Convolutional prediction head and bounding-box decoding.

Grid convention: cell ``(row, col)``; x indexes columns, y indexes rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Parameter, Tensor
from .nn import Module

# sigmoid(-2.19) ~= 0.1: score branch starts from a low foreground prior
SCORE_PRIOR_BIAS = -2.19


@dataclass(frozen=True)
class BBox:
    """Normalised centre-x, centre-y, width, height."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if self.w < 0 or self.h < 0:
            raise ContractError(f"negative box size ({self.w}, {self.h})")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.w, self.h], dtype=np.float64)

    def corners(self) -> tuple[float, float, float, float]:
        return (self.x - self.w / 2, self.y - self.h / 2, self.x + self.w / 2, self.y + self.h / 2)

    @classmethod
    def from_array(cls, a) -> BBox:
        a = np.asarray(a, dtype=np.float64).reshape(4)
        return cls(float(a[0]), float(a[1]), float(a[2]), float(a[3]))


class ConvBNReLU(Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator):
        bound = np.sqrt(6.0 / (9 * cin))
        self.weight = Parameter(rng.uniform(-bound, bound, (3, 3, cin, cout)).astype(np.float32))
        self.gamma = Parameter(np.ones(cout, np.float32))
        self.beta = Parameter(np.zeros(cout, np.float32))
        self.running_mean = np.zeros(cout, np.float32)
        self.running_var = np.ones(cout, np.float32)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        x = ad.conv2d(x, self.weight, padding=1)
        x = ad.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var, training)
        return ad.apply_unary(x, "relu")


class PredictionHead(Module):
    """Shared Conv-BN-ReLU trunk with score (1), offset (2) and size (2) sigmoid branches."""

    def __init__(self, in_dim: int, width: int = 64, stages: int = 4, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.in_dim = in_dim
        self.stages = [ConvBNReLU(in_dim if i == 0 else width, width, rng) for i in range(stages)]
        bound = 1.0 / np.sqrt(width)
        self.score_w = Parameter(rng.uniform(-bound, bound, (1, 1, width, 1)).astype(np.float32))
        self.score_b = Parameter(np.full(1, SCORE_PRIOR_BIAS, np.float32))
        self.offset_w = Parameter(rng.uniform(-bound, bound, (1, 1, width, 2)).astype(np.float32))
        self.offset_b = Parameter(np.zeros(2, np.float32))
        self.size_w = Parameter(rng.uniform(-bound, bound, (1, 1, width, 2)).astype(np.float32))
        self.size_b = Parameter(np.zeros(2, np.float32))
        self.training = False

    def bn_state(self) -> dict[str, np.ndarray]:
        state = {}
        for i, stage in enumerate(self.stages):
            state[f"stages.{i}.running_mean"] = stage.running_mean
            state[f"stages.{i}.running_var"] = stage.running_var
        return state


def head_forward(search_tokens: Tensor, head: PredictionHead) -> tuple[Tensor, Tensor, Tensor]:
    """Search tokens ``(B, G*G, d)`` -> score ``(B,G,G)``, offset ``(B,G,G,2)``, size ``(B,G,G,2)``."""
    if search_tokens.ndim == 2:
        search_tokens = ad.reshape(search_tokens, (1,) + search_tokens.shape)
    b, n, d = search_tokens.shape
    g = int(round(np.sqrt(n)))
    if g * g != n:
        raise ContractError(f"{n} search tokens do not form a square grid")
    x = ad.reshape(search_tokens, (b, g, g, d))
    for stage in head.stages:
        x = stage(x, head.training)
    score = ad.apply_unary(ad.conv2d(x, head.score_w, head.score_b), "sigmoid")
    offset = ad.apply_unary(ad.conv2d(x, head.offset_w, head.offset_b), "sigmoid")
    size = ad.apply_unary(ad.conv2d(x, head.size_w, head.size_b), "sigmoid")
    return ad.reshape(score, (b, g, g)), offset, size


def peak_cells(score: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row/col of the maximum per map; ties go to the lowest row, then lowest column."""
    score = np.asarray(score)
    if score.ndim == 2:
        score = score[None]
    b, g, w = score.shape
    flat = score.reshape(b, -1).argmax(axis=1)
    return flat // w, flat % w


def decode_boxes(score: np.ndarray, offset: np.ndarray, size: np.ndarray) -> np.ndarray:
    """Batched decode: ``(B, 4)`` array of normalised ``(x, y, w, h)``."""
    score, offset, size = np.asarray(score), np.asarray(offset), np.asarray(size)
    if score.ndim == 2:
        score, offset, size = score[None], offset[None], size[None]
    if offset.shape[:3] != score.shape or size.shape[:3] != score.shape:
        raise ContractError("score, offset and size maps must share their spatial extent")
    rows, cols = peak_cells(score)
    g_h, g_w = score.shape[1:]
    idx = np.arange(score.shape[0])
    o = offset[idx, rows, cols]
    s = size[idx, rows, cols]
    return np.stack([(cols + o[:, 0]) / g_w, (rows + o[:, 1]) / g_h, s[:, 0], s[:, 1]], axis=1).astype(np.float64)


def decode_bbox(score, offset, size) -> BBox:
    """Single-map decode at the highest-scoring cell."""
    return BBox.from_array(decode_boxes(score, offset, size)[0])


def decode_boxes_tensor(offset: Tensor, size: Tensor, rows: np.ndarray, cols: np.ndarray,
                        samples: np.ndarray | None = None) -> Tensor:
    """Differentiable boxes read from the offset/size maps at the given cells.

    ``samples`` picks the batch entry of each cell (default: one cell per entry).
    """
    b, g_h, g_w, _ = offset.shape
    idx = np.arange(b) if samples is None else np.asarray(samples)
    o = offset[idx, rows, cols]
    s = size[idx, rows, cols]
    base = np.stack([cols / g_w, rows / g_h], axis=1)
    scale = np.array([1.0 / g_w, 1.0 / g_h])
    centre = o * Tensor(scale, dtype=offset.dtype) + Tensor(base, dtype=offset.dtype)
    return ad.concat([centre, s], axis=1)
