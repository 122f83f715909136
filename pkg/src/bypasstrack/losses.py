"""Tracking losses and the adaptive block-sparsity term."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor
from .head import BBox

FOCAL_ALPHA = 2
FOCAL_BETA = 4
PROB_EPS = 1e-6


class TrainingError(ArithmeticError):
    """A loss term became non-finite."""


@dataclass(frozen=True)
class LossWeights:
    lambda_iou: float = 2.0
    lambda_l1: float = 5.0
    gamma: float = 5.0

    def __post_init__(self):
        for name in ("lambda_iou", "lambda_l1", "gamma"):
            if getattr(self, name) < 0:
                raise ContractError(f"{name} must be >= 0")


@dataclass(frozen=True)
class SparsityContext:
    tau0: float = 0.4
    zeta: float = 0.1
    batch_mean_iou_loss: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.tau0 <= 1.0:
            raise ContractError(f"tau0 must lie in [0, 1], got {self.tau0}")
        if self.zeta <= 0:
            raise ContractError(f"zeta must be > 0, got {self.zeta}")


def gaussian_target(grid: int, row: int, col: int, sigma: float | None = None) -> np.ndarray:
    """Heatmap with value 1 at ``(row, col)``; sigma defaults to ``max(1, grid / 16)`` cells."""
    if sigma is None:
        sigma = max(1.0, grid / 16)
    r = np.arange(grid)[:, None]
    c = np.arange(grid)[None, :]
    return np.exp(-((r - row) ** 2 + (c - col) ** 2) / (2.0 * sigma * sigma))


def focal_loss(pred: Tensor, target: np.ndarray, alpha: int = FOCAL_ALPHA, beta: int = FOCAL_BETA) -> Tensor:
    """Penalty-reduced focal loss, normalised by the positive count of each sample, batch-averaged.

    ``pred`` and ``target`` are ``(B, G, G)`` (or a single ``(G, G)`` map).
    """
    target = np.asarray(target, dtype=pred.dtype)
    if target.shape != pred.shape:
        raise ContractError(f"target {target.shape} vs prediction {pred.shape}")
    if pred.ndim == 2:
        pred = ad.reshape(pred, (1,) + pred.shape)
        target = target[None]
    p = ad.apply_unary(pred, "clip", PROB_EPS, 1.0 - PROB_EPS)
    pos = (target == 1).astype(pred.dtype)
    neg_weight = (1.0 - target) ** beta * (1.0 - pos)
    one_minus = 1.0 - p
    pos_term = _power(one_minus, alpha) * ad.log(p) * Tensor(pos, dtype=pred.dtype)
    neg_term = _power(p, alpha) * ad.log(one_minus) * Tensor(neg_weight, dtype=pred.dtype)
    axes = tuple(range(1, pred.ndim))
    per_sample = (pos_term + neg_term).sum(axis=axes)
    num_pos = np.maximum(pos.sum(axis=axes), 1.0)
    return (-(per_sample / Tensor(num_pos, dtype=pred.dtype))).mean()


def _power(t: Tensor, k: int) -> Tensor:
    out = t
    for _ in range(k - 1):
        out = out * t
    return out


def giou_loss_tensor(pred: Tensor, target) -> Tensor:
    """Per-sample ``1 - GIoU`` for ``(B, 4)`` centre-format boxes."""
    if not isinstance(target, Tensor):
        target = Tensor(np.asarray(target), dtype=pred.dtype)
    if pred.shape != target.shape or pred.shape[-1] != 4:
        raise ContractError(f"box shapes {pred.shape} vs {target.shape}")
    ax1, ay1, ax2, ay2 = _corners(pred)
    bx1, by1, bx2, by2 = _corners(target)
    iw = ad.apply_unary(ad.minimum(ax2, bx2) - ad.maximum(ax1, bx1), "relu")
    ih = ad.apply_unary(ad.minimum(ay2, by2) - ad.maximum(ay1, by1), "relu")
    inter = iw * ih
    area_a = pred[:, 2] * pred[:, 3]
    area_b = target[:, 2] * target[:, 3]
    union = area_a + area_b - inter
    cw = ad.maximum(ax2, bx2) - ad.minimum(ax1, bx1)
    ch = ad.maximum(ay2, by2) - ad.minimum(ay1, by1)
    enclose = cw * ch
    tiny = 1e-12
    iou = inter / ad.maximum(union, tiny)
    giou = iou - (enclose - union) / ad.maximum(enclose, tiny)
    return 1.0 - giou


def _corners(boxes: Tensor):
    x, y, w, h = boxes[:, 0], boxes[:, 1], boxes[:, 2], boxes[:, 3]
    hw, hh = w * 0.5, h * 0.5
    return x - hw, y - hh, x + hw, y + hh


def giou_loss(a: BBox, b: BBox) -> float:
    """``1 - GIoU`` of two boxes; two degenerate boxes give 1."""
    return giou_loss_tensor(Tensor(a.as_array()[None], dtype=np.float64), b.as_array()[None]).item()


def l1_loss_tensor(pred: Tensor, target) -> Tensor:
    """Per-sample mean absolute difference over the 4 box coordinates."""
    if not isinstance(target, Tensor):
        target = Tensor(np.asarray(target), dtype=pred.dtype)
    return ad.apply_unary(pred - target, "abs").mean(axis=-1)


def l1_loss(a: BBox, b: BBox) -> float:
    return l1_loss_tensor(Tensor(a.as_array()[None], dtype=np.float64), b.as_array()[None]).item()


def sparsity_target(iou_loss, ctx: SparsityContext) -> np.ndarray | float:
    """``clip(tau0 + zeta * (L_iou - mean L_iou), 0, 1)``; a constant, never differentiated."""
    if isinstance(iou_loss, Tensor):
        iou_loss = iou_loss.data
    tau = np.clip(ctx.tau0 + ctx.zeta * (np.asarray(iou_loss, dtype=np.float64) - ctx.batch_mean_iou_loss), 0.0, 1.0)
    return float(tau) if tau.ndim == 0 else tau


def sparsity_loss(probs: Sequence, tau, n_enf: int, depth: int) -> Tensor:
    """``|mean(p_{n_enf+1..N}) - tau|`` per sample, averaged over the batch.

    ``probs`` holds one entry per gated layer: a ``(B,)`` tensor, or a float
    for the unbatched case.
    """
    if len(probs) == 0:
        raise ContractError("sparsity loss needs at least one gated layer")
    if len(probs) != depth - n_enf:
        raise ContractError(f"expected {depth - n_enf} bypass probabilities, got {len(probs)}")
    cols = [p if isinstance(p, Tensor) else Tensor(np.atleast_1d(p)) for p in probs]
    cols = [ad.reshape(c, (-1, 1)) for c in cols]
    stacked = cols[0] if len(cols) == 1 else ad.concat(cols, axis=1)
    mean_p = stacked.mean(axis=1)
    tau_t = Tensor(np.broadcast_to(np.asarray(tau, dtype=np.float64), mean_p.shape), dtype=mean_p.dtype)
    return ad.apply_unary(mean_p - tau_t, "abs").mean()


def overall_loss(cls: Tensor, iou: Tensor, l1: Tensor, spar, w: LossWeights = LossWeights()) -> Tensor:
    """``L_cls + lambda_iou L_iou + lambda_l1 L_l1 + gamma L_spar``."""
    terms = {"cls": cls, "iou": iou, "l1": l1, "spar": spar}
    for name, term in terms.items():
        value = term.data if isinstance(term, Tensor) else np.asarray(term)
        if not np.all(np.isfinite(value)):
            raise TrainingError(f"loss term {name!r} is not finite")
    return cls + iou * w.lambda_iou + l1 * w.lambda_l1 + spar * w.gamma
