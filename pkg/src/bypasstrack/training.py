"""Optimiser, batch loss assembly, the epoch loop and the build phases."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tape, Tensor
from .config import Config, desk_header
from .head import decode_boxes_tensor
from .losses import (
    LossWeights,
    SparsityContext,
    focal_loss,
    gaussian_target,
    giou_loss_tensor,
    l1_loss_tensor,
    overall_loss,
    sparsity_loss,
    sparsity_target,
)
from .model import PhaseError, TrackerModel
from .pruning import RelaxedDRState, reg_loss
from .tracker import sample_training_pairs

OBJECTIVES = ("task", "task+reg", "full")
METRIC_COLUMNS = ("epoch", "lr", "loss", "cls", "iou", "l1", "spar", "reg", "mean_p", "tau_mean", "spar_gap")


class AdamW:
    """Adam with weight decay applied directly to the weights, not through the gradient."""

    def __init__(self, params: Sequence[Parameter], lr: float, weight_decay: float = 0.0,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros(p.shape, np.float64) for p in self.params]
        self.v = [np.zeros(p.shape, np.float64) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad.astype(np.float64)
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            data = p.data.astype(np.float64)
            data -= self.lr * (self.weight_decay * data + update)
            p.data = data.astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def lr_at(cfg: Config, epoch: int) -> float:
    """Learning rate for 1-based ``epoch``: dropped by 10x after ``lr_drop_epoch``."""
    return cfg.train.lr * (0.1 if epoch > cfg.train.lr_drop_epoch else 1.0)


def gt_cells(boxes: np.ndarray, grid: int) -> tuple[np.ndarray, np.ndarray]:
    """Grid cell ``(row, col)`` containing each box centre, clamped into the map."""
    cols = np.clip(np.floor(boxes[:, 0] * grid), 0, grid - 1).astype(int)
    rows = np.clip(np.floor(boxes[:, 1] * grid), 0, grid - 1).astype(int)
    return rows, cols


BORDER_MARGIN = 0.25


def border_cells(boxes: np.ndarray, grid: int, margin: float = BORDER_MARGIN):
    """Neighbour cells that also get box supervision when a centre is near a cell border.

    A centre within ``margin`` cells of a border may win the score argmax on
    either side, so the adjacent cell (and the diagonal one near a corner) is
    trained too.  Returns ``(samples, rows, cols)``.
    """
    rows, cols = gt_cells(boxes, grid)
    fx = boxes[:, 0] * grid - cols
    fy = boxes[:, 1] * grid - rows
    dx = np.where(fx < margin, -1, np.where(fx > 1 - margin, 1, 0))
    dy = np.where(fy < margin, -1, np.where(fy > 1 - margin, 1, 0))
    out = []
    for i in range(len(boxes)):
        for sy, sx in ((0, dx[i]), (dy[i], 0), (dy[i], dx[i])):
            r, c = rows[i] + sy, cols[i] + sx
            if (sy or sx) and 0 <= r < grid and 0 <= c < grid and (i, r, c) not in out:
                out.append((i, r, c))
    if not out:
        return np.zeros(0, int), np.zeros(0, int), np.zeros(0, int)
    return tuple(np.array(v, dtype=int) for v in zip(*out))


@dataclass
class BatchStats:
    loss: float
    cls: float
    iou: float
    l1: float
    spar: float = 0.0
    reg: float = 0.0
    mean_p: float = float("nan")
    tau_mean: float = float("nan")


def batch_loss(model: TrackerModel, templates, searches, boxes, cfg: Config, objective: str = "task"):
    """Build the training loss for one batch; call inside an active ``Tape``.

    Box losses read the offset/size maps at the ground-truth cell and at
    neighbouring cells when the centre is near a border.  The sparsity target
    uses the ground-truth-cell GIoU loss and is held constant.
    """
    if objective not in OBJECTIVES:
        raise ValueError(f"unknown objective {objective!r}")
    (score, offset, size), trace = model.forward(templates, searches, mode="train")
    grid = score.shape[1]
    rows, cols = gt_cells(boxes, grid)
    target_map = np.stack([gaussian_target(grid, r, c) for r, c in zip(rows, cols)])
    cls = focal_loss(score, target_map)
    extra_s, extra_r, extra_c = border_cells(boxes, grid)
    samples = np.concatenate([np.arange(len(boxes)), extra_s])
    target = np.clip(boxes, 0.0, None)[samples]
    pred = decode_boxes_tensor(offset, size, np.concatenate([rows, extra_r]), np.concatenate([cols, extra_c]),
                               samples)
    giou = giou_loss_tensor(pred, target)
    iou = giou.mean()
    l1 = l1_loss_tensor(pred, target).mean()
    gt_giou = giou.data[:len(boxes)]
    stats = BatchStats(0.0, cls.item(), iou.item(), l1.item())
    spar: Tensor | float = Tensor(0.0, dtype=cls.dtype)
    weights = LossWeights(cfg.loss.lambda_iou, cfg.loss.lambda_l1, cfg.loss.gamma)
    if objective == "full":
        if not model.has_bdms:
            raise PhaseError("the full objective needs bypass decision modules")
        ctx = SparsityContext(cfg.bypass.tau0, cfg.bypass.zeta, float(gt_giou.mean()))
        tau = sparsity_target(gt_giou, ctx)
        spar = sparsity_loss(trace.probs, tau, model.policy.n_enf, len(model.layers))
        stats.spar = spar.item()
        stats.mean_p = float(np.nanmean(trace.p[:, trace.gated_mask()]))
        stats.tau_mean = float(np.mean(tau))
    else:
        weights = LossWeights(cfg.loss.lambda_iou, cfg.loss.lambda_l1, 0.0)
    total = overall_loss(cls, iou, l1, spar, weights)
    if objective == "task+reg":
        reg = reg_loss(RelaxedDRState.of(model.layers), cfg.prune.alpha)
        stats.reg = reg.item()
        total = total + reg
    stats.loss = total.item()
    return total, stats


@dataclass
class EpochStats:
    epoch: int
    lr: float
    batches: list[BatchStats] = field(default_factory=list)

    def mean(self, name: str) -> float:
        values = np.array([getattr(b, name) for b in self.batches], dtype=np.float64)
        if np.all(np.isnan(values)):
            return float("nan")
        return float(np.nanmean(values))

    @property
    def spar_gap(self) -> float:
        return abs(self.mean("mean_p") - self.mean("tau_mean"))

    def row(self) -> dict[str, str]:
        out = {"epoch": str(self.epoch), "lr": f"{self.lr:.6g}"}
        for name in ("loss", "cls", "iou", "l1", "spar", "reg", "mean_p", "tau_mean"):
            out[name] = f"{self.mean(name):.6f}"
        out["spar_gap"] = f"{self.spar_gap:.6f}"
        return out


def _phase_code(objective: str) -> int:
    return OBJECTIVES.index(objective) + 1


def train_model(model: TrackerModel, sequences, cfg: Config, *, objective: str = "task",
                epochs: int | None = None, log_path: str | Path | None = None,
                on_epoch: Callable[[EpochStats], None] | None = None) -> list[EpochStats]:
    """Run ``epochs`` epochs of AdamW on freshly sampled training pairs.

    Every epoch draws ``train.samples_per_epoch`` template/search pairs from
    ``sequences``.  Deterministic for a fixed ``train.seed``.
    """
    t, d = cfg.train, cfg.data
    epochs = t.epochs if epochs is None else epochs
    rng = np.random.default_rng([t.seed, 23, _phase_code(objective)])
    opt = AdamW(model.parameters(), t.lr, t.weight_decay)
    history: list[EpochStats] = []
    writer = fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        for line in desk_header(cfg):
            fh.write(line + "\n")
        fh.write(f"# objective {objective}, config hash {cfg.hash()}\n")
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        writer.writeheader()
    model.set_training(True)
    try:
        for epoch in range(1, epochs + 1):
            opt.lr = lr_at(cfg, epoch)
            stats = EpochStats(epoch, opt.lr)
            tz, sx, boxes, _ = sample_training_pairs(
                sequences, t.samples_per_epoch, rng,
                template_factor=d.template_factor, search_factor=d.search_factor,
                template_size=model.cfg.template_size, search_size=model.cfg.search_size)
            order = rng.permutation(t.samples_per_epoch)
            for start in range(0, len(order), t.batch):
                idx = order[start:start + t.batch]
                with Tape() as tape:
                    loss, bstats = batch_loss(model, tz[idx], sx[idx], boxes[idx], cfg, objective)
                    opt.zero_grad()
                    ad.backward(tape, loss)
                opt.step()
                stats.batches.append(bstats)
            history.append(stats)
            if writer is not None:
                writer.writerow(stats.row())
                fh.flush()
            if on_epoch is not None:
                on_epoch(stats)
    finally:
        model.set_training(False)
        if fh is not None:
            fh.close()
    return history


# ---- build phases -------------------------------------------------------------------------

def train_with_reg(model: TrackerModel, sequences, cfg: Config, **kw) -> list[EpochStats]:
    """dense -> reg-trained: task loss plus the L1 penalty on relaxed gates."""
    if model.phase != "dense":
        raise PhaseError(f"reg training starts from a dense model, not {model.phase!r}")
    if model.has_bdms:
        raise PhaseError("prune before attaching bypass decision modules")
    RelaxedDRState.attach(model.layers, cfg.prune.dr_init)
    model.name_parameters()
    history = train_model(model, sequences, cfg, objective="task+reg", **kw)
    model.advance_phase("reg-trained")
    return history


def finetune_with_bdms(model: TrackerModel, sequences, cfg: Config, **kw) -> list[EpochStats]:
    """compacted -> final: attach BDMs and train on the full objective."""
    if model.phase != "compacted":
        raise PhaseError(f"BDM fine-tuning needs a compacted model, not {model.phase!r}")
    if not model.has_bdms:
        model.attach_bdms(cfg.bypass, seed=cfg.train.seed)
    history = train_model(model, sequences, cfg, objective="full", **kw)
    model.advance_phase("final")
    return history


def training_sequences(cfg: Config, namespace: int | None = None):
    """The generated training set: ``data.num_sequences`` sequences, easy/hard by ``easy_fraction``."""
    from .tracker import TRAIN_NAMESPACE, SceneSpec, generate_sequence, sequence_seed

    ns = TRAIN_NAMESPACE if namespace is None else namespace
    d = cfg.data
    n_easy = int(round(d.num_sequences * d.easy_fraction))
    out = []
    for i in range(d.num_sequences):
        spec = SceneSpec.easy(d.frame_size) if i < n_easy else SceneSpec.hard(d.frame_size)
        out.append(generate_sequence(spec, d.sequence_length, sequence_seed(cfg.train.seed, ns, i)))
    return out


def build_tracker(cfg: Config, *, sequences=None, log_dir: str | Path | None = None,
                  on_epoch: Callable[[EpochStats], None] | None = None):
    """dense -> final in one call: reg training, pruning at ``prune.mu``, BDM fine-tuning.

    Returns ``(model, prune_report, reg_history, finetune_history)``.
    """
    from .pruning import prune_model

    if sequences is None:
        sequences = training_sequences(cfg)
    log = (lambda name: None) if log_dir is None else (lambda name: Path(log_dir) / name)
    model = TrackerModel(cfg.model, seed=cfg.train.seed)
    reg_history = train_with_reg(model, sequences, cfg, log_path=log("metrics_reg.csv"), on_epoch=on_epoch)
    report = prune_model(model, cfg.prune.mu, seed=cfg.train.seed)
    ft_history = finetune_with_bdms(model, sequences, cfg, log_path=log("metrics_finetune.csv"),
                                    on_epoch=on_epoch)
    return model, report, reg_history, ft_history
