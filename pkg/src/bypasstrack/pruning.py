"""Dimension pruning: L1 on relaxed gates, per-layer binarisation, weight compaction."""

from __future__ import annotations

import math
from pathlib import Path
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Parameter, Tensor
from .backbone import PrunedViTLayer, check_popcount, layer_forward
from .flops import layer_flops, layer_params


class PruneConfigError(ValueError):
    pass


class PipelineError(RuntimeError):
    pass


@dataclass
class RelaxedDRState:
    """The relaxed gate vectors ``(dr1, dr2)`` of every layer, in layer order."""

    pairs: list[tuple[Parameter, Parameter]]

    @classmethod
    def attach(cls, layers: Sequence[PrunedViTLayer], init: float = 1.0) -> RelaxedDRState:
        for layer in layers:
            if layer.is_compact:
                raise PipelineError("cannot attach relaxed gates to a compacted layer")
            if layer.dr1 is None:
                layer.set_relaxed(init)
        return cls.of(layers)

    @classmethod
    def of(cls, layers: Sequence[PrunedViTLayer]) -> RelaxedDRState:
        pairs = [(layer.dr1, layer.dr2) for layer in layers]
        if any(a is None or b is None for a, b in pairs):
            raise PipelineError("every layer needs relaxed gates")
        return cls(pairs)

    def __len__(self) -> int:
        return len(self.pairs)


def _alphas(alpha, count: int) -> list[float]:
    if np.ndim(alpha) == 0:
        return [float(alpha)] * count
    alpha = [float(a) for a in alpha]
    if len(alpha) != count:
        raise PruneConfigError(f"{len(alpha)} alphas for {count} layers")
    return alpha


def reg_loss(state: RelaxedDRState, alpha) -> Tensor:
    """``sum_k alpha_k (||dr1_k||_1 + ||dr2_k||_1)``.

    ``alpha`` is a scalar, a per-layer sequence, or any object with an
    ``alpha`` attribute holding one of those.
    """
    if len(state) == 0:
        raise ContractError("no relaxed gates to regularise")
    alpha = getattr(alpha, "alpha", alpha)
    total = None
    for a, (d1, d2) in zip(_alphas(alpha, len(state)), state.pairs):
        term = (ad.apply_unary(d1, "abs").sum() + ad.apply_unary(d2, "abs").sum()) * a
        total = term if total is None else total + term
    return total


def d_star(d: int, mu: float, n_heads: int) -> int:
    """Kept-dimension count ``floor(d * mu / N_h) * N_h``."""
    # the epsilon absorbs binary rounding of products such as 0.29 * 100
    return int(math.floor(d * mu / n_heads + 1e-9)) * n_heads


def binarize_local(dhat, mu: float, n_heads: int) -> np.ndarray:
    """Keep the ``d*`` largest (signed) scores of one layer; ties go to the lower index."""
    dhat = np.asarray(dhat, dtype=np.float64)
    d = dhat.shape[0]
    if d % n_heads:
        raise PruneConfigError(f"head count {n_heads} does not divide d = {d}")
    if not np.all(np.isfinite(dhat)):
        raise PruneConfigError("importance scores must be finite")
    k = d_star(d, mu, n_heads)
    if k <= 0:
        raise PruneConfigError(f"mu = {mu} keeps no dimension of d = {d} with {n_heads} heads")
    order = np.argsort(-dhat, kind="stable")
    mask = np.zeros(d, dtype=bool)
    mask[order[:k]] = True
    return mask


def binarize_global(dhats: Sequence, mu: float, n_heads: int) -> list[np.ndarray]:
    """Single ranking across all layers (ablation baseline).

    The budget is ``L * d*`` dims.  Each layer's share is rounded down to a
    multiple of ``N_h``; a layer left with nothing is given its top ``N_h``
    dims, paid for by the currently largest layer.
    """
    scores = [np.asarray(v, dtype=np.float64) for v in dhats]
    d = scores[0].shape[0]
    if any(s.shape != (d,) for s in scores):
        raise PruneConfigError("all layers must share the dimension d")
    if d % n_heads:
        raise PruneConfigError(f"head count {n_heads} does not divide d = {d}")
    per_layer = d_star(d, mu, n_heads)
    if per_layer <= 0:
        raise PruneConfigError(f"mu = {mu} keeps no dimension of d = {d} with {n_heads} heads")
    n_layers = len(scores)
    budget = per_layer * n_layers
    flat = np.concatenate(scores)
    layer_of = np.repeat(np.arange(n_layers), d)
    index_of = np.tile(np.arange(d), n_layers)
    order = np.lexsort((layer_of, index_of, -flat))
    counts = np.bincount(layer_of[order[:budget]], minlength=n_layers)
    counts = (counts // n_heads) * n_heads
    for layer in np.flatnonzero(counts == 0):
        donor = int(np.argmax(counts))
        if counts[donor] <= n_heads:
            raise PruneConfigError("global ranking cannot keep a head-aligned dimension in every layer")
        counts[donor] -= n_heads
        counts[layer] = n_heads
    masks = []
    for s, c in zip(scores, counts):
        mask = np.zeros(d, dtype=bool)
        mask[np.argsort(-s, kind="stable")[:c]] = True
        masks.append(mask)
    return masks


def _copy_param(p: Tensor) -> Parameter:
    return Parameter(p.data.copy(), name=p.name)


def masked_copy(layer: PrunedViTLayer, masks) -> PrunedViTLayer:
    """Dense copy of ``layer`` with binary masks installed."""
    new = _clone(layer)
    new.set_masks(*masks)
    return new


def _clone(layer: PrunedViTLayer) -> PrunedViTLayer:
    new = PrunedViTLayer.__new__(PrunedViTLayer)
    new.dim, new.n_heads, new.mlp_layers = layer.dim, layer.n_heads, layer.mlp_layers
    for name in ("ln1_scale", "ln1_shift", "ln2_scale", "ln2_shift", "wq", "wk", "wv", "wo"):
        setattr(new, name, _copy_param(getattr(layer, name)))
    new.w_mlp = [_copy_param(w) for w in layer.w_mlp]
    new.dr1 = new.dr2 = None
    new.mask1 = new.mask2 = None
    new.kept1 = None if layer.kept1 is None else layer.kept1.copy()
    new.kept2 = None if layer.kept2 is None else layer.kept2.copy()
    return new


def compact(layer: PrunedViTLayer, masks) -> PrunedViTLayer:
    """Physically drop masked dimensions; the token dimension ``d`` is unchanged."""
    if layer.is_compact:
        raise ContractError("layer is already compact")
    m1 = np.asarray(masks[0], dtype=bool)
    m2 = np.asarray(masks[1], dtype=bool)
    for m in (m1, m2):
        if m.shape != (layer.dim,):
            raise ContractError(f"mask shape {m.shape} != ({layer.dim},)")
        check_popcount(m, layer.n_heads)
        if not m.any():
            raise ContractError("a mask keeps no dimension")
    kept1, kept2 = np.flatnonzero(m1), np.flatnonzero(m2)
    dh = layer.head_dim
    heads = np.unique(kept1 // dh)
    qk_cols = np.concatenate([np.arange(h * dh, (h + 1) * dh) for h in heads])
    new = _clone(layer)
    new.kept1, new.kept2 = kept1, kept2
    new.wq = Parameter(layer.wq.data[kept1][:, qk_cols].copy(), name=layer.wq.name)
    new.wk = Parameter(layer.wk.data[kept1][:, qk_cols].copy(), name=layer.wk.name)
    new.wv = Parameter(layer.wv.data[kept1][:, kept1].copy(), name=layer.wv.name)
    new.wo = Parameter(layer.wo.data[kept1].copy(), name=layer.wo.name)
    mlp = []
    for k, w in enumerate(layer.w_mlp):
        rows = w.data[kept2]
        mlp.append(Parameter((rows if k == layer.mlp_layers - 1 else rows[:, kept2]).copy(), name=w.name))
    new.w_mlp = mlp
    return new


def compact_shapes(dim: int, n_heads: int, mlp_layers: int, kept1, kept2) -> dict[str, tuple]:
    """Weight shapes of a compact layer, reconstructed from its kept index sets."""
    kept1, kept2 = np.asarray(kept1), np.asarray(kept2)
    dh = dim // n_heads
    width = len(np.unique(kept1 // dh)) * dh
    d1, d2 = len(kept1), len(kept2)
    shapes = {"wq": (d1, width), "wk": (d1, width), "wv": (d1, d1), "wo": (d1, dim)}
    for k in range(mlp_layers):
        shapes[f"w_mlp.{k}"] = (d2, dim) if k == mlp_layers - 1 else (d2, d2)
    return shapes


def equivalence_error(layer: PrunedViTLayer, masks, inputs: np.ndarray) -> float:
    """Max-abs gap between the masked-dense and compact forwards on ``inputs`` ``(B, n, d)``."""
    x = Tensor(inputs)
    dense = layer_forward(x, masked_copy(layer, masks)).data
    small = layer_forward(x, compact(layer, masks)).data
    return float(np.max(np.abs(dense.astype(np.float64) - small)))


@dataclass
class LayerPruneRecord:
    index: int
    kept1: list[int]
    kept2: list[int]
    params_before: int
    params_after: int
    flops_before: int
    flops_after: int
    equivalence: float = float("nan")


@dataclass
class PruneReport:
    records: list[LayerPruneRecord] = field(default_factory=list)

    def to_text(self) -> str:
        lines = ["# layer kept_d1 kept_d2 params_before params_after flops_before flops_after equivalence_max_abs"]
        for r in self.records:
            lines.append(
                f"layer={r.index} kept_d1={','.join(map(str, r.kept1))} kept_d2={','.join(map(str, r.kept2))} "
                f"params_before={r.params_before} params_after={r.params_after} "
                f"flops_before={r.flops_before} flops_after={r.flops_after} equivalence={r.equivalence:.3e}"
            )
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> PruneReport:
        records = []
        for line in text.splitlines():
            if not line.strip() or line.startswith("#"):
                continue
            fields_ = dict(item.split("=", 1) for item in line.split())
            records.append(LayerPruneRecord(
                index=int(fields_["layer"]),
                kept1=[int(v) for v in fields_["kept_d1"].split(",") if v],
                kept2=[int(v) for v in fields_["kept_d2"].split(",") if v],
                params_before=int(fields_["params_before"]),
                params_after=int(fields_["params_after"]),
                flops_before=int(fields_["flops_before"]),
                flops_after=int(fields_["flops_after"]),
                equivalence=float(fields_["equivalence"]),
            ))
        return cls(records)


EQUIVALENCE_TOL = 1e-5


def prune_layers(layers: list[PrunedViTLayer], mu: float, n_tokens: int, *, check_inputs: int = 200,
                 seed: int = 0) -> tuple[list[PrunedViTLayer], PruneReport]:
    """Binarise every layer's relaxed gates locally, compact, and verify equivalence.

    Raises ``PipelineError`` naming the first layer whose compact forward
    departs from the masked forward by more than ``EQUIVALENCE_TOL``.
    """
    state = RelaxedDRState.of(layers)
    rng = np.random.default_rng([seed, 19])
    report = PruneReport()
    out = []
    for i, (layer, (d1, d2)) in enumerate(zip(layers, state.pairs)):
        masks = (binarize_local(d1.data, mu, layer.n_heads), binarize_local(d2.data, mu, layer.n_heads))
        dense = _clone(layer)
        small = compact(dense, masks)
        err = float("nan")
        if check_inputs:
            inputs = rng.normal(size=(check_inputs, n_tokens, layer.dim)).astype(np.float32)
            err = equivalence_error(dense, masks, inputs)
            if not err < EQUIVALENCE_TOL:
                raise PipelineError(f"layer {i + 1}: compact/masked forward gap {err:.3e} exceeds {EQUIVALENCE_TOL}")
        report.records.append(LayerPruneRecord(
            index=i + 1,
            kept1=[int(v) for v in small.kept1],
            kept2=[int(v) for v in small.kept2],
            params_before=layer_params(dense),
            params_after=layer_params(small),
            flops_before=layer_flops(dense, n_tokens),
            flops_after=layer_flops(small, n_tokens),
            equivalence=err,
        ))
        out.append(small)
    return out, report


def prune_model(model, mu: float, *, seed: int = 0, check_inputs: int = 200) -> PruneReport:
    """reg-trained -> compacted: local binarisation and compaction of every layer."""
    from .model import PhaseError

    if model.phase != "reg-trained":
        raise PhaseError(f"pruning needs a reg-trained model, not {model.phase!r}")
    model.layers, report = prune_layers(model.layers, mu, model.embedder.num_positions,
                                        check_inputs=check_inputs, seed=seed)
    model.name_parameters()
    model.advance_phase("compacted")
    return report


def prune_pipeline(model, sequences, cfg, *, finetune_epochs: int | None = None, log_dir=None):
    """Train with the L1 gate penalty, compact, then fine-tune on the task loss.

    ``model`` must be dense and carry no BDMs.  Returns ``(model, report)``
    with the model in the ``compacted`` phase.
    """
    from .training import train_model, train_with_reg

    if model.has_bdms:
        raise PipelineError("prune before attaching bypass decision modules")
    train_with_reg(model, sequences, cfg, log_path=_log(log_dir, "metrics_reg.csv"))
    report = prune_model(model, cfg.prune.mu, seed=cfg.train.seed)
    if finetune_epochs is None or finetune_epochs > 0:
        train_model(model, sequences, cfg, objective="task", epochs=finetune_epochs,
                    log_path=_log(log_dir, "metrics_finetune.csv"))
    return model, report


def _log(log_dir, name):
    return None if log_dir is None else Path(log_dir) / name
