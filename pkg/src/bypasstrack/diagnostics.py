"""Gradient checks of every loss term and of the full objective on a toy tracker."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter
from .config import Config
from .losses import focal_loss, gaussian_target, giou_loss_tensor, l1_loss_tensor, sparsity_loss
from .model import TrackerModel
from .pruning import RelaxedDRState, reg_loss

# relative error bounds: smooth terms, and terms whose path crosses max/min/abs kinks
SMOOTH_TOL = 1e-4
KINK_TOL = 1e-3


def toy_config(seed: int = 0) -> Config:
    """Two gated-capable layers at d = 8 with a 4x4 score map."""
    return Config().with_updates(**{
        "model.d": 8, "model.depth": 2, "model.n_heads": 2, "model.mlp_layers": 2, "model.patch": 4,
        "model.template_size": 8, "model.search_size": 16, "model.head_width": 4, "model.head_stages": 2,
        "bypass.n_enf": 1, "bypass.rho": 0.99, "train.seed": seed, "train.batch": 3,
    })


def _term_checks(rng: np.random.Generator) -> dict[str, tuple[float, float]]:
    out = {}
    logits = Parameter(rng.normal(size=(2, 4, 4)))
    target = np.stack([gaussian_target(4, 1, 2), gaussian_target(4, 3, 0)])
    score = lambda: focal_loss(ad.apply_unary(logits, "sigmoid"), target)
    out["focal"] = (ad.grad_check(score, [logits], step=1e-5), SMOOTH_TOL)

    # partially overlapping boxes with distinct edges: no min/max tie, no zero gradient
    pred = Parameter(np.array([[0.50, 0.50, 0.30, 0.20], [0.40, 0.55, 0.25, 0.35]]))
    gt = np.array([[0.60, 0.46, 0.22, 0.27], [0.45, 0.50, 0.30, 0.30]])
    out["giou"] = (ad.grad_check(lambda: giou_loss_tensor(pred, gt).mean(), [pred], step=1e-5), SMOOTH_TOL)
    out["l1"] = (ad.grad_check(lambda: l1_loss_tensor(pred, gt).mean(), [pred], step=1e-6), SMOOTH_TOL)

    probs = [Parameter(rng.uniform(0.05, 0.95, size=3)) for _ in range(4)]
    tau = np.array([0.1, 0.9, 0.35])
    spar = lambda: sparsity_loss([ad.apply_unary(p, "sigmoid") for p in probs], tau, 2, 6)
    out["spar"] = (ad.grad_check(spar, probs, step=1e-6), SMOOTH_TOL)

    cfg = toy_config()
    model = TrackerModel(cfg.model, seed=0)
    state = RelaxedDRState.attach(model.layers, 1.0)
    for layer in model.layers:
        for g in (layer.dr1, layer.dr2):
            g.data = rng.uniform(0.2, 1.0, size=g.shape) * rng.choice([-1.0, 1.0], size=g.shape)
    gates = [g for pair in state.pairs for g in pair]
    out["reg"] = (ad.grad_check(lambda: reg_loss(state, 0.5), gates, step=1e-6), SMOOTH_TOL)
    return out


def _end_to_end(seed: int) -> float:
    """Full objective (task terms plus sparsity) through the toy model's every parameter."""
    from .training import batch_loss

    cfg = toy_config(seed)
    rng = np.random.default_rng([seed, 41])
    model = TrackerModel(cfg.model, seed=seed)
    model.attach_bdms(cfg.bypass, seed=seed)
    m = cfg.model
    z = rng.random((3, m.template_size, m.template_size, m.channels))
    x = rng.random((3, m.search_size, m.search_size, m.channels))
    boxes = np.array([[0.40, 0.55, 0.30, 0.25], [0.62, 0.35, 0.20, 0.30], [0.48, 0.47, 0.35, 0.28]])
    model.set_training(True)
    try:
        return ad.grad_check(lambda: batch_loss(model, z, x, boxes, cfg, "full")[0],
                             model.parameters(), step=1e-5)
    finally:
        model.set_training(False)


def gradcheck_suite(seed: int = 0) -> dict[str, tuple[float, float]]:
    """``name -> (max relative error, bound)`` for each loss term and the full objective."""
    rng = np.random.default_rng([seed, 43])
    with ad.default_dtype(np.float64):
        results = _term_checks(rng)
        results["overall"] = (_end_to_end(seed), KINK_TOL)
    return results


def all_pass(results: dict[str, tuple[float, float]]) -> bool:
    return all(err < tol for err, tol in results.values())


__all__ = ["gradcheck_suite", "all_pass", "toy_config", "SMOOTH_TOL", "KINK_TOL"]
