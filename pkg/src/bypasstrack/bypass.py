"""Bypass decision modules and the threshold gating policy."""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field
from typing import IO, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Parameter, Tensor
from .nn import Module, uniform


class Decision(enum.Enum):
    EXECUTE = "execute"
    SKIP = "skip"


class BypassDecisionModule(Module):
    """Linear probe on the bypass token followed by a sigmoid."""

    def __init__(self, dim: int, rng: np.random.Generator | None = None, init_bound: float = 1e-2):
        rng = rng or np.random.default_rng(0)
        self.weight = Parameter(uniform(rng, init_bound, (dim,)))
        self.bias = Parameter(np.zeros((), np.float32))

    @property
    def dim(self) -> int:
        return self.weight.shape[0]


@dataclass(frozen=True)
class GatingPolicy:
    rho: float = 0.5
    n_enf: int = 2

    def __post_init__(self):
        if not 0.0 <= self.rho <= 1.0:
            raise ContractError(f"rho must lie in [0, 1], got {self.rho}")
        if self.n_enf < 0:
            raise ContractError(f"n_enf must be >= 0, got {self.n_enf}")

    def validate_depth(self, depth: int) -> None:
        if not self.n_enf < depth:
            raise ContractError(f"n_enf={self.n_enf} leaves no gated layer in a {depth}-layer stack")


@dataclass
class BypassTrace:
    """Per-sample, per-layer bypass record for one forward pass.

    ``p`` is ``(B, N)`` with NaN for enforced (ungated) layers; ``executed``
    is ``(B, N)`` bool.  ``probs`` keeps the differentiable gated-layer
    probabilities in layer order so the sparsity loss can reach the BDMs.
    """

    p: np.ndarray
    executed: np.ndarray
    probs: list = field(default_factory=list)

    @classmethod
    def empty(cls, batch: int, depth: int) -> BypassTrace:
        return cls(np.full((batch, depth), np.nan), np.zeros((batch, depth), dtype=bool))

    def record(self, index: int, p: Tensor | None, execute: np.ndarray) -> None:
        self.executed[:, index] = execute
        if p is not None:
            self.p[:, index] = np.asarray(p.data, dtype=np.float64).reshape(-1)
            self.probs.append(p)

    @property
    def depth(self) -> int:
        return self.p.shape[1]

    @property
    def batch(self) -> int:
        return self.p.shape[0]

    def gated_mask(self) -> np.ndarray:
        return ~np.isnan(self.p[0]) if self.batch else np.zeros(0, dtype=bool)

    def sample(self, i: int) -> BypassTrace:
        return BypassTrace(self.p[i:i + 1].copy(), self.executed[i:i + 1].copy())

    def executed_count(self) -> np.ndarray:
        return self.executed.sum(axis=1)


def bypass_probability(bdm: BypassDecisionModule, bypass_token: Tensor) -> Tensor:
    """``sigmoid(w . b + bias)`` for a ``(d,)`` token or a ``(B, d)`` batch."""
    if bypass_token.shape[-1] != bdm.dim:
        raise ContractError(f"bypass token dim {bypass_token.shape[-1]} != BDM dim {bdm.dim}")
    out_shape = bypass_token.shape[:-1]
    if not ad.is_recording():
        # same arithmetic as below without building graph nodes; this runs once per gated layer
        logit = (bypass_token.data.reshape(-1, bdm.dim) @ bdm.weight.data.reshape(-1, 1)).reshape(out_shape)
        p, _ = ad._unary_forward(logit + bdm.bias.data, "sigmoid", ())
        return Tensor(p, dtype=bdm.weight.dtype)
    tok = ad.reshape(bypass_token, (-1, bdm.dim))
    logit = ad.reshape(tok @ ad.reshape(bdm.weight, (bdm.dim, 1)), out_shape) + bdm.bias
    return ad.apply_unary(logit, "sigmoid")


def decide(p: float, policy: GatingPolicy) -> Decision:
    """Skip iff ``p > rho``; ``p == rho`` executes."""
    return Decision.SKIP if p > policy.rho else Decision.EXECUTE


def skip_mask(p: np.ndarray, policy: GatingPolicy) -> np.ndarray:
    return np.asarray(p) > policy.rho


def make_gate(bdms: Sequence[BypassDecisionModule], policy: GatingPolicy, force_skip: Sequence[int] = ()):
    """Gate callback for ``backbone_forward``.

    Layers ``1..n_enf`` are not consulted.  ``force_skip`` lists 1-based layer
    numbers whose decision is overridden to skip (benchmarking only).
    """
    forced = set(force_skip)

    def gate(layer_number: int, seq):
        if layer_number <= policy.n_enf:
            return None, None
        bdm = bdms[layer_number - policy.n_enf - 1]
        p = bypass_probability(bdm, seq.bypass_token())
        skip = skip_mask(p.data, policy)
        if layer_number in forced:
            skip = np.ones_like(skip)
        return p, ~skip

    return gate


def gated_backbone(seq, layers, bdms, policy: GatingPolicy, mode: str = "infer", force_skip=()):
    from .backbone import backbone_forward

    policy.validate_depth(len(layers))
    if len(bdms) != len(layers) - policy.n_enf:
        raise ContractError(f"expected {len(layers) - policy.n_enf} BDMs, got {len(bdms)}")
    return backbone_forward(seq, layers, make_gate(bdms, policy, force_skip), mode=mode)


def trace_stats(trace: BypassTrace) -> tuple[float, float, float]:
    """``(mean_p over gated layers, executed_count, skipped_count)``, averaged over the batch."""
    if trace.depth == 0 or trace.batch == 0:
        raise ContractError("empty trace")
    gated = trace.p[:, trace.gated_mask()]
    mean_p = float(gated.mean()) if gated.size else float("nan")
    executed = float(trace.executed_count().mean())
    return mean_p, executed, trace.depth - executed


def write_trace_csv(rows: Sequence[tuple[int, BypassTrace]], fh: IO[str]) -> None:
    """One row per frame: frame_id, p_1..p_N (blank when enforced), executed bitmask, executed_count."""
    if not rows:
        return
    depth = rows[0][1].depth
    writer = csv.writer(fh)
    writer.writerow(["frame_id"] + [f"p_{i + 1}" for i in range(depth)] + ["executed", "executed_count"])
    for frame_id, trace in rows:
        p = trace.p[0]
        executed = trace.executed[0]
        cells = ["" if np.isnan(v) else f"{v:.6f}" for v in p]
        bits = "".join("1" if e else "0" for e in executed)
        writer.writerow([frame_id, *cells, bits, int(executed.sum())])
