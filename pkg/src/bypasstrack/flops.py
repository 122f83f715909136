"""Closed-form multiply-accumulate counts.

FLOPs are reported as ``2 * MACs`` over matrix products only: patch
projection, Q/K/V/output projections, the two attention products, MLP
layers, BDM dot products and head convolutions.  Normalisation, softmax,
activations and residual adds are not counted.

Per layer with ``n`` tokens, ``d1 = |kept1|`` over ``H`` surviving heads of
width ``d_h``, ``d2 = |kept2|`` and ``N_l`` MLP layers::

    Q, K        2 * n * d1 * (H * d_h)
    V           n * d1 * d1
    Q K^T       H * n^2 * d_h
    A V         n^2 * d1
    output      n * d1 * d
    MLP         (N_l - 1) * n * d2^2 + n * d2 * d      (N_l >= 2)
                n * d2 * d                             (N_l == 1)

A dense or masked-dense layer uses ``d1 = d2 = d`` and ``H = N_h``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def layer_dims(layer) -> tuple[int, int, int]:
    """``(d1, active_heads, d2)`` of the computation the layer actually performs."""
    if layer.is_compact:
        return len(layer.kept1), len(layer.active_heads()), len(layer.kept2)
    return layer.dim, layer.n_heads, layer.dim


def layer_macs(layer, n_tokens: int) -> int:
    d, dh, nl = layer.dim, layer.head_dim, layer.mlp_layers
    d1, heads, d2 = layer_dims(layer)
    n = n_tokens
    qk = 2 * n * d1 * heads * dh
    v = n * d1 * d1
    scores = heads * n * n * dh
    av = n * n * d1
    out = n * d1 * d
    mlp = (nl - 1) * n * d2 * d2 + n * d2 * d
    return qk + v + scores + av + out + mlp


def layer_flops(layer, n_tokens: int) -> int:
    return 2 * layer_macs(layer, n_tokens)


def layer_params(layer) -> int:
    return sum(p.size for p in layer.parameters())


def embed_macs(embedder) -> int:
    return (embedder.n_z + embedder.n_x) * embedder.proj.shape[0] * embedder.proj.shape[1]


def head_macs(head, grid: int) -> int:
    cells = grid * grid
    total = sum(cells * int(np.prod(stage.weight.shape)) for stage in head.stages)
    for w in (head.score_w, head.offset_w, head.size_w):
        total += cells * int(np.prod(w.shape))
    return total


def bdm_macs(dim: int) -> int:
    return dim


@dataclass
class FlopsReport:
    embed: int
    layers: list[int]
    head: int
    bdm: int
    n_enf: int
    params: int
    gated: list[bool] = field(default_factory=list)

    @property
    def max_flops(self) -> int:
        """No gated layer bypassed."""
        return self.embed + sum(self.layers) + self.head + self.bdm

    @property
    def min_flops(self) -> int:
        """Every gated layer bypassed: embedder, the enforced prefix, BDMs and head."""
        prefix = sum(f for f, g in zip(self.layers, self.gated) if not g) if self.gated else sum(self.layers)
        return self.embed + prefix + self.head + self.bdm

    def to_text(self) -> str:
        lines = [f"embed_flops {self.embed}"]
        lines += [f"layer_{i + 1}_flops {f}{'' if not self.gated or not self.gated[i] else ' gated'}"
                  for i, f in enumerate(self.layers)]
        lines += [
            f"bdm_flops {self.bdm}",
            f"head_flops {self.head}",
            f"params {self.params}",
            f"flops_range_g {self.min_flops / 1e9:.4f}-{self.max_flops / 1e9:.4f}  (min: all gated layers bypassed, max: none bypassed)",
        ]
        return "\n".join(lines) + "\n"


def model_flops(model) -> FlopsReport:
    n = model.embedder.num_positions
    layers = [layer_flops(layer, n) for layer in model.layers]
    if model.bdms:
        gated = [i >= model.policy.n_enf for i in range(len(model.layers))]
        n_enf = model.policy.n_enf
    else:
        gated = [False] * len(model.layers)
        n_enf = len(model.layers)
    bdm = 2 * bdm_macs(model.cfg.d) * len(model.bdms)
    return FlopsReport(
        embed=2 * embed_macs(model.embedder),
        layers=layers,
        head=2 * head_macs(model.head, model.grid),
        bdm=bdm,
        n_enf=n_enf,
        params=model.num_parameters(),
        gated=gated,
    )
