"""The full tracker network: embedder, ViT stack, optional BDMs, prediction head."""

from __future__ import annotations

import numpy as np

from .backbone import PatchEmbedder, PrunedViTLayer, backbone_forward, embed
from .bypass import BypassDecisionModule, GatingPolicy, gated_backbone
from .config import BypassConfig, ModelConfig
from .head import PredictionHead, decode_boxes, head_forward
from .nn import Module

PHASES = ("dense", "reg-trained", "compacted", "final")


class PhaseError(RuntimeError):
    """Pipeline stages were run out of order."""


class TrackerModel(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = np.random.default_rng([seed, 11])
        self.cfg = cfg
        self.embedder = PatchEmbedder(cfg.patch, cfg.channels, cfg.d, cfg.template_size, cfg.search_size, rng)
        self.layers = [PrunedViTLayer(cfg.d, cfg.n_heads, cfg.mlp_layers, rng) for _ in range(cfg.depth)]
        self.head = PredictionHead(cfg.d, cfg.head_width, cfg.head_stages, rng)
        self.bdms: list[BypassDecisionModule] = []
        self.policy: GatingPolicy | None = None
        self.phase = "dense"
        self.name_parameters()

    @property
    def has_bdms(self) -> bool:
        return bool(self.bdms)

    @property
    def grid(self) -> int:
        return self.cfg.search_size // self.cfg.patch

    def attach_bdms(self, bypass: BypassConfig | GatingPolicy, seed: int = 0) -> None:
        policy = bypass if isinstance(bypass, GatingPolicy) else GatingPolicy(bypass.rho, bypass.n_enf)
        policy.validate_depth(len(self.layers))
        rng = np.random.default_rng([seed, 13])
        self.policy = policy
        self.bdms = [BypassDecisionModule(self.cfg.d, rng) for _ in range(len(self.layers) - policy.n_enf)]
        self.name_parameters()

    def set_training(self, flag: bool) -> None:
        self.head.training = flag

    def forward(self, template, search, *, mode: str = "infer", policy: GatingPolicy | None = None,
                force_skip=()):
        """Returns ``((score, offset, size), trace)`` for a batch of image pairs."""
        seq = embed(template, search, self.embedder)
        if self.bdms:
            out, trace = gated_backbone(seq, self.layers, self.bdms, policy or self.policy, mode, force_skip)
        else:
            out, trace = backbone_forward(seq, self.layers, None, mode)
        return head_forward(out.search_tokens(), self.head), trace

    def predict(self, template, search, policy=None, force_skip=()):
        """Single-pair inference: crop-normalised box ``(x, y, w, h)`` and the bypass trace."""
        was = self.head.training
        self.head.training = False
        try:
            (score, offset, size), trace = self.forward(template, search, policy=policy, force_skip=force_skip)
        finally:
            self.head.training = was
        return decode_boxes(score.data, offset.data, size.data)[0], trace

    def buffers(self) -> dict[str, np.ndarray]:
        return {f"head.{k}": v for k, v in self.head.bn_state().items()}

    def advance_phase(self, new_phase: str) -> None:
        order = PHASES.index(self.phase)
        if new_phase not in PHASES or PHASES.index(new_phase) != order + 1:
            raise PhaseError(f"phase transition {self.phase} -> {new_phase} is not allowed")
        self.phase = new_phase
