"""Patch embedding and pruning-enabled ViT layers over a template+search+bypass sequence.

A layer can be in one of four states:

* dense     - no dimension masks;
* relaxed   - real-valued per-dimension gates ``dr1``/``dr2`` trained with L1;
* masked    - binary masks ``mask1``/``mask2`` applied to a dense layer;
* compact   - weights physically reduced to the kept dimensions ``kept1``/``kept2``.

``mask1`` gates the token dims entering Q/K/V and the concatenated head
dims entering the output projection.  ``mask2`` gates the input dims of
every MLP linear layer.  Each gate is applied exactly once per interface.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Parameter, Tensor
from .bypass import BypassTrace
from .nn import Module, uniform, xavier_uniform


class ConfigurationError(ValueError):
    """Model geometry is inconsistent."""


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """``(B, H, W, C)`` -> ``(B, (H/P)*(W/P), P*P*C)``, row-major over the patch grid."""
    b, h, w, c = images.shape
    if h % patch or w % patch:
        raise ConfigurationError(f"image {h}x{w} not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    x = images.reshape(b, gh, patch, gw, patch, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, gh * gw, patch * patch * c)


@dataclass
class TokenSequence:
    tokens: Tensor  # (B, n_z + n_x + 1, d)
    n_z: int
    n_x: int

    @property
    def bypass_index(self) -> int:
        return self.n_z + self.n_x

    @property
    def num_tokens(self) -> int:
        return self.tokens.shape[-2]

    def bypass_token(self) -> Tensor:
        return self.tokens[:, self.bypass_index, :]

    def search_tokens(self) -> Tensor:
        return self.tokens[:, self.n_z:self.n_z + self.n_x, :]

    def with_tokens(self, tokens: Tensor) -> TokenSequence:
        return TokenSequence(tokens, self.n_z, self.n_x)


class PatchEmbedder(Module):
    def __init__(self, patch: int, channels: int, dim: int, template_size: int, search_size: int,
                 rng: np.random.Generator):
        for size in (template_size, search_size):
            if size % patch:
                raise ConfigurationError(f"image size {size} not divisible by patch size {patch}")
        self.patch = patch
        self.channels = channels
        self.dim = dim
        self.n_z = (template_size // patch) ** 2
        self.n_x = (search_size // patch) ** 2
        fan_in = patch * patch * channels
        self.proj = Parameter(uniform(rng, 1.0 / np.sqrt(fan_in), (fan_in, dim)))
        self.proj_bias = Parameter(np.zeros(dim, np.float32))
        self.pos_template = Parameter(np.zeros((self.n_z, dim), np.float32))
        self.pos_search = Parameter(np.zeros((self.n_x, dim), np.float32))
        self.pos_bypass = Parameter(np.zeros(dim, np.float32))
        self.bypass_embed = Parameter(rng.normal(0.0, 0.02, dim).astype(np.float32))

    @property
    def num_positions(self) -> int:
        return self.n_z + self.n_x + 1


def embed(template_img, search_img, emb: PatchEmbedder) -> TokenSequence:
    """Project patches of both images and append the bypass token last.

    Images are ``(B, H, W, C)`` arrays (a single ``(H, W, C)`` image is
    promoted to a batch of one).
    """
    z = np.asarray(template_img, dtype=ad.get_default_dtype())
    x = np.asarray(search_img, dtype=ad.get_default_dtype())
    if z.ndim == 3:
        z, x = z[None], x[None]
    pz, px = patchify(z, emb.patch), patchify(x, emb.patch)
    if pz.shape[1] != emb.n_z or px.shape[1] != emb.n_x:
        raise ConfigurationError(
            f"got {pz.shape[1]} template / {px.shape[1]} search patches, "
            f"embedder expects {emb.n_z} / {emb.n_x}"
        )
    if pz.shape[-1] != emb.proj.shape[0]:
        raise ConfigurationError(f"patch vector length {pz.shape[-1]} != {emb.proj.shape[0]}")
    batch = z.shape[0]
    tz = Tensor(pz) @ emb.proj + emb.proj_bias + emb.pos_template
    tx = Tensor(px) @ emb.proj + emb.proj_bias + emb.pos_search
    tb = ad.broadcast_to(emb.bypass_embed + emb.pos_bypass, (batch, 1, emb.dim))
    return TokenSequence(ad.concat([tz, tx, tb], axis=1), emb.n_z, emb.n_x)


class PrunedViTLayer(Module):
    def __init__(self, dim: int, n_heads: int, mlp_layers: int = 2, rng: np.random.Generator | None = None):
        if dim % n_heads:
            raise ConfigurationError(f"head count {n_heads} does not divide dim {dim}")
        if mlp_layers < 1:
            raise ConfigurationError("mlp_layers must be >= 1")
        rng = rng or np.random.default_rng(0)
        self.dim = dim
        self.n_heads = n_heads
        self.mlp_layers = mlp_layers
        self.ln1_scale = Parameter(np.ones(dim, np.float32))
        self.ln1_shift = Parameter(np.zeros(dim, np.float32))
        self.ln2_scale = Parameter(np.ones(dim, np.float32))
        self.ln2_shift = Parameter(np.zeros(dim, np.float32))
        # column block i of wq/wk/wv is head i's d x d/N_h projection
        self.wq = Parameter(xavier_uniform(rng, dim, dim))
        self.wk = Parameter(xavier_uniform(rng, dim, dim))
        self.wv = Parameter(xavier_uniform(rng, dim, dim))
        self.wo = Parameter(xavier_uniform(rng, dim, dim))
        self.w_mlp = [Parameter(xavier_uniform(rng, dim, dim)) for _ in range(mlp_layers)]
        self.dr1: Parameter | None = None
        self.dr2: Parameter | None = None
        self.mask1: np.ndarray | None = None
        self.mask2: np.ndarray | None = None
        self.kept1: np.ndarray | None = None
        self.kept2: np.ndarray | None = None

    @property
    def head_dim(self) -> int:
        return self.dim // self.n_heads

    @property
    def is_compact(self) -> bool:
        return self.kept1 is not None

    def activation(self, k: int) -> str:
        """phi_k for 0-based MLP layer k: gelu everywhere except the last layer."""
        return "identity" if k == self.mlp_layers - 1 else "gelu"

    def set_relaxed(self, init: float = 1.0) -> None:
        self.mask1 = self.mask2 = None
        self.dr1 = Parameter(np.full(self.dim, init, np.float32))
        self.dr2 = Parameter(np.full(self.dim, init, np.float32))

    def clear_relaxed(self) -> None:
        self.dr1 = self.dr2 = None

    def set_masks(self, mask1, mask2) -> None:
        m1 = np.asarray(mask1, dtype=bool)
        m2 = np.asarray(mask2, dtype=bool)
        for m in (m1, m2):
            if m.shape != (self.dim,):
                raise ContractError(f"mask shape {m.shape} != ({self.dim},)")
            check_popcount(m, self.n_heads)
        self.dr1 = self.dr2 = None
        self.mask1, self.mask2 = m1, m2

    def _gate(self, which: int) -> Tensor | None:
        relaxed = self.dr1 if which == 1 else self.dr2
        if relaxed is not None:
            return relaxed
        mask = self.mask1 if which == 1 else self.mask2
        if mask is None:
            return None
        check_popcount(mask, self.n_heads)
        return Tensor(mask, dtype=self.wq.dtype)

    # compact-layout bookkeeping
    def active_heads(self) -> list[int]:
        heads = np.unique(self.kept1 // self.head_dim)
        return [int(h) for h in heads]


def check_popcount(mask: np.ndarray, n_heads: int) -> None:
    count = int(np.count_nonzero(mask))
    if count % n_heads:
        raise ContractError(f"mask popcount {count} is not divisible by the head count {n_heads}")


def _as_batch(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return ad.reshape(x, (1,) + x.shape), True
    return x, False


def _split_heads(t: Tensor, n_heads: int) -> Tensor:
    b, n, w = t.shape
    return ad.transpose(ad.reshape(t, (b, n, n_heads, w // n_heads)), (0, 2, 1, 3))


def checked_msa(x: Tensor, layer: PrunedViTLayer) -> Tensor:
    """Multi-head self-attention with dimension gate ``mask1`` (or its compact form)."""
    x, squeeze = _as_batch(x)
    if x.shape[-1] != layer.dim:
        raise ad.ShapeError(f"token dim {x.shape[-1]} != layer dim {layer.dim}")
    out = _compact_msa(x, layer) if layer.is_compact else _dense_msa(x, layer)
    return ad.reshape(out, out.shape[1:]) if squeeze else out


def _dense_msa(x: Tensor, layer: PrunedViTLayer) -> Tensor:
    b, n, d = x.shape
    gate = layer._gate(1)
    xt = x * gate if gate is not None else x
    # the 1/sqrt(d_h) scale is applied to Q, which is smaller than the score matrix
    q = _split_heads((xt @ layer.wq) * (1.0 / np.sqrt(layer.head_dim)), layer.n_heads)
    k = _split_heads(xt @ layer.wk, layer.n_heads)
    v = _split_heads(xt @ layer.wv, layer.n_heads)
    heads = ad.softmax_rows(q @ ad.swap_last(k)) @ v
    concat = ad.reshape(ad.transpose(heads, (0, 2, 1, 3)), (b, n, d))
    if gate is not None:
        concat = concat * gate
    return concat @ layer.wo


def _compact_plan(layer: PrunedViTLayer) -> dict:
    """Index bookkeeping for the compact attention, computed once per layer.

    V columns are regrouped into equal-width per-head slots of width ``cmax``;
    slots beyond a head's kept count read an arbitrary column and are zeroed.
    """
    plan = getattr(layer, "_plan", None)
    if plan is not None and plan["kept1"] is layer.kept1:
        return plan
    dh = layer.head_dim
    heads = layer.active_heads()
    head_of = layer.kept1 // dh
    groups = [np.flatnonzero(head_of == h) for h in heads]
    cmax = max(len(g) for g in groups)
    idx = np.zeros((len(heads), cmax), dtype=np.intp)
    valid = np.zeros((len(heads), cmax), dtype=bool)
    for i, g in enumerate(groups):
        idx[i, :len(g)] = g
        valid[i, :len(g)] = True
    plan = {
        "kept1": layer.kept1,
        "n_active": len(heads),
        "cmax": cmax,
        "padded": not valid.all(),
        "idx": idx.reshape(-1),
        "valid": valid.reshape(-1),
    }
    layer._plan = plan
    return plan


def _padded_weights(layer: PrunedViTLayer, plan: dict) -> tuple[Tensor, Tensor]:
    """``W_V`` with columns and ``W_O`` with rows regrouped into the padded head slots.

    Without an active tape the result is cached until the weights change.
    """
    recording = ad.is_recording()
    cache = plan.get("weights")
    if not recording and cache is not None and cache[0] is layer.wv.data and cache[1] is layer.wo.data:
        return cache[2], cache[3]
    wv = layer.wv[:, plan["idx"]] * Tensor(plan["valid"], dtype=layer.wv.dtype)
    wo = layer.wo[plan["idx"]]
    if not recording:
        plan["weights"] = (layer.wv.data, layer.wo.data, wv, wo)
    return wv, wo


def _compact_msa(x: Tensor, layer: PrunedViTLayer) -> Tensor:
    return _compact_msa_kept(x[..., layer.kept1], layer)


def _compact_msa_kept(xt: Tensor, layer: PrunedViTLayer) -> Tensor:
    """Compact attention on tokens already reduced to the ``kept1`` columns."""
    b, n, _ = xt.shape
    dh = layer.head_dim
    plan = _compact_plan(layer)
    h, cmax = plan["n_active"], plan["cmax"]
    wv, wo = _padded_weights(layer, plan) if plan["padded"] else (layer.wv, layer.wo)
    q = _split_heads((xt @ layer.wq) * (1.0 / np.sqrt(dh)), h)
    k = _split_heads(xt @ layer.wk, h)
    attn = ad.softmax_rows(q @ ad.swap_last(k))
    heads = attn @ _split_heads(xt @ wv, h)
    concat = ad.reshape(ad.transpose(heads, (0, 2, 1, 3)), (b, n, h * cmax))
    return concat @ wo


def checked_mlp(y: Tensor, layer: PrunedViTLayer) -> Tensor:
    """Chained ``phi_k(. W_k)`` with every layer's input dims gated by ``mask2``."""
    y, squeeze = _as_batch(y)
    if y.shape[-1] != layer.dim:
        raise ad.ShapeError(f"token dim {y.shape[-1]} != layer dim {layer.dim}")
    if layer.is_compact:
        h = _compact_mlp_kept(y[..., layer.kept2], layer)
    else:
        gate = layer._gate(2)
        h = y
        for k, w in enumerate(layer.w_mlp):
            if gate is not None:
                h = h * gate
            h = ad.apply_unary(h @ w, layer.activation(k))
    return ad.reshape(h, h.shape[1:]) if squeeze else h


def _compact_mlp_kept(h: Tensor, layer: PrunedViTLayer) -> Tensor:
    for k, w in enumerate(layer.w_mlp):
        h = ad.apply_unary(h @ w, layer.activation(k))
    return h


def layer_forward(x: Tensor, layer: PrunedViTLayer) -> Tensor:
    """Pre-norm residual block: ``Y = MSA(LN(X)) + X``, ``Z = MLP(LN(Y)) + Y``."""
    if layer.is_compact and x.ndim == 3 and x.shape[-1] == layer.dim:
        # a compact block reads only kept columns, so the norm emits just those
        xt = ad.layer_norm(x, layer.ln1_scale, layer.ln1_shift, columns=layer.kept1)
        y = _compact_msa_kept(xt, layer) + x
        h = ad.layer_norm(y, layer.ln2_scale, layer.ln2_shift, columns=layer.kept2)
        return _compact_mlp_kept(h, layer) + y
    y = checked_msa(ad.layer_norm(x, layer.ln1_scale, layer.ln1_shift), layer) + x
    return checked_mlp(ad.layer_norm(y, layer.ln2_scale, layer.ln2_shift), layer) + y


# gate(layer_number, sequence) -> (p or None, execute mask of shape (B,)); layer_number is 1-based
Gate = Callable[[int, TokenSequence], "tuple[Tensor | None, np.ndarray]"]


def backbone_forward(
    seq: TokenSequence,
    layers: list[PrunedViTLayer],
    gate: Gate | None = None,
    mode: str = "infer",
) -> tuple[TokenSequence, BypassTrace]:
    """Run the stack, consulting ``gate`` before each layer.

    In ``infer`` mode skipped samples are never computed.  In ``train`` mode
    the block runs on the whole batch and the per-sample decision selects
    between its output and the identity.
    """
    if mode not in ("infer", "train"):
        raise ContractError(f"unknown mode {mode!r}")
    batch = seq.tokens.shape[0]
    trace = BypassTrace.empty(batch, len(layers))
    tokens = seq.tokens
    for i, layer in enumerate(layers):
        p, execute = (None, None) if gate is None else gate(i + 1, seq.with_tokens(tokens))
        if execute is None:
            execute = np.ones(batch, dtype=bool)
        execute = np.asarray(execute, dtype=bool).reshape(batch)
        trace.record(i, p, execute)
        if execute.all():
            tokens = layer_forward(tokens, layer)
        elif not execute.any():
            continue
        elif mode == "train":
            tokens = ad.where_batch(execute, layer_forward(tokens, layer), tokens)
        else:
            rows = np.flatnonzero(execute)
            tokens = ad.scatter_rows(tokens, rows, layer_forward(tokens[rows], layer))
    return seq.with_tokens(tokens), trace
