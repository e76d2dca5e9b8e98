"""Minimal transformer encoders for patch grids and token sequences.

Pre-norm residual blocks: z' = z + SA(LN(z)), z_out = z' + MLP(LN(z')).
Self-attention splits the model dim into heads; post-softmax attention
probabilities are recorded per layer and head so downstream modules can
consume them.  All stack weights are frozen; low-rank adapters, when
supplied, wrap the Q/K/V projections.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .lora import LoraAdapter, lora_forward


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int
    num_heads: int
    model_dim: int
    mlp_hidden: int
    side: int | None = None       # image: patches per side, N = side**2
    patch_dim: int | None = None
    vocab_size: int | None = None  # text
    max_len: int | None = None
    activation: str = "gelu"      # "gelu" or "leaky_relu"
    leaky_slope: float = 0.2

    def __post_init__(self):
        if self.model_dim % self.num_heads != 0:
            raise ValueError(
                f"model_dim {self.model_dim} not divisible by heads {self.num_heads}"
            )
        is_image = self.side is not None
        is_text = self.vocab_size is not None
        if is_image == is_text:
            raise ValueError("config must be image (side) or text (vocab_size), not both")
        if is_image and (self.patch_dim is None or self.side < 1):
            raise ValueError("image config needs side >= 1 and patch_dim")
        if is_text and (self.max_len is None or self.max_len < 1):
            raise ValueError("text config needs max_len >= 1")
        if self.activation not in ("gelu", "leaky_relu"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def kind(self) -> str:
        return "image" if self.side is not None else "text"

    @property
    def num_positions(self) -> int:
        if self.side is not None:
            return self.side * self.side + 1
        return self.max_len + 1


@dataclass
class LayerWeights:
    ln1_g: Tensor
    ln1_b: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class EncoderStack:
    """Frozen weights for one modality; immutable and shareable after build."""

    config: EncoderConfig
    token_embed: Tensor  # (patch_dim, d) projection or (V, d) embedding table
    cls_embed: Tensor    # (1, d)
    pos_embed: Tensor    # (num_positions, d)
    layers: list[LayerWeights] = field(default_factory=list)

    @classmethod
    def build(cls, config: EncoderConfig, seed) -> "EncoderStack":
        rng = np.random.default_rng(seed)
        d = config.model_dim
        h = config.mlp_hidden

        def frozen(shape, std):
            return Tensor(rng.normal(0.0, std, size=shape))

        if config.kind == "image":
            token_embed = frozen((config.patch_dim, d), 1.0 / math.sqrt(config.patch_dim))
        else:
            token_embed = frozen((config.vocab_size, d), 0.5)
        stack = cls(
            config=config,
            token_embed=token_embed,
            cls_embed=frozen((1, d), 0.5),
            pos_embed=frozen((config.num_positions, d), 0.1),
        )
        proj_std = 1.0 / math.sqrt(d)

        def residual_ish(shape, std):
            # pretrained-model stand-in: value/output paths of trained
            # transformers are roughly content-preserving, a purely random
            # draw would bury token content in a fixed rotation
            return Tensor(0.5 * np.eye(d) + 0.5 * rng.normal(0.0, std, size=shape))

        for _ in range(config.num_layers):
            stack.layers.append(
                LayerWeights(
                    ln1_g=Tensor(np.ones(d)),
                    ln1_b=Tensor(np.zeros(d)),
                    wq=frozen((d, d), proj_std),
                    wk=frozen((d, d), proj_std),
                    wv=residual_ish((d, d), proj_std),
                    wo=residual_ish((d, d), proj_std),
                    ln2_g=Tensor(np.ones(d)),
                    ln2_b=Tensor(np.zeros(d)),
                    w1=frozen((d, h), 1.0 / math.sqrt(d)),
                    b1=Tensor(np.zeros(h)),
                    w2=frozen((h, d), 1.0 / math.sqrt(h)),
                    b2=Tensor(np.zeros(d)),
                )
            )
        return stack

    def weight_arrays(self) -> list[np.ndarray]:
        arrays = [self.token_embed.data, self.cls_embed.data, self.pos_embed.data]
        for lw in self.layers:
            arrays.extend(getattr(lw, f.name).data for f in lw.__dataclass_fields__.values())
        return arrays


@dataclass
class ForwardTrace:
    """Final token states plus per-layer, per-head attention probabilities."""

    tokens: Tensor                     # (T, d)
    attention: list[list[Tensor]]      # [layer][head], each (T, T)
    mask: np.ndarray | None = None     # (T,) True at valid positions


def embed_image(patch_grid: np.ndarray, stack: EncoderStack) -> Tensor:
    cfg = stack.config
    grid = np.asarray(patch_grid, dtype=np.float64)
    expected = (cfg.side, cfg.side, cfg.patch_dim)
    if grid.shape != expected:
        raise ShapeError(f"embed_image: grid {grid.shape} does not match {expected}")
    n = cfg.side * cfg.side
    patches = ad.Tensor(grid.reshape(n, cfg.patch_dim))  # row-major patch order
    projected = ad.matmul(patches, stack.token_embed)
    cls_tok = ad.add(stack.cls_embed, ad.gather_rows(stack.pos_embed, [0]))
    body = ad.add(projected, ad.gather_rows(stack.pos_embed, list(range(1, n + 1))))
    return ad.concat([cls_tok, body], axis=0)


def embed_text(
    token_ids,
    stack: EncoderStack,
    pad_to: int | None = None,
) -> tuple[Tensor, np.ndarray]:
    """CLS-prefixed embedding of a token id list.

    Returns the (T, d) sequence and a boolean validity mask.  ``pad_to``
    extends the sequence with masked positions (attention and hypergraph
    candidacy both honor the mask).
    """
    cfg = stack.config
    ids = [int(i) for i in token_ids]
    if any(i < 0 or i >= cfg.vocab_size for i in ids):
        raise ValueError(f"embed_text: token id out of vocabulary (V={cfg.vocab_size})")
    if len(ids) > cfg.max_len:
        raise ValueError(f"embed_text: {len(ids)} tokens exceed max_len {cfg.max_len}")
    if pad_to is not None:
        if pad_to > cfg.max_len or pad_to < len(ids):
            raise ValueError(f"embed_text: pad_to {pad_to} invalid for {len(ids)} tokens")
        pad = pad_to - len(ids)
    else:
        pad = 0
    total = 1 + len(ids) + pad
    mask = np.ones(total, dtype=bool)
    cls_tok = ad.add(stack.cls_embed, ad.gather_rows(stack.pos_embed, [0]))
    parts = [cls_tok]
    if ids:
        body = ad.add(
            ad.gather_rows(stack.token_embed, ids),
            ad.gather_rows(stack.pos_embed, list(range(1, len(ids) + 1))),
        )
        parts.append(body)
    if pad:
        parts.append(ad.Tensor(np.zeros((pad, cfg.model_dim))))
        mask[1 + len(ids):] = False
    seq = ad.concat(parts, axis=0) if len(parts) > 1 else parts[0]
    return seq, mask


def _project(x_t: Tensor, w: Tensor, adapter: LoraAdapter | None) -> Tensor:
    # x_t is (T, d) row-major; adapters use the (d, T) column convention.
    return ad.transpose(lora_forward(w, adapter, ad.transpose(x_t)))


def encode(
    tokens: Tensor,
    stack: EncoderStack,
    adapters: dict[tuple[int, str], LoraAdapter] | None = None,
    mask: np.ndarray | None = None,
) -> ForwardTrace:
    """Run the residual blocks, recording post-softmax attention maps."""
    cfg = stack.config
    t, d = tokens.shape
    if d != cfg.model_dim:
        raise ShapeError(f"encode: token dim {d} != model dim {cfg.model_dim}")
    if adapters:
        for (layer, mat) in adapters:
            if not (0 <= layer < cfg.num_layers) or mat not in ("q", "k", "v"):
                raise ValueError(f"encode: adapter target ({layer}, {mat}) out of range")
    heads = cfg.num_heads
    dh = d // heads
    scale = 1.0 / math.sqrt(dh)
    col_mask = None if mask is None else np.asarray(mask, dtype=bool)

    z = tokens
    attention: list[list[Tensor]] = []
    for li, lw in enumerate(stack.layers):
        x = ad.layer_norm(z, lw.ln1_g, lw.ln1_b)
        get = (lambda m: adapters.get((li, m))) if adapters else (lambda m: None)
        q = _project(x, lw.wq, get("q"))
        k = _project(x, lw.wk, get("k"))
        v = _project(x, lw.wv, get("v"))
        head_maps: list[Tensor] = []
        head_outs: list[Tensor] = []
        for h in range(heads):
            lo, hi = h * dh, (h + 1) * dh
            qh = ad.slice_last(q, lo, hi)
            kh = ad.slice_last(k, lo, hi)
            vh = ad.slice_last(v, lo, hi)
            scores = ad.scale(ad.matmul(qh, ad.transpose(kh)), scale)
            probs = ad.softmax(scores, mask=col_mask)
            head_maps.append(probs)
            head_outs.append(ad.matmul(probs, vh))
        attention.append(head_maps)
        sa = ad.matmul(ad.concat(head_outs, axis=-1), lw.wo)
        z = ad.add(z, sa)
        y = ad.layer_norm(z, lw.ln2_g, lw.ln2_b)
        hidden = ad.add(ad.matmul(y, lw.w1), lw.b1)
        if cfg.activation == "gelu":
            hidden = ad.gelu(hidden)
        else:
            hidden = ad.leaky_relu(hidden, cfg.leaky_slope)
        z = ad.add(z, ad.add(ad.matmul(hidden, lw.w2), lw.b2))
    return ForwardTrace(tokens=z, attention=attention, mask=col_mask)
