"""Dual-encoder model assembly: frozen stacks plus the trainable add-ons."""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from . import autodiff as ad
from . import hypergraph as hg
from .autodiff import Tensor
from .encoder import EncoderConfig, EncoderStack, ForwardTrace, embed_image, embed_text, encode
from .lora import LoraAdapter, inject
from .losses import Temperature

VARIANTS = ("ours", "gat", "gatv2", "gnn")


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 2
    heads: int = 2
    dim: int = 16
    mlp_hidden: int = 32
    side: int = 4
    patch_dim: int = 6
    vocab_size: int = 64
    max_len: int = 12
    use_lora: bool = True
    hgnn_image: bool = True
    hgnn_text: bool = True
    variant: str = "ours"
    rank: int = 4
    gamma: float = 1.0
    k: int = 5
    dprime: int = 64
    tau_init: float = 0.07
    leaky_slope: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; pick one of {VARIANTS}")

    def image_encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            num_layers=self.layers, num_heads=self.heads, model_dim=self.dim,
            mlp_hidden=self.mlp_hidden, side=self.side, patch_dim=self.patch_dim,
        )

    def text_encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            num_layers=self.layers, num_heads=self.heads, model_dim=self.dim,
            mlp_hidden=self.mlp_hidden, vocab_size=self.vocab_size, max_len=self.max_len,
        )

    @property
    def has_trainables(self) -> bool:
        return self.use_lora or self.hgnn_image or self.hgnn_text

    def canonical_items(self) -> list[tuple[str, object]]:
        return [(f.name, getattr(self, f.name)) for f in fields(self)]


@dataclass
class VariantParams:
    a: Tensor
    w: Tensor


class DualEncoderModel:
    """Frozen image/text encoders with optional adapters and context module."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.image_stack = EncoderStack.build(cfg.image_encoder_config(), seed=[cfg.seed, 10])
        self.text_stack = EncoderStack.build(cfg.text_encoder_config(), seed=[cfg.seed, 11])
        self.adapters: dict[tuple[str, int, str], LoraAdapter] = {}
        if cfg.use_lora:
            self.adapters = inject(
                image_layers=cfg.layers, text_layers=cfg.layers, d=cfg.dim,
                r=cfg.rank, gamma=cfg.gamma, seed=cfg.seed,
            )
        self.hgnn: dict[str, hg.HgnnWeights] = {}
        self.variant_params: dict[str, VariantParams] = {}
        for mod_index, (modality, enabled) in enumerate(
            (("image", cfg.hgnn_image), ("text", cfg.hgnn_text))
        ):
            if not enabled:
                continue
            self.hgnn[modality] = hg.init_hgnn_weights(
                cfg.dim, cfg.dprime, seed=[cfg.seed, 12, mod_index],
                slope=cfg.leaky_slope, with_phi1=cfg.variant != "gnn",
                name=f"hgnn.{modality}",
            )
            if cfg.variant in ("gat", "gatv2"):
                rng = np.random.default_rng([cfg.seed, 13, mod_index])
                d = cfg.dim
                a_dim, w_shape = ((2 * d,), (d, d)) if cfg.variant == "gat" else ((d,), (d, 2 * d))
                self.variant_params[modality] = VariantParams(
                    a=Tensor(rng.normal(0.0, 0.3, size=a_dim), trainable=True,
                             name=f"variant.{modality}.a"),
                    w=Tensor(rng.normal(0.0, 0.3, size=w_shape), trainable=True,
                             name=f"variant.{modality}.w"),
                )
        self.temperature = Temperature(cfg.tau_init) if cfg.has_trainables else None
        # embedded token sequences depend only on frozen weights, so they are
        # shared across graphs; keyed by the input object identity
        self._embed_cache: dict = {}

    def trainables(self) -> dict[str, Tensor]:
        """Name -> tensor, in a stable order (drives optimizer and checkpoints)."""
        out: dict[str, Tensor] = {}
        if self.temperature is not None:
            out["temperature.s"] = self.temperature.s
        for target in sorted(self.adapters):
            adapter = self.adapters[target]
            base = "lora.{}.{}.{}".format(*target)
            out[base + ".A"] = adapter.a
            out[base + ".B"] = adapter.b
        for modality in sorted(self.hgnn):
            weights = self.hgnn[modality]
            if weights.phi1 is not None:
                out[f"hgnn.{modality}.phi1.down"] = weights.phi1.w_down
                out[f"hgnn.{modality}.phi1.up"] = weights.phi1.w_up
            out[f"hgnn.{modality}.phi2.down"] = weights.phi2.w_down
            out[f"hgnn.{modality}.phi2.up"] = weights.phi2.w_up
        for modality in sorted(self.variant_params):
            vp = self.variant_params[modality]
            out[f"variant.{modality}.a"] = vp.a
            out[f"variant.{modality}.w"] = vp.w
        return out

    def _adapters_for(self, modality: str) -> dict[tuple[int, str], LoraAdapter] | None:
        if not self.adapters:
            return None
        return {
            (layer, mat): adapter
            for (mod, layer, mat), adapter in self.adapters.items()
            if mod == modality
        }

    def _refine(self, trace: ForwardTrace, modality: str) -> Tensor:
        tokens = trace.tokens
        weights = self.hgnn.get(modality)
        if weights is None:
            return tokens
        agg = hg.aggregate_attention(trace.attention[-1], mask=trace.mask)
        aff = hg.build_affinity(agg, tokens, mask=trace.mask)
        if self.cfg.variant in ("gat", "gatv2"):
            supports = hg.select_supports(aff, self.cfg.k)
            vp = self.variant_params[modality]
            inc = hg.build_incidence_variant(
                tokens, supports, vp.a, vp.w, self.cfg.variant, self.cfg.k,
                slope=self.cfg.leaky_slope,
            )
        else:
            inc = hg.build_incidence(aff, self.cfg.k)
        if self.cfg.variant == "gnn":
            return hg.message_pass_gnn(inc, tokens, weights)
        return hg.message_pass(inc, tokens, weights)

    def image_trace(self, image: np.ndarray) -> ForwardTrace:
        arr = np.asarray(image)
        key = ("image", arr.shape, arr.tobytes())
        tokens = self._embed_cache.get(key)
        if tokens is None:
            tokens = embed_image(arr, self.image_stack)
            self._embed_cache[key] = tokens
        return encode(tokens, self.image_stack, adapters=self._adapters_for("image"))

    def text_trace(self, token_ids, pad_to: int | None = None) -> ForwardTrace:
        key = ("text", tuple(token_ids), pad_to)
        cached = self._embed_cache.get(key)
        if cached is None:
            cached = embed_text(token_ids, self.text_stack, pad_to=pad_to)
            self._embed_cache[key] = cached
        seq, mask = cached
        use_mask = mask if not mask.all() else None
        return encode(seq, self.text_stack, adapters=self._adapters_for("text"), mask=use_mask)

    def image_tokens(self, image: np.ndarray) -> Tensor:
        """Refined (N+1, d) token states for one image."""
        return self._refine(self.image_trace(image), "image")

    def text_tokens(self, token_ids, pad_to: int | None = None) -> Tensor:
        return self._refine(self.text_trace(token_ids, pad_to=pad_to), "text")

    def image_embedding(self, image: np.ndarray) -> Tensor:
        """Unit-norm global embedding, shape (1, d)."""
        refined = self.image_tokens(image)
        return ad.l2_normalize(ad.gather_rows(refined, [0]))

    def text_embedding(self, token_ids) -> Tensor:
        refined = self.text_tokens(token_ids)
        return ad.l2_normalize(ad.gather_rows(refined, [0]))

    def embed_pairs(self, samples) -> tuple[Tensor, Tensor, list]:
        """Batch of matched pairs -> (B, d) image and text embeddings + labels."""
        img = ad.concat([self.image_embedding(s.image) for s in samples], axis=0)
        txt = ad.concat([self.text_embedding(s.tokens) for s in samples], axis=0)
        return img, txt, [s.label for s in samples]
