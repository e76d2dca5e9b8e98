"""Symmetric InfoNCE over paired global embeddings, with label guidance.

Label guidance removes false negatives: a non-matching pair that shares
a label is dropped from the denominator, so the loss neither attracts
nor repels it.  With all-distinct labels this reduces exactly to the
plain two-direction contrastive loss.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

MAX_INV_TAU = 100.0


class Temperature:
    """Trainable log inverse temperature; exp(s) is clamped to <= 100."""

    def __init__(self, tau_init: float = 0.07):
        if tau_init <= 0:
            raise ValueError("Temperature: tau_init must be positive")
        self.s = Tensor(np.array(math.log(1.0 / tau_init)), trainable=True, name="temperature.s")

    def inverse(self) -> Tensor:
        """1/tau as a graph node (clamped)."""
        return ad.clamp_max(ad.texp(self.s), MAX_INV_TAU)

    @property
    def tau(self) -> float:
        return 1.0 / min(math.exp(float(self.s.data)), MAX_INV_TAU)


@dataclass
class EmbeddingBatch:
    """Row-normalized global embeddings for B matched image-text pairs."""

    image: Tensor                     # (B, d)
    text: Tensor                      # (B, d)
    labels: Sequence | None = None    # B identifiers, or None for all-distinct


def label_mask(labels: Sequence | None, batch_size: int | None = None) -> np.ndarray:
    """1 where the pair contributes to the denominator: different labels or i == k."""
    if labels is None:
        if batch_size is None:
            raise ValueError("label_mask: need batch_size when labels are absent")
        return np.ones((batch_size, batch_size))
    n = len(labels)
    mask = np.ones((n, n))
    for i in range(n):
        for j in range(n):
            if i != j and labels[i] == labels[j]:
                mask[i, j] = 0.0
    return mask


def _normalized(embeds: Tensor, what: str) -> Tensor:
    norms = np.linalg.norm(embeds.data, axis=-1)
    if np.max(np.abs(norms - 1.0)) > 1e-10:
        warnings.warn(f"{what} embeddings not unit-norm; normalizing", RuntimeWarning)
        return ad.l2_normalize(embeds)
    return embeds


def infonce_from_similarities(sims: Tensor, mask: np.ndarray, temp: Temperature) -> Tensor:
    """Two-direction masked loss from a (B, B) cosine-similarity matrix.

    ``sims[i, k]`` pairs image i with text k; masked entries never enter
    the computation, so the loss is exactly independent of them.
    """
    b = sims.shape[0]
    if sims.shape != (b, b) or mask.shape != (b, b):
        raise ShapeError(f"infonce: sims {sims.shape} vs mask {mask.shape}")
    logits = ad.mul(sims, temp.inverse())
    eye = Tensor(np.eye(b))
    mask_np = np.asarray(mask, dtype=np.float64)
    mask_t = Tensor(mask_np)

    def direction(lg: Tensor) -> Tensor:
        # max-shifted logsumexp over the unmasked entries; the detached
        # shift leaves value and gradient mathematically unchanged and
        # makes singleton denominators cancel exactly (loss exactly 0
        # for B = 1 and for fully masked rows)
        shift = np.max(np.where(mask_np > 0, lg.data, -np.inf), axis=1, keepdims=True)
        shifted = ad.sub(lg, Tensor(np.broadcast_to(shift, lg.shape).copy()))
        logsum = ad.tlog(ad.tsum(ad.mul(ad.texp(shifted), mask_t), axis=1))
        numer = ad.tsum(ad.mul(lg, eye), axis=1)
        denom = ad.add(logsum, Tensor(shift.reshape(-1)))
        return ad.tsum(ad.sub(denom, numer))

    total = ad.add(direction(logits), direction(ad.transpose(logits)))
    return ad.scale(total, 1.0 / (2.0 * b))


def _masked_infonce(batch: EmbeddingBatch, temp: Temperature, mask: np.ndarray) -> Tensor:
    if batch.text.shape != batch.image.shape:
        raise ShapeError(
            f"loss: image {batch.image.shape} vs text {batch.text.shape} embeddings"
        )
    img = _normalized(batch.image, "image")
    txt = _normalized(batch.text, "text")
    sims = ad.matmul(img, ad.transpose(txt))
    return infonce_from_similarities(sims, mask, temp)


def label_guided_infonce(batch: EmbeddingBatch, temp: Temperature) -> Tensor:
    """Two-direction contrastive loss with shared-label pairs masked out."""
    b = batch.image.shape[0]
    if b < 1:
        raise ValueError("label_guided_infonce: empty batch")
    return _masked_infonce(batch, temp, label_mask(batch.labels, batch_size=b))


def clip_loss(batch: EmbeddingBatch, temp: Temperature) -> Tensor:
    """Plain contrastive loss: every non-matching pair is a negative."""
    b = batch.image.shape[0]
    if b < 1:
        raise ValueError("clip_loss: empty batch")
    return _masked_infonce(batch, temp, np.ones((b, b)))
