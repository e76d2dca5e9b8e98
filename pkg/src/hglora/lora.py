"""Low-rank adapters for frozen projection matrices.

Each adapter contributes ``gamma * B @ (A @ x)`` on top of the frozen
product ``W0 @ x``.  A is Kaiming-uniform initialized, B starts at zero,
so a fresh adapter leaves the forward pass bit-identical to the frozen
model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

TARGET_MATRICES = ("q", "k", "v")


@dataclass
class LoraAdapter:
    a: Tensor  # (r, k), trainable
    b: Tensor  # (d, r), trainable
    rank: int
    gamma: float
    target: tuple[str, int, str]  # (modality, layer index, matrix in {q, k, v})


def init_lora(
    d: int,
    k: int,
    r: int,
    gamma: float,
    seed,
    target: tuple[str, int, str] = ("image", 0, "q"),
) -> LoraAdapter:
    """Fresh adapter: A ~ U[-sqrt(6/k), sqrt(6/k)] (fan-in k), B = 0."""
    if r < 1 or r >= min(d, k):
        raise ValueError(f"init_lora: rank {r} must satisfy 1 <= r < min(d={d}, k={k})")
    rng = np.random.default_rng(seed)
    bound = math.sqrt(6.0 / k)
    name = "lora.{}.{}.{}".format(*target)
    a = Tensor(rng.uniform(-bound, bound, size=(r, k)), trainable=True, name=name + ".A")
    b = Tensor(np.zeros((d, r)), trainable=True, name=name + ".B")
    return LoraAdapter(a=a, b=b, rank=r, gamma=float(gamma), target=target)


def lora_forward(w0: Tensor, adapter: LoraAdapter | None, x: Tensor) -> Tensor:
    """W0 @ x plus the scaled low-rank correction; W0 stays off the tape.

    ``x`` is a k-vector or a (k, batch) matrix; the result matches that
    orientation.
    """
    vector_in = x.ndim == 1
    if vector_in:
        x = ad.reshape(x, (x.shape[0], 1))
    if x.ndim != 2 or w0.ndim != 2 or w0.shape[1] != x.shape[0]:
        raise ShapeError(f"lora_forward: W0 {w0.shape} and x {x.shape} do not conform")
    out = ad.matmul(w0, x)
    if adapter is not None:
        if adapter.a.shape[1] != x.shape[0] or adapter.b.shape[0] != w0.shape[0]:
            raise ShapeError(
                f"lora_forward: adapter ({adapter.b.shape} x {adapter.a.shape}) "
                f"does not fit W0 {w0.shape}"
            )
        delta = ad.matmul(adapter.b, ad.matmul(adapter.a, x))
        out = ad.add(out, ad.scale(delta, adapter.gamma))
    if vector_in:
        out = ad.reshape(out, (out.shape[0],))
    return out


def inject(
    image_layers: int,
    text_layers: int,
    d: int,
    r: int,
    gamma: float,
    seed: int,
) -> dict[tuple[str, int, str], LoraAdapter]:
    """One adapter per (modality, layer, matrix in {q, k, v}); Q/K/V are d x d."""
    adapters: dict[tuple[str, int, str], LoraAdapter] = {}
    index = 0
    for modality, layers in (("image", image_layers), ("text", text_layers)):
        for layer in range(layers):
            for mat in TARGET_MATRICES:
                target = (modality, layer, mat)
                adapters[target] = init_lora(d, d, r, gamma, seed=[seed, index], target=target)
                index += 1
    return adapters


def count_trainable(model_or_params) -> int:
    """Total element count over trainable tensors (shape-only, value-free)."""
    if hasattr(model_or_params, "trainables"):
        tensors: Iterable[Tensor] = model_or_params.trainables().values()
    elif hasattr(model_or_params, "values") and not isinstance(model_or_params, Tensor):
        tensors = model_or_params.values()
    else:
        tensors = model_or_params
    seen: set[int] = set()
    total = 0
    for t in tensors:
        if t.trainable and id(t) not in seen:
            seen.add(id(t))
            total += t.size
    return total


def lora_parameter_count(image_layers: int, text_layers: int, d: int, k: int, r: int) -> int:
    """Adapter parameter total from shapes alone: 3 per layer per encoder, r(d+k) each."""
    return 3 * (image_layers + text_layers) * r * (d + k)
