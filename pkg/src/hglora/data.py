"""Deterministic paired image-text samples with planted class structure.

Each class owns a fixed set of patch locations and a motif direction in
patch space; images are noise plus the motif at those locations.  Texts
are the class's token block plus random filler, shuffled.  Several
samples per class guarantee same-label non-matching pairs inside most
training batches.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

DATASET_MAGIC = "#hglora-dataset"
DATASET_VERSION = 1

DEFAULT_KEYWORDS = ("h&e", "hematoxylin", "eosin", "histopathology", "biopsy", "microscopic")


@dataclass(frozen=True)
class SynthConfig:
    num_classes: int = 4
    pairs_per_class: int = 64
    side: int = 4
    patch_dim: int = 6
    motif_strength: float = 5.0
    motif_patches_per_class: int = 4
    noise_std: float = 0.2
    vocab_size: int = 64
    tokens_per_class: int = 6
    text_len: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.pairs_per_class < 2:
            raise ValueError("pairs_per_class must be >= 2 (same-label pairs needed)")
        if self.tokens_per_class > self.text_len:
            raise ValueError("tokens_per_class cannot exceed text_len")
        layout = vocab_layout(self)
        if layout["filler"].size < 1:
            raise ValueError("vocab_size too small for class blocks, templates and filler")

    def canonical_text(self) -> str:
        lines = [f"{f.name} = {getattr(self, f.name)!r}" for f in fields(self)]
        return "\n".join(lines) + "\n"

    def content_hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()[:16]


@dataclass
class PairedSample:
    image: np.ndarray        # (side, side, patch_dim)
    tokens: tuple[int, ...]
    label: int


def vocab_layout(cfg: SynthConfig) -> dict:
    """Partition of the vocabulary: class blocks, template prefixes, filler."""
    class_end = cfg.num_classes * cfg.tokens_per_class
    template_end = class_end + 4  # two prompt prefixes of two tokens each
    if template_end >= cfg.vocab_size:
        raise ValueError(
            f"vocab_size {cfg.vocab_size} too small: need > {template_end}"
        )
    return {
        "class_blocks": [
            tuple(range(c * cfg.tokens_per_class, (c + 1) * cfg.tokens_per_class))
            for c in range(cfg.num_classes)
        ],
        "template_prefixes": [
            (class_end, class_end + 1),
            (class_end + 2, class_end + 3),
        ],
        "filler": np.arange(template_end, cfg.vocab_size),
    }


def motif_plan(cfg: SynthConfig) -> list[tuple[np.ndarray, np.ndarray]]:
    """(patch locations, unit motif direction) per class, seed-deterministic.

    Location sets are disjoint across classes whenever they fit in the
    grid, which keeps classes linearly separable by construction.
    """
    rng = np.random.default_rng([cfg.seed, 1])
    n = cfg.side * cfg.side
    m = cfg.motif_patches_per_class
    if cfg.num_classes * m <= n:
        order = rng.permutation(n)
        chunks = [np.sort(order[c * m:(c + 1) * m]) for c in range(cfg.num_classes)]
    else:
        chunks = [np.sort(rng.choice(n, size=m, replace=False)) for _ in range(cfg.num_classes)]
    # orthonormal class directions: near-parallel contents would leave
    # class identity in tiny difference components and scramble the
    # geometry of everything downstream; signs flipped so each direction
    # stays visible to per-channel-mean probes
    raw = rng.normal(size=(cfg.patch_dim, cfg.num_classes))
    if cfg.patch_dim >= cfg.num_classes:
        q, _ = np.linalg.qr(raw)
        directions = q.T[: cfg.num_classes]
    else:
        directions = raw.T / np.linalg.norm(raw.T, axis=1, keepdims=True)
    plan = []
    for c in range(cfg.num_classes):
        direction = directions[c] * (1.0 if directions[c].sum() >= 0 else -1.0)
        plan.append((chunks[c], direction))
    return plan


def generate(cfg: SynthConfig) -> list[PairedSample]:
    layout = vocab_layout(cfg)
    plan = motif_plan(cfg)
    n = cfg.side * cfg.side
    samples: list[PairedSample] = []
    for c in range(cfg.num_classes):
        locations, direction = plan[c]
        block = layout["class_blocks"][c]
        for j in range(cfg.pairs_per_class):
            rng = np.random.default_rng([cfg.seed, 2, c, j])
            flat = rng.normal(0.0, cfg.noise_std, size=(n, cfg.patch_dim))
            flat[locations] += cfg.motif_strength * direction
            image = flat.reshape(cfg.side, cfg.side, cfg.patch_dim)
            filler = rng.choice(layout["filler"], size=cfg.text_len - len(block))
            tokens = np.concatenate([np.array(block, dtype=int), filler])
            rng.shuffle(tokens)
            samples.append(PairedSample(image=image, tokens=tuple(int(t) for t in tokens), label=c))
    return samples


def split_dataset(
    samples: list[PairedSample],
    fractions: tuple[float, float, float],
    seed: int,
) -> tuple[list[PairedSample], list[PairedSample], list[PairedSample]]:
    """Stratified, deterministic, disjoint and exhaustive three-way split."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions {fractions} must sum to 1")
    if any(f < 0 for f in fractions):
        raise ValueError("fractions must be nonnegative")
    positive = [i for i, f in enumerate(fractions) if f > 0]
    rng = np.random.default_rng([seed, 3])
    by_class: dict[int, list[int]] = {}
    for idx, s in enumerate(samples):
        by_class.setdefault(s.label, []).append(idx)
    buckets: tuple[list[PairedSample], ...] = ([], [], [])
    allocated = [0, 0, 0]
    seen = 0
    for label in sorted(by_class):
        idxs = np.array(by_class[label])
        if len(idxs) < len(positive):
            raise ValueError(
                f"class {label} has {len(idxs)} samples but {len(positive)} splits requested"
            )
        rng.shuffle(idxs)
        seen += len(idxs)
        counts = _allocate(len(idxs), fractions, positive, allocated, seen)
        start = 0
        for split_i, count in enumerate(counts):
            for idx in idxs[start:start + count]:
                buckets[split_i].append(samples[int(idx)])
            start += count
            allocated[split_i] += count
    return buckets


def _allocate(n: int, fractions, positive, allocated, cumulative_n) -> list[int]:
    # Floor counts per split (at least 1 where the fraction is positive);
    # spread the leftovers toward the splits lagging their running targets,
    # which keeps per-class counts within one sample of frac*n and makes
    # the overall totals exact.
    counts = [0, 0, 0]
    for i in positive:
        counts[i] = max(1, int(np.floor(fractions[i] * n)))
    while sum(counts) > n:
        i = max(positive, key=lambda j: (counts[j], j))
        counts[i] -= 1
    def deficit(j):
        return fractions[j] * cumulative_n - (allocated[j] + counts[j])
    while sum(counts) < n:
        i = max(positive, key=lambda j: (deficit(j), -j))
        counts[i] += 1
    return counts


def filter_captions(records, keywords=DEFAULT_KEYWORDS) -> list:
    """Keep records whose caption contains any keyword (case-insensitive substring)."""
    lowered = [k.lower() for k in keywords]
    kept = []
    for record in records:
        caption = record[0] if isinstance(record, tuple) else record
        text = caption.lower()
        if any(k in text for k in lowered):
            kept.append(record)
    return kept


def save_dataset(samples: list[PairedSample], cfg: SynthConfig, path) -> None:
    """Line-delimited text: header with config hash, one record per line."""
    lines = [
        f"{DATASET_MAGIC} v={DATASET_VERSION} hash={cfg.content_hash()} "
        + " ".join(f"{f.name}={getattr(cfg, f.name)!r}" for f in fields(cfg))
    ]
    for s in samples:
        img = " ".join(repr(float(x)) for x in s.image.reshape(-1))
        toks = " ".join(str(t) for t in s.tokens)
        lines.append(f"{s.label}|{img}|{toks}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_dataset(path) -> tuple[list[PairedSample], SynthConfig]:
    text = Path(path).read_text().rstrip("\n").split("\n")
    header = text[0]
    if not header.startswith(DATASET_MAGIC):
        raise ValueError(f"not a dataset file: {path}")
    kv = {}
    for part in header.split()[3:]:
        key, _, value = part.partition("=")
        kv[key] = value
    types = {"int": int, "float": float}
    cast = {f.name: types[f.type](kv[f.name]) for f in fields(SynthConfig)}
    cfg = SynthConfig(**cast)
    expected_hash = header.split()[2].split("=")[1]
    if cfg.content_hash() != expected_hash:
        raise ValueError("dataset header hash does not match its config fields")
    samples = []
    for line in text[1:]:
        label_s, img_s, tok_s = line.split("|")
        image = np.array([float(x) for x in img_s.split()]).reshape(
            cfg.side, cfg.side, cfg.patch_dim
        )
        tokens = tuple(int(t) for t in tok_s.split()) if tok_s else ()
        samples.append(PairedSample(image=image, tokens=tokens, label=int(label_s)))
    return samples, cfg
