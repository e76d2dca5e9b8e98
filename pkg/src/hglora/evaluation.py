"""Zero-shot evaluation: prompt-ensembled class embeddings, ACC/AUC,
cross-modal similarity maps, and a parseable report format."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import SynthConfig, vocab_layout
from .model import DualEncoderModel

REPORT_MAGIC = "#hglora-eval"


@dataclass(frozen=True)
class PromptTemplate:
    """A pattern with one ``{disease}`` slot and its toy-vocabulary prefix ids.

    The pattern documents intent; tokenization is the fixed prefix
    followed by the class's token block.
    """

    pattern: str
    prefix_ids: tuple[int, ...]

    def __post_init__(self):
        if self.pattern.count("{disease}") != 1:
            raise ValueError(f"template needs exactly one {{disease}} slot: {self.pattern!r}")

    def realize(self, class_block: tuple[int, ...]) -> list[int]:
        return list(self.prefix_ids) + list(class_block)


def default_templates(cfg: SynthConfig) -> list[PromptTemplate]:
    prefixes = vocab_layout(cfg)["template_prefixes"]
    return [
        PromptTemplate("an image of {disease}", tuple(prefixes[0])),
        PromptTemplate("findings suggesting {disease}", tuple(prefixes[1])),
    ]


@dataclass
class EvalReport:
    class_names: list[str]
    scores: np.ndarray       # (samples, classes) cosine similarities
    predictions: np.ndarray  # (samples,)
    labels: np.ndarray       # (samples,)
    accuracy: float
    auc: float
    confusion: np.ndarray    # (classes, classes) rows = true label
    warnings: list[str] = field(default_factory=list)


def class_text_embeddings(
    class_blocks: list[tuple[int, ...]],
    templates: list[PromptTemplate],
    model: DualEncoderModel,
) -> np.ndarray:
    """Mean of per-template unit embeddings, re-normalized; one row per class."""
    if not templates:
        raise ValueError("class_text_embeddings: need at least one template")
    vocab = model.cfg.vocab_size
    rows = []
    with ad.no_grad():
        for block in class_blocks:
            embeds = []
            for template in templates:
                ids = template.realize(tuple(block))
                if any(t < 0 or t >= vocab for t in ids):
                    raise ValueError(f"class_text_embeddings: token id out of range in {ids}")
                embeds.append(model.text_embedding(ids).data[0])
            mean = np.mean(embeds, axis=0)
            norm = np.linalg.norm(mean)
            if norm == 0.0:
                warnings.warn("class embedding collapsed to zero", RuntimeWarning)
                rows.append(mean)
            else:
                rows.append(mean / norm)
    return np.stack(rows)


def zero_shot_scores(images, class_embeds: np.ndarray, model: DualEncoderModel) -> np.ndarray:
    """Cosine similarity of each refined global image embedding to each class."""
    out = np.zeros((len(images), class_embeds.shape[0]))
    with ad.no_grad():
        for i, image in enumerate(images):
            emb = model.image_embedding(image).data[0]
            out[i] = class_embeds @ emb
    return out


def accuracy(predictions, labels) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.size == 0:
        raise ValueError("accuracy: empty input")
    if predictions.shape != labels.shape:
        raise ValueError(f"accuracy: {predictions.shape} vs {labels.shape}")
    return float(np.mean(predictions == labels))


def _binary_auc(scores: np.ndarray, positives: np.ndarray) -> float:
    # rank statistic with midranks for ties: pairs ordered correctly, ties 0.5
    order = np.argsort(scores, kind="stable")
    sorted_scores = scores[order]
    ranks = np.empty(scores.size)
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    n_pos = int(positives.sum())
    n_neg = positives.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("auc: need at least one positive and one negative")
    u = ranks[positives].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc(scores, labels) -> float:
    """Binary: rank AUC.  Multi-class (2D scores): macro one-vs-rest mean,
    skipping degenerate classes with a warning."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim == 1:
        return _binary_auc(scores, labels.astype(bool))
    per_class = []
    for c in range(scores.shape[1]):
        positives = labels == c
        if positives.all() or not positives.any():
            warnings.warn(f"auc: class {c} degenerate, excluded", RuntimeWarning)
            continue
        per_class.append(_binary_auc(scores[:, c], positives))
    if not per_class:
        raise ValueError("auc: every class degenerate")
    return float(np.mean(per_class))


def evaluate_zero_shot(
    images,
    labels,
    class_blocks,
    templates,
    model: DualEncoderModel,
    class_names: list[str] | None = None,
) -> EvalReport:
    class_embeds = class_text_embeddings(class_blocks, templates, model)
    scores = zero_shot_scores(images, class_embeds, model)
    predictions = np.argmax(scores, axis=1)  # argmax takes the lowest index on ties
    labels = np.asarray(labels)
    num_classes = len(class_blocks)
    confusion = np.zeros((num_classes, num_classes), dtype=int)
    for t, p in zip(labels, predictions):
        confusion[int(t), int(p)] += 1
    caught: list[str] = []
    with warnings.catch_warnings(record=True) as caught_warnings:
        warnings.simplefilter("always")
        auc_value = auc(scores, labels)
        caught = [str(w.message) for w in caught_warnings]
    return EvalReport(
        class_names=class_names or [f"class_{c}" for c in range(num_classes)],
        scores=scores,
        predictions=predictions,
        labels=labels,
        accuracy=accuracy(predictions, labels),
        auc=auc_value,
        confusion=confusion,
        warnings=caught,
    )


def similarity_map(
    image: np.ndarray,
    query_ids,
    model: DualEncoderModel,
) -> tuple[np.ndarray, np.ndarray]:
    """(raw, min-max normalized) grids of local-token vs text-query cosine."""
    side = model.cfg.side
    with ad.no_grad():
        tokens = model.image_tokens(image)
        locals_unit = ad.l2_normalize(ad.gather_rows(tokens, list(range(1, side * side + 1))))
        query = model.text_embedding(query_ids).data[0]
        raw = locals_unit.data @ query
    grid = raw.reshape(side, side)
    lo, hi = grid.min(), grid.max()
    normalized = np.zeros_like(grid) if hi == lo else (grid - lo) / (hi - lo)
    return grid, normalized


def write_pgm(path, grid: np.ndarray) -> None:
    """Binary 8-bit grayscale PGM (P5) of a [0, 1] grid."""
    clipped = np.clip(np.asarray(grid), 0.0, 1.0)
    pixels = np.round(clipped * 255).astype(np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(pixels.tobytes())


def format_report(report: EvalReport) -> str:
    lines = [f"{REPORT_MAGIC} v=1"]
    lines.append("classes = " + ",".join(report.class_names))
    lines.append(f"accuracy = {report.accuracy!r}")
    lines.append(f"auc = {report.auc!r}")
    lines.append("confusion = " + ";".join(
        ",".join(str(x) for x in row) for row in report.confusion
    ))
    for w in report.warnings:
        lines.append(f"warning = {w}")
    lines.append("samples:")
    for label, pred, row in zip(report.labels, report.predictions, report.scores):
        lines.append(f"{int(label)} {int(pred)} " + " ".join(repr(float(s)) for s in row))
    return "\n".join(lines) + "\n"


def parse_report(text: str) -> EvalReport:
    lines = text.rstrip("\n").split("\n")
    if not lines[0].startswith(REPORT_MAGIC):
        raise ValueError("not an eval report")
    header: dict[str, str] = {}
    warnings_list: list[str] = []
    body_start = None
    for i, line in enumerate(lines[1:], start=1):
        if line == "samples:":
            body_start = i + 1
            break
        key, _, value = line.partition(" = ")
        if key == "warning":
            warnings_list.append(value)
        else:
            header[key] = value
    if body_start is None:
        raise ValueError("report missing samples section")
    labels, preds, scores = [], [], []
    for line in lines[body_start:]:
        parts = line.split()
        labels.append(int(parts[0]))
        preds.append(int(parts[1]))
        scores.append([float(x) for x in parts[2:]])
    confusion = np.array(
        [[int(x) for x in row.split(",")] for row in header["confusion"].split(";")]
    )
    return EvalReport(
        class_names=header["classes"].split(","),
        scores=np.array(scores),
        predictions=np.array(preds),
        labels=np.array(labels),
        accuracy=float(header["accuracy"]),
        auc=float(header["auc"]),
        confusion=confusion,
        warnings=warnings_list,
    )
