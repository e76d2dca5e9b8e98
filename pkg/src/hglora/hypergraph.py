"""Attention-derived hypergraph construction and bottleneck message passing.

Vertices are the encoder's token states (one global plus N local).  The
affinity matrix mixes the encoder's own attention (global row) with
cosine similarity between local tokens; top-k filtering per row gives
each vertex a contextual hyperedge.  Hyperedge weights are a softmax
over the selected affinities, the diagonal is pinned to 1, and the
global column is overwritten to mirror the global row.

Gradients flow through the selected affinity values (and through the
GAT/GATv2 replacement scores); the top-k selection itself is a
stop-gradient boundary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor


@dataclass
class AffinityMatrix:
    """Raw affinities plus a selection view with -inf at excluded entries."""

    values: Tensor         # (n, n) differentiable; unused entries are 0
    selection: np.ndarray  # (n, n) float64; -inf marks non-candidates
    valid: np.ndarray      # (n,) vertex validity

    @classmethod
    def from_dense(cls, matrix, valid=None) -> "AffinityMatrix":
        """Wrap a hand-built dense affinity matrix (tests, debugging)."""
        values = matrix if isinstance(matrix, Tensor) else Tensor(matrix)
        n = values.shape[0]
        if values.shape != (n, n):
            raise ShapeError(f"affinity matrix must be square, got {values.shape}")
        v = np.ones(n, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
        sel = np.array(values.data, dtype=np.float64)
        sel[0, 0] = -np.inf
        sel[1:, 0] = -np.inf
        sel[~v, :] = -np.inf
        sel[:, ~v] = -np.inf
        return cls(values=values, selection=sel, valid=v)


@dataclass
class IncidenceMatrix:
    matrix: Tensor                   # (n, n)
    supports: list[tuple[int, ...]]  # selected index set per row
    k: int


@dataclass
class PhiWeights:
    w_down: Tensor  # (d', d)
    w_up: Tensor    # (d, d')


@dataclass
class HgnnWeights:
    """Bottleneck projections for the two message-passing stages.

    ``phi1`` is None for the plain-GNN reduction, which aggregates with
    the incidence matrix directly and only applies ``phi2``.
    """

    phi1: PhiWeights | None
    phi2: PhiWeights
    slope: float = 0.2

    def tensors(self) -> list[Tensor]:
        out = []
        if self.phi1 is not None:
            out += [self.phi1.w_down, self.phi1.w_up]
        out += [self.phi2.w_down, self.phi2.w_up]
        return out


def init_phi(d: int, dprime: int, rng, name: str) -> PhiWeights:
    down = rng.uniform(-math.sqrt(6.0 / d), math.sqrt(6.0 / d), size=(dprime, d))
    up = rng.uniform(-math.sqrt(6.0 / dprime), math.sqrt(6.0 / dprime), size=(d, dprime))
    return PhiWeights(
        w_down=Tensor(down, trainable=True, name=name + ".down"),
        w_up=Tensor(up, trainable=True, name=name + ".up"),
    )


def init_hgnn_weights(
    d: int, dprime: int, seed, slope: float = 0.2, with_phi1: bool = True, name: str = "hgnn"
) -> HgnnWeights:
    rng = np.random.default_rng(seed)
    phi1 = init_phi(d, dprime, rng, name + ".phi1") if with_phi1 else None
    phi2 = init_phi(d, dprime, rng, name + ".phi2")
    return HgnnWeights(phi1=phi1, phi2=phi2, slope=slope)


def aggregate_attention(head_maps: list[Tensor], mask=None) -> Tensor:
    """Mean over heads of row-L2-normalized attention maps."""
    if not head_maps:
        raise ValueError("aggregate_attention: need at least one head map")
    shape = head_maps[0].shape
    for m in head_maps:
        if m.shape != shape:
            raise ShapeError(f"aggregate_attention: head shapes differ: {m.shape} vs {shape}")
    total = None
    for m in head_maps:
        normalized = ad.l2_normalize(m)
        total = normalized if total is None else ad.add(total, normalized)
    return ad.scale(total, 1.0 / len(head_maps))


def build_affinity(agg_attention: Tensor, tokens: Tensor, mask=None) -> AffinityMatrix:
    """Global row from aggregated attention, local block from cosine similarity."""
    n, d = tokens.shape
    if agg_attention.shape != (n, n):
        raise ShapeError(
            f"build_affinity: attention {agg_attention.shape} vs {n} tokens"
        )
    valid = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not valid[0]:
        raise ValueError("build_affinity: global position cannot be masked")
    num_local = n - 1
    zero_head = Tensor(np.zeros((1, 1)))
    row0 = ad.gather_rows(agg_attention, [0])
    row0 = ad.concat([zero_head, ad.slice_last(row0, 1, n)], axis=-1)

    locals_ = ad.gather_rows(tokens, list(range(1, n)))
    local_valid = valid[1:]
    if not np.all(local_valid):
        # keep masked rows off the zero-vector warning path; they never
        # enter candidacy anyway
        keep = np.repeat(local_valid[:, None], d, axis=1).astype(float)
        filler = np.repeat((~local_valid)[:, None], d, axis=1).astype(float)
        locals_ = ad.add(ad.mul(locals_, Tensor(keep)), Tensor(filler))
    unit = ad.l2_normalize(locals_)
    cosines = ad.matmul(unit, ad.transpose(unit))
    local_rows = ad.concat([Tensor(np.zeros((num_local, 1))), cosines], axis=-1)
    values = ad.concat([row0, local_rows], axis=0)

    sel = np.array(values.data, dtype=np.float64)
    sel[0, 0] = -np.inf
    sel[1:, 0] = -np.inf
    sel[~valid, :] = -np.inf
    sel[:, ~valid] = -np.inf
    return AffinityMatrix(values=values, selection=sel, valid=valid)


def select_supports(aff: AffinityMatrix, k: int) -> list[tuple[int, ...]]:
    """Per-row top-k candidates (vectorized topk_indices semantics: the
    selection view's -inf entries plus the diagonal are excluded, ties
    break toward the lowest index)."""
    n = aff.selection.shape[0]
    sel = np.array(aff.selection, copy=True)
    np.fill_diagonal(sel, -np.inf)
    order = np.argsort(-sel, axis=1, kind="stable")
    counts = np.isfinite(sel).sum(axis=1)
    supports: list[tuple[int, ...]] = []
    for i in range(n):
        take = min(k, int(counts[i])) if aff.valid[i] else 0
        supports.append(tuple(int(j) for j in order[i, :take]))
    return supports


def _selector(n: int, support: tuple[int, ...]) -> np.ndarray:
    g = np.zeros((n, len(support)))
    for col, idx in enumerate(support):
        g[idx, col] = 1.0
    return g


def incidence_from_row_weights(
    supports: list[tuple[int, ...]],
    row_weights: list[Tensor | None],
    n: int,
) -> IncidenceMatrix:
    """Assemble H from per-row weights over supports; pin the diagonal,
    then mirror the global row into the global column."""
    rows: list[Tensor] = []
    for i, (support, weights) in enumerate(zip(supports, row_weights)):
        diag = np.zeros((1, n))
        diag[0, i] = 1.0
        if not support:
            rows.append(Tensor(diag))
            continue
        scatter = Tensor(_selector(n, support).T)  # (m, n)
        rows.append(ad.add(ad.matmul(weights, scatter), Tensor(diag)))
    h_pre = ad.concat(rows, axis=0)
    row0 = ad.gather_rows(h_pre, [0])
    keep_local = np.ones((1, n))
    keep_local[0, 0] = 0.0
    mirrored = ad.mul(row0, Tensor(keep_local))
    e0 = np.zeros((1, n))
    e0[0, 0] = 1.0
    column_patch = ad.matmul(ad.transpose(mirrored), Tensor(e0))
    return IncidenceMatrix(matrix=ad.add(h_pre, column_patch), supports=list(supports), k=0)


def _finish_incidence(scores: Tensor, supports: list[tuple[int, ...]], k: int) -> IncidenceMatrix:
    # one masked softmax runs each row's softmax over exactly its support
    # set (empty-support rows come out all zero), then pin the diagonal
    # and mirror the global row into the global column
    n = scores.shape[0]
    support_mask = np.zeros((n, n), dtype=bool)
    for i, support in enumerate(supports):
        support_mask[i, list(support)] = True
    off_diag = ad.softmax(scores, mask=support_mask)
    h_pre = ad.add(off_diag, Tensor(np.eye(n)))
    row0 = ad.gather_rows(h_pre, [0])
    keep_local = np.ones((1, n))
    keep_local[0, 0] = 0.0
    mirrored = ad.mul(row0, Tensor(keep_local))
    e0 = np.zeros((1, n))
    e0[0, 0] = 1.0
    column_patch = ad.matmul(ad.transpose(mirrored), Tensor(e0))
    return IncidenceMatrix(matrix=ad.add(h_pre, column_patch), supports=list(supports), k=k)


def build_incidence(aff: AffinityMatrix, k: int) -> IncidenceMatrix:
    """Top-k filtering of the affinity rows, softmax weights over each support."""
    if k < 1:
        raise ValueError("build_incidence: k must be >= 1")
    supports = select_supports(aff, k)
    return _finish_incidence(aff.values, supports, k)


def build_incidence_variant(
    v: Tensor,
    supports: list[tuple[int, ...]],
    a: Tensor,
    w: Tensor,
    kind: str,
    k: int,
    slope: float = 0.2,
) -> IncidenceMatrix:
    """Incidence with learned replacement scores, batched over all rows.

    Produces exactly the matrix that scoring each row with
    ``variant_scores_gat``/``variant_scores_gatv2`` and assembling with
    ``incidence_from_row_weights`` would give.
    """
    n, d = v.shape
    flat_i: list[int] = []
    flat_j: list[int] = []
    for i, support in enumerate(supports):
        flat_i.extend([i] * len(support))
        flat_j.extend(support)
    if not flat_i:
        return _finish_incidence(Tensor(np.zeros((n, n))), supports, k)
    if kind == "gat":
        if w.shape != (d, d) or a.shape != (2 * d,):
            raise ShapeError(f"variant gat: W {w.shape} / a {a.shape} vs d={d}")
        wv = ad.matmul(v, ad.transpose(w))
        cat = ad.concat([ad.gather_rows(wv, flat_i), ad.gather_rows(wv, flat_j)], axis=-1)
        raw = ad.leaky_relu(ad.matmul(cat, ad.reshape(a, (2 * d, 1))), slope)
    elif kind == "gatv2":
        if w.shape != (d, 2 * d) or a.shape != (d,):
            raise ShapeError(f"variant gatv2: W {w.shape} / a {a.shape} vs d={d}")
        cat = ad.concat([ad.gather_rows(v, flat_i), ad.gather_rows(v, flat_j)], axis=-1)
        hidden = ad.leaky_relu(ad.matmul(cat, ad.transpose(w)), slope)
        raw = ad.matmul(hidden, ad.reshape(a, (d, 1)))
    else:
        raise ValueError(f"unknown variant kind {kind!r}")
    scatter = np.zeros((len(flat_i), n * n))
    for row, (i, j) in enumerate(zip(flat_i, flat_j)):
        scatter[row, i * n + j] = 1.0
    scores = ad.reshape(ad.matmul(ad.transpose(raw), Tensor(scatter)), (n, n))
    return _finish_incidence(scores, supports, k)


def phi(z: Tensor, weights: PhiWeights, slope: float = 0.2) -> Tensor:
    """Bottleneck projection W_up(LeakyReLU(W_down z)) applied to row vectors."""
    hidden = ad.leaky_relu(ad.matmul(z, ad.transpose(weights.w_down)), slope)
    return ad.matmul(hidden, ad.transpose(weights.w_up))


def _matrix(h) -> Tensor:
    return h.matrix if isinstance(h, IncidenceMatrix) else h


def message_pass(h, v: Tensor, weights: HgnnWeights) -> Tensor:
    """Two-stage propagation: hyperedge features, then vertex refinement."""
    if weights.phi1 is None:
        raise ValueError("message_pass: phi1 weights missing (GNN reduction?)")
    hm = _matrix(h)
    edge_feats = phi(ad.matmul(hm, v), weights.phi1, weights.slope)
    return phi(ad.matmul(ad.transpose(hm), edge_feats), weights.phi2, weights.slope)


def message_pass_gnn(h, v: Tensor, weights: HgnnWeights) -> Tensor:
    """Reduction with the first projection forced to identity."""
    hm = _matrix(h)
    return phi(ad.matmul(ad.transpose(hm), ad.matmul(hm, v)), weights.phi2, weights.slope)


def variant_scores_gat(
    v: Tensor,
    supports: list[tuple[int, ...]],
    a: Tensor,
    w: Tensor,
    slope: float = 0.2,
) -> list[Tensor | None]:
    """Learned replacement weights: softmax_j LeakyReLU(a . [Wv_i || Wv_j])."""
    d = v.shape[1]
    if w.shape != (d, d) or a.shape != (2 * d,):
        raise ShapeError(f"variant_scores_gat: W {w.shape} / a {a.shape} vs d={d}")
    wv = ad.matmul(v, ad.transpose(w))
    a_col = ad.reshape(a, (2 * d, 1))
    out: list[Tensor | None] = []
    for i, support in enumerate(supports):
        if not support:
            out.append(None)
            continue
        vi = ad.gather_rows(wv, [i] * len(support))
        vj = ad.gather_rows(wv, list(support))
        cat = ad.concat([vi, vj], axis=-1)
        raw = ad.leaky_relu(ad.matmul(cat, a_col), slope)
        out.append(ad.softmax(ad.transpose(raw)))
    return out


def variant_scores_gatv2(
    v: Tensor,
    supports: list[tuple[int, ...]],
    a: Tensor,
    w: Tensor,
    slope: float = 0.2,
) -> list[Tensor | None]:
    """Reordered variant: softmax_j a . LeakyReLU(W [v_i || v_j])."""
    d = v.shape[1]
    if w.shape != (d, 2 * d) or a.shape != (d,):
        raise ShapeError(f"variant_scores_gatv2: W {w.shape} / a {a.shape} vs d={d}")
    a_col = ad.reshape(a, (d, 1))
    out: list[Tensor | None] = []
    for i, support in enumerate(supports):
        if not support:
            out.append(None)
            continue
        vi = ad.gather_rows(v, [i] * len(support))
        vj = ad.gather_rows(v, list(support))
        cat = ad.concat([vi, vj], axis=-1)
        hidden = ad.leaky_relu(ad.matmul(cat, ad.transpose(w)), slope)
        out.append(ad.softmax(ad.transpose(ad.matmul(hidden, a_col))))
    return out
