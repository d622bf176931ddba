"""Global co-occurrence counting and GloVe code embeddings."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import Corpus
from .numerics import row_normalize

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CooccurrenceMatrix:
    """Symmetric visit-level co-occurrence counts with the diagonal excluded."""

    codes: tuple[str, ...]
    counts: np.ndarray

    @property
    def dim(self) -> int:
        return len(self.codes)

    def entries(self) -> dict[tuple[int, int], float]:
        i, j = np.nonzero(self.counts)
        return {(int(a), int(b)): float(self.counts[a, b]) for a, b in zip(i, j)}


@dataclass(frozen=True)
class EmbeddingMatrix:
    codes: tuple[str, ...]
    vectors: np.ndarray
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        vectors = np.asarray(self.vectors, dtype=np.float64)
        if vectors.ndim != 2 or vectors.shape[0] != len(self.codes):
            raise ValueError(f"expected {len(self.codes)} rows, got array of shape {vectors.shape}")
        if not np.all(np.isfinite(vectors)):
            raise ValueError("embedding contains non-finite values")
        object.__setattr__(self, "vectors", vectors)
        object.__setattr__(self, "_index", {c: i for i, c in enumerate(self.codes)})

    @property
    def d(self) -> int:
        return self.vectors.shape[1]

    def index_of(self, code: str) -> int:
        try:
            return self._index[code]
        except KeyError:
            raise KeyError(f"code {code!r} not in embedding vocabulary") from None

    def lookup(self, code: str) -> np.ndarray:
        return self.vectors[self.index_of(code)]

    def rows(self, codes: Sequence[str]) -> np.ndarray:
        return self.vectors[[self.index_of(c) for c in codes]]

    def __eq__(self, other):
        return (
            isinstance(other, EmbeddingMatrix)
            and self.codes == other.codes
            and np.array_equal(self.vectors, other.vectors)
        )


@dataclass(frozen=True)
class GloveConfig:
    d: int = 128
    epochs: int = 50
    learning_rate: float = 0.05
    x_max: float = 100.0
    alpha: float = 0.75
    batch_size: int = 32
    seed: int = 0

    def validate(self) -> None:
        if self.d < 2 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("GloVe needs d >= 2, epochs >= 1, batch_size >= 1")
        if self.learning_rate <= 0 or self.x_max <= 0:
            raise ValueError("learning_rate and x_max must be positive")


def visit_count_matrix(corpus: Corpus, visits=None) -> np.ndarray:
    """One row per visit holding per-code multiplicities."""
    visits = visits if visits is not None else [v for p in corpus.patients for v in p.visits]
    out = np.zeros((len(visits), len(corpus.vocabulary)))
    for r, v in enumerate(visits):
        for c in v.codes:
            out[r, corpus.index_of(c)] += 1
    return out


def build_cooccurrence(corpus: Corpus) -> CooccurrenceMatrix:
    """X_ij = number of (i, j) code pairs sharing a visit, summed over visits."""
    if not corpus.patients:
        raise ValueError("cannot count co-occurrences of an empty corpus")
    counts = visit_count_matrix(corpus)
    x = counts.T @ counts
    np.fill_diagonal(x, 0.0)
    return CooccurrenceMatrix(tuple(corpus.code_ids), x)


def glove_weight(x, x_max: float, alpha: float):
    return np.minimum(1.0, (np.asarray(x, dtype=float) / x_max) ** alpha)


def glove_loss(params, rows, cols, x, x_max=100.0, alpha=0.75) -> float:
    """Weighted least-squares GloVe objective over the listed entries."""
    w, wc, b, bc = params
    diff = np.sum(w[rows] * wc[cols], axis=1) + b[rows] + bc[cols] - np.log(x)
    return float(np.sum(glove_weight(x, x_max, alpha) * diff * diff))


def glove_grad(params, rows, cols, x, x_max=100.0, alpha=0.75):
    """Gradient of :func:`glove_loss` with respect to (w, w_ctx, b, b_ctx)."""
    w, wc, b, bc = params
    diff = np.sum(w[rows] * wc[cols], axis=1) + b[rows] + bc[cols] - np.log(x)
    g = 2.0 * glove_weight(x, x_max, alpha) * diff
    gw, gwc = np.zeros_like(w), np.zeros_like(wc)
    gb, gbc = np.zeros_like(b), np.zeros_like(bc)
    np.add.at(gw, rows, g[:, None] * wc[cols])
    np.add.at(gwc, cols, g[:, None] * w[rows])
    np.add.at(gb, rows, g)
    np.add.at(gbc, cols, g)
    return gw, gwc, gb, gbc


def train_glove(cooc: CooccurrenceMatrix, config: GloveConfig = GloveConfig(), history=None) -> EmbeddingMatrix:
    """Fit GloVe vectors with AdaGrad over shuffled mini-batches of nonzero entries.

    Returns w + w_ctx per code. ``history``, if a list, receives the full-pass
    loss before training and after every epoch.
    """
    config.validate()
    x_all = np.asarray(cooc.counts, dtype=float)
    rows, cols = np.nonzero(x_all)
    if rows.size == 0:
        raise ValueError("co-occurrence matrix is all zero: nothing to train on")
    vals = x_all[rows, cols]
    n, d = cooc.dim, config.d
    rng = np.random.default_rng(config.seed)
    params = [
        (rng.random((n, d)) - 0.5) / d,
        (rng.random((n, d)) - 0.5) / d,
        np.zeros(n),
        np.zeros(n),
    ]
    accum = [np.ones_like(p) for p in params]
    args = (config.x_max, config.alpha)

    def full_loss():
        return glove_loss(params, rows, cols, vals, *args)

    if history is not None:
        history.append(full_loss())
    bs = config.batch_size
    for _ in range(config.epochs):
        order = rng.permutation(rows.size)
        for start in range(0, order.size, bs):
            sel = order[start:start + bs]
            grads = glove_grad(params, rows[sel], cols[sel], vals[sel], *args)
            for p, g, a in zip(params, grads, accum):
                a += g * g
                p -= config.learning_rate * g / np.sqrt(a)
        if history is not None:
            history.append(full_loss())
    log.debug("glove: %d codes, %d entries, final loss %.4f", n, rows.size, full_loss())
    return EmbeddingMatrix(cooc.codes, params[0] + params[1])


def normalize_embedding(emb: EmbeddingMatrix) -> EmbeddingMatrix:
    """Unit-length rows, mean-centred, then unit length again.

    Centring removes the common direction GloVe vectors share, which otherwise
    dominates every cosine and hides the structure alignment relies on.
    """
    v = row_normalize(emb.vectors)
    return EmbeddingMatrix(emb.codes, row_normalize(v - v.mean(axis=0)))


def save_embedding(emb: EmbeddingMatrix, path) -> None:
    lines = [f"{len(emb.codes)} {emb.d}"]
    lines += [c + " " + " ".join(f"{x:.17g}" for x in row) for c, row in zip(emb.codes, emb.vectors)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_embedding(path) -> EmbeddingMatrix:
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not lines:
        raise ValueError(f"{path}: empty embedding file")
    try:
        n, d = (int(x) for x in lines[0].split())
    except ValueError:
        raise ValueError(f"{path}:1: expected 'num_codes dim' header") from None
    if len(lines) - 1 != n:
        raise ValueError(f"{path}: header declares {n} codes, found {len(lines) - 1}")
    codes, vecs = [], np.empty((n, d))
    for i, ln in enumerate(lines[1:]):
        parts = ln.split()
        if len(parts) != d + 1:
            raise ValueError(f"{path}:{i + 2}: expected code id and {d} values")
        codes.append(parts[0])
        vecs[i] = [float(v) for v in parts[1:]]
    return EmbeddingMatrix(tuple(codes), vecs)
