"""Mapping-quality and task metrics plus patient-level bootstrap."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .embedding import EmbeddingMatrix

log = logging.getLogger(__name__)


class DegenerateMappingError(ValueError):
    """A transformed embedding has zero norm, so cosine similarity is undefined."""


class MetricUndefined(ValueError):
    """Metric preconditions fail (e.g. only one class present)."""


@dataclass(frozen=True)
class MappingReport:
    similarity: float
    hit_at_10: float
    rows: tuple = ()

    def to_csv(self) -> str:
        out = ["target,source,cosine,rank"]
        out += [f"{t},{s},{c:.10g},{r}" for t, s, c, r in self.rows]
        return "\n".join(out) + "\n"


def _truth_pairs(truth) -> list[tuple[str, str]]:
    pairs = list(getattr(truth, "pairs", truth))
    if not pairs:
        raise ValueError("ground truth is empty")
    return pairs


def _mapped(W, emb_t: EmbeddingMatrix, emb_s: EmbeddingMatrix):
    W = np.asarray(W, dtype=float)
    if W.shape != (emb_t.d, emb_s.d):
        raise ValueError(f"W has shape {W.shape}, expected {(emb_t.d, emb_s.d)}")
    t = emb_t.vectors @ W
    nt = np.linalg.norm(t, axis=1)
    if np.any(nt == 0):
        raise DegenerateMappingError(f"mapping sends {int(np.sum(nt == 0))} target code(s) to the zero vector")
    ns = np.linalg.norm(emb_s.vectors, axis=1)
    if np.any(ns == 0):
        raise DegenerateMappingError("source embedding has zero-norm rows")
    return t / nt[:, None], emb_s.vectors / ns[:, None]


def _index_pairs(pairs, emb_t, emb_s):
    try:
        return [(emb_t.index_of(t), emb_s.index_of(s)) for t, s in pairs]
    except KeyError as exc:
        raise ValueError(f"ground truth references an unknown code: {exc.args[0]}") from None


def mapping_similarity(W, emb_t: EmbeddingMatrix, emb_s: EmbeddingMatrix, truth) -> float:
    """Mean cosine(e_t W, e_s) over all ground-truth pairs."""
    idx = _index_pairs(_truth_pairs(truth), emb_t, emb_s)
    t, s = _mapped(W, emb_t, emb_s)
    return float(np.mean([t[i] @ s[j] for i, j in idx]))


def _ranks(W, emb_t, emb_s, truth):
    pairs = _truth_pairs(truth)
    idx = _index_pairs(pairs, emb_t, emb_s)
    t, s = _mapped(W, emb_t, emb_s)
    sims = t @ s.T
    # stable sort on negated similarity: ties go to the lower source index
    order = np.argsort(-sims, axis=1, kind="stable")
    rank = np.empty_like(order)
    rows = np.arange(order.shape[0])[:, None]
    rank[rows, order] = np.arange(order.shape[1])[None, :]
    return pairs, idx, sims, rank


def hit_at_k(W, emb_t: EmbeddingMatrix, emb_s: EmbeddingMatrix, truth, k: int = 10) -> float:
    """Fraction of target codes having any true partner among their k nearest source codes."""
    if k < 1:
        raise ValueError("k must be at least 1")
    _, idx, _, rank = _ranks(W, emb_t, emb_s, truth)
    best: dict[int, int] = {}
    for i, j in idx:
        best[i] = min(best.get(i, rank.shape[1]), int(rank[i, j]))
    return float(np.mean([r < k for r in best.values()]))


def mapping_report(W, emb_t, emb_s, truth, k: int = 10) -> MappingReport:
    pairs, idx, sims, rank = _ranks(W, emb_t, emb_s, truth)
    rows = tuple((t, s, float(sims[i, j]), int(rank[i, j]) + 1) for (t, s), (i, j) in zip(pairs, idx))
    return MappingReport(mapping_similarity(W, emb_t, emb_s, truth), hit_at_k(W, emb_t, emb_s, truth, k), rows)


def _binary(scores, labels):
    scores = np.asarray(scores, dtype=float).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError("scores and labels differ in length")
    if scores.size == 0:
        raise MetricUndefined("empty input")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValueError("labels must be 0/1")
    return scores, labels.astype(int)


def _midranks(x):
    xs = np.sort(x)
    return 0.5 * (np.searchsorted(xs, x, "left") + np.searchsorted(xs, x, "right") + 1)


def auc_roc(scores, labels) -> float:
    """Mann-Whitney statistic: P(score_pos > score_neg) + 0.5 P(tie)."""
    scores, labels = _binary(scores, labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefined("AUC-ROC needs both classes")
    r = _midranks(scores)
    u = r[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_pr(scores, labels) -> float:
    """Area under the precision-recall step curve (average precision); tied scores enter together."""
    scores, labels = _binary(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise MetricUndefined("AUC-PR needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    tp = np.cumsum(y)[last]
    fp = (last + 1) - tp
    precision = tp / (tp + fp)
    recall_gain = np.diff(np.r_[0, tp]) / n_pos
    return float(np.sum(recall_gain * precision))


def weighted_f1(pred, true) -> float:
    """Per-class F1 averaged with weights equal to true-class support."""
    pred, true = np.asarray(pred).ravel(), np.asarray(true).ravel()
    if pred.size == 0 or pred.shape != true.shape:
        raise MetricUndefined("weighted F1 needs equal-length non-empty inputs")
    total = 0.0
    for c in np.unique(true):
        tp = np.sum((pred == c) & (true == c))
        fp = np.sum((pred == c) & (true != c))
        fn = np.sum((pred != c) & (true == c))
        f1 = 0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn)
        total += f1 * np.sum(true == c)
    return float(total / true.size)


def ovo_weighted_auc(prob, true) -> float:
    """One-vs-one AUC over class pairs present, weighted by pair prevalence.

    For a pair (a, b) the pair score is the mean of AUC(p_a | a vs b) and AUC(p_b | b vs a).
    """
    prob, true = np.asarray(prob, dtype=float), np.asarray(true).ravel()
    if prob.ndim != 2 or prob.shape[0] != true.size or true.size == 0:
        raise MetricUndefined("ovo AUC needs an (n, classes) probability matrix and n labels")
    present = np.unique(true)
    if present.size < 2:
        raise MetricUndefined("ovo AUC needs at least two classes")
    num = den = 0.0
    for ia, a in enumerate(present):
        for b in present[ia + 1:]:
            sel = (true == a) | (true == b)
            ya = (true[sel] == a).astype(int)
            pair = 0.5 * (auc_roc(prob[sel, a], ya) + auc_roc(prob[sel, b], 1 - ya))
            w = sel.sum() / true.size
            num += w * pair
            den += w
    return float(num / den)


def bootstrap(
    metric: Callable[[np.ndarray], float],
    groups: Sequence,
    n: int = 1000,
    seed: int = 0,
) -> tuple[float, float]:
    """Resample patients with replacement; ``metric`` gets the example indices of a replicate.

    ``groups`` lists the patient id of every example. Replicates whose metric
    raises :class:`MetricUndefined` are redrawn; if more than half of all draws
    fail the bootstrap gives up.
    """
    groups = np.asarray(groups)
    if groups.size == 0:
        raise ValueError("bootstrap needs data")
    if n < 1:
        raise ValueError("n must be positive")
    uniq, inv = np.unique(groups, return_inverse=True)
    members = [np.flatnonzero(inv == g) for g in range(uniq.size)]
    rng = np.random.default_rng(seed)
    values, failures = [], 0
    while len(values) < n:
        pick = rng.integers(0, uniq.size, uniq.size)
        idx = np.concatenate([members[p] for p in pick])
        try:
            values.append(float(metric(idx)))
        except MetricUndefined:
            failures += 1
            # more than n failures means over half of all draws failed
            if failures > n:
                raise MetricUndefined(f"metric undefined on {failures} of {failures + len(values)} resamples") from None
    if failures:
        log.info("bootstrap redrew %d failing replicate(s)", failures)
    v = np.asarray(values)
    return float(v.mean()), float(v.std())


TASK_METRICS = {"mortality": ("auc_roc", "auc_pr"), "length_of_stay": ("ovo_auc", "weighted_f1")}


def _metric_fn(name: str, prob: np.ndarray, labels: np.ndarray):
    if name == "auc_roc":
        return lambda idx: auc_roc(prob[idx, 1], labels[idx])
    if name == "auc_pr":
        return lambda idx: auc_pr(prob[idx, 1], labels[idx])
    if name == "ovo_auc":
        return lambda idx: ovo_weighted_auc(prob[idx], labels[idx])
    if name == "weighted_f1":
        pred = np.argmax(prob, axis=1)
        return lambda idx: weighted_f1(pred[idx], labels[idx])
    raise ValueError(f"unknown metric {name!r}")


def task_report(task: str, prob, labels, patients, n_boot: int = 1000, seed: int = 0) -> dict[str, tuple[float, float]]:
    """Bootstrap (mean, std) of the task's metrics, resampling patients."""
    if task not in TASK_METRICS:
        raise ValueError(f"unknown task {task!r}")
    prob, labels = np.asarray(prob, dtype=float), np.asarray(labels)
    return {m: bootstrap(_metric_fn(m, prob, labels), patients, n_boot, seed) for m in TASK_METRICS[task]}
