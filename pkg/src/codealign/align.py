"""Ontology-level alignment: grouping, unsupervised seed induction and iterative Procrustes.

All group embeddings are length-normalized before matching, so every
objective here is a sum of cosine similarities.
"""
from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import Ontology
from .embedding import EmbeddingMatrix
from .numerics import cosine_similarity_matrix, procrustes_from_pairs, row_normalize

log = logging.getLogger(__name__)

LEAF_LEVEL = -1  # level tag for anchors from the final code-level pass


@dataclass(frozen=True)
class GroupSet:
    level: int
    ids: tuple[str, ...]
    members: tuple[tuple[str, ...], ...]
    means: np.ndarray
    medians: np.ndarray
    median_codes: tuple[str, ...]

    @property
    def k(self) -> int:
        return len(self.ids)


@dataclass(frozen=True)
class SimilarityProfile:
    M: np.ndarray
    M_sorted: np.ndarray


@dataclass
class AnchorDictionary:
    """Matched (target, source) group embeddings, each tagged with its level."""

    target: np.ndarray
    source: np.ndarray
    levels: list[int] = field(default_factory=list)
    target_ids: list[str] = field(default_factory=list)
    source_ids: list[str] = field(default_factory=list)

    @classmethod
    def empty(cls, d: int) -> "AnchorDictionary":
        return cls(np.zeros((0, d)), np.zeros((0, d)))

    def __len__(self):
        return self.target.shape[0]

    def merge(self, other: "AnchorDictionary") -> "AnchorDictionary":
        return AnchorDictionary(
            np.vstack([self.target, other.target]),
            np.vstack([self.source, other.source]),
            self.levels + other.levels,
            self.target_ids + other.target_ids,
            self.source_ids + other.source_ids,
        )

    def select(self, mask) -> "AnchorDictionary":
        idx = np.flatnonzero(mask)
        return AnchorDictionary(
            self.target[idx],
            self.source[idx],
            [self.levels[i] for i in idx],
            [self.target_ids[i] for i in idx],
            [self.source_ids[i] for i in idx],
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("level\ttarget\tsource\n")
            for lvl, t, s in zip(self.levels, self.target_ids, self.source_ids):
                fh.write(f"{lvl}\t{t}\t{s}\n")


@dataclass(frozen=True)
class AlignConfig:
    k: int = 50
    max_level: int = 0  # 0: deepest internal level across both ontologies
    procrustes_iters: int = 20
    grouping: str = "ontology"
    leaf_k: int = 0  # 0: every code takes part in the final leaf pass
    seed: int = 0
    kmeans_ks: tuple = ()  # cluster counts per level; empty: one level with k = n^(2/3)
    restarts: int = 10  # k-means mode only: independent clusterings, best kept
    select_start: bool = True  # ontology mode: try every starting level, best kept

    def validate(self) -> None:
        if self.restarts < 1:
            raise ValueError("restarts must be at least 1")
        if any(int(k) < 2 for k in self.kmeans_ks):
            raise ValueError("every k-means level needs at least 2 clusters")
        if self.k < 2:
            raise ValueError("k must be at least 2")
        if self.procrustes_iters < 1:
            raise ValueError("procrustes_iters must be at least 1")
        if self.grouping not in ("ontology", "kmeans"):
            raise ValueError(f"unknown grouping mode {self.grouping!r}")


@dataclass
class AlignResult:
    W: np.ndarray
    anchors: AnchorDictionary
    objective: list[float] = field(default_factory=list)


def _median_embedding(vecs: np.ndarray) -> tuple[np.ndarray, int]:
    mean = vecs.mean(axis=0)
    if np.linalg.norm(mean) == 0:
        return mean, 0
    sims = cosine_similarity_matrix(vecs, mean[None, :])[:, 0]
    return mean, int(np.argmax(sims))


def _group_set(emb: EmbeddingMatrix, level: int, named: dict[str, list[str]], k: int) -> GroupSet:
    order = sorted(named, key=lambda g: (-len(named[g]), g))[:k]
    means, medians, med_codes, members = [], [], [], []
    for gid in order:
        codes = named[gid]
        vecs = emb.rows(codes)
        mean, pick = _median_embedding(vecs)
        means.append(mean)
        medians.append(vecs[pick])
        med_codes.append(codes[pick])
        members.append(tuple(codes))
    return GroupSet(level, tuple(order), tuple(members), np.array(means), np.array(medians), tuple(med_codes))


def group_by_ontology(emb: EmbeddingMatrix, ontology: Ontology, level: int, k: int) -> GroupSet:
    """Group codes by their level-``level`` category; keep the ``k`` largest groups.

    The group embedding is the member closest in cosine to the group mean.
    """
    named: dict[str, list[str]] = defaultdict(list)
    for code in emb.codes:
        if code not in ontology.nodes or ontology.depth(code) < level:
            continue
        named[ontology.ancestor(code, level)].append(code)
    if len(named) < 2:
        raise ValueError(f"level {level} yields {len(named)} nonempty group(s); need at least 2")
    return _group_set(emb, level, named, k)


def kmeans(x: np.ndarray, k: int, seed: int = 0, max_iter: int = 100, n_init: int = 10) -> tuple[np.ndarray, np.ndarray]:
    """Best-inertia result over ``n_init`` k-means++ seeded Lloyd runs."""
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    if k > n:
        raise ValueError(f"k={k} exceeds the number of points ({n})")
    if k < 1 or n_init < 1:
        raise ValueError("k and n_init must be positive")
    rng = np.random.default_rng(seed)
    best, best_inertia = None, np.inf
    for _ in range(n_init):
        labels, centers = _lloyd(x, k, rng, max_iter)
        inertia = float(np.sum((x - centers[labels]) ** 2))
        if inertia < best_inertia - 1e-12:
            best, best_inertia = (labels, centers), inertia
    return best


def _lloyd(x, k, rng, max_iter):
    n = x.shape[0]
    centers = [x[int(rng.integers(n))]]
    closest = np.sum((x - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            idx = int(np.flatnonzero(~np.any(np.all(x[:, None] == np.array(centers)[None], axis=2), axis=1))[0])
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers.append(x[idx])
        closest = np.minimum(closest, np.sum((x - x[idx]) ** 2, axis=1))
    centers = np.array(centers)
    labels = None
    for _ in range(max_iter):
        dist = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new = np.argmin(dist, axis=1)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for j in range(k):
            if np.any(labels == j):
                centers[j] = x[labels == j].mean(axis=0)
    return labels, centers


def group_by_kmeans(emb: EmbeddingMatrix, k: int, seed: int = 0, level: int = 0) -> GroupSet:
    labels, _ = kmeans(emb.vectors, k, seed)
    named: dict[str, list[str]] = defaultdict(list)
    width = len(str(k - 1))
    for code, lab in zip(emb.codes, labels):
        named[f"km{int(lab):0{width}d}"].append(code)
    return _group_set(emb, level, named, k)


def singleton_groups(emb: EmbeddingMatrix, k: int = 0, counts=None) -> GroupSet:
    """Every code its own group, optionally capped to the ``k`` most frequent."""
    codes = list(emb.codes)
    if k and k < len(codes):
        freq = np.zeros(len(codes)) if counts is None else np.asarray(counts, dtype=float)
        order = sorted(range(len(codes)), key=lambda i: (-freq[i], codes[i]))[:k]
        codes = [codes[i] for i in sorted(order)]
    vecs = emb.rows(codes)
    return GroupSet(LEAF_LEVEL, tuple(codes), tuple((c,) for c in codes), vecs, vecs, tuple(codes))


def similarity_profile(groups: GroupSet) -> SimilarityProfile:
    m = cosine_similarity_matrix(groups.medians, groups.medians)
    return SimilarityProfile(m, -np.sort(-m, axis=1, kind="stable"))


def seed_matching(g_t: GroupSet, g_s: GroupSet) -> np.ndarray:
    """For each target group, the source group with the most similar sorted profile.

    Sorted rows are truncated to the shorter profile and length-normalized so
    identical profiles always win.
    """
    if g_t.medians.shape[1] != g_s.medians.shape[1]:
        raise ValueError("target and source groups have different dimensions")
    if g_t.k == 0 or g_s.k == 0:
        raise ValueError("seed induction needs non-empty group sets")
    pt, ps = similarity_profile(g_t).M_sorted, similarity_profile(g_s).M_sorted
    m = min(pt.shape[1], ps.shape[1])
    pt, ps = _unit_rows(pt[:, :m]), _unit_rows(ps[:, :m])
    return np.argmax(pt @ ps.T, axis=1)


def _unit_rows(a: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(a, axis=1, keepdims=True)
    return a / np.where(norms == 0, 1.0, norms)


def _anchors(g_t: GroupSet, g_s: GroupSet, match: np.ndarray, level: int) -> AnchorDictionary:
    tn, sn = row_normalize(g_t.medians), row_normalize(g_s.medians)
    return AnchorDictionary(
        tn.copy(),
        sn[match],
        [level] * g_t.k,
        list(g_t.ids),
        [g_s.ids[j] for j in match],
    )


def induce_seed(g_t: GroupSet, g_s: GroupSet, level: int | None = None) -> AnchorDictionary:
    """Unsupervised anchors: one (target, source) pair per target group."""
    match = seed_matching(g_t, g_s)
    return _anchors(g_t, g_s, match, g_t.level if level is None else level)


def procrustes_refine(
    g_t: GroupSet,
    g_s: GroupSet,
    anchors: AnchorDictionary,
    iters: int,
    level: int | None = None,
    objective: list | None = None,
) -> tuple[np.ndarray, AnchorDictionary]:
    """Alternate the closed-form Procrustes step with nearest-group re-matching.

    Anchors tagged with ``level`` are re-induced each round from the current W;
    anchors from other levels stay fixed. Stops early once the matching repeats.
    """
    if len(anchors) == 0:
        raise ValueError("procrustes_refine needs a non-empty anchor dictionary")
    if iters < 1:
        raise ValueError("iters must be at least 1")
    level = g_t.level if level is None else level
    current = np.array([lv == level for lv in anchors.levels], dtype=bool)
    fixed = anchors.select(~current)
    tn, sn = row_normalize(g_t.medians), row_normalize(g_s.medians)
    s_pos = {gid: j for j, gid in enumerate(g_s.ids)}
    if current.any():
        cur = anchors.select(current)
        if cur.target_ids != list(g_t.ids):
            raise ValueError("current-level anchors do not cover the target groups")
        match = np.array([s_pos[s] for s in cur.source_ids])
    else:
        match = None
    W = None
    for _ in range(iters):
        if match is None:
            x, y = fixed.target, fixed.source
        else:
            x, y = np.vstack([fixed.target, tn]), np.vstack([fixed.source, sn[match]])
        W = procrustes_from_pairs(x, y)
        if objective is not None:
            objective.append(float(np.sum((x @ W) * y)))
        new = np.argmax(tn @ W @ sn.T, axis=1)
        if match is not None and np.array_equal(new, match):
            break
        match = new
    return W, fixed.merge(_anchors(g_t, g_s, match, level))


def _levels(ontology: Ontology, codes: Sequence[str]) -> int:
    return max(ontology.depth(c) for c in codes if c in ontology.nodes)


def _kmeans_schedule(n_codes: int, config: AlignConfig) -> list[int]:
    ks = [int(k) for k in config.kmeans_ks] or [int(round(n_codes ** (2.0 / 3.0)))]
    return [max(2, min(k, config.k, n_codes)) for k in ks]


def mean_best_match(W: np.ndarray, emb_t: EmbeddingMatrix, emb_s: EmbeddingMatrix) -> float:
    """Unsupervised fit score: mean over target codes of the best cosine to any source code."""
    sims = row_normalize(emb_t.vectors) @ W @ row_normalize(emb_s.vectors).T
    return float(sims.max(axis=1).mean())


def _run_levels(schedule, emb_t, emb_s, config, target_counts, source_counts) -> AlignResult:
    anchors = AnchorDictionary.empty(emb_t.d)
    objective: list[float] = []
    for lv, g_t, g_s in schedule:
        seeds = induce_seed(g_t, g_s, level=lv)
        anchors = anchors.merge(seeds)
        W, anchors = procrustes_refine(g_t, g_s, anchors, config.procrustes_iters, lv, objective)
        log.debug("level %d: k_t=%d k_s=%d anchors=%d", lv, g_t.k, g_s.k, len(anchors))
    W, anchors = leaf_pass(emb_t, emb_s, W, anchors, config, target_counts, source_counts, objective)
    return AlignResult(W, anchors, objective)


def ontology_align(
    emb_t: EmbeddingMatrix,
    emb_s: EmbeddingMatrix,
    onto_t: Ontology | None,
    onto_s: Ontology | None,
    config: AlignConfig = AlignConfig(),
    target_counts=None,
    source_counts=None,
) -> AlignResult:
    """Coarse-to-fine self-supervised alignment; returns an orthogonal W (d x d).

    Levels run from 1 to ``max_level`` with each side's level clamped at its
    own deepest leaf. Anchors accumulate across levels. A final pass treats
    every code as its own group.

    With ``grouping="kmeans"`` the ontologies are ignored and groups come from
    clustering each embedding space separately. Clusterings on the two sides
    need not correspond, so several restarts run and the one with the highest
    :func:`mean_best_match` wins.
    """
    config.validate()
    if emb_t.d != emb_s.d:
        raise ValueError(f"embedding dimensions differ: {emb_t.d} vs {emb_s.d}")
    counts = (target_counts, source_counts)

    if config.grouping == "ontology":
        if onto_t is None or onto_s is None:
            raise ValueError("ontology grouping needs both ontologies")
        depth_t, depth_s = _levels(onto_t, emb_t.codes), _levels(onto_s, emb_s.codes)
        max_level = config.max_level or max(depth_t, depth_s) - 1
        if max_level < 1:
            raise ValueError("need at least one ontology level above the leaves")
        schedule = []
        for lv in range(1, max_level + 1):
            schedule.append((
                lv,
                group_by_ontology(emb_t, onto_t, min(lv, depth_t), config.k),
                group_by_ontology(emb_s, onto_s, min(lv, depth_s), config.k),
            ))
        if not config.select_start:
            return _run_levels(schedule, emb_t, emb_s, config, *counts)
        # a wrong match at a very coarse level is never undone later, so try every
        # starting level and keep the run whose codes find the closest partners
        return _best_run([schedule[i:] for i in range(len(schedule))], emb_t, emb_s, config, counts, "start level")

    ks = _kmeans_schedule(min(len(emb_t.codes), len(emb_s.codes)), config)
    schedules = []
    for r in range(config.restarts):
        base = config.seed + 1000 * r
        schedules.append([
            (lv, group_by_kmeans(emb_t, k, base + 2 * lv, level=lv), group_by_kmeans(emb_s, k, base + 2 * lv + 1, level=lv))
            for lv, k in enumerate(ks, 1)
        ])
    return _best_run(schedules, emb_t, emb_s, config, counts, "k-means restart")


def _best_run(schedules, emb_t, emb_s, config, counts, what: str) -> AlignResult:
    """Run each schedule; keep the highest :func:`mean_best_match` (first one wins ties)."""
    best, best_score = None, -np.inf
    for i, schedule in enumerate(schedules):
        result = _run_levels(schedule, emb_t, emb_s, config, *counts)
        score = mean_best_match(result.W, emb_t, emb_s)
        log.debug("%s %d: score %.4f", what, i, score)
        if score > best_score:
            best, best_score = result, score
    return best


def leaf_pass(emb_t, emb_s, W, anchors, config, target_counts=None, source_counts=None, objective=None):
    """Refine at code level starting from the nearest neighbours under ``W``."""
    g_t = singleton_groups(emb_t, config.leaf_k, target_counts)
    g_s = singleton_groups(emb_s, config.leaf_k, source_counts)
    match = np.argmax(row_normalize(g_t.medians) @ W @ row_normalize(g_s.medians).T, axis=1)
    anchors = anchors.merge(_anchors(g_t, g_s, match, LEAF_LEVEL))
    return procrustes_refine(g_t, g_s, anchors, config.procrustes_iters, LEAF_LEVEL, objective)


def code_level_align(emb_t, emb_s, config: AlignConfig = AlignConfig(), target_counts=None, source_counts=None) -> AlignResult:
    """Single code-level pass: seed induction over all codes, then Procrustes refinement."""
    config.validate()
    g_t = singleton_groups(emb_t, config.leaf_k, target_counts)
    g_s = singleton_groups(emb_s, config.leaf_k, source_counts)
    objective: list[float] = []
    anchors = induce_seed(g_t, g_s, level=LEAF_LEVEL)
    W, anchors = procrustes_refine(g_t, g_s, anchors, config.procrustes_iters, LEAF_LEVEL, objective)
    return AlignResult(W, anchors, objective)


def random_ontology(ontology: Ontology, seed: int = 0) -> Ontology:
    """Same shape, leaves shuffled across leaf slots."""
    leaves = ontology.leaves
    perm = np.random.default_rng(seed).permutation(len(leaves))
    rename = {leaves[i]: leaves[j] for i, j in enumerate(perm)}
    return Ontology((p, rename.get(c, c)) for p, c in ontology.edges)


def save_anchors(anchors: AnchorDictionary, path) -> None:
    anchors.save(Path(path))
