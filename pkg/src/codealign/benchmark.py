"""Synthetic comparison of the alignment pipeline against its baselines and ablations.

Per seed: generate a source/target pair, embed both, fit a source task model,
then score every method on the held-out target test split. The table averages
per-seed bootstrap estimates over seeds.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import align as A
from . import refine as R
from .corpus import GeneratorConfig, generate_synthetic, split_corpus
from .embedding import GloveConfig, build_cooccurrence, normalize_embedding, train_glove
from .eval import hit_at_k, mapping_similarity, task_report
from .seeds import derive_seed

log = logging.getLogger(__name__)

METHODS = (
    "full_label", "direct", "transfer", "code_level", "step2_only",
    "step1_only", "step1_random_ontology", "full", "step1_kmeans",
)
STEP1_METHODS = ("step1_only", "step1_random_ontology", "step1_kmeans", "code_level")


@dataclass(frozen=True)
class BenchmarkConfig:
    seeds: tuple = (0, 1, 2)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    glove: GloveConfig = field(default_factory=lambda: GloveConfig(d=32, epochs=300, batch_size=256))
    align: A.AlignConfig = field(default_factory=lambda: A.AlignConfig(k=100, kmeans_ks=(2, 4, 16, 64)))
    refine: R.RefineConfig = field(default_factory=R.RefineConfig)
    train: R.TrainConfig = field(default_factory=R.TrainConfig)
    label_budget: int = 100
    split: tuple = (0.7, 0.1, 0.2)
    tasks: tuple = ("mortality",)
    backbone: str = "mlp"
    n_bootstrap: int = 1000
    methods: tuple = METHODS

    def validate(self):
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ValueError(f"unknown method(s): {sorted(unknown)}")
        if self.label_budget < 1:
            raise ValueError("label_budget must be positive")
        if not self.seeds:
            raise ValueError("need at least one seed")
        for t in self.tasks:
            if t not in R.TASK_CLASSES:
                raise ValueError(f"unknown task {t!r}")


@dataclass
class Prepared:
    """Everything one seed's methods share."""

    source: object
    target: object
    onto_s: object
    onto_t: object
    truth: object
    emb_s: object
    emb_t: object
    splits_s: tuple
    splits_t: tuple
    labelled: object


def prepare(config: BenchmarkConfig, seed: int) -> Prepared:
    gen = GeneratorConfig(**{**config.generator.__dict__, "seed": derive_seed(seed, "generate")})
    source, target, onto_s, onto_t, truth = generate_synthetic(gen)
    emb = {}
    for role, corpus in (("source", source), ("target", target)):
        gc = GloveConfig(**{**config.glove.__dict__, "seed": derive_seed(seed, "embed", role)})
        emb[role] = normalize_embedding(train_glove(build_cooccurrence(corpus), gc))
    splits_s = split_corpus(source, config.split, derive_seed(seed, "split", "source"))
    splits_t = split_corpus(target, config.split, derive_seed(seed, "split", "target"))
    train_t = splits_t[0]
    order = np.random.default_rng(derive_seed(seed, "labels")).permutation(len(train_t.patients))
    keep = sorted(order[:config.label_budget])
    labelled = train_t.subset([train_t.patients[i].id for i in keep])
    return Prepared(source, target, onto_s, onto_t, truth, emb["source"], emb["target"], splits_s, splits_t, labelled)


@dataclass
class SeedResult:
    seed: int
    task: dict = field(default_factory=dict)  # (method, task, metric) -> (mean, std)
    mapping: dict = field(default_factory=dict)  # (method, metric) -> value
    orthogonality: dict = field(default_factory=dict)  # method -> ||W^T W - I||_F
    seconds: float = 0.0


def code_frequencies(corpus, codes) -> np.ndarray:
    counts = corpus.code_counts()
    return np.array([counts[corpus.index_of(c)] for c in codes], dtype=float)


def _orth_error(W) -> float:
    return float(np.linalg.norm(W.T @ W - np.eye(W.shape[1])))


def run_seed(config: BenchmarkConfig, seed: int, prep: Prepared | None = None) -> SeedResult:
    t0 = time.time()
    config.validate()
    p = prep or prepare(config, seed)
    out = SeedResult(seed)
    methods = set(config.methods)
    E_t, E_s = p.emb_t.vectors, p.emb_s.vectors
    d = E_t.shape[1]
    counts_t = code_frequencies(p.target, p.emb_t.codes)
    counts_s = code_frequencies(p.source, p.emb_s.codes)

    def aligned(name, **kw):
        return A.AlignConfig(**{**config.align.__dict__, "seed": derive_seed(seed, "align", name), **kw})

    W = {}
    need_step1 = methods & {"step1_only", "full"}
    if need_step1:
        W["step1_only"] = A.ontology_align(p.emb_t, p.emb_s, p.onto_t, p.onto_s, aligned("step1"), counts_t, counts_s).W
    if "step1_random_ontology" in methods:
        rs, rt = derive_seed(seed, "random_ontology", "source"), derive_seed(seed, "random_ontology", "target")
        W["step1_random_ontology"] = A.ontology_align(
            p.emb_t, p.emb_s, A.random_ontology(p.onto_t, rt), A.random_ontology(p.onto_s, rs),
            aligned("random_ontology"), counts_t, counts_s).W
    if "step1_kmeans" in methods:
        W["step1_kmeans"] = A.ontology_align(p.emb_t, p.emb_s, None, None, aligned("kmeans", grouping="kmeans"),
                                             counts_t, counts_s).W
    if "code_level" in methods:
        W["code_level"] = A.code_level_align(p.emb_t, p.emb_s, aligned("code_level"), counts_t, counts_s).W
    for name, w in W.items():
        out.orthogonality[name] = _orth_error(w)
        out.mapping[(name, "hit_at_10")] = hit_at_k(w, p.emb_t, p.emb_s, p.truth, 10)
        out.mapping[(name, "similarity")] = mapping_similarity(w, p.emb_t, p.emb_s, p.truth)

    for task in config.tasks:
        data = {
            "s_train": R.task_data(p.splits_s[0], task, p.emb_s.codes),
            "s_val": R.task_data(p.splits_s[1], task, p.emb_s.codes),
            "t_train": R.task_data(p.splits_t[0], task, p.emb_t.codes),
            "t_val": R.task_data(p.splits_t[1], task, p.emb_t.codes),
            "t_test": R.task_data(p.splits_t[2], task, p.emb_t.codes),
            "t_lab": R.task_data(p.labelled, task, p.emb_t.codes),
        }
        test = data["t_test"]

        def train_cfg(name):
            return R.TrainConfig(**{**config.train.__dict__, "seed": derive_seed(seed, name, task)})

        def refine_cfg(name):
            return R.RefineConfig(**{**config.refine.__dict__, "seed": derive_seed(seed, name, task)})

        def score(method, backbone, emb):
            prob = backbone.predict_proba(test, emb)
            rep = task_report(task, prob, test.labels, test.patients, config.n_bootstrap,
                              derive_seed(seed, "bootstrap", method, task))
            for metric, value in rep.items():
                out.task[(method, task, metric)] = value
            log.info("seed %d %s %s %s", seed, task, method, {k: round(v[0], 4) for k, v in rep.items()})

        if "full_label" in methods:
            bb, emb = R.train_backbone_direct(data["t_train"], data["t_val"], len(p.emb_t.codes), d,
                                              config.backbone, train_cfg("full_label"))
            score("full_label", bb, emb)
        if "direct" in methods:
            bb, emb = R.train_backbone_direct(data["t_lab"], data["t_val"], len(p.emb_t.codes), d,
                                              config.backbone, train_cfg("direct"))
            score("direct", bb, emb)
        needs_source_model = methods - {"full_label", "direct"}
        if not needs_source_model:
            continue
        F = R.train_backbone_fixed(data["s_train"], data["s_val"], E_s, config.backbone, train_cfg("source_model"))
        if "transfer" in methods:
            bb, emb = R.transfer_learning(F, E_t, data["t_lab"], data["t_val"], train_cfg("transfer"))
            score("transfer", bb, emb)
        for name in STEP1_METHODS:
            if name in W:
                score(name, F, E_t @ W[name])
        if "full" in methods:
            res = R.refine_mapping(W["step1_only"], E_t, E_s, F, data["t_lab"], data["t_val"], refine_cfg("full"))
            score("full", F, E_t @ res.W)
        if "step2_only" in methods:
            W0 = R.random_orthogonal(d, derive_seed(seed, "step2_only", "init"))
            res = R.refine_mapping(W0, E_t, E_s, F, data["t_lab"], data["t_val"], refine_cfg("step2_only"))
            score("step2_only", F, E_t @ res.W)
    out.seconds = time.time() - t0
    return out


@dataclass
class BenchmarkResult:
    per_seed: list

    def rows(self) -> list[tuple]:
        """(method, task, metric, mean, std, seed_count) in a stable order."""
        task_keys = sorted({k for r in self.per_seed for k in r.task},
                           key=lambda k: (k[1], k[2], METHODS.index(k[0])))
        rows = []
        for key in task_keys:
            vals = [r.task[key] for r in self.per_seed if key in r.task]
            rows.append((*key, float(np.mean([v[0] for v in vals])), float(np.mean([v[1] for v in vals])), len(vals)))
        map_keys = sorted({k for r in self.per_seed for k in r.mapping}, key=lambda k: (k[1], METHODS.index(k[0])))
        for method, metric in map_keys:
            vals = [r.mapping[(method, metric)] for r in self.per_seed if (method, metric) in r.mapping]
            rows.append((method, "mapping", metric, float(np.mean(vals)), float(np.std(vals)), len(vals)))
        return rows

    def value(self, method: str, task: str, metric: str) -> float:
        for row in self.rows():
            if row[:3] == (method, task, metric):
                return row[3]
        raise KeyError((method, task, metric))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["method", "task", "metric", "mean", "std", "seed_count"])
            for m, t, k, mean, std, n in self.rows():
                w.writerow([m, t, k, f"{mean:.6f}", f"{std:.6f}", n])


def run_benchmark(config: BenchmarkConfig = BenchmarkConfig(), seeds: Iterable[int] | None = None) -> BenchmarkResult:
    config.validate()
    results = []
    for s in (config.seeds if seeds is None else seeds):
        r = run_seed(config, s)
        log.info("seed %d done in %.1fs", s, r.seconds)
        results.append(r)
    return BenchmarkResult(results)
