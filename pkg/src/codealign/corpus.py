"""Coded visit sequences, ontologies, the synthetic two-system generator and file IO."""
from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

ROOT = "ROOT"
LOS_BINS = (1.0, 7.0, 14.0)


class CorpusFormatError(ValueError):
    """Malformed corpus, ontology or truth file."""


@dataclass(frozen=True)
class Code:
    id: str
    index: int


@dataclass(frozen=True)
class Visit:
    codes: tuple[str, ...]
    los_days: float

    def __post_init__(self):
        if len(self.codes) == 0:
            raise ValueError("visit has no codes")
        if not self.los_days >= 0:
            raise ValueError(f"los_days must be non-negative, got {self.los_days}")


def derive_los_class(los_days: float) -> int:
    """Bin a length of stay into 0: <1d, 1: [1,7), 2: [7,14), 3: >=14d."""
    if not los_days >= 0:
        raise ValueError(f"length of stay must be non-negative, got {los_days}")
    for cls, edge in enumerate(LOS_BINS):
        if los_days < edge:
            return cls
    return len(LOS_BINS)


@dataclass(frozen=True)
class Patient:
    id: str
    visits: tuple[Visit, ...]
    mortality: int

    def __post_init__(self):
        if len(self.visits) == 0:
            raise ValueError(f"patient {self.id} has no visits")
        if self.mortality not in (0, 1):
            raise ValueError(f"patient {self.id}: mortality must be 0 or 1")

    @property
    def los_classes(self) -> tuple[int, ...]:
        return tuple(derive_los_class(v.los_days) for v in self.visits)


@dataclass(frozen=True)
class Corpus:
    role: str
    patients: tuple[Patient, ...]
    vocabulary: tuple[Code, ...]
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.role not in ("source", "target"):
            raise ValueError(f"role must be 'source' or 'target', got {self.role!r}")
        index = {}
        for pos, code in enumerate(self.vocabulary):
            if code.index != pos:
                raise ValueError(f"code {code.id} has index {code.index}, expected {pos}")
            if code.id in index:
                raise ValueError(f"duplicate code id {code.id}")
            index[code.id] = pos
        for p in self.patients:
            for v in p.visits:
                for c in v.codes:
                    if c not in index:
                        raise ValueError(f"patient {p.id} references unknown code {c!r}")
        object.__setattr__(self, "_index", index)

    @classmethod
    def build(cls, role: str, patients: Iterable[Patient], code_ids: Sequence[str]) -> "Corpus":
        vocab = tuple(Code(c, i) for i, c in enumerate(code_ids))
        return cls(role, tuple(patients), vocab)

    @property
    def code_ids(self) -> list[str]:
        return [c.id for c in self.vocabulary]

    def index_of(self, code_id: str) -> int:
        return self._index[code_id]

    def code_counts(self) -> np.ndarray:
        counts = np.zeros(len(self.vocabulary))
        for p in self.patients:
            for v in p.visits:
                for c in v.codes:
                    counts[self._index[c]] += 1
        return counts

    def subset(self, patient_ids: Iterable[str]) -> "Corpus":
        keep = set(patient_ids)
        return Corpus(self.role, tuple(p for p in self.patients if p.id in keep), self.vocabulary)

    def __len__(self):
        return len(self.patients)


class Ontology:
    """Rooted DAG over leaf codes and intermediate categories.

    Where a node has several parents the first declared one defines its path
    to the root, so ``ancestor`` is a function.
    """

    def __init__(self, edges: Iterable[tuple[str, str]]):
        self.edges: list[tuple[str, str]] = list(edges)
        self.children: dict[str, list[str]] = defaultdict(list)
        self.parents: dict[str, list[str]] = defaultdict(list)
        for parent, child in self.edges:
            if child == ROOT:
                raise ValueError("ROOT cannot be a child")
            self.children[parent].append(child)
            self.parents[child].append(parent)
        nodes = {ROOT} | {c for _, c in self.edges}
        for parent, child in self.edges:
            if parent not in nodes:
                raise ValueError(f"edge {parent}->{child} references undeclared node {parent!r}")
        self.nodes = nodes
        self._levels: dict[str, int] = {ROOT: 0}
        self._path: dict[str, tuple[str, ...]] = {ROOT: (ROOT,)}
        # path via first-declared parent; detect cycles on that chain
        for node in sorted(nodes):
            self._resolve(node)
        self._check_acyclic()

    def _resolve(self, node: str) -> tuple[str, ...]:
        chain = []
        cur = node
        seen = set()
        while cur not in self._path:
            if cur in seen:
                raise ValueError(f"cycle through node {cur!r}")
            seen.add(cur)
            chain.append(cur)
            cur = self.parents[cur][0]
        path = self._path[cur]
        for n in reversed(chain):
            path = path + (n,)
            self._path[n] = path
            self._levels[n] = len(path) - 1
        return self._path[node]

    def _check_acyclic(self) -> None:
        state: dict[str, int] = {}
        stack = [(ROOT, iter(self.children.get(ROOT, ())))]
        state[ROOT] = 1
        while stack:
            node, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                state[node] = 2
                stack.pop()
                continue
            st = state.get(nxt, 0)
            if st == 1:
                raise ValueError(f"cycle through node {nxt!r}")
            if st == 0:
                state[nxt] = 1
                stack.append((nxt, iter(self.children.get(nxt, ()))))

    @property
    def leaves(self) -> list[str]:
        return sorted(n for n in self.nodes if n != ROOT and not self.children.get(n))

    def level(self, node: str) -> int:
        if node not in self._levels:
            raise KeyError(f"unknown ontology node {node!r}")
        return self._levels[node]

    def depth(self, code: str) -> int:
        return self.level(code)

    @property
    def max_depth(self) -> int:
        return max(self.level(leaf) for leaf in self.leaves)

    def ancestor(self, code: str, level: int) -> str:
        """The node at ``level`` on the root-to-``code`` path (0 is ROOT)."""
        path = self._path.get(code)
        if path is None:
            raise KeyError(f"unknown ontology node {code!r}")
        if level < 0 or level >= len(path):
            raise ValueError(f"invalid level {level} for {code!r} at depth {len(path) - 1}")
        return path[level]

    def __eq__(self, other):
        return isinstance(other, Ontology) and sorted(self.edges) == sorted(other.edges)


def ancestor(code, level: int, ontology: Ontology) -> str:
    code_id = code.id if isinstance(code, Code) else code
    return ontology.ancestor(code_id, level)


@dataclass(frozen=True)
class GroundTruthMap:
    pairs: tuple[tuple[str, str], ...]

    def partners(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = defaultdict(list)
        for t, s in self.pairs:
            out[t].append(s)
        return dict(out)


@dataclass(frozen=True)
class GeneratorConfig:
    concept_tree_depth: int = 3
    branching: int = 4
    split_max: int = 3
    n_patients: int = 2000
    visits_mean: float = 4.0
    codes_per_visit_mean: float = 12.0
    topic_concentration: float = 0.2
    risk_concept_fraction: float = 0.2  # drawn per leaf-parent category; children inherit
    seed: int = 0
    n_topics: int = 0  # 0: one topic per leaf parent category
    topic_decay: float = 0.15
    noise: float = 0.05
    affinity_scale: float = 2.0
    affinity_density: float = 0.3
    hierarchy_affinity: float = 1.0
    risk_strength: float = 10.0

    def validate(self) -> None:
        if self.concept_tree_depth < 2 or self.branching < 2 or self.split_max < 1:
            raise ValueError("need concept_tree_depth >= 2, branching >= 2, split_max >= 1")
        if self.n_patients < 1 or self.visits_mean < 1 or self.codes_per_visit_mean < 1:
            raise ValueError("counts must be positive (visits/codes means >= 1)")
        if self.topic_concentration <= 0:
            raise ValueError("topic_concentration must be positive")
        if not 0 < self.risk_concept_fraction < 1:
            raise ValueError("risk_concept_fraction must lie in (0, 1)")
        if not 0 <= self.noise < 1:
            raise ValueError("noise must lie in [0, 1)")
        if not 0 < self.topic_decay <= 1 or not 0 <= self.affinity_density <= 1:
            raise ValueError("topic_decay must lie in (0, 1] and affinity_density in [0, 1]")
        if self.risk_strength < 0 or self.affinity_scale < 0 or self.n_topics < 0:
            raise ValueError("risk_strength, affinity_scale and n_topics must be non-negative")


def _concept_paths(depth: int, branching: int) -> list[tuple[int, ...]]:
    paths = [()]
    for _ in range(depth):
        paths = [p + (b,) for p in paths for b in range(branching)]
    return paths


def _draw(cdf: np.ndarray, u):
    """Inverse-CDF sampling; ``cdf`` is 1-D (scalar or vector ``u``) or one row per draw."""
    if cdf.ndim == 1:
        out = np.minimum(np.searchsorted(cdf, u, side="right"), len(cdf) - 1)
        return int(out) if np.ndim(out) == 0 else out
    return np.minimum((cdf <= np.asarray(u)[:, None]).sum(axis=1), cdf.shape[1] - 1)


def generate_synthetic(config: GeneratorConfig):
    """Build a latent concept tree and sample two corpora coded in disjoint systems.

    Source codes are the leaf concepts. Every concept is split into
    1..split_max target codes whose usage follows Dirichlet weights. Both
    corpora draw visits from per-patient topic mixtures over the same concepts.

    Returns (source, target, source_ontology, target_ontology, truth).
    """
    config.validate()
    ss = np.random.SeedSequence(config.seed)
    rng_struct, rng_src, rng_tgt, rng_split = (np.random.default_rng(s) for s in ss.spawn(4))
    depth, b = config.concept_tree_depth, config.branching
    paths = _concept_paths(depth, b)
    n_concepts = len(paths)
    if n_concepts == 0:
        raise ValueError("generator config yields an empty vocabulary")

    # source ontology mirrors the concept tree; leaves are the source codes
    def src_name(path):
        return "S" + ".".join(str(x) for x in path)

    src_edges = []
    for lvl in range(1, depth + 1):
        for path in sorted({p[:lvl] for p in paths}):
            parent = ROOT if lvl == 1 else src_name(path[:-1])
            src_edges.append((parent, src_name(path)))
    source_codes = [src_name(p) for p in paths]

    # target ontology: same categories under shuffled names plus one extra level,
    # so each concept becomes a category over its split codes
    internal = sorted({p[:lvl] for p in paths for lvl in range(1, depth + 1)}, key=lambda p: (len(p), p))
    perm = rng_struct.permutation(len(internal))
    tgt_cat = {p: f"TC{len(p)}_{int(perm[i]):04d}" for i, p in enumerate(internal)}
    n_splits = rng_struct.integers(1, config.split_max + 1, size=n_concepts)
    n_target = int(n_splits.sum())
    tgt_ids = [f"T{int(x):05d}" for x in rng_struct.permutation(n_target)]
    tgt_edges = [(ROOT if len(p) == 1 else tgt_cat[p[:-1]], tgt_cat[p]) for p in internal]
    split_codes: list[list[str]] = []
    truth = []
    pos = 0
    for ci, path in enumerate(paths):
        codes = tgt_ids[pos:pos + n_splits[ci]]
        pos += n_splits[ci]
        split_codes.append(codes)
        for c in codes:
            tgt_edges.append((tgt_cat[path], c))
            truth.append((c, source_codes[ci]))
    split_weights = [rng_split.dirichlet(np.full(len(c), 2.0)) for c in split_codes]

    # heterogeneous popularity and topic affinities break the tree's symmetries,
    # giving every category a distinctive similarity profile
    popularity = rng_struct.lognormal(0.0, 1.0, size=n_concepts)
    arr = np.array(paths)
    n_parents = b ** (depth - 1)
    n_topics = config.n_topics or n_parents
    centers = np.array([
        (t % n_parents) * b + int(rng_struct.integers(b)) for t in range(n_topics)
    ])
    topics = np.empty((n_topics, n_concepts))
    for t, c in enumerate(centers):
        shared = np.cumprod(arr == arr[c], axis=1).sum(axis=1)
        w = popularity * config.topic_decay ** (depth - shared)
        topics[t] = w / w.sum()
    prevalence = rng_struct.lognormal(0.0, 0.5, size=n_topics)
    prevalence /= prevalence.sum()
    # sparse comorbidity graph with heterogeneous degrees and strengths
    links = np.triu(rng_struct.random((n_topics, n_topics)) < config.affinity_density, 1)
    strength = np.triu(rng_struct.lognormal(0.0, config.affinity_scale, (n_topics, n_topics)), 1)
    affinity = 0.02 + links * strength
    affinity = affinity + affinity.T
    tshared = np.cumprod(arr[centers][:, None, :] == arr[centers][None, :, :], axis=2).sum(axis=2)
    affinity *= np.exp(config.hierarchy_affinity * tshared)
    np.fill_diagonal(affinity, 0.0)
    affinity /= affinity.sum(axis=1, keepdims=True)
    prev_cdf = np.cumsum(prevalence)
    # risk clusters by category, like diseases of one organ system
    parent_of = np.arange(n_concepts) // b  # paths are enumerated in lexicographic order
    risky_parent = rng_struct.random(n_parents) < config.risk_concept_fraction
    if not risky_parent.any():
        risky_parent[int(rng_struct.integers(n_parents))] = True
    risk = risky_parent[parent_of]
    risk_weight = np.where(risk, rng_struct.normal(1.0, 0.25, n_concepts), 0.0)
    los_effect = rng_struct.normal(0.0, 2.0, size=n_concepts)
    mean_risk = float(popularity[risk].sum() / popularity.sum())

    topic_cdf = np.cumsum(topics, axis=1)
    split_cdf = [np.cumsum(w) for w in split_weights]

    def sample(rng, role):
        patients = []
        for pi in range(config.n_patients):
            primary = _draw(prev_cdf, rng.random())
            base = config.topic_concentration * n_topics * affinity[primary]
            theta = 0.5 * np.eye(n_topics)[primary] + 0.5 * rng.dirichlet(base)
            theta_cdf = np.cumsum(theta)
            n_visits = 1 + int(rng.poisson(config.visits_mean - 1))
            visits = []
            all_concepts = []
            for _ in range(n_visits):
                m = 1 + int(rng.poisson(config.codes_per_visit_mean - 1))
                z = _draw(theta_cdf, rng.random(m))
                concepts = _draw(topic_cdf[z], rng.random(m))
                noisy = rng.random(m) < config.noise
                concepts[noisy] = rng.integers(0, n_concepts, size=int(noisy.sum()))
                all_concepts.extend(concepts.tolist())
                if role == "source":
                    codes = tuple(source_codes[c] for c in concepts)
                else:
                    u = rng.random(m)
                    codes = tuple(
                        split_codes[c][_draw(split_cdf[c], x)] for c, x in zip(concepts, u)
                    )
                log_los = 1.3 + float(los_effect[concepts].mean()) + rng.normal(0.0, 0.6)
                visits.append(Visit(codes, round(math.exp(log_los), 6)))
            score = -1.5 + config.risk_strength * (float(risk_weight[all_concepts].mean()) - mean_risk)
            mortality = int(rng.random() < 1.0 / (1.0 + math.exp(-score)))
            patients.append(Patient(f"{role[0]}{pi:06d}", tuple(visits), mortality))
        return patients

    source = Corpus.build("source", sample(rng_src, "source"), sorted(source_codes))
    target = Corpus.build("target", sample(rng_tgt, "target"), sorted(tgt_ids))
    return (
        source,
        target,
        Ontology(src_edges),
        Ontology(tgt_edges),
        GroundTruthMap(tuple(sorted(truth))),
    )


def split_corpus(corpus: Corpus, ratios=(0.7, 0.1, 0.2), seed: int = 0):
    """Patient-disjoint train/valid/test split."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three positive values summing to 1, got {ratios}")
    n = len(corpus.patients)
    if n < 3:
        raise ValueError(f"need at least 3 patients to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    n_train = max(1, int(round(ratios[0] * n)))
    n_valid = max(1, int(round(ratios[1] * n)))
    if n_train + n_valid >= n:
        n_train = n - n_valid - 1
    bounds = (0, n_train, n_train + n_valid, n)
    out = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        idx = sorted(order[lo:hi])
        out.append(Corpus(corpus.role, tuple(corpus.patients[i] for i in idx), corpus.vocabulary))
    return tuple(out)


# ---------------------------------------------------------------- file IO

def save_corpus(corpus: Corpus, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in corpus.patients:
            rec = {
                "id": p.id,
                "mortality": p.mortality,
                "visits": [{"codes": list(v.codes), "los_days": v.los_days} for v in p.visits],
            }
            fh.write(json.dumps(rec) + "\n")


def load_corpus(path, role: str = "target", vocabulary: Sequence[str] | None = None) -> Corpus:
    """Read a JSON Lines corpus.

    With ``vocabulary`` given, codes outside it are rejected; otherwise the
    vocabulary is the sorted set of codes seen in the file.
    """
    known = set(vocabulary) if vocabulary is not None else None
    patients = []
    seen_codes = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                visits = []
                for v in rec["visits"]:
                    codes = tuple(str(c) for c in v["codes"])
                    if not codes:
                        raise ValueError("visit with empty code list")
                    if known is not None:
                        for c in codes:
                            if c not in known:
                                raise ValueError(f"unknown code id {c!r}")
                    seen_codes.update(codes)
                    visits.append(Visit(codes, float(v["los_days"])))
                patients.append(Patient(str(rec["id"]), tuple(visits), int(rec["mortality"])))
            except (KeyError, TypeError, ValueError) as exc:
                raise CorpusFormatError(f"{path}:{lineno}: {exc}") from None
    codes = list(vocabulary) if vocabulary is not None else sorted(seen_codes)
    return Corpus.build(role, patients, codes)


def save_ontology(ontology: Ontology, path) -> None:
    Path(path).write_text("".join(f"{p}\t{c}\n" for p, c in ontology.edges), encoding="utf-8")


def load_ontology(path) -> Ontology:
    edges = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not all(parts):
            raise CorpusFormatError(f"{path}:{lineno}: expected 'parent<TAB>child'")
        edges.append((parts[0], parts[1]))
    try:
        return Ontology(edges)
    except ValueError as exc:
        raise CorpusFormatError(f"{path}: {exc}") from None


def save_truth(truth: GroundTruthMap, path) -> None:
    Path(path).write_text("".join(f"{t}\t{s}\n" for t, s in truth.pairs), encoding="utf-8")


def load_truth(path, target_codes=None, source_codes=None) -> GroundTruthMap:
    pairs = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not all(parts):
            raise CorpusFormatError(f"{path}:{lineno}: expected 'target_code<TAB>source_code'")
        t, s = parts
        if target_codes is not None and t not in target_codes:
            raise CorpusFormatError(f"{path}:{lineno}: unknown target code id {t!r}")
        if source_codes is not None and s not in source_codes:
            raise CorpusFormatError(f"{path}:{lineno}: unknown source code id {s!r}")
        pairs.append((t, s))
    return GroundTruthMap(tuple(pairs))
