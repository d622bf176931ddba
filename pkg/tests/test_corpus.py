import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from codealign import corpus as C
from codealign.embedding import build_cooccurrence


@pytest.fixture(scope="module")
def small():
    return C.generate_synthetic(C.GeneratorConfig(concept_tree_depth=3, branching=3, split_max=3, n_patients=300, seed=7))


def test_split_max_one_gives_bijection():
    src, tgt, _, _, truth = C.generate_synthetic(C.GeneratorConfig(concept_tree_depth=3, branching=3, split_max=1,
                                                                   n_patients=100, seed=7))
    assert len(src.vocabulary) == len(tgt.vocabulary) == 27
    ts, ss = zip(*truth.pairs)
    assert len(set(ts)) == len(set(ss)) == 27


def test_generator_is_deterministic(tmp_path):
    cfg = C.GeneratorConfig(concept_tree_depth=2, branching=3, n_patients=50, seed=11)
    for run in ("a", "b"):
        src, tgt, os_, ot, truth = C.generate_synthetic(cfg)
        C.save_corpus(src, tmp_path / f"s{run}.jsonl")
        C.save_corpus(tgt, tmp_path / f"t{run}.jsonl")
    assert (tmp_path / "sa.jsonl").read_bytes() == (tmp_path / "sb.jsonl").read_bytes()
    assert (tmp_path / "ta.jsonl").read_bytes() == (tmp_path / "tb.jsonl").read_bytes()


def test_split_targets_and_truth_coverage(small):
    src, tgt, _, _, truth = small
    assert 27 <= len(tgt.vocabulary) <= 81
    partners = truth.partners()
    assert set(partners) == set(tgt.code_ids)
    assert all(len(v) == 1 and v[0] in set(src.code_ids) for v in partners.values())


def test_generated_ontologies_are_trees_over_vocabulary(small):
    src, tgt, os_, ot, _ = small
    for corpus, onto in ((src, os_), (tgt, ot)):
        assert set(corpus.code_ids) == set(onto.leaves)
        assert all(len(onto.parents[n]) == 1 for n in onto.nodes if n != C.ROOT)
        assert onto.level(C.ROOT) == 0


def test_generator_rejects_bad_config():
    with pytest.raises(ValueError):
        C.generate_synthetic(C.GeneratorConfig(branching=1))
    with pytest.raises(ValueError):
        C.generate_synthetic(C.GeneratorConfig(risk_concept_fraction=1.0))


def _tree():
    return C.Ontology([(C.ROOT, "A"), ("A", "A1"), ("A1", "leafX"), (C.ROOT, "B"), ("B", "B1"), ("B1", "leafY")])


def test_ancestor_walks_the_path():
    o = _tree()
    assert C.ancestor("leafX", 0, o) == C.ROOT
    assert C.ancestor("leafX", 1, o) == "A"
    assert C.ancestor(C.Code("leafX", 0), 2, o) == "A1"
    assert C.ancestor("leafX", o.depth("leafX"), o) == "leafX"
    with pytest.raises(ValueError):
        C.ancestor("leafX", 4, o)


def test_ontology_rejects_cycles_and_undeclared_nodes():
    with pytest.raises(ValueError):
        C.Ontology([(C.ROOT, "a"), ("a", "b"), ("b", "a")])
    with pytest.raises(ValueError):
        C.Ontology([(C.ROOT, "a"), ("ghost", "b")])


@pytest.mark.parametrize("days,cls", [(0.5, 0), (0.0, 0), (1.0, 1), (6.99, 1), (7.0, 2), (13.9, 2), (14.0, 3), (20.0, 3)])
def test_los_classes(days, cls):
    assert C.derive_los_class(days) == cls


def test_los_rejects_negative():
    with pytest.raises(ValueError):
        C.derive_los_class(-0.1)


def _toy(n):
    pats = [C.Patient(f"p{i}", (C.Visit(("a", "b"), 1.0),), i % 2) for i in range(n)]
    return C.Corpus.build("target", pats, ["a", "b"])


def test_split_sizes_partition_and_determinism():
    corpus = _toy(10)
    parts = C.split_corpus(corpus, (0.7, 0.1, 0.2), seed=3)
    assert [len(p) for p in parts] == [7, 1, 2]
    ids = [p.id for part in parts for p in part.patients]
    assert sorted(ids) == sorted(p.id for p in corpus.patients) and len(set(ids)) == 10
    again = C.split_corpus(corpus, (0.7, 0.1, 0.2), seed=3)
    assert [[p.id for p in a.patients] for a in again] == [[p.id for p in b.patients] for b in parts]


def test_split_rejects_bad_input():
    with pytest.raises(ValueError):
        C.split_corpus(_toy(2))
    with pytest.raises(ValueError):
        C.split_corpus(_toy(10), (0.5, 0.1, 0.1))


@settings(max_examples=30, deadline=None)
@given(st.integers(3, 200), st.integers(0, 1000))
def test_split_always_partitions(n, seed):
    parts = C.split_corpus(_toy(n), seed=seed)
    ids = [p.id for part in parts for p in part.patients]
    assert len(ids) == len(set(ids)) == n and all(len(p) > 0 for p in parts)


def test_split_label_balance():
    src, *_ = C.generate_synthetic(C.GeneratorConfig(n_patients=600, seed=1))
    rate = np.mean([p.mortality for p in src.patients])
    for part in C.split_corpus(src, seed=2):
        assert abs(np.mean([p.mortality for p in part.patients]) - rate) < 0.15


def test_cooccurrence_converges_with_more_patients():
    def distance(n):
        src, tgt, _, _, truth = C.generate_synthetic(C.GeneratorConfig(concept_tree_depth=2, branching=3, split_max=1,
                                                                       n_patients=n, seed=5))
        xs, xt = build_cooccurrence(src).counts, build_cooccurrence(tgt).counts
        perm = [src.index_of(s) for t, s in sorted(truth.pairs, key=lambda p: tgt.index_of(p[0]))]
        xs = xs[np.ix_(perm, perm)]
        return np.linalg.norm(xs / xs.sum() - xt / xt.sum())
    assert distance(2000) < distance(200)


def test_corpus_roundtrip(tmp_path, small):
    src, tgt, os_, ot, truth = small
    C.save_corpus(tgt, tmp_path / "t.jsonl")
    back = C.load_corpus(tmp_path / "t.jsonl", "target", tgt.code_ids)
    assert back == tgt
    C.save_ontology(ot, tmp_path / "o.tsv")
    assert C.load_ontology(tmp_path / "o.tsv") == ot
    C.save_truth(truth, tmp_path / "g.tsv")
    assert C.load_truth(tmp_path / "g.tsv", tgt.code_ids, src.code_ids) == truth


def test_loaders_report_line_numbers(tmp_path):
    f = tmp_path / "c.jsonl"
    f.write_text('{"id": "p1", "mortality": 0, "visits": [{"codes": ["a"], "los_days": 1}]}\n'
                 '{"id": "p2", "mortality": 0, "visits": [{"codes": [], "los_days": 1}]}\n')
    with pytest.raises(C.CorpusFormatError, match=":2:"):
        C.load_corpus(f)
    f.write_text('{"id": "p1", "mortality": 0, "visits": [{"codes": ["zz"], "los_days": 1}]}\n')
    with pytest.raises(C.CorpusFormatError, match="zz"):
        C.load_corpus(f, vocabulary=["a"])
    o = tmp_path / "o.tsv"
    o.write_text("ROOT\ta\nghost\tb\n")
    with pytest.raises(C.CorpusFormatError):
        C.load_ontology(o)
    g = tmp_path / "g.tsv"
    g.write_text("t1\ts1\nt2\n")
    with pytest.raises(C.CorpusFormatError, match=":2:"):
        C.load_truth(g)
