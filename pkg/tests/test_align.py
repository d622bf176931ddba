import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from codealign import align as A
from codealign.corpus import ROOT, GeneratorConfig, Ontology, generate_synthetic
from codealign.embedding import EmbeddingMatrix


def _orthogonal(d, rng):
    q, r = np.linalg.qr(rng.normal(size=(d, d)))
    return q * np.sign(np.diag(r))


def _groups(vecs, level=1, prefix="g"):
    ids = tuple(f"{prefix}{i}" for i in range(len(vecs)))
    return A.GroupSet(level, ids, tuple((i,) for i in ids), vecs, vecs, ids)


def _tree_ontology(codes, branching):
    """Two category levels above the leaves, filled in code order."""
    edges = []
    n_top = branching
    for a in range(n_top):
        edges.append((ROOT, f"T{a}"))
        for b in range(branching):
            edges.append((f"T{a}", f"T{a}.{b}"))
    for i, c in enumerate(codes):
        a, b = (i // branching) % n_top, i % branching
        edges.append((f"T{a}.{b}", c))
    return Ontology(edges)


@pytest.fixture
def toy():
    rng = np.random.default_rng(0)
    codes = tuple(f"c{i:02d}" for i in range(27))
    return EmbeddingMatrix(codes, rng.normal(size=(27, 8))), _tree_ontology(codes, 3)


def test_level_zero_is_degenerate(toy):
    emb, onto = toy
    with pytest.raises(ValueError):
        A.group_by_ontology(emb, onto, 0, 10)


def test_top_k_keeps_largest_groups():
    codes = tuple(f"x{i}" for i in range(8))
    onto = Ontology([(ROOT, "big"), (ROOT, "small")] + [("big", c) for c in codes[:5]] + [("small", c) for c in codes[5:]])
    emb = EmbeddingMatrix(codes, np.random.default_rng(1).normal(size=(8, 3)))
    g = A.group_by_ontology(emb, onto, 1, 1)
    assert g.ids == ("big",) and len(g.members[0]) == 5


def test_group_median_is_a_member_closest_to_mean(toy):
    emb, onto = toy
    g = A.group_by_ontology(emb, onto, 2, 50)
    for members, mean, code in zip(g.members, g.means, g.median_codes):
        vecs = emb.rows(members)
        assert np.allclose(mean, vecs.mean(axis=0))
        cos = vecs @ mean / np.linalg.norm(vecs, axis=1)
        assert members[int(np.argmax(cos))] == code


def test_singleton_group_mean_equals_median():
    codes = ("a", "b", "c")
    onto = Ontology([(ROOT, "P"), (ROOT, "Q"), ("P", "a"), ("P", "b"), ("Q", "c")])
    emb = EmbeddingMatrix(codes, np.arange(9.0).reshape(3, 3) + 1)
    g = A.group_by_ontology(emb, onto, 1, 5)
    q = g.ids.index("Q")
    assert np.array_equal(g.means[q], emb.lookup("c")) and np.array_equal(g.medians[q], emb.lookup("c"))


def test_kmeans_cases():
    rng = np.random.default_rng(2)
    x = np.vstack([rng.normal(size=(20, 2)) * 0.1, rng.normal(size=(20, 2)) * 0.1 + 5])
    labels, _ = A.kmeans(x, 2, seed=3)
    assert len(set(labels[:20])) == 1 and len(set(labels[20:])) == 1 and labels[0] != labels[20]
    assert np.array_equal(A.kmeans(x, 2, seed=3)[0], labels)
    emb = EmbeddingMatrix(tuple("abcde"), rng.normal(size=(5, 2)))
    g = A.group_by_kmeans(emb, 5)
    assert sorted(len(m) for m in g.members) == [1] * 5
    with pytest.raises(ValueError):
        A.group_by_kmeans(emb, 6)


def test_sorted_profile_rows_non_increasing(toy):
    emb, onto = toy
    p = A.similarity_profile(A.group_by_ontology(emb, onto, 2, 50))
    assert np.all(np.diff(p.M_sorted, axis=1) <= 0)
    assert np.allclose(np.sort(p.M, axis=1), np.sort(p.M_sorted, axis=1))


def test_seed_self_match():
    g = _groups(np.random.default_rng(3).normal(size=(10, 4)))
    assert np.array_equal(A.seed_matching(g, g), np.arange(10))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(3, 50), st.booleans())
def test_seed_recovers_planted_permutation(seed, k, rotate):
    rng = np.random.default_rng(seed)
    d = 16
    g = rng.normal(size=(k, d))
    perm = rng.permutation(k)
    src = g @ _orthogonal(d, rng) if rotate else g.copy()
    shuffled = np.empty_like(src)
    shuffled[perm] = src  # target group i lives at source row perm[i]
    assert np.array_equal(A.seed_matching(_groups(g), _groups(shuffled, prefix="s")), perm)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_seed_matching_invariant_to_rotating_one_side(seed):
    rng = np.random.default_rng(seed)
    gt, gs = _groups(rng.normal(size=(12, 5))), _groups(rng.normal(size=(15, 5)), prefix="s")
    rotated = _groups(gs.medians @ _orthogonal(5, rng), prefix="s")
    assert np.array_equal(A.seed_matching(gt, gs), A.seed_matching(gt, rotated))


def test_refine_fixpoint_with_correct_seeds():
    rng = np.random.default_rng(4)
    g = rng.normal(size=(10, 6))
    gt, gs = _groups(g), _groups(g @ _orthogonal(6, rng), prefix="s")
    obj = []
    W, anchors = A.procrustes_refine(gt, gs, A.induce_seed(gt, gs), 20, objective=obj)
    assert len(obj) == 1
    assert anchors.source_ids == list(gs.ids)


def test_refine_corrects_corrupted_seeds():
    rng = np.random.default_rng(5)
    k, d = 20, 8
    g = rng.normal(size=(k, d))
    q = _orthogonal(d, rng)
    gt, gs = _groups(g), _groups(g @ q, prefix="s")
    match = np.arange(k)
    bad = rng.choice(k, 4, replace=False)
    match[bad] = np.roll(bad, 1)
    W, anchors = A.procrustes_refine(gt, gs, A._anchors(gt, gs, match, 1), 20)
    assert anchors.source_ids == list(gs.ids)
    assert np.linalg.norm(W - q) < 1e-8


def test_refine_preconditions():
    g = _groups(np.eye(3))
    with pytest.raises(ValueError):
        A.procrustes_refine(g, g, A.AnchorDictionary.empty(3), 5)
    with pytest.raises(ValueError):
        A.procrustes_refine(g, g, A.induce_seed(g, g), 0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 1.0))
def test_refine_objective_non_decreasing(seed, noise):
    rng = np.random.default_rng(seed)
    g = rng.normal(size=(15, 5))
    gt = _groups(g)
    gs = _groups(g @ _orthogonal(5, rng) + noise * rng.normal(size=g.shape), prefix="s")
    obj = []
    W, _ = A.procrustes_refine(gt, gs, A.induce_seed(gt, gs), 20, objective=obj)
    assert np.all(np.diff(obj) >= -1e-9)
    assert np.allclose(W.T @ W, np.eye(5), atol=1e-10)


def test_self_alignment_gives_identity(toy):
    emb, onto = toy
    res = A.ontology_align(emb, emb, onto, onto, A.AlignConfig())
    assert np.linalg.norm(res.W - np.eye(8)) < 1e-6


def test_planted_rotation_recovered(toy):
    emb, onto = toy
    q = _orthogonal(8, np.random.default_rng(6))
    src = EmbeddingMatrix(emb.codes, emb.vectors @ q)
    res = A.ontology_align(emb, src, onto, onto, A.AlignConfig(select_start=False))
    assert np.linalg.norm(res.W - q) < 1e-6


def test_anchor_count_accumulates_over_levels(toy):
    emb, onto = toy
    res = A.ontology_align(emb, emb, onto, onto, A.AlignConfig(select_start=False))
    per_level = {lv: res.anchors.levels.count(lv) for lv in set(res.anchors.levels)}
    assert per_level == {1: 3, 2: 9, A.LEAF_LEVEL: 27}


def test_alignment_on_generated_data_is_orthogonal_and_deterministic():
    src, tgt, os_, ot, _ = generate_synthetic(GeneratorConfig(concept_tree_depth=2, branching=3, n_patients=50, seed=1))
    rng = np.random.default_rng(7)
    es = EmbeddingMatrix(tuple(src.code_ids), rng.normal(size=(len(src.code_ids), 6)))
    et = EmbeddingMatrix(tuple(tgt.code_ids), rng.normal(size=(len(tgt.code_ids), 6)))
    for cfg in (A.AlignConfig(), A.AlignConfig(grouping="kmeans", restarts=2, kmeans_ks=(2, 3))):
        a = A.ontology_align(et, es, ot, os_, cfg)
        b = A.ontology_align(et, es, ot, os_, cfg)
        assert np.allclose(a.W.T @ a.W, np.eye(6), atol=1e-6)
        assert a.W.tobytes() == b.W.tobytes()


def test_alignment_rejects_mismatched_inputs(toy):
    emb, onto = toy
    other = EmbeddingMatrix(emb.codes, np.ones((27, 4)))
    with pytest.raises(ValueError):
        A.ontology_align(emb, other, onto, onto)
    with pytest.raises(ValueError):
        A.ontology_align(emb, emb, None, onto)
    with pytest.raises(ValueError):
        A.AlignConfig(k=1).validate()


def test_code_level_alignment_recovers_rotation(toy):
    emb, _ = toy
    q = _orthogonal(8, np.random.default_rng(8))
    res = A.code_level_align(emb, EmbeddingMatrix(emb.codes, emb.vectors @ q))
    assert np.linalg.norm(res.W - q) < 1e-6


def test_random_ontology_keeps_shape(toy):
    _, onto = toy
    shuffled = A.random_ontology(onto, seed=1)
    assert shuffled.leaves == onto.leaves
    assert sorted(p for p, _ in shuffled.edges) == sorted(p for p, _ in onto.edges)
    assert shuffled != onto


def test_anchor_file(tmp_path, toy):
    emb, onto = toy
    res = A.ontology_align(emb, emb, onto, onto)
    A.save_anchors(res.anchors, tmp_path / "a.tsv")
    lines = (tmp_path / "a.tsv").read_text().splitlines()
    assert lines[0] == "level\ttarget\tsource" and len(lines) == len(res.anchors) + 1
