import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pcmnet.concept_vocab import ConceptVocabulary, detect_salient
from pcmnet.embedding_space import SyntheticWorldConfig, world_for
from pcmnet.errors import InvalidArgumentError, ShapeError
from pcmnet.numerics import Tape, ops
from pcmnet.pcm import (aggregate_textual_map, apply_mixup, compute_affinity, mixup,
                        patch_relevance, project_patches, select_patches)

seeds = st.integers(0, 2**31 - 1)


def test_identity_head():
    x = np.random.default_rng(0).normal(size=(4, 3))
    assert np.array_equal(project_patches(x, np.eye(3)), x)


def test_projection_matches_manual_matmul(rng):
    x, h = rng.normal(size=(4, 3)), rng.normal(size=(3, 2))
    manual = [[sum(x[i, k] * h[k, j] for k in range(3)) for j in range(2)] for i in range(4)]
    np.testing.assert_allclose(project_patches(x, h), manual, atol=1e-12)


def test_zero_head_breaks_affinity():
    proj = project_patches(np.ones((2, 3)), np.zeros((3, 2)))
    assert not proj.any()
    with pytest.raises(InvalidArgumentError):
        compute_affinity(proj, np.eye(2))


def test_head_shape_mismatch():
    with pytest.raises(ShapeError):
        project_patches(np.ones((2, 3)), np.ones((4, 2)))


def test_low_temperature_weights_are_one_hot():
    concepts = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    patch = np.array([[0.01, 0.02, 1.0]])
    aff = compute_affinity(patch, concepts, temperature=0.01)
    np.testing.assert_allclose(aff.weights[0], [0, 0, 1], atol=1e-4)


def test_identical_concepts_give_uniform_weights(rng):
    c = np.tile(rng.normal(size=(1, 4)), (3, 1))
    aff = compute_affinity(rng.normal(size=(5, 4)), c)
    np.testing.assert_allclose(aff.weights, 1 / 3, atol=1e-12)


def test_affinity_matches_brute_force():
    patches = [[1.0, 0.0, 1.0], [0.5, 2.0, -1.0]]
    concepts = [[1.0, 1.0, 0.0], [0.0, 0.0, 1.0], [-1.0, 0.5, 0.5]]
    tau = 0.07

    def cos(a, b):
        dot = sum(x * y for x, y in zip(a, b))
        return dot / math.sqrt(sum(x * x for x in a) * sum(y * y for y in b))

    scores = [[cos(p, c) for c in concepts] for p in patches]
    weights = []
    for row in scores:
        e = [math.exp(s / tau) for s in row]
        weights.append([x / sum(e) for x in e])
    aff = compute_affinity(np.array(patches), np.array(concepts), tau)
    np.testing.assert_allclose(aff.scores, scores, atol=1e-12)
    np.testing.assert_allclose(aff.weights, weights, atol=1e-12)


def test_affinity_rejects_bad_temperature():
    with pytest.raises(InvalidArgumentError):
        compute_affinity(np.ones((2, 2)), np.eye(2), temperature=0.0)


@given(seeds, st.floats(0.005, 5.0))
def test_weight_rows_sum_to_one(seed, tau):
    r = np.random.default_rng(seed)
    aff = compute_affinity(r.normal(size=(6, 5)), r.normal(size=(4, 5)), tau)
    np.testing.assert_allclose(aff.weights.sum(axis=1), 1.0, atol=1e-9)
    assert np.all(np.abs(aff.scores) <= 1.0)


def test_one_hot_and_uniform_aggregation():
    concepts = np.array([[2.0, 0.0], [0.0, 4.0]])
    aff = compute_affinity(np.array([[1.0, 0.0]]), concepts)
    one_hot = type(aff)(aff.scores, np.array([[0.0, 1.0]]), aff.temperature)
    assert np.array_equal(aggregate_textual_map(one_hot, concepts)[0], concepts[1])
    uniform = type(aff)(aff.scores, np.array([[0.5, 0.5]]), aff.temperature)
    np.testing.assert_allclose(aggregate_textual_map(uniform, concepts)[0], [1.0, 2.0])


@given(seeds)
def test_textual_rows_stay_inside_concept_norm_bound(seed):
    r = np.random.default_rng(seed)
    concepts = r.normal(size=(5, 6)) * r.uniform(0.1, 3, size=(5, 1))
    aff = compute_affinity(r.normal(size=(8, 6)), concepts, r.uniform(0.01, 1))
    vt = aggregate_textual_map(aff, concepts)
    assert np.all(np.linalg.norm(vt, axis=1) <= np.linalg.norm(concepts, axis=1).max() + 1e-12)


# -- selection and mixing ---------------------------------------------------------------

def brute_force_selection(scores, m):
    rel = [max(row) for row in scores.tolist()]
    return sorted(range(len(rel)), key=lambda j: (-rel[j], j))[:m]


@given(seeds, st.integers(0, 8))
def test_selection_matches_brute_force(seed, m):
    r = np.random.default_rng(seed)
    aff = compute_affinity(r.normal(size=(8, 4)), r.normal(size=(3, 4)))
    assert select_patches(aff, m).tolist() == brute_force_selection(aff.scores, m)


@given(seeds)
def test_selection_invariant_to_patch_rescaling(seed):
    r = np.random.default_rng(seed)
    patches, concepts = r.normal(size=(8, 4)), r.normal(size=(3, 4))
    scaled = patches * r.uniform(0.01, 100, size=(8, 1))
    a = select_patches(compute_affinity(patches, concepts), 3)
    b = select_patches(compute_affinity(scaled, concepts), 3)
    assert np.array_equal(a, b)


def test_selection_ties_prefer_lower_index():
    aff = compute_affinity(np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]]), np.array([[1.0, 0.0]]))
    assert select_patches(aff, 2).tolist() == [0, 2]


def test_mean_relevance_rule():
    aff = compute_affinity(np.array([[1.0, 0.0], [1.0, 1.0]]), np.array([[1.0, 0.0], [0.0, 1.0]]))
    np.testing.assert_allclose(patch_relevance(aff, "mean"), aff.scores.mean(axis=1))
    with pytest.raises(InvalidArgumentError):
        patch_relevance(aff, "median")


def _instance(seed, n=4, d=3):
    r = np.random.default_rng(seed)
    vi, vt = r.normal(size=(n, d)), r.normal(size=(n, d))
    aff = compute_affinity(r.normal(size=(n, 5)), r.normal(size=(2, 5)))
    return vi, vt, aff


def test_m_zero_train_is_identity():
    vi, vt, aff = _instance(0)
    assert np.array_equal(mixup(vi, vt, aff, 0, "train").tokens, vi)


def test_full_replacement_train():
    vi, vt, aff = _instance(1)
    assert np.array_equal(mixup(vi, vt, aff, 4, "train").tokens, vt)


def test_infer_appends_selected_rows():
    vi, vt, aff = _instance(2)
    out = mixup(vi, vt, aff, 4, "infer")
    assert out.tokens.shape == (8, 3)
    assert np.array_equal(out.tokens[:4], vi)
    assert np.array_equal(out.tokens[4:], vt[out.indices])


def test_m_above_patch_count():
    vi, vt, aff = _instance(3)
    with pytest.raises(InvalidArgumentError):
        mixup(vi, vt, aff, 5, "train")


@given(seeds, st.integers(0, 6))
def test_train_mode_changes_exactly_m_rows(seed, m):
    r = np.random.default_rng(seed)
    vi, vt = r.normal(size=(6, 3)), r.normal(size=(6, 3))
    aff = compute_affinity(r.normal(size=(6, 4)), r.normal(size=(3, 4)))
    out = mixup(vi, vt, aff, m, "train")
    changed = np.flatnonzero(np.any(out.tokens != vi, axis=1))
    assert sorted(changed.tolist()) == sorted(out.indices.tolist())
    untouched = np.setdiff1d(np.arange(6), out.indices)
    assert np.array_equal(out.tokens[untouched], vi[untouched])


def test_batched_var_mixup_routes_gradients():
    tape = Tape()
    vi = tape.watch(np.zeros((2, 3, 2)), "vi")
    vt = tape.watch(np.zeros((2, 3, 2)), "vt")
    idx = np.array([[0], [2]])
    out = apply_mixup(vi, vt, idx, "train")
    tape.backward(ops.reduce_sum(out))
    g = tape.gradients()
    assert g["vt"][0, 0].tolist() == [1, 1] and g["vt"][1, 2].tolist() == [1, 1]
    assert g["vt"].sum() == 4 and g["vi"].sum() == 8


def test_mixup_moves_defective_world_rows_toward_truth():
    cfg = SyntheticWorldConfig(p_defect=0.3)
    world = world_for(cfg)
    vocab = ConceptVocabulary(tuple(world.names), world.template_embeddings(world.names))
    before, after = [], []
    for key in range(200):
        ids = world.sample_concepts(np.random.default_rng(key))
        s = world.render(ids, key)
        proj = project_patches(s.bundle.patches, world.projection_head)
        sal = detect_salient(s.bundle.global_feature, vocab, 5)
        aff = compute_affinity(proj, sal.embeddings)
        idx = select_patches(aff, 5)
        if not s.defect_mask[idx].any():
            continue  # only instances with defects among the selected patches
        vt = aggregate_textual_map(aff, sal.embeddings)
        mixed = mixup(proj, vt, aff, 5, "train").tokens
        truth = world.anchors[s.true_patch_concepts]
        before.append(np.linalg.norm(proj - truth, axis=1).mean())
        after.append(np.linalg.norm(mixed - truth, axis=1).mean())
    assert len(before) >= 10
    assert np.mean(after) < np.mean(before)
