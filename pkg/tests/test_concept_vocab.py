from collections import Counter

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pcmnet.concept_vocab import (ConceptVocabulary, build_vocabulary, detect_salient,
                                  load_lexicon, noun_frequencies)
from pcmnet.embedding_space import SyntheticWorldConfig, cosine_similarity, world_for
from pcmnet.errors import FormatError, InvalidArgumentError


class HashEmbedder:
    """Deterministic stand-in text encoder."""

    def embed_text(self, text):
        r = np.random.default_rng(sum(map(ord, text)))
        return r.normal(size=6)


def test_frequency_order():
    corpus = ["dog " * 10, "cat cat cat"]
    vocab = build_vocabulary(corpus, {"dog", "cat"}, HashEmbedder(), 1)
    assert vocab.concepts == ("dog",)


def test_lexicographic_tie_break():
    vocab = build_vocabulary(["banana apple", "apple banana"], {"apple", "banana"}, HashEmbedder(), 1)
    assert vocab.concepts == ("apple",)


def test_frequency_table_matches_brute_force_count():
    corpus = ["A dog, a Cat and a dog.", "the tree near the river", "Dog river dog tree lamp"]
    lexicon = {"dog", "cat", "tree", "river", "bird"}
    brute = Counter()
    for doc in corpus:
        for raw in doc.split():
            w = "".join(ch for ch in raw.lower() if ch.isalnum())
            if w in lexicon:
                brute[w] += 1
    assert noun_frequencies(corpus, lexicon) == brute
    vocab = build_vocabulary(corpus, lexicon, HashEmbedder(), 4)
    assert vocab.concepts == ("dog", "river", "tree", "cat")


def test_templates_are_embedded_with_prompt():
    emb = HashEmbedder()
    vocab = build_vocabulary(["dog dog"], {"dog"}, emb, 1)
    np.testing.assert_array_equal(vocab.template_embeddings[0], emb.embed_text("A photo of dog"))


def test_too_few_nouns_reports_achievable_count():
    with pytest.raises(InvalidArgumentError, match="only contains 2"):
        build_vocabulary(["dog cat"], {"dog", "cat", "cow"}, HashEmbedder(), 3)


def test_build_is_deterministic():
    corpus = ["dog cat", "cat bird", "bird bird dog"]
    a = build_vocabulary(corpus, {"dog", "cat", "bird"}, HashEmbedder(), 3)
    b = build_vocabulary(corpus, {"dog", "cat", "bird"}, HashEmbedder(), 3)
    assert a.concepts == b.concepts
    assert np.array_equal(a.template_embeddings, b.template_embeddings)


def test_duplicate_concepts_rejected():
    with pytest.raises(InvalidArgumentError):
        ConceptVocabulary(("a", "a"), np.ones((2, 3)))


def test_save_load_round_trip(tmp_path):
    vocab = ConceptVocabulary(("dog", "cat"), np.random.default_rng(0).normal(size=(2, 5)))
    vocab.save(tmp_path / "v.tsv")
    back = ConceptVocabulary.load(tmp_path / "v.tsv")
    assert back.concepts == vocab.concepts
    assert np.array_equal(back.template_embeddings, vocab.template_embeddings)


def test_malformed_vocabulary_file(tmp_path):
    (tmp_path / "v.tsv").write_text("0\tdog\t1.0\n5\tcat\t2.0\n")
    with pytest.raises(FormatError):
        ConceptVocabulary.load(tmp_path / "v.tsv")


def test_lexicon_file(tmp_path):
    (tmp_path / "lex.txt").write_text("Dog\n\ncat\n")
    assert load_lexicon(tmp_path / "lex.txt") == {"dog", "cat"}


# -- salient concept detection ------------------------------------------------------

def _vocab(n, d=8, seed=0):
    r = np.random.default_rng(seed)
    return ConceptVocabulary(tuple(f"c{i}" for i in range(n)), r.normal(size=(n, d)))


def exhaustive_top_k(g, emb, k):
    sims = [(-cosine_similarity(row, g), i) for i, row in enumerate(emb)]
    return [i for _, i in sorted(sims)[:k]]


def test_template_itself_is_top_concept():
    vocab = _vocab(10)
    assert detect_salient(vocab.template_embeddings[7], vocab, 1).ids.tolist() == [7]


@given(st.integers(0, 2**31 - 1), st.floats(0.01, 100))
def test_scale_invariance(seed, alpha):
    vocab = _vocab(20)
    g = np.random.default_rng(seed).normal(size=8)
    assert np.array_equal(detect_salient(g, vocab, 5).ids, detect_salient(alpha * g, vocab, 5).ids)


@given(st.integers(0, 2**31 - 1), st.integers(1, 50))
def test_matches_exhaustive_search(seed, k):
    vocab = _vocab(50)
    g = np.random.default_rng(seed).normal(size=8)
    s = detect_salient(g, vocab, k)
    assert s.ids.tolist() == exhaustive_top_k(g, vocab.template_embeddings, k)
    assert np.all(np.diff(s.similarities) <= 0)
    assert len(set(s.ids.tolist())) == k


def test_ties_go_to_lower_index():
    emb = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 0.0]])
    vocab = ConceptVocabulary(("a", "b", "c", "d"), emb)
    assert detect_salient(np.array([1.0, 0.0]), vocab, 2).ids.tolist() == [0, 2]


@pytest.mark.parametrize("k", [0, 11])
def test_k_out_of_range(k):
    with pytest.raises(InvalidArgumentError):
        detect_salient(np.ones(8), _vocab(10), k)


def test_synthetic_world_salient_concepts_cover_caption():
    world = world_for(SyntheticWorldConfig())
    vocab = ConceptVocabulary(tuple(world.names), world.template_embeddings(world.names))
    hits = 0
    for key in range(50):
        ids = world.sample_concepts(np.random.default_rng(key))
        s = world.render(ids, key)
        top = set(detect_salient(s.bundle.global_feature, vocab, 5).ids.tolist())
        hits += len(top & set(ids)) / len(ids)
    assert hits / 50 > 0.8
