"""Visual concept vocabulary and salient concept detection."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Protocol

import numpy as np

from pcmnet.embedding_space import TEMPLATE, cosine_matrix
from pcmnet.errors import FormatError, InvalidArgumentError
from pcmnet.text import tokenize

DEFAULT_CONCEPT_COUNT = 512


class TextEmbedder(Protocol):
    def embed_text(self, text: str) -> np.ndarray: ...


@dataclass(frozen=True, eq=False)
class ConceptVocabulary:
    concepts: tuple[str, ...]
    template_embeddings: np.ndarray

    def __post_init__(self):
        if len(set(self.concepts)) != len(self.concepts):
            raise InvalidArgumentError("duplicate concepts in vocabulary")
        if self.template_embeddings.shape[0] != len(self.concepts):
            raise InvalidArgumentError(
                f"{self.template_embeddings.shape[0]} embeddings for {len(self.concepts)} concepts")

    def __len__(self) -> int:
        return len(self.concepts)

    def save(self, path) -> None:
        lines = []
        for i, (c, row) in enumerate(zip(self.concepts, self.template_embeddings)):
            lines.append("\t".join([str(i), c] + [repr(float(x)) for x in row]))
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "ConceptVocabulary":
        concepts, rows = [], []
        offset = 0
        raw = Path(path).read_bytes()
        for lineno, line in enumerate(raw.decode("utf-8").splitlines()):
            fields = line.split("\t")
            if len(fields) < 3 or fields[0] != str(lineno):
                raise FormatError(f"{path}: malformed vocabulary line {lineno + 1}", offset=offset)
            concepts.append(fields[1])
            rows.append([float(x) for x in fields[2:]])
            offset += len(line.encode("utf-8")) + 1
        if not concepts or len({len(r) for r in rows}) != 1:
            raise FormatError(f"{path}: empty vocabulary or ragged embedding rows", offset=0)
        return cls(tuple(concepts), np.array(rows))


@dataclass(frozen=True, eq=False)
class SalientConcepts:
    ids: np.ndarray
    embeddings: np.ndarray
    similarities: np.ndarray


def load_lexicon(path) -> set[str]:
    return {w.strip().lower() for w in Path(path).read_text().splitlines() if w.strip()}


def noun_frequencies(corpus: Iterable[str], lexicon: set[str]) -> Counter:
    counts: Counter = Counter()
    for text in corpus:
        counts.update(t for t in tokenize(text) if t in lexicon)
    return counts


def build_vocabulary(corpus: Iterable[str], lexicon: set[str], provider: TextEmbedder,
                     n_concepts: int = DEFAULT_CONCEPT_COUNT) -> ConceptVocabulary:
    """Keep the ``n_concepts`` most frequent lexicon nouns (ties: alphabetical)."""
    corpus = list(corpus)
    if not corpus:
        raise InvalidArgumentError("corpus is empty")
    counts = noun_frequencies(corpus, {w.lower() for w in lexicon})
    if len(counts) < n_concepts:
        raise InvalidArgumentError(
            f"requested {n_concepts} concepts but the corpus only contains "
            f"{len(counts)} lexicon nouns")
    ranked = sorted(counts, key=lambda w: (-counts[w], w))[:n_concepts]
    emb = np.stack([np.asarray(provider.embed_text(TEMPLATE.format(c)), dtype=np.float64)
                    for c in ranked])
    return ConceptVocabulary(tuple(ranked), emb)


def detect_salient(g_image, vocab: ConceptVocabulary, k: int) -> SalientConcepts:
    """Top-``k`` concepts by cosine similarity to the global image feature."""
    if k < 1 or k > len(vocab):
        raise InvalidArgumentError(f"K={k} must lie in [1, {len(vocab)}]")
    g = np.asarray(g_image, dtype=np.float64)
    sims = cosine_matrix(vocab.template_embeddings, g[None, :])[:, 0]
    order = np.argsort(-sims, kind="stable")[:k]
    return SalientConcepts(order, vocab.template_embeddings[order], sims[order])
