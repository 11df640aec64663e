"""End-to-end composition used by the CLI, the sweeps and the ablation report."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from pcmnet.concept_vocab import ConceptVocabulary, build_vocabulary, noun_frequencies
from pcmnet.config import RunConfig
from pcmnet.dataset import CorpusRecord, TrainingSample, generate_split, prepare_records, subset
from pcmnet.embedding_space import world_for
from pcmnet.tokenizer import Vocabulary
from pcmnet.training import TrainResult, train

log = logging.getLogger(__name__)

VARIANTS = (
    ("Base", False, False),
    ("Base+Mix-up", True, False),
    ("Base+CXE", False, True),
    ("Base+Mix-up+CXE", True, True),
)


@dataclass
class PreparedData:
    vocab: Vocabulary
    concepts: ConceptVocabulary
    head: np.ndarray
    train: list[TrainingSample]
    val: list[TrainingSample]


def concept_vocabulary_for(cfg: RunConfig, texts: Sequence[str], lexicon=None,
                           provider=None) -> ConceptVocabulary:
    """Concept vocabulary over ``texts``, shrunk if a small corpus has fewer nouns."""
    world = world_for(cfg.world())
    lexicon = set(world.names) if lexicon is None else lexicon
    available = len(noun_frequencies(texts, lexicon))
    n = min(cfg.n_concepts, available)
    if n < cfg.n_concepts:
        log.warning("corpus has only %d concept nouns; using %d instead of %d",
                    available, n, cfg.n_concepts)
    return build_vocabulary(texts, lexicon, provider or world, n)


def build_vocabularies(cfg: RunConfig, train_records: Sequence[CorpusRecord], lexicon=None,
                       provider=None) -> tuple[Vocabulary, ConceptVocabulary]:
    texts = [r.text for r in subset(train_records, cfg.data_fraction, cfg)]
    return (Vocabulary.build(texts, cfg.min_word_count),
            concept_vocabulary_for(cfg, texts, lexicon, provider))


def prepare_data(cfg: RunConfig, train_records: Sequence[CorpusRecord] | None = None,
                 val_records: Sequence[CorpusRecord] | None = None,
                 vocab: Vocabulary | None = None, concepts: ConceptVocabulary | None = None,
                 head: np.ndarray | None = None) -> PreparedData:
    """Samples ready for training; anything not supplied comes from the seeded world."""
    cfg.validate()
    if train_records is None:
        train_records = generate_split(cfg, "train")
    if val_records is None:
        val_records = generate_split(cfg, "val")
    if vocab is None or concepts is None:
        vocab, concepts = build_vocabularies(cfg, train_records)
    if head is None:
        head = world_for(cfg.world()).projection_head
    train_records = subset(train_records, cfg.data_fraction, cfg)
    run = cfg.replace(top_k=min(cfg.top_k, len(concepts)))
    return PreparedData(vocab, concepts, head,
                        prepare_records(train_records, vocab, concepts, head, run),
                        prepare_records(val_records, vocab, concepts, head, run))


def run_experiment(cfg: RunConfig, out_dir=None, data: PreparedData | None = None) -> TrainResult:
    """Train on the seeded world and score the final epoch on the validation split."""
    data = data or prepare_data(cfg)
    return train(cfg, data.train, data.vocab, data.val, out_dir)


def variant_config(cfg: RunConfig, use_mixup: bool, use_cxe: bool) -> RunConfig:
    return cfg.replace(use_mixup=use_mixup, use_cxe=use_cxe)
