"""Assemble training/validation samples: synthetic corpus, PCM precomputation, CLIP weights."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from pcmnet.concept_vocab import ConceptVocabulary, detect_salient
from pcmnet.config import SEED_DATA, SEED_SUBSET, RunConfig
from pcmnet.embedding_space import (CaptionEmbedding, FeatureBundle, SyntheticSample,
                                    world_for)
from pcmnet.errors import InvalidArgumentError
from pcmnet.pcm import aggregate_textual_map, compute_affinity, project_patches, select_patches
from pcmnet.tokenizer import Vocabulary

SPLITS = {"train": 0, "val": 1}


@dataclass
class TrainingSample:
    token_ids: np.ndarray
    caption_global: np.ndarray
    bundle: FeatureBundle
    clip_weight: float
    textual_map: np.ndarray | None = None
    mix_indices: np.ndarray | None = None
    reference: str = ""
    sample_id: str = ""

    def __post_init__(self):
        if not 0.0 <= self.clip_weight <= 1.0:
            raise InvalidArgumentError(f"clip weight {self.clip_weight} outside [0, 1]")


@dataclass
class CorpusRecord:
    caption_id: str
    text: str
    bundle: FeatureBundle
    caption: CaptionEmbedding
    truth: SyntheticSample | None = field(default=None, repr=False)


def generate_split(cfg: RunConfig, split: str, n: int | None = None) -> list[CorpusRecord]:
    """Seeded synthetic captions and their (synthetic or 'real') images."""
    code = SPLITS[split]
    n = (cfg.n_train if split == "train" else cfg.n_val) if n is None else n
    p = cfg.p_defect if split == "train" else cfg.val_p_defect
    world = world_for(cfg.world())
    records = []
    for i in range(n):
        rng = cfg.rng(SEED_DATA, code, i)
        ids = world.sample_concepts(rng)
        sid = f"{split}{i:06d}"
        s = world.render(ids, key=(code, i), p_defect=p, sample_id=sid)
        records.append(CorpusRecord(sid, s.text, s.bundle, s.caption, s))
    return records


def subset(records: Sequence, fraction: float, cfg: RunConfig) -> list:
    if fraction >= 1.0:
        return list(records)
    k = max(1, int(round(fraction * len(records))))
    keep = np.sort(cfg.rng(SEED_SUBSET).permutation(len(records))[:k])
    return [records[i] for i in keep]


def prepare_sample(text: str, bundle: FeatureBundle, caption_global: np.ndarray,
                   vocab: Vocabulary, concepts: ConceptVocabulary, head: np.ndarray,
                   cfg: RunConfig, sample_id: str = "") -> TrainingSample:
    from pcmnet.training import clip_weight

    c = clip_weight(bundle.global_feature, caption_global, cfg.clip_scale)
    textual = idx = None
    if cfg.use_mixup:
        textual, idx = pcm_inputs(bundle, concepts, head, cfg)
    return TrainingSample(np.array(vocab.encode(text)), caption_global, bundle, c,
                          textual, idx, text, sample_id)


def pcm_inputs(bundle: FeatureBundle, concepts: ConceptVocabulary, head: np.ndarray,
               cfg: RunConfig) -> tuple[np.ndarray, np.ndarray]:
    """Textual map and top-M patch indices for one image (uses the clean global feature)."""
    salient = detect_salient(bundle.global_feature, concepts, cfg.top_k)
    projected = project_patches(bundle.patches, head)
    aff = compute_affinity(projected, salient.embeddings, cfg.temperature)
    return aggregate_textual_map(aff, salient.embeddings), select_patches(aff, cfg.top_m, cfg.relevance)


def prepare_records(records: Sequence[CorpusRecord], vocab: Vocabulary,
                    concepts: ConceptVocabulary, head: np.ndarray,
                    cfg: RunConfig) -> list[TrainingSample]:
    return [prepare_sample(r.text, r.bundle, r.caption.global_feature, vocab, concepts, head,
                           cfg, r.caption_id) for r in records]
