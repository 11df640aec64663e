"""Patch-wise cross-modal feature mix-up.

Patches are projected into the text space by a frozen head, scored against
the salient concept embeddings, and turned into a textual feature map by
temperature-softmax aggregation.  The most concept-relevant patches are
then replaced by their textual counterparts (training) or have those
counterparts appended (inference).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from pcmnet.embedding_space import cosine_matrix
from pcmnet.errors import InvalidArgumentError, ShapeError
from pcmnet.numerics import ops
from pcmnet.numerics.tape import Var

Mode = Literal["train", "infer"]
DEFAULT_TEMPERATURE = 0.07


@dataclass(frozen=True, eq=False)
class AffinityMap:
    scores: np.ndarray
    weights: np.ndarray
    temperature: float


@dataclass(frozen=True, eq=False)
class MixedFeatureMap:
    textual_map: np.ndarray
    tokens: np.ndarray
    indices: np.ndarray
    mode: str


def project_patches(patches: np.ndarray, head: np.ndarray) -> np.ndarray:
    patches = np.asarray(patches, dtype=np.float64)
    head = np.asarray(head, dtype=np.float64)
    if patches.shape[-1] != head.shape[0]:
        raise ShapeError(f"patch dim {patches.shape[-1]} does not match head input dim {head.shape[0]}")
    return patches @ head


def compute_affinity(projected: np.ndarray, concepts: np.ndarray,
                     temperature: float = DEFAULT_TEMPERATURE) -> AffinityMap:
    if not temperature > 0:
        raise InvalidArgumentError(f"temperature must be positive, got {temperature}")
    if projected.shape[-1] != concepts.shape[-1]:
        raise ShapeError(f"patch dim {projected.shape[-1]} vs concept dim {concepts.shape[-1]}")
    scores = cosine_matrix(projected, concepts)
    weights = ops.softmax(scores, temperature=temperature, axis=-1).value
    return AffinityMap(scores, weights, float(temperature))


def aggregate_textual_map(affinity: AffinityMap, concepts: np.ndarray) -> np.ndarray:
    """Each output row is the affinity-weighted convex combination of concept rows."""
    if affinity.weights.shape[1] != concepts.shape[0]:
        raise ShapeError(f"affinity has {affinity.weights.shape[1]} concepts, got {concepts.shape[0]}")
    return affinity.weights @ concepts


def patch_relevance(affinity: AffinityMap, rule: str = "max") -> np.ndarray:
    if rule == "max":
        return affinity.scores.max(axis=1)
    if rule == "mean":
        return affinity.scores.mean(axis=1)
    raise InvalidArgumentError(f"unknown relevance rule {rule!r}")


def select_patches(affinity: AffinityMap, m: int, rule: str = "max") -> np.ndarray:
    """Indices of the ``m`` most relevant patches, most relevant first (ties: lower index)."""
    n = affinity.scores.shape[0]
    if not 0 <= m <= n:
        raise InvalidArgumentError(f"M={m} must lie in [0, {n}]")
    rel = patch_relevance(affinity, rule)
    return np.argsort(-rel, kind="stable")[:m]


def apply_mixup(visual, textual, indices: np.ndarray, mode: Mode):
    """Mix ``textual`` rows into ``visual``; works on arrays or tracked ``Var``s.

    Both inputs are ``(..., N, D)`` and ``indices`` is ``(..., M)``.
    """
    indices = np.asarray(indices, dtype=np.int64)
    is_var = isinstance(visual, Var) or isinstance(textual, Var)
    shape = visual.shape
    if textual.shape != shape:
        raise ShapeError(f"visual map {shape} and textual map {textual.shape} differ")
    lead = shape[:-2]
    if mode == "train":
        mask = np.zeros(lead + (shape[-2], 1), dtype=bool)
        if indices.size:
            if lead:
                rows = np.arange(lead[0])[:, None]
                mask[rows, indices, 0] = True
            else:
                mask[indices, 0] = True
        if is_var:
            return ops.where(mask, textual, visual)
        return np.where(mask, textual, visual)
    if mode == "infer":
        if lead:
            picked = textual[np.arange(lead[0])[:, None], indices]
        else:
            picked = textual[indices]
        if is_var:
            return ops.concat([visual, picked], axis=-2)
        return np.concatenate([visual, picked], axis=-2)
    raise InvalidArgumentError(f"mode must be 'train' or 'infer', got {mode!r}")


def mixup(visual: np.ndarray, textual: np.ndarray, affinity: AffinityMap, m: int,
          mode: Mode, rule: str = "max") -> MixedFeatureMap:
    if m > visual.shape[0]:
        raise InvalidArgumentError(f"M={m} exceeds patch count {visual.shape[0]}")
    idx = select_patches(affinity, m, rule)
    tokens = apply_mixup(np.asarray(visual, dtype=np.float64),
                         np.asarray(textual, dtype=np.float64), idx, mode)
    return MixedFeatureMap(np.asarray(textual), tokens, idx, mode)
