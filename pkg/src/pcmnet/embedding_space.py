"""Image/text embeddings: a seeded synthetic world standing in for CLIP.

The world owns one unit anchor vector per concept in the global text space.
A caption's embedding is the normalised sum of its concept anchors; the
paired "image" is that embedding pushed through a fixed modality-gap map.
Patch features are anchors lifted into the patch space by a fixed random
matrix, so the pseudo-inverse of that matrix plays the role of the frozen
patch-to-text projection head.  Defects swap a patch's concept for a
distractor that is absent from the caption.
"""

from __future__ import annotations

import functools
import re
from dataclasses import dataclass, field

import numpy as np

from pcmnet.errors import ConfigError, InvalidArgumentError

TEMPLATE = "A photo of {}"

NOUNS = (
    "dog cat horse bird cow sheep elephant bear zebra giraffe man woman child "
    "boy girl person car bus truck train boat bicycle motorcycle airplane bench "
    "table chair couch bed clock vase bottle cup bowl plate pizza cake sandwich "
    "banana apple orange broccoli carrot kite umbrella frisbee ball skateboard "
    "surfboard laptop phone book window door tree flower grass road street beach "
    "wave mountain field river lake bridge fence building tower sign light hat "
    "bag box basket shelf lamp mirror sink toilet oven fridge kitchen"
).split()

FILLER_TEMPLATES = {
    1: ("a {0} in the scene", "a photo of a {0}", "a close view of a {0}"),
    2: ("a {0} next to a {1}", "a {0} with a {1}", "a {0} near a {1}"),
    3: ("a {0} and a {1} beside a {2}", "a {0} with a {1} and a {2}",
        "a {0} next to a {1} near a {2}"),
}


@dataclass(frozen=True, eq=False)
class FeatureBundle:
    global_feature: np.ndarray
    patches: np.ndarray
    image_id: str

    def __post_init__(self):
        if np.linalg.norm(self.global_feature) == 0:
            raise InvalidArgumentError(f"image {self.image_id}: zero-norm global feature")
        if self.patches.ndim != 2 or np.any(np.linalg.norm(self.patches, axis=1) == 0):
            raise InvalidArgumentError(f"image {self.image_id}: patch grid must be 2-d with nonzero rows")


@dataclass(frozen=True, eq=False)
class CaptionEmbedding:
    global_feature: np.ndarray
    caption_id: str

    def __post_init__(self):
        if np.linalg.norm(self.global_feature) == 0:
            raise InvalidArgumentError(f"caption {self.caption_id}: zero-norm embedding")


@dataclass(frozen=True)
class SyntheticWorldConfig:
    concept_count: int = 48
    d_global: int = 24
    d_patch: int = 32
    n_patches: int = 16
    p_defect: float = 0.3
    modality_gap_scale: float = 0.3
    noise_scale: float = 0.05
    patch_noise_scale: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p_defect <= 1.0:
            raise ConfigError(f"p_defect must lie in [0, 1], got {self.p_defect}")
        if not 0.0 <= self.modality_gap_scale <= 1.0:
            raise ConfigError(f"modality_gap_scale must lie in [0, 1], got {self.modality_gap_scale}")
        for name in ("d_global", "d_patch", "n_patches", "concept_count"):
            if getattr(self, name) < 2:
                raise ConfigError(f"{name} must be >= 2, got {getattr(self, name)}")
        if self.noise_scale < 0 or self.patch_noise_scale < 0:
            raise ConfigError("noise scales must be nonnegative")


@dataclass
class SyntheticSample:
    """Everything the generator knows about one pair, including ground truth."""

    bundle: FeatureBundle
    caption: CaptionEmbedding
    concept_ids: tuple[int, ...]
    text: str
    true_patch_concepts: np.ndarray
    patch_concepts: np.ndarray
    defect_mask: np.ndarray = field(repr=False)


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise InvalidArgumentError("cosine similarity of a zero-norm vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise cosines between rows of ``a`` and rows of ``b``."""
    na = np.linalg.norm(a, axis=-1, keepdims=True)
    nb = np.linalg.norm(b, axis=-1, keepdims=True)
    if np.any(na == 0) or np.any(nb == 0):
        raise InvalidArgumentError("cosine similarity of a zero-norm vector")
    return np.clip((a / na) @ (b / nb).T, -1.0, 1.0)


def inject_noise(g, variance: float, seed) -> np.ndarray:
    """Add isotropic Gaussian noise with the given per-coordinate variance."""
    if variance < 0:
        raise InvalidArgumentError(f"noise variance must be nonnegative, got {variance}")
    g = np.asarray(g, dtype=np.float64)
    if variance == 0:
        return g.copy()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return g + rng.normal(0.0, np.sqrt(variance), size=g.shape)


def concept_names(count: int) -> list[str]:
    names = list(NOUNS[:count])
    names += [f"thing{i}" for i in range(count - len(names))]
    return names


class SyntheticWorld:
    """Fixed geometry (anchors, lift, modality gap) derived from ``cfg.seed``."""

    def __init__(self, cfg: SyntheticWorldConfig):
        self.cfg = cfg
        rng = np.random.default_rng([cfg.seed, 0])
        anchors = rng.normal(size=(cfg.concept_count, cfg.d_global))
        self.anchors = anchors / np.linalg.norm(anchors, axis=1, keepdims=True)
        self.lift = rng.normal(size=(cfg.d_global, cfg.d_patch)) / np.sqrt(cfg.d_global)
        self.projection_head = np.linalg.pinv(self.lift)
        q, r = np.linalg.qr(rng.normal(size=(cfg.d_global, cfg.d_global)))
        q = q * np.sign(np.diag(r))
        s = cfg.modality_gap_scale
        self.modality_gap = (1.0 - s) * np.eye(cfg.d_global) + s * q
        self.names = concept_names(cfg.concept_count)
        self.index = {n: i for i, n in enumerate(self.names)}
        # mildly skewed concept popularity, so frequency ranking is meaningful
        pop = 1.0 / np.arange(1, cfg.concept_count + 1) ** 0.5
        self.popularity = pop / pop.sum()

    # -- text side -------------------------------------------------------

    def caption_text(self, concept_ids) -> str:
        ids = list(concept_ids)
        options = FILLER_TEMPLATES[min(len(ids), 3)]
        template = options[ids[0] % len(options)]
        if len(ids) > 3:
            template = template + "".join(f" and a {{{i}}}" for i in range(3, len(ids)))
        return template.format(*(self.names[i] for i in ids))

    def embed_text(self, text: str) -> np.ndarray:
        """Noise-free text embedding: normalised sum of mentioned concept anchors."""
        words = re.findall(r"[a-z0-9]+", text.lower())
        ids = [self.index[w] for w in words if w in self.index]
        if not ids:
            raise InvalidArgumentError(f"text mentions no known concept: {text!r}")
        v = self.anchors[ids].sum(axis=0)
        return v / np.linalg.norm(v)

    def template_embeddings(self, concepts) -> np.ndarray:
        return np.stack([self.embed_text(TEMPLATE.format(c)) for c in concepts])

    def sample_concepts(self, rng: np.random.Generator, min_k: int = 2, max_k: int = 3) -> tuple[int, ...]:
        k = int(rng.integers(min_k, max_k + 1))
        ids = rng.choice(self.cfg.concept_count, size=k, replace=False, p=self.popularity)
        return tuple(int(i) for i in ids)

    # -- image side ------------------------------------------------------

    def render(self, concept_ids, key, p_defect: float | None = None,
               sample_id: str | None = None) -> SyntheticSample:
        """Build the (image, caption) pair for ``concept_ids``.

        Every random draw happens regardless of ``p_defect`` so that changing
        the defect rate only alters the rows that become defective.
        """
        cfg = self.cfg
        ids = [int(i) for i in concept_ids]
        if not ids:
            raise InvalidArgumentError("caption concept list is empty")
        if any(i < 0 or i >= cfg.concept_count for i in ids) or len(set(ids)) != len(ids):
            raise InvalidArgumentError(f"invalid concept ids {ids}")
        p = cfg.p_defect if p_defect is None else p_defect
        rng = np.random.default_rng([cfg.seed, 1, *np.atleast_1d(key)])

        cap = self.anchors[ids].sum(axis=0)
        cap = cap / np.linalg.norm(cap) + rng.normal(0, cfg.noise_scale, cfg.d_global)
        img = self.modality_gap @ cap + rng.normal(0, cfg.noise_scale, cfg.d_global)
        img = img / np.linalg.norm(img)

        # earlier concepts are more prominent and cover more patches
        k = len(ids)
        weights = np.arange(k, 0, -1, dtype=float)
        counts = np.floor(weights / weights.sum() * cfg.n_patches).astype(int)
        counts[0] += cfg.n_patches - counts.sum()
        assigned = np.repeat(np.array(ids), counts)[rng.permutation(cfg.n_patches)]

        u = rng.random(cfg.n_patches)
        pool = np.array([c for c in range(cfg.concept_count) if c not in set(ids)])
        picks = rng.integers(0, max(len(pool), 1), size=cfg.n_patches)
        noise = rng.normal(0, cfg.patch_noise_scale / np.sqrt(cfg.d_patch),
                           size=(cfg.n_patches, cfg.d_patch))

        defect = (u < p) & (len(pool) > 0)
        shown = assigned.copy()
        if len(pool):
            shown[defect] = pool[picks[defect]]
        patches = self.anchors[shown] @ self.lift + noise

        sid = sample_id or f"s{int(np.atleast_1d(key)[-1]):06d}"
        bundle = FeatureBundle(img, patches, image_id=sid)
        caption = CaptionEmbedding(cap, caption_id=sid)
        return SyntheticSample(bundle, caption, tuple(ids), self.caption_text(ids),
                               assigned, shown, defect)


@functools.lru_cache(maxsize=8)
def world_for(cfg: SyntheticWorldConfig) -> SyntheticWorld:
    return SyntheticWorld(cfg)


def generate_synthetic_pair(caption_concepts, cfg: SyntheticWorldConfig,
                            key: int = 0) -> tuple[FeatureBundle, CaptionEmbedding]:
    """Pure function of (concepts, cfg, key): the synthetic image and caption embeddings."""
    sample = world_for(cfg).render(caption_concepts, key)
    return sample.bundle, sample.caption
