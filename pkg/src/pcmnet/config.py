"""Flat ``key=value`` run configuration.

Every hyperparameter of a run lives in :class:`RunConfig`.  Its text form is
echoed into checkpoint and metrics headers so each artifact records how it
was produced.  Output paths are CLI arguments, not config, which keeps two
runs in different directories byte-comparable.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from pcmnet.captioner import ModelConfig
from pcmnet.embedding_space import SyntheticWorldConfig
from pcmnet.errors import ConfigError

# stream ids for splitting the root seed
SEED_DATA, SEED_INIT, SEED_SHUFFLE, SEED_NOISE, SEED_SUBSET = range(5)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    # synthetic world
    n_train: int = 500
    n_val: int = 100
    concept_count: int = 48
    d_global: int = 24
    d_patch: int = 32
    n_patches: int = 16
    p_defect: float = 0.3
    val_p_defect: float = 0.0
    modality_gap_scale: float = 0.3
    noise_scale: float = 0.05
    patch_noise_scale: float = 0.5
    # concepts and mix-up
    n_concepts: int = 40
    top_k: int = 5
    top_m: int = 5
    temperature: float = 0.07
    relevance: str = "max"
    clip_scale: float = 4.0
    use_mixup: bool = True
    use_cxe: bool = True
    # captioner
    d_model: int = 32
    n_heads: int = 4
    n_enc: int = 2
    n_dec: int = 2
    d_ff: int = 0
    min_word_count: int = 2
    max_len: int = 20
    # optimisation
    epochs: int = 30
    batch_size: int = 32
    warmup: int = 100
    lr_scale: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    noise_variance: float = 0.016
    data_fraction: float = 1.0
    # evaluation
    beam_size: int = 3
    eval_every: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        checks = [
            (self.n_train >= 1, "n_train must be >= 1"),
            (self.n_val >= 0, "n_val must be >= 0"),
            (0 <= self.p_defect <= 1 and 0 <= self.val_p_defect <= 1, "defect rates must lie in [0, 1]"),
            (self.top_k >= 1, "top_k must be >= 1"),
            (self.top_k <= self.n_concepts, f"top_k={self.top_k} exceeds n_concepts={self.n_concepts}"),
            (0 <= self.top_m <= self.n_patches, f"top_m={self.top_m} must lie in [0, n_patches={self.n_patches}]"),
            (self.temperature > 0, "temperature must be positive"),
            (self.relevance in ("max", "mean"), "relevance must be 'max' or 'mean'"),
            (self.clip_scale > 0, "clip_scale must be positive"),
            (self.d_model % max(self.n_heads, 1) == 0 and self.n_heads >= 1,
             f"n_heads={self.n_heads} must divide d_model={self.d_model}"),
            (self.epochs >= 0, "epochs must be >= 0"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.warmup >= 1, "warmup must be >= 1"),
            (self.lr_scale >= 0, "lr_scale must be >= 0"),
            (self.noise_variance >= 0, "noise_variance must be >= 0"),
            (0 < self.data_fraction <= 1, "data_fraction must lie in (0, 1]"),
            (self.beam_size >= 1, "beam_size must be >= 1"),
            (self.max_len >= 1, "max_len must be >= 1"),
            (self.eval_every >= 1, "eval_every must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    # -- derived configs ---------------------------------------------------

    def world(self, split_p_defect: float | None = None) -> SyntheticWorldConfig:
        return SyntheticWorldConfig(
            concept_count=self.concept_count, d_global=self.d_global, d_patch=self.d_patch,
            n_patches=self.n_patches,
            p_defect=self.p_defect if split_p_defect is None else split_p_defect,
            modality_gap_scale=self.modality_gap_scale, noise_scale=self.noise_scale,
            patch_noise_scale=self.patch_noise_scale, seed=self.seed_for(SEED_DATA))

    def model(self, vocab_size: int) -> ModelConfig:
        visual = self.n_patches + (self.top_m if self.use_mixup else 0) + 1
        return ModelConfig(vocab_size=vocab_size, d_global=self.d_global, d_patch=self.d_patch,
                           d_model=self.d_model, n_heads=self.n_heads, n_enc=self.n_enc,
                           n_dec=self.n_dec, d_ff=self.d_ff, max_visual_tokens=visual,
                           max_caption_len=self.max_len + 2)

    def seed_for(self, stream: int) -> int:
        return int(np.random.SeedSequence([self.seed, stream]).generate_state(1)[0])

    def rng(self, stream: int, *extra: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, stream, *extra])

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    # -- text form -----------------------------------------------------------

    def to_text(self) -> str:
        return "".join(f"{f.name}={_fmt(getattr(self, f.name))}\n" for f in fields(self))

    @classmethod
    def from_pairs(cls, pairs: dict[str, str], base: "RunConfig | None" = None) -> "RunConfig":
        base = base or cls()
        types = {f.name: f.type for f in fields(cls)}
        changes = {}
        for key, raw in pairs.items():
            key = key.strip().replace("-", "_")
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            changes[key] = _parse(key, types[key], raw.strip())
        return dataclasses.replace(base, **changes)

    @classmethod
    def from_text(cls, text: str, base: "RunConfig | None" = None) -> "RunConfig":
        pairs = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"config line {n} is not key=value: {line!r}")
            k, v = line.split("=", 1)
            pairs[k] = v
        return cls.from_pairs(pairs, base)

    @classmethod
    def from_file(cls, path, base: "RunConfig | None" = None) -> "RunConfig":
        return cls.from_text(Path(path).read_text(), base)

    def diff(self, other: "RunConfig", keys=None) -> list[str]:
        names = keys or [f.name for f in fields(self)]
        return [k for k in names if getattr(self, k) != getattr(other, k)]


# fields that fix parameter shapes or data; a checkpoint is only valid for these
ARCHITECTURE_KEYS = ("d_global", "d_patch", "n_patches", "d_model", "n_heads", "n_enc",
                     "n_dec", "d_ff", "top_m", "use_mixup", "max_len")


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(key: str, typ, raw: str):
    typ = typ if isinstance(typ, str) else typ.__name__
    try:
        if typ == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {typ}") from None
