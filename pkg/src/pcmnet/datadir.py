"""On-disk layout of a generated dataset directory and a vocabulary directory.

Dataset directory::

    config.txt                 run configuration that produced the data
    lexicon.txt                candidate concept nouns, one per line
    {split}.tsv                caption_id<TAB>caption text
    {split}_captions.pcme      caption global embeddings
    {split}_global.pcme        image global embeddings
    {split}_patches.pcme       flattened image patch grids
    text_templates.pcme        prompt embeddings keyed by prompt text
    head.pcme                  frozen patch projection head

Vocabulary directory: ``config.txt``, ``words.txt`` and ``concepts.tsv``.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from pcmnet.archive import (ArchiveTextProvider, load_archive, load_bundles, load_captions,
                            store_archive, store_bundles, store_captions)
from pcmnet.concept_vocab import TEMPLATE, ConceptVocabulary
from pcmnet.config import RunConfig
from pcmnet.dataset import CorpusRecord, generate_split
from pcmnet.embedding_space import world_for
from pcmnet.errors import FormatError, InvalidArgumentError
from pcmnet.tokenizer import Vocabulary

CONFIG_FILE = "config.txt"


def config_header(cfg: RunConfig) -> str:
    return "".join(f"# {line}\n" for line in cfg.to_text().splitlines())


def refuse_overwrite(paths, force: bool) -> None:
    existing = [str(p) for p in paths if Path(p).exists()]
    if existing and not force:
        raise InvalidArgumentError(f"refusing to overwrite {', '.join(existing)} (use --force)")


def data_files(out: Path) -> list[Path]:
    names = [CONFIG_FILE, "lexicon.txt", "text_templates.pcme", "head.pcme"]
    for split in ("train", "val"):
        names += [f"{split}.tsv", f"{split}_captions.pcme", f"{split}_global.pcme",
                  f"{split}_patches.pcme"]
    return [out / n for n in names]


def write_corpus(path, cfg: RunConfig, rows) -> None:
    body = "".join(f"{cid}\t{text}\n" for cid, text in rows)
    Path(path).write_text(config_header(cfg) + body)


def read_corpus(path) -> list[tuple[str, str]]:
    rows = []
    offset = 0
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if line.strip() and not line.startswith("#"):
            parts = line.split("\t")
            if len(parts) != 2:
                raise FormatError(f"{path}: line {lineno} needs caption_id<TAB>text", offset=offset)
            rows.append((parts[0], parts[1]))
        offset += len(line.encode()) + 1
    return rows


def write_dataset(out, cfg: RunConfig, force: bool = False) -> dict[str, int]:
    """Generate both splits and every embedding archive; returns record counts."""
    out = Path(out)
    refuse_overwrite(data_files(out), force)
    out.mkdir(parents=True, exist_ok=True)
    world = world_for(cfg.world())
    counts = {}
    for split in ("train", "val"):
        records = generate_split(cfg, split)
        write_corpus(out / f"{split}.tsv", cfg, [(r.caption_id, r.text) for r in records])
        store_captions(out / f"{split}_captions.pcme", [r.caption for r in records])
        store_bundles(out / f"{split}_global.pcme", out / f"{split}_patches.pcme",
                      [r.bundle for r in records])
        counts[split] = len(records)
    (out / "lexicon.txt").write_text("".join(f"{n}\n" for n in world.names))
    store_archive(out / "text_templates.pcme",
                  [(TEMPLATE.format(n), world.embed_text(TEMPLATE.format(n))) for n in world.names])
    store_archive(out / "head.pcme", [("projection_head", world.projection_head.ravel())])
    (out / CONFIG_FILE).write_text(cfg.to_text())
    return counts


def read_split(data_dir, split: str, cfg: RunConfig) -> list[CorpusRecord]:
    d = Path(data_dir)
    corpus = read_corpus(d / f"{split}.tsv")
    bundles = load_bundles(d / f"{split}_global.pcme", d / f"{split}_patches.pcme",
                           cfg.d_global, cfg.n_patches, cfg.d_patch)
    captions = load_captions(d / f"{split}_captions.pcme", cfg.d_global)
    records = []
    for cid, text in corpus:
        if cid not in bundles or cid not in captions:
            raise FormatError(f"{d}: no embeddings stored for record {cid!r}")
        records.append(CorpusRecord(cid, text, bundles[cid], captions[cid]))
    return records


def read_head(data_dir, cfg: RunConfig) -> np.ndarray:
    flat = load_archive(Path(data_dir) / "head.pcme", expected_dim=cfg.d_patch * cfg.d_global)
    return flat["projection_head"].reshape(cfg.d_patch, cfg.d_global)


def text_provider(data_dir, cfg: RunConfig) -> ArchiveTextProvider:
    return ArchiveTextProvider.from_file(Path(data_dir) / "text_templates.pcme", cfg.d_global)


def write_vocab_dir(out, cfg: RunConfig, vocab: Vocabulary, concepts: ConceptVocabulary) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    vocab.save(out / "words.txt")
    concepts.save(out / "concepts.tsv")
    (out / CONFIG_FILE).write_text(cfg.to_text())


def read_vocab_dir(vocab_dir) -> tuple[Vocabulary, ConceptVocabulary]:
    d = Path(vocab_dir)
    return Vocabulary.load(d / "words.txt"), ConceptVocabulary.load(d / "concepts.tsv")
