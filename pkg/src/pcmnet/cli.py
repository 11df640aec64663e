"""Command-line entry point: ``pcmnet <subcommand> [options] [key=value ...]``."""

from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from pcmnet import datadir
from pcmnet.captioner import Captioner, as_constants, init_params
from pcmnet.checkpoint import load_checkpoint
from pcmnet.concept_vocab import load_lexicon
from pcmnet.config import RunConfig
from pcmnet.dataset import prepare_records
from pcmnet.decoding import caption_sample
from pcmnet.errors import ConfigError, InvalidArgumentError, PCMError
from pcmnet.metrics import bleu4, cider_d, read_eval_file, write_eval_file
from pcmnet.numerics.gradcheck import check_gradients
from pcmnet.pipeline import VARIANTS, build_vocabularies, prepare_data, run_experiment
from pcmnet.training import Batch, cxe_loss

log = logging.getLogger("pcmnet")

SWEEP_KEYS = {"K": "top_k", "M": "top_m", "w": "clip_scale", "data_fraction": "data_fraction"}


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def resolve_config(args, data_dir=None) -> RunConfig:
    """Defaults < data directory config < --config file < key=value overrides < --seed."""
    cfg = RunConfig()
    if data_dir is not None and (Path(data_dir) / datadir.CONFIG_FILE).exists():
        cfg = RunConfig.from_file(Path(data_dir) / datadir.CONFIG_FILE, cfg)
    if args.config:
        cfg = RunConfig.from_file(args.config, cfg)
    pairs = {}
    for item in args.overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        pairs[k] = v
    cfg = RunConfig.from_pairs(pairs, cfg)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    cfg.validate()
    return cfg


def require_out(args) -> Path:
    if not args.out:
        raise InvalidArgumentError(f"{args.command} needs --out")
    return Path(args.out)


def load_prepared(cfg: RunConfig, data_dir, vocab_dir=None):
    if data_dir is None:
        return prepare_data(cfg)
    train_records = datadir.read_split(data_dir, "train", cfg)
    val_records = datadir.read_split(data_dir, "val", cfg)
    vocab = concepts = None
    if vocab_dir is not None:
        vocab, concepts = datadir.read_vocab_dir(vocab_dir)
    return prepare_data(cfg, train_records, val_records, vocab, concepts,
                        datadir.read_head(data_dir, cfg))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = resolve_config(args)
    out = require_out(args)
    counts = datadir.write_dataset(out, cfg, force=args.force)
    print(f"wrote {counts['train']} train and {counts['val']} val records to {out}")
    return 0


def cmd_build_vocab(args) -> int:
    cfg = resolve_config(args, args.data)
    out = require_out(args)
    datadir.refuse_overwrite([out / "words.txt", out / "concepts.tsv"], args.force)
    records = datadir.read_split(args.data, "train", cfg)
    lexicon = load_lexicon(Path(args.data) / "lexicon.txt")
    vocab, concepts = build_vocabularies(cfg, records, lexicon, datadir.text_provider(args.data, cfg))
    datadir.write_vocab_dir(out, cfg, vocab, concepts)
    print(f"{len(vocab)} caption tokens, {len(concepts)} concepts -> {out}")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args, args.data)
    out = require_out(args)
    datadir.refuse_overwrite([out / "checkpoint.pcmc", out / "metrics.tsv"], args.force)
    data = load_prepared(cfg, args.data, args.vocab)
    result = run_experiment(cfg, out, data)
    last = result.history[-1] if result.history else None
    if last is not None:
        print(f"epoch {last.epoch}: loss {last.loss:.4f} BLEU-4 {last.bleu4:.4f} CIDEr {last.cider:.4f}")
    return 0


def cmd_caption(args) -> int:
    if not args.checkpoint:
        raise InvalidArgumentError("caption needs --checkpoint")
    if not args.data or not args.vocab:
        raise InvalidArgumentError("caption needs --data and --vocab")
    expect = resolve_config(args, args.data)
    cfg, vocab, params = load_checkpoint(args.checkpoint, expect)
    # inference settings may differ from training; shapes may not
    cfg = cfg.replace(beam_size=expect.beam_size, top_k=expect.top_k, temperature=expect.temperature,
                      relevance=expect.relevance)
    _, concepts = datadir.read_vocab_dir(args.vocab)
    records = datadir.read_split(args.data, args.split, cfg)
    run = cfg.replace(top_k=min(cfg.top_k, len(concepts)))
    samples = prepare_records(records, vocab, concepts, datadir.read_head(args.data, cfg), run)
    model = Captioner(cfg.model(len(vocab)))
    P = as_constants(params)
    rows = []
    for s in samples:
        text, _ = caption_sample(model, P, s, vocab, cfg.beam_size, cfg.max_len)
        rows.append((s.sample_id, text, [s.reference]))
    out = require_out(args)
    datadir.refuse_overwrite([out], args.force)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_eval_file(out, rows, datadir.config_header(cfg))
    print(f"captioned {len(rows)} images -> {out}")
    return 0


def cmd_eval(args) -> int:
    if not args.input:
        raise InvalidArgumentError("eval needs --input")
    pairs = read_eval_file(args.input)
    if not pairs:
        raise InvalidArgumentError(f"{args.input} holds no records")
    bleu, cider = bleu4(pairs), cider_d(pairs)
    line = f"BLEU-4\t{bleu!r}\nCIDEr-D\t{cider!r}\n"
    print(line, end="")
    if args.out:
        Path(args.out).write_text(line)
    return 0


def _sweep_point(job):
    cfg_text, key, value, data_dir, out = job
    cfg = RunConfig.from_text(cfg_text)
    try:
        cfg = RunConfig.from_pairs({key: value}, cfg)
        result = run_experiment(cfg, out, load_prepared(cfg, data_dir))
        last = result.history[-1]
        return value, last.bleu4, last.cider, last.loss, ""
    except (PCMError, ValueError, ArithmeticError) as exc:
        return value, float("nan"), float("nan"), float("nan"), f"{type(exc).__name__}: {exc}"


def cmd_sweep(args) -> int:
    cfg = resolve_config(args, args.data)
    out = require_out(args)
    if args.param not in SWEEP_KEYS:
        raise InvalidArgumentError(f"--param must be one of {', '.join(SWEEP_KEYS)}")
    grid = [g.strip() for g in (args.grid or "").split(",") if g.strip()]
    if not grid:
        raise InvalidArgumentError("sweep grid is empty")
    key = SWEEP_KEYS[args.param]
    table = out / "sweep.tsv"
    datadir.refuse_overwrite([table], args.force)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(cfg.to_text(), key, v, args.data, out / f"{key}={v}") for v in grid]
    if args.parallel > 1:
        with ProcessPoolExecutor(args.parallel) as ex:
            rows = list(ex.map(_sweep_point, jobs))
    else:
        rows = [_sweep_point(j) for j in jobs]
    lines = [datadir.config_header(cfg), f"{args.param}\tbleu4\tcider\tloss\terror\n"]
    for value, b, c, l, err in rows:
        lines.append(f"{value}\t{b!r}\t{c!r}\t{l!r}\t{err}\n")
        if err:
            log.error("%s=%s failed: %s", args.param, value, err)
    table.write_text("".join(lines))
    print("".join(lines[1:]), end="")
    return 0


def cmd_ablate(args) -> int:
    cfg = resolve_config(args, args.data)
    out = require_out(args)
    table = out / "ablation.tsv"
    datadir.refuse_overwrite([table], args.force)
    out.mkdir(parents=True, exist_ok=True)
    lines = [datadir.config_header(cfg), "variant\tmixup\tcxe\tbleu4\tcider\tloss\n"]
    for name, mix, cxe in VARIANTS:
        run = cfg.replace(use_mixup=mix, use_cxe=cxe)
        result = run_experiment(run, out / name, load_prepared(run, args.data, None))
        last = result.history[-1]
        lines.append(f"{name}\t{str(mix).lower()}\t{str(cxe).lower()}\t"
                     f"{last.bleu4!r}\t{last.cider!r}\t{last.loss!r}\n")
    table.write_text("".join(lines))
    print("".join(lines[1:]), end="")
    return 0


TOY = dict(d_model=16, n_heads=2, n_enc=1, n_dec=1, d_global=6, d_patch=8, n_patches=4,
           top_k=2, top_m=2)


def toy_gradient_check(seed: int = 0, vocab_size: int = 20, batch: int = 2, length: int = 4):
    """Finite-difference check of every scalar of every parameter on a tiny model."""
    cfg = RunConfig(**TOY, n_concepts=2, seed=seed)
    mcfg = cfg.model(vocab_size)
    rng = np.random.default_rng([seed, 99])
    params = init_params(mcfg, seed)
    g = rng.normal(size=(batch, cfg.d_global))
    patches = rng.normal(size=(batch, cfg.n_patches, cfg.d_patch))
    textual = rng.normal(size=(batch, cfg.n_patches, cfg.d_global))
    indices = np.stack([rng.permutation(cfg.n_patches)[:cfg.top_m] for _ in range(batch)])
    ids = rng.integers(4, vocab_size, size=(batch, length))
    ids[:, 0], ids[:, -1] = 1, 2
    ids[1, -2:] = [2, 3]
    b = Batch(g, patches, textual, indices, ids, rng.uniform(0.2, 1.0, size=batch))
    model = Captioner(mcfg)
    return check_gradients(lambda P: cxe_loss(model, P, b), params)


def cmd_grad_check(args) -> int:
    report = toy_gradient_check(args.seed or 0)
    print(f"checked {len(report.probes)} scalars, max relative error {report.max_rel_error:.3e}")
    for p in report.worst(3):
        print(f"  {p.name}{list(p.index)}\ttape {p.tape_grad:.6e}\tfd {p.fd_grad:.6e}\trel {p.rel_error:.2e}")
    return 0 if report.passed(args.tol) else 5


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--seed", type=int, help="root seed (overrides config)")
    common.add_argument("--out", help="output file or directory")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("-v", "--verbose", action="store_true")
    common.add_argument("overrides", nargs="*", metavar="key=value", help="config overrides")

    parser = argparse.ArgumentParser(prog="pcmnet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", parents=[common], help="generate a synthetic corpus and embeddings")
    p = sub.add_parser("build-vocab", parents=[common], help="caption and concept vocabularies")
    p.add_argument("--data", required=True)
    p = sub.add_parser("train", parents=[common], help="train a captioner")
    p.add_argument("--data")
    p.add_argument("--vocab")
    p = sub.add_parser("caption", parents=[common], help="caption images with a checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--data")
    p.add_argument("--vocab")
    p.add_argument("--split", default="val", choices=("train", "val"))
    p = sub.add_parser("eval", parents=[common], help="BLEU-4 and CIDEr-D of an evaluation file")
    p.add_argument("--input")
    p = sub.add_parser("sweep", parents=[common], help="one training run per grid value")
    p.add_argument("--data")
    p.add_argument("--param", required=True, choices=sorted(SWEEP_KEYS))
    p.add_argument("--grid", required=True, help="comma-separated values")
    p.add_argument("--parallel", type=int, default=1, help="worker processes")
    p = sub.add_parser("ablate", parents=[common], help="train the four mix-up/CXE variants")
    p.add_argument("--data")
    p = sub.add_parser("grad-check", parents=[common], help="finite-difference gradient check")
    p.add_argument("--tol", type=float, default=1e-4)
    return parser


COMMANDS = {
    "gen-data": cmd_gen_data, "build-vocab": cmd_build_vocab, "train": cmd_train,
    "caption": cmd_caption, "eval": cmd_eval, "sweep": cmd_sweep, "ablate": cmd_ablate,
    "grad-check": cmd_grad_check,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except PCMError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
