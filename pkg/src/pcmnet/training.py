"""CLIP-weighted cross-entropy, Adam with the inverse-sqrt warmup schedule, and the epoch loop."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from pcmnet.captioner import Captioner, Params, as_constants, init_params, pad_batch
from pcmnet.checkpoint import save_checkpoint
from pcmnet.config import SEED_INIT, SEED_NOISE, SEED_SHUFFLE, RunConfig
from pcmnet.dataset import TrainingSample
from pcmnet.embedding_space import cosine_similarity
from pcmnet.errors import (ConfigError, InvalidArgumentError, InvariantError, NumericError,
                           TokenizerError)
from pcmnet.numerics import ops
from pcmnet.numerics.tape import Tape, Var
from pcmnet.tokenizer import BOS_ID, PAD_ID, Vocabulary

log = logging.getLogger(__name__)


def clip_weight(g_image, g_caption, w: float) -> float:
    """min(1, w * cos), floored at 0 so an anti-aligned pair never flips the loss sign."""
    if not w > 0:
        raise InvalidArgumentError(f"clip scale must be positive, got {w}")
    return float(min(1.0, max(0.0, w * cosine_similarity(g_image, g_caption))))


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    globals_: np.ndarray
    patches: np.ndarray
    textual: np.ndarray | None
    indices: np.ndarray | None
    ids: np.ndarray
    weights: np.ndarray


def make_batch(samples: Sequence[TrainingSample], use_mixup: bool, use_cxe: bool,
               noise_rng: np.random.Generator | None = None, noise_variance: float = 0.0) -> Batch:
    if not samples:
        raise InvalidArgumentError("batch is empty")
    g = np.stack([s.bundle.global_feature for s in samples])
    if noise_rng is not None and noise_variance > 0:
        g = g + noise_rng.normal(0.0, np.sqrt(noise_variance), size=g.shape)
    patches = np.stack([s.bundle.patches for s in samples])
    textual = indices = None
    if use_mixup:
        textual = np.stack([s.textual_map for s in samples])
        indices = np.stack([s.mix_indices for s in samples])
    weights = np.array([s.clip_weight if use_cxe else 1.0 for s in samples])
    return Batch(g, patches, textual, indices, pad_batch([s.token_ids for s in samples]), weights)


def sequence_logprobs(model: Captioner, P, batch: Batch, mode: str = "train") -> Var:
    """Summed log-likelihood of each caption in the batch, shape ``(B,)``."""
    enc = model.encode_images(P, batch.globals_, batch.patches, batch.textual, batch.indices, mode)
    logp = model.token_logprobs(P, enc.memory, batch.ids)
    mask = (batch.ids[:, 1:] != PAD_ID).astype(np.float64)
    return ops.reduce_sum(ops.mul(logp, mask), axis=1)


def forward_logprobs(model: Captioner, params, sample: TrainingSample) -> np.ndarray:
    """Teacher-forced log p(w_t | I, w_<t) for every caption token after BOS (no noise)."""
    ids = np.asarray(sample.token_ids, dtype=np.int64)
    if ids.size < 2 or ids[0] != BOS_ID:
        raise InvalidArgumentError("caption ids must start with BOS and hold at least one token")
    if ids.min() < 0 or ids.max() >= model.cfg.vocab_size:
        raise TokenizerError(f"token id outside vocabulary of {model.cfg.vocab_size}")
    P = params if all(isinstance(v, Var) for v in params.values()) else as_constants(params)
    mixing = sample.textual_map is not None
    batch = make_batch([sample], mixing, False)
    enc = model.encode_images(P, batch.globals_, batch.patches, batch.textual, batch.indices)
    return model.token_logprobs(P, enc.memory, ids[None, :]).value[0]


def cxe_loss(model: Captioner, P, batch: Batch) -> Var:
    """-(1/B) * sum_b c_b * log p(S_b | I_b); pad positions excluded."""
    w = np.asarray(batch.weights, dtype=np.float64)
    if np.any((w < 0) | (w > 1)) or not np.all(np.isfinite(w)):
        raise InvariantError(f"clip weights must lie in [0, 1], got {w}")
    seq = sequence_logprobs(model, P, batch)
    return ops.mul(ops.reduce_sum(ops.mul(seq, w)), -1.0 / len(w))


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------

def noam_lr(step: int, d_model: int, warmup: int) -> float:
    if warmup < 1:
        raise ConfigError(f"warmup must be >= 1, got {warmup}")
    if step < 1:
        raise InvalidArgumentError(f"step must be >= 1, got {step}")
    return d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr_scale: float = 1.0
    warmup: int = 10000
    d_model: int = 512

    @classmethod
    def zeros_like(cls, params: Params, **kw) -> "OptimizerState":
        return cls({k: np.zeros_like(v) for k, v in params.items()},
                   {k: np.zeros_like(v) for k, v in params.items()}, **kw)

    def scheduled_lr(self, step: int) -> float:
        return self.lr_scale * noam_lr(step, self.d_model, self.warmup)


def adam_step(params: Params, grads: dict[str, np.ndarray], state: OptimizerState,
              lr: float | None = None) -> tuple[Params, OptimizerState]:
    """One bias-corrected Adam update in place; ``lr`` defaults to the schedule."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {k}")
        if g.shape != params[k].shape:
            raise ConfigError(f"gradient shape {g.shape} != parameter shape {params[k].shape} for {k}")
    state.step += 1
    t = state.step
    lr = state.scheduled_lr(t) if lr is None else lr
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for k, g in grads.items():
        m = state.m[k] = b1 * state.m[k] + (1.0 - b1) * g
        v = state.v[k] = b2 * state.v[k] + (1.0 - b2) * g * g
        params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    bleu4: float
    cider: float
    lr: float
    wall_time: float


@dataclass
class TrainResult:
    params: Params
    history: list[EpochMetrics] = field(default_factory=list)
    vocab: Vocabulary | None = None


def loss_and_grads(model: Captioner, params: Params, batch: Batch) -> tuple[float, dict]:
    tape = Tape()
    P = {k: tape.watch(v, k) for k, v in params.items()}
    loss = cxe_loss(model, P, batch)
    tape.backward(loss)
    return float(loss.value), tape.gradients()


METRICS_COLUMNS = ("epoch", "mean_loss", "val_bleu4", "val_cider", "lr")


def train(cfg: RunConfig, train_set: Sequence[TrainingSample], vocab: Vocabulary,
          val_set: Sequence[TrainingSample] = (), out_dir=None,
          evaluate: Callable | None = None) -> TrainResult:
    """Fit the captioner; writes ``checkpoint.pcmc`` and ``metrics.tsv`` into ``out_dir``.

    ``evaluate(model, params, val_set) -> (bleu4, cider)`` scores validation
    captions; defaults to beam search over ``val_set``.
    """
    if not train_set:
        raise InvalidArgumentError("training set is empty")
    if evaluate is None:
        from pcmnet.decoding import evaluate_samples

        def evaluate(model, params, samples):
            return evaluate_samples(model, params, samples, vocab, cfg)

    mcfg = cfg.model(len(vocab))
    model = Captioner(mcfg)
    params = init_params(mcfg, cfg.seed_for(SEED_INIT))
    state = OptimizerState.zeros_like(params, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.adam_eps,
                                      lr_scale=cfg.lr_scale, warmup=cfg.warmup, d_model=cfg.d_model)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_path = out / "metrics.tsv"
        header = "".join(f"# {line}\n" for line in cfg.to_text().splitlines())
        metrics_path.write_text(header + "\t".join(METRICS_COLUMNS) + "\n")
        (out / "timing.tsv").write_text("epoch\twall_time_s\n")

    result = TrainResult(params, vocab=vocab)
    n = len(train_set)
    lr = 0.0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = cfg.rng(SEED_SHUFFLE, epoch).permutation(n)
        noise_rng = cfg.rng(SEED_NOISE, epoch)
        losses = []
        for start in range(0, n, cfg.batch_size):
            chunk = [train_set[i] for i in order[start:start + cfg.batch_size]]
            batch = make_batch(chunk, cfg.use_mixup, cfg.use_cxe, noise_rng, cfg.noise_variance)
            loss, grads = loss_and_grads(model, params, batch)
            if not np.isfinite(loss):
                kept = "; last good checkpoint kept" if out is not None and epoch > 1 else ""
                raise NumericError(f"loss became {loss} in epoch {epoch}{kept}")
            lr = state.scheduled_lr(state.step + 1)
            adam_step(params, grads, state, lr)
            losses.append(loss)
        mean_loss = float(np.mean(losses))
        if val_set and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
            bleu, cider = evaluate(model, params, val_set)
        else:
            bleu = cider = float("nan")
        wall = time.perf_counter() - t0
        row = EpochMetrics(epoch, mean_loss, bleu, cider, lr, wall)
        result.history.append(row)
        log.info("epoch %d loss %.4f bleu4 %.4f cider %.4f lr %.3g (%.1fs)",
                 epoch, mean_loss, bleu, cider, lr, wall)
        if out is not None:
            save_checkpoint(out / "checkpoint.pcmc", cfg, vocab, params)
            with open(metrics_path, "a") as fh:
                fh.write(f"{epoch}\t{mean_loss!r}\t{bleu!r}\t{cider!r}\t{lr!r}\n")
            with open(out / "timing.tsv", "a") as fh:
                fh.write(f"{epoch}\t{wall:.3f}\n")
    if out is not None and cfg.epochs == 0:
        save_checkpoint(out / "checkpoint.pcmc", cfg, vocab, params)
    return result
