"""Greedy and beam-search caption generation with inference-mode mix-up."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from pcmnet.captioner import Captioner, as_constants
from pcmnet.errors import InvalidArgumentError
from pcmnet.metrics import EvalPair, bleu4, cider_d
from pcmnet.numerics.ops import log_softmax
from pcmnet.numerics.tape import Var
from pcmnet.tokenizer import BOS_ID, EOS_ID, PAD_ID, Vocabulary

# never valid as a generated token; EOS is also refused as the first token
BLOCKED = (BOS_ID, PAD_ID)


@dataclass
class Beam:
    tokens: list[int]
    logprob: float
    finished: bool = False


@dataclass
class DecodeResult:
    tokens: list[int]
    score: float
    truncated: bool = False


def _step_logprobs(model: Captioner, P, state, last: Sequence[int], first: bool) -> np.ndarray:
    logits = model.decode_step(P, state, np.asarray(last))
    logp = log_softmax(logits, axis=-1).value.copy()
    logp[:, list(BLOCKED)] = -np.inf
    if first:
        logp[:, EOS_ID] = -np.inf
    return logp


def _tiled(memory: Var, n: int) -> Var:
    m = memory.value if memory.ndim == 3 else memory.value[None]
    return Var(np.repeat(m[:1], n, axis=0))


def greedy(model: Captioner, P, memory: Var, max_len: int = 20) -> DecodeResult:
    """Argmax token per step (lowest id on ties) until EOS or ``max_len`` tokens."""
    state = model.start(_tiled(memory, 1))
    tokens: list[int] = []
    score = 0.0
    last = BOS_ID
    for step in range(max_len):
        logp = _step_logprobs(model, P, state, [last], step == 0)[0]
        last = int(np.argmax(logp))
        score += logp[last]
        tokens.append(last)
        if last == EOS_ID:
            return DecodeResult(tokens, float(score))
    return DecodeResult(tokens, float(score), truncated=True)


def beam_search(model: Captioner, P, memory: Var, beam_size: int = 3,
                max_len: int = 20) -> DecodeResult:
    """Length-capped beam search without length normalisation.

    Each step keeps the ``beam_size`` best continuations of the live beams;
    continuations ending in EOS retire.  The best retired beam wins, ties going
    to the earlier-finishing one and then the lexicographically smaller ids.
    """
    if beam_size < 1:
        raise InvalidArgumentError(f"beam_size must be >= 1, got {beam_size}")
    state = model.start(_tiled(memory, 1))
    alive = [Beam([], 0.0)]
    finished: list[tuple[float, int, list[int]]] = []
    for step in range(max_len):
        last = [b.tokens[-1] if b.tokens else BOS_ID for b in alive]
        logp = _step_logprobs(model, P, state, last, step == 0)
        scores = np.array([b.logprob for b in alive])[:, None] + logp
        rows, cols = np.nonzero(np.isfinite(scores))
        # score desc, then parent rank, then step logprob desc, then token id
        order = np.lexsort((cols, -logp[rows, cols], rows, -scores[rows, cols]))[:beam_size]
        keep_rows, survivors = [], []
        for j in order:
            r, v = int(rows[j]), int(cols[j])
            beam = Beam(alive[r].tokens + [v], float(scores[r, v]))
            if v == EOS_ID:
                beam.finished = True
                finished.append((beam.logprob, step, beam.tokens))
            else:
                keep_rows.append(r)
                survivors.append(beam)
        if not survivors:
            break
        if finished and max(f[0] for f in finished) >= max(b.logprob for b in survivors):
            # live scores can only fall further, so no survivor can win
            break
        state = model.reorder(state, np.array(keep_rows))
        alive = survivors
    if finished:
        best = min(finished, key=lambda f: (-f[0], f[1], f[2]))
        return DecodeResult(best[2], best[0])
    best = min(alive, key=lambda b: (-b.logprob, b.tokens))
    return DecodeResult(best.tokens, best.logprob, truncated=True)


def encode_for_inference(model: Captioner, P, g_image, patches, textual=None, indices=None):
    g = np.asarray(g_image)[None]
    pt = np.asarray(patches)[None]
    tx = None if textual is None else np.asarray(textual)[None]
    ix = None if indices is None else np.asarray(indices)[None]
    return model.encode_images(P, g, pt, tx, ix, mode="infer").memory


def caption_sample(model: Captioner, P, sample, vocab: Vocabulary, beam_size: int = 3,
                   max_len: int = 20) -> tuple[str, DecodeResult]:
    memory = encode_for_inference(model, P, sample.bundle.global_feature, sample.bundle.patches,
                                  sample.textual_map, sample.mix_indices)
    if beam_size == 1:
        res = greedy(model, P, memory, max_len)
    else:
        res = beam_search(model, P, memory, beam_size, max_len)
    return vocab.decode(res.tokens), res


def evaluate_samples(model: Captioner, params, samples, vocab: Vocabulary, cfg) -> tuple[float, float]:
    P = as_constants(params)
    pairs = []
    for s in samples:
        text, _ = caption_sample(model, P, s, vocab, cfg.beam_size, cfg.max_len)
        pairs.append(EvalPair.from_text(s.sample_id, text, [s.reference]))
    return bleu4(pairs), cider_d(pairs)
