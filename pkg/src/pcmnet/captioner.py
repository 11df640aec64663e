"""Transformer encoder-decoder captioner over mixed visual tokens.

Parameters live in a flat ordered ``dict[str, np.ndarray]``.  Forward
functions take a mapping of the same names to :class:`Var` so one code path
serves training (watched on a tape) and inference (constants).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from pcmnet.errors import ConfigError, InvalidArgumentError, NumericError
from pcmnet.numerics import ops
from pcmnet.numerics.layers import (causal_mask, feed_forward, linear, multi_head_attention,
                                    sinusoidal_positions, uniform_init)
from pcmnet.numerics.tape import Var
from pcmnet.pcm import apply_mixup
from pcmnet.tokenizer import BOS_ID, PAD_ID

Params = dict[str, np.ndarray]
VarParams = Mapping[str, Var]


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_global: int = 24
    d_patch: int = 32
    d_model: int = 32
    n_heads: int = 4
    n_enc: int = 2
    n_dec: int = 2
    d_ff: int = 0
    max_visual_tokens: int = 64
    max_caption_len: int = 32
    encoder_positions: bool = True
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.d_ff <= 0:
            object.__setattr__(self, "d_ff", 4 * self.d_model)
        if self.n_heads < 1 or self.d_model % self.n_heads:
            raise ConfigError(f"{self.n_heads} heads do not divide d_model={self.d_model}")
        if self.vocab_size < 5:
            raise ConfigError("vocabulary must hold the four special tokens plus a word")
        if self.n_enc < 0 or self.n_dec < 1:
            raise ConfigError("need n_enc >= 0 and n_dec >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def _attn_names(prefix: str) -> list[str]:
    return [f"{prefix}.{w}" for w in ("wq", "wk", "wv", "wo")]


def init_params(cfg: ModelConfig, seed: int) -> Params:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    d, f = cfg.d_model, cfg.d_ff
    p: Params = {}

    def lin(name, n_in, n_out, bias=True):
        p[f"{name}.w"] = uniform_init(rng, n_in, (n_in, n_out))
        if bias:
            p[f"{name}.b"] = np.zeros(n_out)

    def norm(name):
        p[f"{name}.g"] = np.ones(d)
        p[f"{name}.b"] = np.zeros(d)

    def attn(name):
        for w in _attn_names(name):
            p[w] = uniform_init(rng, d, (d, d))

    lin("vis.global", cfg.d_global, d)
    lin("vis.patch", cfg.d_patch, d)
    lin("vis.text", cfg.d_global, d)
    # embedding tables: one-hot input, so fan_in is 1
    p["type_emb"] = uniform_init(rng, 1, (2, d))
    p["tok_emb"] = uniform_init(rng, 1, (cfg.vocab_size, d))
    for i in range(cfg.n_enc):
        attn(f"enc.{i}.attn")
        norm(f"enc.{i}.ln1")
        lin(f"enc.{i}.ff1", d, f)
        lin(f"enc.{i}.ff2", f, d)
        norm(f"enc.{i}.ln2")
    p["enc.wg"] = uniform_init(rng, (cfg.n_enc + 1) * d, ((cfg.n_enc + 1) * d, d))
    for i in range(cfg.n_dec):
        attn(f"dec.{i}.self")
        norm(f"dec.{i}.ln1")
        attn(f"dec.{i}.cross")
        norm(f"dec.{i}.ln2")
        lin(f"dec.{i}.ff1", d, f)
        lin(f"dec.{i}.ff2", f, d)
        norm(f"dec.{i}.ln3")
    lin("head", d, cfg.vocab_size)
    return p


def as_constants(params: Mapping[str, np.ndarray]) -> dict[str, Var]:
    return {k: Var(v) for k, v in params.items()}


@dataclass
class EncoderState:
    blocks: list[Var]
    globals_: list[Var]
    fused_global: Var
    memory: Var


@dataclass
class DecoderState:
    """Per-block input states of every position decoded so far."""

    memory: Var
    history: list[Var | None]
    t: int = 0
    tokens: list[np.ndarray] = field(default_factory=list)


class Captioner:
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        n_pos = max(cfg.max_visual_tokens, cfg.max_caption_len) + 1
        self._positions = sinusoidal_positions(n_pos, cfg.d_model)

    # -- encoder side ------------------------------------------------------

    def visual_tokens(self, P: VarParams, patches, textual=None, indices=None,
                      mode: str = "train") -> Var:
        """Project patches (and the textual map, if mixing) into the model space."""
        v = linear(patches, P["vis.patch.w"], P["vis.patch.b"])
        if textual is None or indices is None or np.size(indices) == 0:
            return v
        t = linear(textual, P["vis.text.w"], P["vis.text.b"])
        return apply_mixup(v, t, indices, mode)

    def embed_inputs(self, P: VarParams, g_image, tokens) -> Var:
        """Prepend the projected global feature, add positions and token types."""
        tokens = tokens if isinstance(tokens, Var) else Var(tokens)
        squeeze = tokens.ndim == 2
        g = np.asarray(g_image.value if isinstance(g_image, Var) else g_image)
        if squeeze:
            tokens = ops.reshape(tokens, (1,) + tokens.shape)
            g_image = ops.reshape(g_image, (1,) + g.shape)
        b, n, d = tokens.shape
        if n + 1 > self.cfg.max_visual_tokens:
            raise ConfigError(f"{n + 1} encoder tokens exceed max_visual_tokens={self.cfg.max_visual_tokens}")
        gproj = linear(g_image, P["vis.global.w"], P["vis.global.b"])
        x = ops.concat([ops.reshape(gproj, (b, 1, d)), tokens], axis=1)
        types = np.ones(n + 1, dtype=np.int64)
        types[0] = 0
        x = ops.add(x, P["type_emb"][types])
        if self.cfg.encoder_positions:
            x = ops.add(x, self._positions[: n + 1])
        return ops.reshape(x, (n + 1, d)) if squeeze else x

    def _attn(self, P, prefix):
        return {w: P[f"{prefix}.{w}"] for w in ("wq", "wk", "wv", "wo")}

    def encode(self, P: VarParams, x0: Var) -> EncoderState:
        cfg = self.cfg
        x0 = x0 if isinstance(x0, Var) else Var(x0)
        squeeze = x0.ndim == 2
        x = ops.reshape(x0, (1,) + x0.shape) if squeeze else x0
        blocks, globals_ = [x], [x[:, 0]]
        for i in range(cfg.n_enc):
            a = multi_head_attention(x, x, x, self._attn(P, f"enc.{i}.attn"), cfg.n_heads)
            x = ops.layer_norm(ops.add(x, a), P[f"enc.{i}.ln1.g"], P[f"enc.{i}.ln1.b"], cfg.ln_eps)
            h = feed_forward(x, P[f"enc.{i}.ff1.w"], P[f"enc.{i}.ff1.b"],
                             P[f"enc.{i}.ff2.w"], P[f"enc.{i}.ff2.b"])
            x = ops.layer_norm(ops.add(x, h), P[f"enc.{i}.ln2.g"], P[f"enc.{i}.ln2.b"], cfg.ln_eps)
            if not np.all(np.isfinite(x.value)):
                raise NumericError(f"non-finite values in encoder block {i}")
            blocks.append(x)
            globals_.append(x[:, 0])
        fused = ops.matmul(ops.concat(globals_, axis=-1), P["enc.wg"])
        b, _, d = x.shape
        memory = ops.concat([ops.reshape(fused, (b, 1, d)), x[:, 1:]], axis=1)
        if squeeze:
            memory = ops.reshape(memory, memory.shape[1:])
            fused = ops.reshape(fused, (d,))
        return EncoderState(blocks, globals_, fused, memory)

    def encode_images(self, P: VarParams, g_image, patches, textual=None, indices=None,
                      mode: str = "train") -> EncoderState:
        tokens = self.visual_tokens(P, patches, textual, indices, mode)
        return self.encode(P, self.embed_inputs(P, g_image, tokens))

    # -- decoder side ------------------------------------------------------

    def _embed_tokens(self, P: VarParams, ids: np.ndarray, start: int) -> Var:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.max(initial=0) >= self.cfg.vocab_size or ids.min(initial=0) < 0:
            raise InvalidArgumentError(f"token id outside vocabulary of {self.cfg.vocab_size}")
        t = ids.shape[-1]
        if start + t > self.cfg.max_caption_len:
            raise ConfigError(f"caption position {start + t} exceeds max_caption_len={self.cfg.max_caption_len}")
        return ops.add(P["tok_emb"][ids], self._positions[start:start + t])

    def _decoder_block(self, P, i, h, keys, memory, mask):
        cfg = self.cfg
        a = multi_head_attention(h, keys, keys, self._attn(P, f"dec.{i}.self"), cfg.n_heads, mask=mask)
        h = ops.layer_norm(ops.add(h, a), P[f"dec.{i}.ln1.g"], P[f"dec.{i}.ln1.b"], cfg.ln_eps)
        c = multi_head_attention(h, memory, memory, self._attn(P, f"dec.{i}.cross"), cfg.n_heads)
        h = ops.layer_norm(ops.add(h, c), P[f"dec.{i}.ln2.g"], P[f"dec.{i}.ln2.b"], cfg.ln_eps)
        f = feed_forward(h, P[f"dec.{i}.ff1.w"], P[f"dec.{i}.ff1.b"],
                         P[f"dec.{i}.ff2.w"], P[f"dec.{i}.ff2.b"])
        return ops.layer_norm(ops.add(h, f), P[f"dec.{i}.ln3.g"], P[f"dec.{i}.ln3.b"], cfg.ln_eps)

    def decode_full(self, P: VarParams, ids: np.ndarray, memory: Var) -> Var:
        """Teacher-forced logits ``(B, T, V)`` for input ids ``(B, T)``."""
        ids = np.atleast_2d(ids)
        mem = memory if memory.ndim == 3 else ops.reshape(memory, (1,) + memory.shape)
        h = self._embed_tokens(P, ids, 0)
        mask = causal_mask(ids.shape[1])
        for i in range(self.cfg.n_dec):
            h = self._decoder_block(P, i, h, h, mem, mask)
        return linear(h, P["head.w"], P["head.b"])

    def start(self, memory: Var) -> DecoderState:
        mem = memory if memory.ndim == 3 else ops.reshape(memory, (1,) + memory.shape)
        return DecoderState(mem, [None] * self.cfg.n_dec)

    def decode_step(self, P: VarParams, state: DecoderState, token_ids) -> np.ndarray:
        """Feed one token per row at position ``state.t``; return logits ``(B, V)``.

        Each block attends over its cached inputs for positions ``0..t``.
        """
        token_ids = np.asarray(token_ids, dtype=np.int64).reshape(-1)
        if state.t == 0 and np.any(token_ids != BOS_ID):
            raise InvalidArgumentError("decoding must start from the begin-of-sequence token")
        h = self._embed_tokens(P, token_ids[:, None], state.t)
        for i in range(self.cfg.n_dec):
            prev = state.history[i]
            keys = h if prev is None else Var(np.concatenate([prev.value, h.value], axis=1))
            state.history[i] = keys
            h = self._decoder_block(P, i, h, keys, state.memory, None)
        state.t += 1
        state.tokens.append(token_ids)
        return linear(h, P["head.w"], P["head.b"]).value[:, 0, :]

    def reorder(self, state: DecoderState, rows: np.ndarray) -> DecoderState:
        """Select/duplicate batch rows of a decoder state (used by beam search)."""
        rows = np.asarray(rows, dtype=np.int64)
        mem = Var(state.memory.value[rows]) if state.memory.shape[0] != len(rows) or np.any(
            rows != np.arange(len(rows))) else state.memory
        hist = [None if h is None else Var(h.value[rows]) for h in state.history]
        return DecoderState(mem, hist, state.t, [t[rows] for t in state.tokens])

    # -- likelihood --------------------------------------------------------

    def token_logprobs(self, P: VarParams, memory: Var, ids: np.ndarray) -> Var:
        """Log-probabilities of ``ids[:, 1:]`` under teacher forcing, shape ``(B, T-1)``."""
        ids = np.atleast_2d(np.asarray(ids, dtype=np.int64))
        logits = self.decode_full(P, ids[:, :-1], memory)
        logp = ops.log_softmax(logits, axis=-1)
        b, t = ids.shape[0], ids.shape[1] - 1
        return logp[np.arange(b)[:, None], np.arange(t)[None, :], ids[:, 1:]]


def decode_step(model: Captioner, P: VarParams, prefix_ids, memory: Var) -> np.ndarray:
    """Logits for the token after ``prefix_ids`` (which must start with BOS)."""
    prefix_ids = np.asarray(prefix_ids, dtype=np.int64)
    if prefix_ids.size == 0 or prefix_ids.reshape(-1)[0] != BOS_ID:
        raise InvalidArgumentError("prefix must begin with the begin-of-sequence token")
    logits = model.decode_full(P, prefix_ids[None, :], memory)
    return logits.value[0, -1]


def pad_batch(seqs, pad: int = PAD_ID) -> np.ndarray:
    n = max(len(s) for s in seqs)
    out = np.full((len(seqs), n), pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out
