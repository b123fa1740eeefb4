"""Transformer with one encoder and two direction-locked decoders.

Both decoders share the encoder output and the left-to-right positional
numbering of the target; direction lives entirely in the self-attention
mask.  The forward decoder sees positions j <= i, the backward decoder
sees j >= i, so position t of either stack predicts the same target
token y_t from opposite halves of the sequence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .bpe import BOS, PAD
from .errors import ShapeError
from .tensor import Tensor, dropout, embedding, layer_norm, log_softmax_lastdim, softmax_lastdim

NEG_BIAS = np.float32(-1e9)  # additive mask; finite so overflow checks stay quiet


def causal_mask_forward(t: int) -> np.ndarray:
    """Boolean [t, t]; True where query i may attend key j (j <= i)."""
    if t < 1:
        raise ShapeError(f"mask length must be positive, got {t}")
    return np.tril(np.ones((t, t), dtype=bool))


def causal_mask_backward(t: int) -> np.ndarray:
    """Boolean [t, t]; True where j >= i.  Transpose of the forward mask."""
    if t < 1:
        raise ShapeError(f"mask length must be positive, got {t}")
    return np.triu(np.ones((t, t), dtype=bool))


def sinusoidal_positions(max_pos: int, d_model: int) -> np.ndarray:
    """Constant [max_pos, d_model] sin/cos table; never checkpointed."""
    pos = np.arange(max_pos, dtype=np.float64)[:, None]
    dim = np.arange(0, d_model, 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, dim / d_model)
    pe = np.zeros((max_pos, d_model), dtype=np.float64)
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d_model - d_model // 2])
    return pe.astype(np.float32)


class StepRNG:
    """Per-step dropout randomness: streams keyed by (seed, step, counter).

    The counter advances once per dropout site, in call order, so the
    same config and seed replay the identical mask sequence.
    """

    def __init__(self, seed: int, step: int):
        self.seed = seed
        self.step = step
        self.counter = 0

    def next(self) -> np.random.Generator:
        rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence((self.seed, self.step, self.counter))))
        self.counter += 1
        return rng


@dataclass
class ModelConfig:
    d_model: int = 64
    heads: int = 4
    layers: int = 2
    d_ffn: int = 256
    dropout: float = 0.1
    max_pos: int = 512
    src_vocab: int = 64
    tgt_vocab: int = 64
    share_target_embedding: bool = False
    with_fwd: bool = True
    with_bwd: bool = True

    def __post_init__(self):
        if self.d_model % self.heads != 0:
            raise ShapeError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if not (self.with_fwd or self.with_bwd):
            raise ShapeError("model needs at least one decoder")


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(np.float32)


class SBDModel:
    """Parameters live in a flat name -> Tensor dict; names are stable and
    double as the checkpoint tensor names."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}
        self.bwd_calls = 0  # decode_backward invocations; inference must leave this at 0
        self._pe = sinusoidal_positions(cfg.max_pos, cfg.d_model)
        rng = np.random.default_rng(seed)
        self._init_params(rng)

    # ---- construction -------------------------------------------------

    def _add(self, name: str, data: np.ndarray) -> None:
        self.params[name] = Tensor(data, requires_grad=True)

    def _init_attention(self, rng, prefix: str, d: int) -> None:
        # pure projection matrices; a key bias in particular would be a
        # dead parameter (softmax cancels any per-row constant)
        for part in ("wq", "wk", "wv", "wo"):
            self._add(f"{prefix}.{part}", _glorot(rng, d, d))

    def _init_ln(self, prefix: str, d: int) -> None:
        self._add(f"{prefix}.g", np.ones(d, dtype=np.float32))
        self._add(f"{prefix}.b", np.zeros(d, dtype=np.float32))

    def _init_ffn(self, rng, prefix: str, d: int, f: int) -> None:
        self._add(f"{prefix}.w1", _glorot(rng, d, f))
        self._add(f"{prefix}.b1", np.zeros(f, dtype=np.float32))
        self._add(f"{prefix}.w2", _glorot(rng, f, d))
        self._add(f"{prefix}.b2", np.zeros(d, dtype=np.float32))

    def _init_decoder(self, rng, stack: str, d: int, f: int, vocab: int) -> None:
        for i in range(self.cfg.layers):
            self._init_ln(f"{stack}.{i}.ln1", d)
            self._init_attention(rng, f"{stack}.{i}.sa", d)
            self._init_ln(f"{stack}.{i}.ln2", d)
            self._init_attention(rng, f"{stack}.{i}.ca", d)
            self._init_ln(f"{stack}.{i}.ln3", d)
            self._init_ffn(rng, f"{stack}.{i}.ffn", d, f)
        if self.cfg.layers > 0:
            self._init_ln(f"{stack}.ln_out", d)
        self._add(f"{stack}.out.w", _glorot(rng, d, vocab))
        self._add(f"{stack}.out.b", np.zeros(vocab, dtype=np.float32))

    def _init_params(self, rng: np.random.Generator) -> None:
        c = self.cfg
        d, f = c.d_model, c.d_ffn
        scale = c.d_model ** -0.5
        self._add("emb.src", (rng.standard_normal((c.src_vocab, d)) * scale).astype(np.float32))
        if c.share_target_embedding:
            self._add("emb.tgt", (rng.standard_normal((c.tgt_vocab, d)) * scale).astype(np.float32))
        else:
            if c.with_fwd:
                self._add("emb.tgt_fwd",
                          (rng.standard_normal((c.tgt_vocab, d)) * scale).astype(np.float32))
            if c.with_bwd:
                self._add("emb.tgt_bwd",
                          (rng.standard_normal((c.tgt_vocab, d)) * scale).astype(np.float32))
        for i in range(c.layers):
            self._init_ln(f"enc.{i}.ln1", d)
            self._init_attention(rng, f"enc.{i}.sa", d)
            self._init_ln(f"enc.{i}.ln2", d)
            self._init_ffn(rng, f"enc.{i}.ffn", d, f)
        if c.layers > 0:
            self._init_ln("enc.ln_out", d)
        if c.with_fwd:
            self._init_decoder(rng, "dec_fwd", d, f, c.tgt_vocab)
        if c.with_bwd:
            self._init_decoder(rng, "dec_bwd", d, f, c.tgt_vocab)
        if c.with_fwd and c.with_bwd:
            self._add("wh", np.eye(d, dtype=np.float32))

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    # ---- shared pieces ------------------------------------------------

    def _tgt_emb_name(self, stack: str) -> str:
        if self.cfg.share_target_embedding:
            return "emb.tgt"
        return "emb.tgt_fwd" if stack == "dec_fwd" else "emb.tgt_bwd"

    def _embed(self, table: Tensor, ids: np.ndarray, srng: StepRNG | None) -> Tensor:
        b, t = ids.shape
        if t > self.cfg.max_pos:
            raise ShapeError(f"sequence length {t} exceeds max_pos={self.cfg.max_pos}")
        x = embedding(table, ids) * math.sqrt(self.cfg.d_model)
        x = x + Tensor(self._pe[None, :t, :])
        return self._drop(x, srng)

    def _drop(self, x: Tensor, srng: StepRNG | None) -> Tensor:
        if srng is None or self.cfg.dropout <= 0.0:
            return x
        return dropout(x, self.cfg.dropout, srng.next())

    def _attention(self, prefix: str, q_in: Tensor, kv_in: Tensor, bias: np.ndarray) -> Tensor:
        p = self.params
        c = self.cfg
        dh = c.d_model // c.heads
        b, tq, _ = q_in.shape
        tk = kv_in.shape[1]

        def split(x: Tensor, t: int) -> Tensor:
            return x.reshape(b, t, c.heads, dh).permute(0, 2, 1, 3)

        q = split(q_in @ p[f"{prefix}.wq"], tq)
        k = split(kv_in @ p[f"{prefix}.wk"], tk)
        v = split(kv_in @ p[f"{prefix}.wv"], tk)
        scores = (q @ k.swap_last2()) * (1.0 / math.sqrt(dh))
        scores = scores + Tensor(bias)
        attn = softmax_lastdim(scores)
        ctx = (attn @ v).permute(0, 2, 1, 3).reshape(b, tq, c.d_model)
        return ctx @ p[f"{prefix}.wo"]

    def _ln(self, prefix: str, x: Tensor) -> Tensor:
        return layer_norm(x, self.params[f"{prefix}.g"], self.params[f"{prefix}.b"])

    def _ffn(self, prefix: str, x: Tensor) -> Tensor:
        p = self.params
        h = (x @ p[f"{prefix}.w1"] + p[f"{prefix}.b1"]).relu()
        return h @ p[f"{prefix}.w2"] + p[f"{prefix}.b2"]

    @staticmethod
    def _bias_from(key_real: np.ndarray, structure: np.ndarray | None, tq: int) -> np.ndarray:
        """Additive [B, 1, tq, tk] attention bias: 0 attendable, -1e9 not."""
        b, tk = key_real.shape
        allow = np.broadcast_to(key_real[:, None, None, :], (b, 1, tq, tk))
        if structure is not None:
            allow = allow & structure[None, None, :, :]
        return np.where(allow, np.float32(0.0), NEG_BIAS)

    # ---- stacks --------------------------------------------------------

    def encode(self, src_ids: np.ndarray, src_real: np.ndarray,
               srng: StepRNG | None = None) -> Tensor:
        bias = self._bias_from(src_real, None, src_ids.shape[1])
        x = self._embed(self.params["emb.src"], src_ids, srng)
        for i in range(self.cfg.layers):
            pre = f"enc.{i}"
            n1 = self._ln(f"{pre}.ln1", x)
            x = x + self._drop(self._attention(f"{pre}.sa", n1, n1, bias), srng)
            x = x + self._drop(self._ffn(f"{pre}.ffn", self._ln(f"{pre}.ln2", x)), srng)
        if self.cfg.layers == 0:
            return x
        return self._ln("enc.ln_out", x)

    def _decode(self, stack: str, dec_in: np.ndarray, tgt_real: np.ndarray,
                enc_out: Tensor, src_real: np.ndarray,
                srng: StepRNG | None) -> tuple[Tensor, Tensor]:
        t = dec_in.shape[1]
        structure = causal_mask_forward(t) if stack == "dec_fwd" else causal_mask_backward(t)
        self_bias = self._bias_from(tgt_real, structure, t)
        cross_bias = self._bias_from(src_real, None, t)
        x = self._embed(self.params[self._tgt_emb_name(stack)], dec_in, srng)
        for i in range(self.cfg.layers):
            pre = f"{stack}.{i}"
            n1 = self._ln(f"{pre}.ln1", x)
            x = x + self._drop(self._attention(f"{pre}.sa", n1, n1, self_bias), srng)
            x = x + self._drop(self._attention(f"{pre}.ca", self._ln(f"{pre}.ln2", x),
                                               enc_out, cross_bias), srng)
            x = x + self._drop(self._ffn(f"{pre}.ffn", self._ln(f"{pre}.ln3", x)), srng)
        hidden = self._ln(f"{stack}.ln_out", x) if self.cfg.layers > 0 else x
        logits = hidden @ self.params[f"{stack}.out.w"] + self.params[f"{stack}.out.b"]
        return logits, hidden

    def decode_forward(self, dec_in, tgt_real, enc_out, src_real, srng=None):
        return self._decode("dec_fwd", dec_in, tgt_real, enc_out, src_real, srng)

    def decode_backward(self, dec_in, tgt_real, enc_out, src_real, srng=None):
        self.bwd_calls += 1
        return self._decode("dec_bwd", dec_in, tgt_real, enc_out, src_real, srng)

    def project_hidden(self, hidden: Tensor) -> Tensor:
        return hidden @ self.params["wh"]

    # ---- incremental interface for search ------------------------------

    def init_decode(self, src_ids: list[int]) -> dict:
        """Prepare a single-sentence decoding state for the forward decoder."""
        src = np.asarray([src_ids], dtype=np.int64)
        real = src != PAD
        enc_out = self.encode(src, real, srng=None)
        return {"enc_out": enc_out.data, "src_real": real, "vocab": self.cfg.tgt_vocab}

    def next_logprobs(self, state: dict, prefix_rows: np.ndarray) -> np.ndarray:
        """Log-probabilities of the next token for each prefix row.

        prefix_rows: [K, t] tokens already emitted (no BOS).  Returns
        [K, V] float32.  Recomputes the whole prefix each call; fine at
        the scale this kit targets.
        """
        k, t = prefix_rows.shape
        dec_in = np.concatenate(
            [np.full((k, 1), BOS, dtype=np.int64), prefix_rows.astype(np.int64)], axis=1)
        tgt_real = np.ones_like(dec_in, dtype=bool)
        enc = Tensor(np.repeat(state["enc_out"], k, axis=0))
        src_real = np.repeat(state["src_real"], k, axis=0)
        logits, _ = self.decode_forward(dec_in, tgt_real, enc, src_real, srng=None)
        last = logits.data[:, -1, :]
        lp = log_softmax_lastdim(Tensor(last)).data
        return lp
