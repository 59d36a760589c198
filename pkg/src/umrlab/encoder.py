"""A small layer-stacked transformer retriever.

Pre-norm blocks with bidirectional multi-head attention; embeddings are read
from the retrieval token's hidden state at any layer depth. The first k
layers of the full model and the pruned-to-k model are bit-identical by
construction, which is what makes teacher/student weight surgery exact.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError, LengthError
from .prompts import TokenSequence
from .tensor import Tensor

FFN_MULT = 4


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    d_model: int
    n_heads: int
    n_layers: int
    max_seq: int
    k: int

    def __post_init__(self):
        if min(self.vocab_size, self.d_model, self.n_heads, self.n_layers, self.max_seq) < 1:
            raise ContractError(f"all config extents must be positive: {self}")
        if self.d_model % self.n_heads != 0:
            raise ContractError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if not 1 <= self.k <= self.n_layers:
            raise ContractError(f"k {self.k} outside 1..{self.n_layers}")


@dataclass(frozen=True)
class Embedding:
    """A retrieval embedding: the [RET]-position hidden state, un-normalized."""

    vector: Tensor  # shape (1, d_model)
    source_layer: int

    @property
    def width(self) -> int:
        return self.vector.shape[1]


def _layer_param_names(i: int) -> list[str]:
    base = f"layers.{i}."
    return [
        base + name
        for name in (
            "ln1.gain", "ln1.bias",
            "attn.wq", "attn.bq", "attn.wk", "attn.bk",
            "attn.wv", "attn.bv", "attn.wo", "attn.bo",
            "ln2.gain", "ln2.bias",
            "ffn.w1", "ffn.b1", "ffn.w2", "ffn.b2",
        )
    ]


def parameter_names(config: EncoderConfig) -> list[str]:
    """Canonical parameter order; checkpoints serialize in exactly this order."""
    names = ["tok_emb", "pos_emb"]
    for i in range(config.n_layers):
        names.extend(_layer_param_names(i))
    return names


class Encoder:
    """Immutable weight bundle; training produces new Encoders."""

    def __init__(self, config: EncoderConfig, params: dict[str, Tensor]):
        expected = parameter_names(config)
        if list(params.keys()) != expected:
            raise ContractError("encoder parameter names/order do not match config")
        self.config = config
        self.params = dict(params)

    @classmethod
    def init(cls, config: EncoderConfig, seed: int) -> "Encoder":
        rng = np.random.default_rng(seed)
        d, h = config.d_model, FFN_MULT * config.d_model

        def w(*shape):
            return Tensor(rng.normal(0.0, 0.02, size=shape), grad_tracked=True)

        def zeros(*shape):
            return Tensor(np.zeros(shape), grad_tracked=True)

        def ones(*shape):
            return Tensor(np.ones(shape), grad_tracked=True)

        params: dict[str, Tensor] = {
            "tok_emb": w(config.vocab_size, d),
            "pos_emb": w(config.max_seq, d),
        }
        for i in range(config.n_layers):
            base = f"layers.{i}."
            params[base + "ln1.gain"] = ones(d)
            params[base + "ln1.bias"] = zeros(d)
            for proj in ("q", "k", "v", "o"):
                params[base + f"attn.w{proj}"] = w(d, d)
                params[base + f"attn.b{proj}"] = zeros(d)
            params[base + "ln2.gain"] = ones(d)
            params[base + "ln2.bias"] = zeros(d)
            params[base + "ffn.w1"] = w(d, h)
            params[base + "ffn.b1"] = zeros(h)
            params[base + "ffn.w2"] = w(h, d)
            params[base + "ffn.b2"] = zeros(d)
        return cls(config, params)

    def with_params(self, params: dict[str, Tensor]) -> "Encoder":
        return Encoder(self.config, params)

    def param_bytes(self) -> bytes:
        """Concatenated raw weight bytes, for bitwise comparisons."""
        return b"".join(self.params[n].data.tobytes() for n in parameter_names(self.config))


def forward(encoder: Encoder, tokens: TokenSequence, upto: int) -> Tensor:
    """Hidden states after ``upto`` pre-norm blocks, shape (len, d_model).

    No final layer norm is applied: intermediate-depth extraction reads the
    residual stream directly.
    """
    cfg = encoder.config
    if not 1 <= upto <= cfg.n_layers:
        raise ContractError(f"upto {upto} outside 1..{cfg.n_layers}")
    ids = list(tokens.ids)
    if len(ids) > cfg.max_seq:
        raise LengthError(f"sequence of {len(ids)} tokens exceeds max_seq {cfg.max_seq}")
    if max(ids) >= cfg.vocab_size or min(ids) < 0:
        raise ContractError(f"token id outside vocab of size {cfg.vocab_size}")
    p = encoder.params
    h = T.add(T.take_rows(p["tok_emb"], ids), T.take_rows(p["pos_emb"], range(len(ids))))
    for i in range(upto):
        base = f"layers.{i}."
        a = T.layer_norm_rows(h, p[base + "ln1.gain"], p[base + "ln1.bias"])
        q = T.affine(a, p[base + "attn.wq"], p[base + "attn.bq"])
        k = T.affine(a, p[base + "attn.wk"], p[base + "attn.bk"])
        v = T.affine(a, p[base + "attn.wv"], p[base + "attn.bv"])
        mixed = T.attention(q, k, v, cfg.n_heads)
        h = T.add(h, T.affine(mixed, p[base + "attn.wo"], p[base + "attn.bo"]))
        f = T.layer_norm_rows(h, p[base + "ln2.gain"], p[base + "ln2.bias"])
        f = T.gelu(T.affine(f, p[base + "ffn.w1"], p[base + "ffn.b1"]))
        h = T.add(h, T.affine(f, p[base + "ffn.w2"], p[base + "ffn.b2"]))
    return h


def forward_raw(encoder: Encoder, tokens: TokenSequence, upto: int) -> np.ndarray:
    """Tape-free twin of :func:`forward` for inference paths.

    Mirrors the graph forward operation for operation so results are
    bitwise identical (asserted in tests); exists because indexing large
    candidate pools does not need gradients.
    """
    cfg = encoder.config
    if not 1 <= upto <= cfg.n_layers:
        raise ContractError(f"upto {upto} outside 1..{cfg.n_layers}")
    ids = np.asarray(tokens.ids, dtype=np.int64)
    if ids.size > cfg.max_seq:
        raise LengthError(f"sequence of {ids.size} tokens exceeds max_seq {cfg.max_seq}")
    if ids.max() >= cfg.vocab_size or ids.min() < 0:
        raise ContractError(f"token id outside vocab of size {cfg.vocab_size}")
    p = {name: t.data for name, t in encoder.params.items()}
    s, d = ids.size, cfg.d_model
    n_heads = cfg.n_heads
    dh = d // n_heads
    inv_scale = 1.0 / np.sqrt(dh)
    eps = 1e-5

    def ln(x, gain, bias):
        mu = x.mean(axis=1, keepdims=True)
        var = x.var(axis=1, keepdims=True)
        return (x - mu) * (1.0 / np.sqrt(var + eps)) * gain + bias

    def attn(q, k, v):
        q3 = q.reshape(s, n_heads, dh).transpose(1, 0, 2)
        k3 = k.reshape(s, n_heads, dh).transpose(1, 0, 2)
        v3 = v.reshape(s, n_heads, dh).transpose(1, 0, 2)
        z = (q3 @ k3.transpose(0, 2, 1)) * inv_scale
        z -= z.max(axis=2, keepdims=True)
        e = np.exp(z)
        a = e / e.sum(axis=2, keepdims=True)
        return (a @ v3).transpose(1, 0, 2).reshape(s, d)

    def gelu(x):
        u = 0.7978845608028654 * (x + 0.044715 * x**3)
        return 0.5 * x * (1.0 + np.tanh(u))

    h = p["tok_emb"][ids] + p["pos_emb"][np.arange(s)]
    for i in range(upto):
        base = f"layers.{i}."
        a = ln(h, p[base + "ln1.gain"], p[base + "ln1.bias"])
        mixed = attn(
            a @ p[base + "attn.wq"] + p[base + "attn.bq"],
            a @ p[base + "attn.wk"] + p[base + "attn.bk"],
            a @ p[base + "attn.wv"] + p[base + "attn.bv"],
        )
        h = h + (mixed @ p[base + "attn.wo"] + p[base + "attn.bo"])
        f = ln(h, p[base + "ln2.gain"], p[base + "ln2.bias"])
        f = gelu(f @ p[base + "ffn.w1"] + p[base + "ffn.b1"])
        h = h + (f @ p[base + "ffn.w2"] + p[base + "ffn.b2"])
    return h


def embed_raw(encoder: Encoder, tokens: TokenSequence, upto: int | None = None) -> np.ndarray:
    """Tape-free [RET] embedding, shape (d_model,)."""
    depth = encoder.config.k if upto is None else upto
    return forward_raw(encoder, tokens, depth)[tokens.ret_position]


def extract_ret_embedding(hidden: Tensor, tokens: TokenSequence, source_layer: int) -> Embedding:
    if hidden.shape[0] != len(tokens):
        raise DimensionError(
            f"hidden rows {hidden.shape[0]} != token count {len(tokens)}"
        )
    row = T.slice_rows(hidden, tokens.ret_position, tokens.ret_position + 1)
    return Embedding(vector=row, source_layer=source_layer)


def embed(encoder: Encoder, tokens: TokenSequence, upto: int | None = None) -> Embedding:
    """Forward + extract in one call; ``upto`` defaults to config.k."""
    depth = encoder.config.k if upto is None else upto
    return extract_ret_embedding(forward(encoder, tokens, depth), tokens, depth)


def prune(encoder: Encoder, k: int) -> Encoder:
    """Keep only the first k layers; weights are copied, never shared."""
    cfg = encoder.config
    if not 1 <= k <= cfg.n_layers:
        raise ContractError(f"prune depth {k} outside 1..{cfg.n_layers}")
    new_cfg = replace(cfg, n_layers=k, k=min(cfg.k, k))
    params: dict[str, Tensor] = {}
    for name in parameter_names(new_cfg):
        src = encoder.params[name]
        params[name] = Tensor(src.data.copy(), grad_tracked=src.grad_tracked)
    return Encoder(new_cfg, params)


def estimate_flops(config: EncoderConfig, k: int, seq_len: int) -> int:
    """Analytic forward-pass FLOP count through k layers.

    Per layer: 2*s*d*(3d + d) for the q/k/v/output projections,
    2*2*s^2*d for attention scores and value mixing, and 2*s*2*d*4d for the
    feed-forward block. The embedding lookup-add contributes 2*s*d once.
    Multiply-accumulates count as 2 operations.
    """
    if not 0 <= k <= config.n_layers:
        raise ContractError(f"k {k} outside 0..{config.n_layers}")
    if seq_len > config.max_seq:
        raise ContractError(f"seq_len {seq_len} exceeds max_seq {config.max_seq}")
    s, d = seq_len, config.d_model
    per_layer = 2 * s * d * (3 * d + d) + 2 * 2 * s * s * d + 2 * s * 2 * d * (FFN_MULT * d)
    return k * per_layer + 2 * s * d


def layer_stack_ratio(config: EncoderConfig, k: int, seq_len: int) -> float:
    """Ratio of the k-layer stack cost to the full-depth stack cost."""
    emb = estimate_flops(config, 0, seq_len)
    full = estimate_flops(config, config.n_layers, seq_len) - emb
    return (estimate_flops(config, k, seq_len) - emb) / full
