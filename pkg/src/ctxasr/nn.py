"""Layers shared by the audio encoder and the decoder.

Layers are plain functions over a ParamStore: each takes the store and a
dotted prefix and looks up the weights it needs. Activations are either
[T, d] or batched [B, T, d].
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .params import ParamStore


@dataclass(frozen=True)
class LoraConfig:
    rank: int = 32
    dropout_rate: float = 0.05
    scaling: float = 0.05
    target_projections: tuple = ("q", "k", "v", "o")

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("lora rank must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("lora dropout_rate must be in [0, 1)")
        if self.scaling <= 0:
            raise ValueError("lora scaling must be positive")
        if not self.target_projections or not set(self.target_projections) <= {"q", "k", "v", "o"}:
            raise ValueError(f"bad target_projections {self.target_projections!r}")
        object.__setattr__(self, "target_projections", tuple(self.target_projections))


def lora_param_count(num_layers: int, model_dim: int, rank: int, n_projections: int = 4) -> int:
    """Adapter parameters for square d x d projections: A is [r, d] and B is [d, r]."""
    return n_projections * num_layers * 2 * model_dim * rank


@dataclass(frozen=True)
class MaskScheme:
    kind: str = "causal"
    prefix_len: int = 0

    def __post_init__(self):
        if self.kind not in ("causal", "prefix_full"):
            raise ValueError(f"mask kind must be 'causal' or 'prefix_full', got {self.kind!r}")
        if self.prefix_len < 0:
            raise ValueError("prefix_len must be >= 0")


@dataclass(frozen=True)
class AttentionConfig:
    model_dim: int
    num_heads: int
    rope_base: float = 10000.0
    head_dim: int = field(init=False)

    def __post_init__(self):
        if self.model_dim % self.num_heads:
            raise ValueError(f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}")
        object.__setattr__(self, "head_dim", self.model_dim // self.num_heads)


# ---------------------------------------------------------------- rotary embeddings

def rope_tables(positions, head_dim: int, base: float = 10000.0):
    if head_dim % 2:
        raise ValueError(f"rotary embeddings need an even head_dim, got {head_dim}")
    inv = base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    ang = np.asarray(positions, dtype=np.float64)[..., None] * inv
    return np.cos(ang), np.sin(ang)


def rope_apply(x: Tensor, positions, base: float = 10000.0) -> Tensor:
    """Rotate x of shape [T, heads, head_dim] by its integer positions [T]."""
    if x.shape[-1] % 2:
        raise ValueError(f"rotary embeddings need an even head_dim, got {x.shape[-1]}")
    cos, sin = rope_tables(positions, x.shape[-1], base)
    return ag.rope(x, cos[:, None, :], sin[:, None, :])


# ---------------------------------------------------------------- masks

def build_mask(scheme: MaskScheme, seq_len: int) -> np.ndarray:
    """Boolean [seq_len, seq_len] attention mask, True where attending is allowed."""
    if seq_len < 1:
        raise ValueError("seq_len must be >= 1")
    m = np.tril(np.ones((seq_len, seq_len), dtype=bool))
    if scheme.kind == "prefix_full":
        if scheme.prefix_len > seq_len:
            raise ValueError(f"prefix_len {scheme.prefix_len} exceeds seq_len {seq_len}")
        p = scheme.prefix_len
        m[:p, :p] = True
    return m


# ---------------------------------------------------------------- parameter init

def init_linear(p: ParamStore, name: str, d_out: int, d_in: int, rng, bias=True, trainable=True, std=None):
    std = 1.0 / math.sqrt(d_in) if std is None else std
    p.add(f"{name}.w", rng.normal(0.0, std, (d_out, d_in)), trainable)
    if bias:
        p.add(f"{name}.b", np.zeros(d_out), trainable)


def init_norm(p: ParamStore, name: str, d: int, trainable=True, bias=True):
    p.add(f"{name}.w", np.ones(d), trainable)
    if bias:
        p.add(f"{name}.b", np.zeros(d), trainable)


def init_lora(p: ParamStore, name: str, d_out: int, d_in: int, cfg: LoraConfig, rng):
    p.add(f"{name}.lora_a", rng.normal(0.0, 0.02, (cfg.rank, d_in)), True)
    p.add(f"{name}.lora_b", np.zeros((d_out, cfg.rank)), True)


def init_attention(p: ParamStore, prefix: str, d: int, rng, bias=True, trainable=True,
                   lora: LoraConfig | None = None, zero_out=False):
    for n in ("q", "k", "v", "o"):
        std = 0.0 if (zero_out and n == "o") else None
        init_linear(p, f"{prefix}.{n}", d, d, rng, bias=bias, trainable=trainable, std=std)
        if lora is not None and n in lora.target_projections:
            init_lora(p, f"{prefix}.{n}", d, d, lora, rng)


# ---------------------------------------------------------------- linear layers

def lora_linear(x: Tensor, w_base: Tensor, a: Tensor, b: Tensor, cfg: LoraConfig,
                training=False, rng=None, bias: Tensor | None = None) -> Tensor:
    """Frozen projection plus a scaled low-rank update on dropout(x)."""
    if a.shape[0] != b.shape[1]:
        raise ag.ShapeError("lora_linear", a.shape, b.shape, detail="rank mismatch between A and B")
    if a.shape[1] != w_base.shape[1] or b.shape[0] != w_base.shape[0]:
        raise ag.ShapeError("lora_linear", w_base.shape, a.shape, b.shape)
    y = ag.linear(x, w_base, bias)
    h = ag.dropout(x, cfg.dropout_rate, rng, training)
    delta = ag.linear(ag.linear(h, a), b)
    return ag.add(y, ag.scale(delta, cfg.scaling))


def project(p: ParamStore, name: str, x: Tensor, lora: LoraConfig | None = None,
            training=False, rng=None) -> Tensor:
    w = p[f"{name}.w"]
    b = p[f"{name}.b"] if f"{name}.b" in p else None
    if lora is not None and f"{name}.lora_a" in p:
        return lora_linear(x, w, p[f"{name}.lora_a"], p[f"{name}.lora_b"], lora, training, rng, bias=b)
    return ag.linear(x, w, b)


# ---------------------------------------------------------------- attention

def _split_heads(x: Tensor, h: int) -> Tensor:
    B, T, d = x.shape
    return ag.transpose(ag.reshape(x, (B, T, h, d // h)), (0, 2, 1, 3))


def mha_forward(x: Tensor, cfg: AttentionConfig, p: ParamStore, prefix: str, mask=None,
                lora: LoraConfig | None = None, kv_source: Tensor | None = None, key_mask=None,
                positions=None, training=False, rng=None, cache: dict | None = None) -> Tensor:
    """Scaled dot-product attention with rotary positions on self-attention.

    ``mask`` is boolean [T, T] or [B, T, T] (True = may attend). Cross-attention
    (``kv_source`` given) takes no square mask; ``key_mask`` [B, S] marks the
    valid source positions.

    With a ``cache`` dict (self-attention, inference only) the rotated keys and
    values of earlier calls are kept and prepended, so ``mask`` is then
    [B, T, S_cached + T].
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = ag.reshape(x, (1,) + x.shape)
        if kv_source is not None and kv_source.ndim == 2:
            kv_source = ag.reshape(kv_source, (1,) + kv_source.shape)
    B, T, d = x.shape
    if d != cfg.model_dim:
        raise ag.ShapeError("mha_forward", x.shape, detail=f"model_dim is {cfg.model_dim}")
    if kv_source is not None:
        if mask is not None:
            raise ValueError("cross-attention is unmasked over kv_source; pass key_mask for padding only")
        if kv_source.shape[0] != B or kv_source.shape[-1] != d or kv_source.shape[1] == 0:
            raise ag.ShapeError("mha_forward", x.shape, kv_source.shape, detail="bad kv_source")
    src = x if kv_source is None else kv_source
    S = src.shape[1]
    if cache is not None and kv_source is None and "k" in cache:
        S += cache["k"].shape[2]

    full = None
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        if m.shape == (T, S):
            full = m[None, None]
        elif m.shape == (B, T, S):
            full = m[:, None]
        else:
            raise ag.ShapeError("mha_forward", m.shape, (B, T, S), detail="mask shape")
    if key_mask is not None:
        km = np.asarray(key_mask, dtype=bool)
        if km.shape != (B, S):
            raise ag.ShapeError("mha_forward", km.shape, (B, S), detail="key_mask shape")
        km = km[:, None, None, :]
        full = km if full is None else (full & km)

    h = cfg.num_heads
    q = _split_heads(project(p, f"{prefix}.q", x, lora, training, rng), h)
    k = _split_heads(project(p, f"{prefix}.k", src, lora, training, rng), h)
    v = _split_heads(project(p, f"{prefix}.v", src, lora, training, rng), h)
    if kv_source is None:
        pos = np.broadcast_to(np.arange(T) if positions is None else np.asarray(positions), (B, T))
        cos, sin = rope_tables(pos, cfg.head_dim, cfg.rope_base)
        q = ag.rope(q, cos[:, None], sin[:, None])
        k = ag.rope(k, cos[:, None], sin[:, None])
        if cache is not None:
            if "k" in cache:
                k = ag.concat([cache["k"], k], axis=2)
                v = ag.concat([cache["v"], v], axis=2)
            cache["k"], cache["v"] = k, v
    scores = ag.scale(ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(cfg.head_dim))
    att = ag.softmax_lastdim(scores, full)
    ctx = ag.matmul(att, v)
    ctx = ag.reshape(ag.transpose(ctx, (0, 2, 1, 3)), (B, T, d))
    out = project(p, f"{prefix}.o", ctx, lora, training, rng)
    return ag.reshape(out, (T, d)) if squeeze else out


# ---------------------------------------------------------------- conformer

def _valid_mask(lengths, T: int, d: int, dtype):
    if lengths is None:
        return None
    valid = np.arange(T)[None, :] < np.asarray(lengths)[:, None]
    return np.broadcast_to(valid[:, :, None], (len(lengths), T, d)).astype(dtype)


def init_feed_forward(p, prefix, d, d_ff, rng):
    init_norm(p, f"{prefix}.ln", d)
    init_linear(p, f"{prefix}.w1", d_ff, d, rng)
    init_linear(p, f"{prefix}.w2", d, d_ff, rng)


def feed_forward(x, p, prefix, dropout=0.0, training=False, rng=None):
    h = ag.layernorm(x, p[f"{prefix}.ln.w"], p[f"{prefix}.ln.b"])
    h = ag.silu(project(p, f"{prefix}.w1", h))
    h = ag.dropout(h, dropout, rng, training)
    return project(p, f"{prefix}.w2", h)


def init_conformer_block(p: ParamStore, prefix: str, d: int, conv_kernel: int, rng, ff_mult: int = 2):
    if conv_kernel % 2 == 0:
        raise ValueError(f"conformer conv kernel must be odd, got {conv_kernel}")
    init_feed_forward(p, f"{prefix}.ff1", d, ff_mult * d, rng)
    init_norm(p, f"{prefix}.attn_ln", d)
    init_attention(p, f"{prefix}.attn", d, rng)
    init_norm(p, f"{prefix}.conv.ln", d)
    init_linear(p, f"{prefix}.conv.pw1", 2 * d, d, rng)
    p.add(f"{prefix}.conv.dw.w", rng.normal(0.0, 1.0 / math.sqrt(conv_kernel), (d, conv_kernel)))
    p.add(f"{prefix}.conv.dw.b", np.zeros(d))
    init_norm(p, f"{prefix}.conv.ln2", d)
    init_linear(p, f"{prefix}.conv.pw2", d, d, rng)
    init_feed_forward(p, f"{prefix}.ff2", d, ff_mult * d, rng)
    init_norm(p, f"{prefix}.out_ln", d)


def conformer_block(x: Tensor, p: ParamStore, prefix: str, cfg: AttentionConfig, conv_kernel: int,
                    lengths=None, dropout=0.0, training=False, rng=None) -> Tensor:
    """Macaron conformer block: FF/2, self-attention, conv module, FF/2, norm.

    ``lengths`` (per batch row) marks padding; padded frames are zeroed ahead
    of the depthwise convolution and excluded as attention keys.
    """
    if conv_kernel % 2 == 0:
        raise ValueError(f"conformer conv kernel must be odd, got {conv_kernel}")
    squeeze = x.ndim == 2
    if squeeze:
        x = ag.reshape(x, (1,) + x.shape)
    B, T, d = x.shape
    valid = _valid_mask(lengths, T, d, x.dtype)
    key_mask = None if lengths is None else np.arange(T)[None, :] < np.asarray(lengths)[:, None]

    x = ag.add(x, ag.scale(feed_forward(x, p, f"{prefix}.ff1", dropout, training, rng), 0.5))

    h = ag.layernorm(x, p[f"{prefix}.attn_ln.w"], p[f"{prefix}.attn_ln.b"])
    h = mha_forward(h, cfg, p, f"{prefix}.attn", key_mask=key_mask, training=training, rng=rng)
    x = ag.add(x, ag.dropout(h, dropout, rng, training))

    h = ag.layernorm(x, p[f"{prefix}.conv.ln.w"], p[f"{prefix}.conv.ln.b"])
    h = ag.glu(project(p, f"{prefix}.conv.pw1", h))
    if valid is not None:
        h = ag.mul(h, valid)
    h = ag.depthwise_conv1d(h, p[f"{prefix}.conv.dw.w"], p[f"{prefix}.conv.dw.b"])
    h = ag.silu(ag.layernorm(h, p[f"{prefix}.conv.ln2.w"], p[f"{prefix}.conv.ln2.b"]))
    h = project(p, f"{prefix}.conv.pw2", h)
    x = ag.add(x, ag.dropout(h, dropout, rng, training))

    x = ag.add(x, ag.scale(feed_forward(x, p, f"{prefix}.ff2", dropout, training, rng), 0.5))
    x = ag.layernorm(x, p[f"{prefix}.out_ln.w"], p[f"{prefix}.out_ln.b"])
    return ag.reshape(x, (T, d)) if squeeze else x


# ---------------------------------------------------------------- downsampling

def init_downsample(p: ParamStore, prefix: str, d_in: int, d_out: int, rng, kernel: int = 3):
    p.add(f"{prefix}.w", rng.normal(0.0, 1.0 / math.sqrt(d_in * kernel), (d_out, d_in, kernel)))
    p.add(f"{prefix}.b", np.zeros(d_out))


def downsample_block(x: Tensor, p: ParamStore, prefix: str, lengths=None):
    """Stride-2 convolution + SiLU: [.., T, d_in] -> [.., ceil(T/2), d_out].

    Returns ``(y, new_lengths)``; when ``lengths`` is given, frames past each
    row's new length are zeroed so the next convolution sees clean padding.
    """
    y = ag.silu(ag.conv1d(x, p[f"{prefix}.w"], p[f"{prefix}.b"], stride=2))
    if lengths is None:
        return y, None
    new = (np.asarray(lengths) + 1) // 2
    return ag.mul(y, _valid_mask(new, y.shape[-2], y.shape[-1], y.dtype)), new


def downsampled_length(T: int, blocks: int) -> int:
    for _ in range(blocks):
        T = (T + 1) // 2
    return T
