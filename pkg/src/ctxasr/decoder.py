"""Decoder-only LM: frozen base layers, LoRA adapters, optional cross-attention."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .encoder import EncoderConfig
from .nn import (AttentionConfig, LoraConfig, MaskScheme, build_mask, init_attention, init_linear,
                 init_lora, init_norm, mha_forward, project)
from .params import ParamStore, load_tensors, save_tensors
from .tokenizer import BOS, EOS, PAD, VOCAB_SIZE, tokenizer_hash

VARIANTS = ("decoder_only", "encoder_decoder")


@dataclass(frozen=True)
class DecoderConfig:
    vocab_size: int = VOCAB_SIZE
    model_dim: int = 64
    num_layers: int = 4
    num_heads: int = 4
    ff_dim: int = 256
    # desk default: a 0.05 adapter multiplier barely moves in a few thousand steps
    lora: LoraConfig = field(default_factory=lambda: LoraConfig(scaling=2.0))
    variant: str = "decoder_only"
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if isinstance(self.lora, dict):
            object.__setattr__(self, "lora", LoraConfig(**self.lora))
        AttentionConfig(self.model_dim, self.num_heads)

    @property
    def attention(self) -> AttentionConfig:
        return AttentionConfig(self.model_dim, self.num_heads, self.rope_base)


def init_decoder_base(p: ParamStore, cfg: DecoderConfig, rng):
    d = cfg.model_dim
    p.add("decoder.embed", rng.normal(0.0, 1.0, (cfg.vocab_size, d)))
    for i in range(cfg.num_layers):
        pre = f"decoder.layer{i}"
        init_norm(p, f"{pre}.attn_norm", d, bias=False)
        init_attention(p, f"{pre}.attn", d, rng, bias=False)
        init_norm(p, f"{pre}.ff_norm", d, bias=False)
        init_linear(p, f"{pre}.ff.gate", cfg.ff_dim, d, rng, bias=False)
        init_linear(p, f"{pre}.ff.up", cfg.ff_dim, d, rng, bias=False)
        init_linear(p, f"{pre}.ff.down", d, cfg.ff_dim, rng, bias=False)
    init_norm(p, "decoder.norm", d, bias=False)
    init_linear(p, "decoder.head", cfg.vocab_size, d, rng, bias=False)


def init_adapters(p: ParamStore, cfg: DecoderConfig, rng):
    """LoRA on the self-attention projections; cross-attention for the encoder-decoder variant."""
    d = cfg.model_dim
    for i in range(cfg.num_layers):
        for n in cfg.lora.target_projections:
            init_lora(p, f"decoder.layer{i}.attn.{n}", d, d, cfg.lora, rng)
        if cfg.variant == "encoder_decoder":
            init_norm(p, f"decoder.layer{i}.xattn_norm", d, bias=False)
            # zero output projection: the new sub-layer starts as an identity residual
            init_attention(p, f"decoder.layer{i}.xattn", d, rng, bias=False, zero_out=True)


def _masks(schemes, B: int, N: int):
    if isinstance(schemes, np.ndarray):
        return schemes
    if isinstance(schemes, MaskScheme):
        schemes = [schemes] * B
    if len(schemes) != B:
        raise ValueError(f"got {len(schemes)} mask schemes for batch of {B}")
    return np.stack([build_mask(s, N) for s in schemes])


def decoder_forward(p: ParamStore, cfg: DecoderConfig, emb: Tensor, scheme, encoder_out: Tensor | None = None,
                    encoder_lengths=None, training=False, rng=None, use_lora=True,
                    positions=None, cache: list | None = None) -> Tensor:
    """Logits [B, N, vocab] for input embeddings [B, N, d] (or [N, d]).

    ``scheme`` is a MaskScheme, a list of them (one per row) or a ready
    boolean mask [B, N, N]. ``cache`` (one dict per layer) enables
    incremental decoding; see greedy_generate.
    """
    if cfg.variant == "encoder_decoder":
        if encoder_out is None:
            raise ValueError("encoder_decoder variant needs encoder_out")
        if encoder_out.shape[-2] == 0:
            raise ValueError("encoder_out is empty")
    elif encoder_out is not None:
        raise ValueError("decoder_only variant takes audio in the input sequence, not encoder_out")
    squeeze = emb.ndim == 2
    if squeeze:
        emb = ag.reshape(emb, (1,) + emb.shape)
        if encoder_out is not None and encoder_out.ndim == 2:
            encoder_out = ag.reshape(encoder_out, (1,) + encoder_out.shape)
    B, N, d = emb.shape
    mask = _masks(scheme, B, N)
    key_mask = None
    if encoder_out is not None and encoder_lengths is not None:
        key_mask = np.arange(encoder_out.shape[1])[None, :] < np.asarray(encoder_lengths)[:, None]
    lora = cfg.lora if use_lora else None
    att = cfg.attention
    x = emb
    for i in range(cfg.num_layers):
        pre = f"decoder.layer{i}"
        h = ag.rmsnorm(x, p[f"{pre}.attn_norm.w"])
        x = ag.add(x, mha_forward(h, att, p, f"{pre}.attn", mask=mask, lora=lora, positions=positions,
                                  training=training, rng=rng, cache=None if cache is None else cache[i]))
        if encoder_out is not None:
            h = ag.rmsnorm(x, p[f"{pre}.xattn_norm.w"])
            x = ag.add(x, mha_forward(h, att, p, f"{pre}.xattn", kv_source=encoder_out, key_mask=key_mask,
                                      training=training, rng=rng))
        h = ag.rmsnorm(x, p[f"{pre}.ff_norm.w"])
        gate = ag.silu(project(p, f"{pre}.ff.gate", h))
        x = ag.add(x, project(p, f"{pre}.ff.down", ag.mul(gate, project(p, f"{pre}.ff.up", h))))
    x = ag.rmsnorm(x, p["decoder.norm.w"])
    logits = ag.linear(x, p["decoder.head.w"])
    return ag.reshape(logits, (N, cfg.vocab_size)) if squeeze else logits


def embed_tokens(p: ParamStore, ids) -> Tensor:
    return ag.embedding_lookup(p["decoder.embed"], ids)


def greedy_generate(p: ParamStore, cfg: DecoderConfig, prompts, max_new_tokens: int, schemes,
                    encoder_out: Tensor | None = None, encoder_lengths=None, use_cache=True) -> list[list[int]]:
    """Greedy decoding for a batch of prompt embeddings (each [n_i, d] array).

    Appends argmax tokens until ``<eos>`` or ``max_new_tokens``. The returned
    ids exclude the ``<eos>``. With ``use_cache`` the prompt is run once and
    each new token attends to cached keys and values; rows keep their own
    rotary positions, so right padding inside the cache is simply masked.
    """
    if max_new_tokens < 1:
        raise ValueError("max_new_tokens must be >= 1")
    if isinstance(prompts, np.ndarray) and prompts.ndim == 2:
        prompts = [prompts]
    if isinstance(schemes, MaskScheme):
        schemes = [schemes] * len(prompts)
    B = len(prompts)
    lens = np.array([len(q) for q in prompts])
    n0 = int(lens.max())
    buf = np.zeros((B, n0 + max_new_tokens, cfg.model_dim), dtype=ag.get_default_dtype())
    for b, q in enumerate(prompts):
        buf[b, :len(q)] = q
    table = p["decoder.embed"].data
    out = [[] for _ in range(B)]
    done = np.zeros(B, dtype=bool)
    cache = [dict() for _ in range(cfg.num_layers)] if use_cache else None
    # key validity per cache column: the prompt part, then one column per step
    valid = np.zeros((B, n0 + max_new_tokens), dtype=bool)
    valid[:, :n0] = np.arange(n0)[None, :] < lens[:, None]
    with ag.no_grad():
        for step in range(max_new_tokens):
            if not use_cache:
                n = int(lens.max())
                logits = decoder_forward(p, cfg, Tensor(buf[:, :n]), _masks(schemes, B, n),
                                         encoder_out, encoder_lengths).data
                last = logits[np.arange(B), lens - 1]
            elif step == 0:
                logits = decoder_forward(p, cfg, Tensor(buf[:, :n0]), _masks(schemes, B, n0),
                                         encoder_out, encoder_lengths, cache=cache).data
                last = logits[np.arange(B), lens - 1]
            else:
                col = n0 + step - 1
                valid[:, col] = True
                mask = valid[:, None, :col + 1]
                # feed each row's latest token at its own position
                x = Tensor(buf[np.arange(B), lens - 1][:, None])
                last = decoder_forward(p, cfg, x, mask, encoder_out, encoder_lengths,
                                       positions=(lens - 1)[:, None], cache=cache).data[:, 0]
            nxt = last.argmax(-1)
            for b in range(B):
                tok = int(nxt[b])
                if done[b] or tok == EOS:
                    done[b] = True
                    continue
                out[b].append(tok)
                buf[b, lens[b]] = table[tok]
                lens[b] += 1
            if done.all():
                break
    return out


# ---------------------------------------------------------------- bundle

@dataclass
class ModelBundle:
    params: ParamStore
    enc_cfg: EncoderConfig
    dec_cfg: DecoderConfig
    tok_hash: str = field(default_factory=tokenizer_hash)
    meta: dict = field(default_factory=dict)

    @property
    def variant(self) -> str:
        return self.dec_cfg.variant

    def manifest(self) -> dict:
        return {
            "encoder": asdict(self.enc_cfg),
            "decoder": asdict(self.dec_cfg),
            "tokenizer_hash": self.tok_hash,
            "trainable": sorted(self.params.trainable_names),
            "frozen": sorted(self.params.frozen_names),
            "meta": self.meta,
        }

    def save(self, out_dir, name: str = "bundle"):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_tensors(out / f"{name}.ckpt", self.params.state())
        (out / f"{name}.json").write_text(json.dumps(self.manifest(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, in_dir, name: str = "bundle", dtype=None) -> "ModelBundle":
        d = Path(in_dir)
        man = json.loads((d / f"{name}.json").read_text())
        if man["tokenizer_hash"] != tokenizer_hash():
            raise ValueError(f"tokenizer hash mismatch: checkpoint {man['tokenizer_hash']} "
                             f"vs runtime {tokenizer_hash()}")
        arrays = load_tensors(d / f"{name}.ckpt")
        p = ParamStore()
        frozen = set(man["frozen"])
        with ag.default_dtype(dtype or next(iter(arrays.values())).dtype):
            for k in sorted(arrays):
                p.add(k, arrays[k], trainable=k not in frozen)
        dec = dict(man["decoder"])
        dec["lora"] = LoraConfig(**dec["lora"])
        return cls(p, EncoderConfig(**man["encoder"]), DecoderConfig(**dec), man["tokenizer_hash"],
                   man.get("meta", {}))


__all__ = ["DecoderConfig", "ModelBundle", "decoder_forward", "greedy_generate", "init_decoder_base",
           "init_adapters", "embed_tokens", "VARIANTS", "BOS", "EOS", "PAD"]
