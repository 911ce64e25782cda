"""Audio encoder (downsampling + conformer stack) and its CTC criterion."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .kernels import ctc_forward_backward, ctc_min_frames
from .nn import (AttentionConfig, conformer_block, downsample_block, downsampled_length,
                 init_conformer_block, init_downsample, init_linear)
from .params import ParamStore
from .tokenizer import VOCAB_SIZE

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EncoderConfig:
    feat_dim: int = 16
    hidden_dim: int = 64
    num_conformer_blocks: int = 2
    num_heads: int = 4
    conv_kernel: int = 9
    ff_mult: int = 2
    pre_blocks: int = 4
    post_blocks: int = 1
    decoder_dim: int = 64
    dropout: float = 0.1

    def __post_init__(self):
        if self.conv_kernel % 2 == 0:
            raise ValueError("conv_kernel must be odd")
        if self.pre_blocks < 0 or self.post_blocks < 0:
            raise ValueError("block counts must be >= 0")

    @property
    def reduction(self) -> int:
        return 2 ** (self.pre_blocks + self.post_blocks)

    @property
    def attention(self) -> AttentionConfig:
        return AttentionConfig(self.hidden_dim, self.num_heads)


class CTCInfeasibleError(ValueError):
    """The target needs more frames than the encoder produced."""


def encoded_length(T: int, cfg: EncoderConfig) -> int:
    return downsampled_length(T, cfg.pre_blocks + cfg.post_blocks)


def init_encoder(p: ParamStore, cfg: EncoderConfig, rng, ctc_head: bool = True):
    d = cfg.hidden_dim
    for i in range(cfg.pre_blocks):
        init_downsample(p, f"encoder.pre{i}", cfg.feat_dim if i == 0 else d, d, rng)
    for i in range(cfg.num_conformer_blocks):
        init_conformer_block(p, f"encoder.conformer{i}", d, cfg.conv_kernel, rng, cfg.ff_mult)
    for i in range(cfg.post_blocks):
        init_downsample(p, f"encoder.post{i}", d, d, rng)
    init_linear(p, "encoder.proj", cfg.decoder_dim, d, rng)
    if ctc_head:
        init_linear(p, "ctc_head", VOCAB_SIZE + 1, d, rng)


def _batch(feats):
    if isinstance(feats, np.ndarray) and feats.ndim == 2:
        feats = [feats]
    lengths = np.array([f.shape[0] for f in feats], dtype=np.int64)
    if lengths.min() < 1:
        raise ValueError("encode: every utterance needs at least one frame")
    x = np.zeros((len(feats), int(lengths.max()), feats[0].shape[1]), dtype=ag.get_default_dtype())
    for i, f in enumerate(feats):
        x[i, :len(f)] = f
    return x, lengths


def encode_hidden(p: ParamStore, cfg: EncoderConfig, feats, training=False, rng=None):
    """Run the pre-downsampling blocks and the conformer stack.

    ``feats`` is a list of [T_i, feat_dim] arrays. Returns the padded hidden
    states [B, T', hidden_dim] and the per-row valid lengths.
    """
    x, lengths = _batch(feats)
    if x.shape[-1] != cfg.feat_dim:
        raise ag.ShapeError("encode", x.shape, detail=f"expected feat_dim {cfg.feat_dim}")
    h = ag.Tensor(x)
    for i in range(cfg.pre_blocks):
        h, lengths = downsample_block(h, p, f"encoder.pre{i}", lengths)
    for i in range(cfg.num_conformer_blocks):
        h = conformer_block(h, p, f"encoder.conformer{i}", cfg.attention, cfg.conv_kernel, lengths,
                            cfg.dropout, training, rng)
    return h, lengths


def encode(p: ParamStore, cfg: EncoderConfig, feats, training=False, rng=None):
    """Audio embeddings [B, ceil-chain(T), decoder_dim] and their lengths."""
    h, lengths = encode_hidden(p, cfg, feats, training, rng)
    for i in range(cfg.post_blocks):
        h, lengths = downsample_block(h, p, f"encoder.post{i}", lengths)
    return ag.linear(h, p["encoder.proj.w"], p["encoder.proj.b"]), lengths


def ctc_log_probs(p: ParamStore, hidden: Tensor) -> Tensor:
    return ag.log_softmax_lastdim(ag.linear(hidden, p["ctc_head.w"], p["ctc_head.b"]))


def ctc_loss(log_probs: Tensor, target, blank: int | None = None) -> Tensor:
    """Negative log-probability of ``target`` summed over all CTC alignments.

    ``log_probs`` is [T', V+1] with the blank in the last column unless
    ``blank`` says otherwise.
    """
    LP = log_probs.data
    if LP.ndim != 2:
        raise ag.ShapeError("ctc_loss", LP.shape, detail="expected [T, V+1]")
    blank = LP.shape[1] - 1 if blank is None else blank
    target = np.asarray(target, dtype=np.int64)
    need = ctc_min_frames(target)
    if LP.shape[0] < need:
        raise CTCInfeasibleError(f"ctc_loss: target needs {need} frames, got {LP.shape[0]}")
    nll, grad = ctc_forward_backward(LP, target, blank)
    grad = grad.astype(LP.dtype)
    return ag._result("ctc_loss", np.asarray(nll, dtype=LP.dtype).reshape(()), (log_probs,),
                      lambda g: (g * grad,))


def ctc_batch_loss(log_probs: Tensor, lengths, targets) -> tuple[Tensor | None, int]:
    """Mean per-token CTC loss over a padded batch; infeasible rows are skipped with a warning."""
    terms, n_tok, skipped = [], 0, 0
    for b, (n, tgt) in enumerate(zip(lengths, targets)):
        row = ag.slice(log_probs, (b, slice(0, int(n))))
        try:
            terms.append(ctc_loss(row, tgt))
        except CTCInfeasibleError as e:
            log.warning("skipping sample %d: %s", b, e)
            skipped += 1
            continue
        n_tok += len(tgt)
    if not terms:
        return None, skipped
    total = terms[0]
    for t in terms[1:]:
        total = ag.add(total, t)
    return ag.scale(total, 1.0 / max(1, n_tok)), skipped


def ctc_greedy_decode(log_probs, blank: int | None = None) -> list[int]:
    """Best-path decoding: per-frame argmax, merge repeats, drop blanks."""
    LP = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs)
    blank = LP.shape[-1] - 1 if blank is None else blank
    best = LP.argmax(axis=-1)
    out, prev = [], None
    for k in best:
        k = int(k)
        if k != prev and k != blank:
            out.append(k)
        prev = k
    return out


