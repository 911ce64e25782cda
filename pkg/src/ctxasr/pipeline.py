"""Mixed-modal prompts: context text, <bos>, audio embeddings, transcript, <eos>."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .decoder import ModelBundle, decoder_forward, greedy_generate
from .encoder import encode
from .nn import MaskScheme
from .tokenizer import BOS, EOS, PAD, detokenize, tokenize

MAX_CONTEXT = 50
SOURCES = ("context", "bos", "audio", "transcript", "eos")
SRC_CONTEXT, SRC_BOS, SRC_AUDIO, SRC_TRANSCRIPT, SRC_EOS = range(5)
NO_LABEL = -1


def crop_context(tokens, max_len: int = MAX_CONTEXT, mode: str = "infer", rng=None) -> list[int]:
    """Limit context to ``max_len`` tokens.

    Training takes a uniformly placed window; inference keeps the trailing
    ``max_len`` tokens.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    tokens = list(tokens)
    if len(tokens) <= max_len:
        return tokens
    if mode == "infer":
        return tokens[len(tokens) - max_len:]
    if mode != "train":
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    if rng is None:
        raise ValueError("train-mode crop needs an rng")
    start = int(rng.integers(0, len(tokens) - max_len + 1))
    return tokens[start:start + max_len]


@dataclass
class PromptSequence:
    """Per-position layout of one decoder input.

    ``token_ids`` is -1 at audio positions. ``labels[i]`` is the id the model
    should predict after position i, or NO_LABEL where no loss applies.
    """
    sources: np.ndarray
    token_ids: np.ndarray
    labels: np.ndarray
    n_context: int
    n_audio: int

    @property
    def length(self) -> int:
        return len(self.sources)

    @property
    def loss_mask(self) -> np.ndarray:
        return (self.sources == SRC_TRANSCRIPT) | (self.sources == SRC_EOS)

    @property
    def prefix_len(self) -> int:
        return self.n_context + 1 + self.n_audio

    @property
    def target_weights(self) -> np.ndarray:
        """1 where the following position is a loss target."""
        w = np.zeros(self.length)
        w[:-1] = self.loss_mask[1:]
        return w

    def scheme(self, kind: str) -> MaskScheme:
        return MaskScheme(kind, self.prefix_len if kind == "prefix_full" else 0)


def assemble_prompt(context, n_audio: int, transcript=None, mode: str = "train", rng=None,
                    max_context: int = MAX_CONTEXT, audio_in_prompt: bool = True) -> PromptSequence:
    """Lay out context ⊕ bos ⊕ audio ⊕ transcript ⊕ eos (train) or context ⊕ bos ⊕ audio (infer).

    ``context`` is a token list, a string or None. ``n_audio`` is the number
    of audio embeddings. With ``audio_in_prompt=False`` (encoder-decoder
    variant) audio reaches the decoder through cross-attention instead.
    """
    if hasattr(n_audio, "shape"):
        n_audio = n_audio.shape[-2]
    if audio_in_prompt and n_audio < 1:
        raise ValueError("assemble_prompt: audio must have at least one embedding")
    if not audio_in_prompt:
        n_audio = 0
    transcript = [] if transcript is None else list(transcript)
    if mode == "infer" and transcript:
        raise ValueError("infer-mode prompt takes no transcript")
    if mode == "train" and not transcript:
        raise ValueError("train-mode prompt needs a transcript")
    if isinstance(context, str):
        context = tokenize(context)
    ctx = crop_context(context or [], max_context, mode, rng)
    src = [SRC_CONTEXT] * len(ctx) + [SRC_BOS] + [SRC_AUDIO] * n_audio
    ids = list(ctx) + [BOS] + [NO_LABEL] * n_audio
    if mode == "train":
        src += [SRC_TRANSCRIPT] * len(transcript) + [SRC_EOS]
        ids += transcript + [EOS]
    src = np.array(src, dtype=np.int8)
    ids = np.array(ids, dtype=np.int64)
    labels = np.full(len(ids), NO_LABEL, dtype=np.int64)
    labels[:-1] = ids[1:]
    labels[:-1][~((src[1:] == SRC_TRANSCRIPT) | (src[1:] == SRC_EOS))] = NO_LABEL
    return PromptSequence(src, ids, labels, len(ctx), n_audio)


def prompt_embeddings(bundle: ModelBundle, prompts, audio: Tensor | None):
    """Embed a batch of prompts as one padded [B, N, d] tensor.

    Text positions index the frozen embedding table, audio positions index the
    rows of ``audio`` [B, Ta, d]; both go through one lookup into the
    concatenation of the two tables.
    """
    table = bundle.params["decoder.embed"]
    V = table.shape[0]
    B = len(prompts)
    N = max(q.length for q in prompts)
    idx = np.full((B, N), PAD, dtype=np.int64)
    src = table
    if audio is not None and any(q.n_audio for q in prompts):
        Ta = audio.shape[1]
        src = ag.concat([table, ag.reshape(audio, (B * Ta, audio.shape[2]))], axis=0)
    for b, q in enumerate(prompts):
        ids = q.token_ids.copy()
        pos = np.flatnonzero(q.sources == SRC_AUDIO)
        ids[pos] = V + b * (audio.shape[1] if audio is not None else 0) + np.arange(len(pos))
        idx[b, :q.length] = ids
    return ag.embedding_lookup(src, idx)


def batch_loss(bundle: ModelBundle, prompts, audio: Tensor, audio_lengths, kind: str = "causal",
               training=False, rng=None) -> Tensor:
    """Mean next-token cross-entropy over every loss-masked target in the batch."""
    enc_dec = bundle.variant == "encoder_decoder"
    emb = prompt_embeddings(bundle, prompts, None if enc_dec else audio)
    N = emb.shape[1]
    schemes = [q.scheme(kind) for q in prompts]
    logits = decoder_forward(bundle.params, bundle.dec_cfg, emb, schemes,
                             encoder_out=audio if enc_dec else None,
                             encoder_lengths=audio_lengths if enc_dec else None,
                             training=training, rng=rng)
    targets = np.zeros((len(prompts), N), dtype=np.int64)
    weights = np.zeros((len(prompts), N))
    for b, q in enumerate(prompts):
        # the mask comes from the layout, so whatever sits in masked label slots is ignored
        keep = q.target_weights > 0
        targets[b, :q.length][keep] = q.labels[keep]
        weights[b, :q.length] = keep
    if not weights.any():
        raise ValueError("sequence_loss: prompt has no loss targets")
    return ag.pick_mean(ag.log_softmax_lastdim(logits), targets, weights)


def sequence_loss(bundle: ModelBundle, prompt: PromptSequence, audio: Tensor, kind: str = "causal",
                  training=False, rng=None) -> Tensor:
    """Loss for one prompt; ``audio`` is its [Ta, d] embedding matrix."""
    if isinstance(kind, MaskScheme):
        kind = kind.kind
    if audio.ndim == 2:
        audio = ag.reshape(audio, (1,) + audio.shape)
    return batch_loss(bundle, [prompt], audio, [audio.shape[1]], kind, training, rng)


def _max_new(n_audio: int) -> int:
    # audio tokens arrive at under one per character, so this bound is generous
    return 3 * n_audio + 16


def transcribe_batch(bundle: ModelBundle, feats, contexts, kind: str = "causal",
                     max_new_tokens: int | None = None, batch_size: int = 32) -> list[str]:
    """Greedy transcripts for a list of feature matrices and optional context strings."""
    out = []
    enc_dec = bundle.variant == "encoder_decoder"
    for s in range(0, len(feats), batch_size):
        fb = feats[s:s + batch_size]
        cb = contexts[s:s + batch_size]
        with ag.no_grad():
            audio, lens = encode(bundle.params, bundle.enc_cfg, fb)
        prompts, embs = [], []
        for b, (c, n) in enumerate(zip(cb, lens)):
            q = assemble_prompt(c, int(n), mode="infer", audio_in_prompt=not enc_dec)
            prompts.append(q)
        with ag.no_grad():
            if enc_dec:
                E = prompt_embeddings(bundle, prompts, None).data
            else:
                E = prompt_embeddings(bundle, prompts, audio).data
        embs = [E[b, :q.length] for b, q in enumerate(prompts)]
        limit = max_new_tokens or _max_new(int(lens.max()))
        ids = greedy_generate(bundle.params, bundle.dec_cfg, embs, limit,
                              [q.scheme(kind) for q in prompts],
                              encoder_out=audio if enc_dec else None,
                              encoder_lengths=lens if enc_dec else None)
        out.extend(detokenize(i) for i in ids)
    return out


def transcribe(bundle: ModelBundle, feats, context: str | None = None, kind: str = "causal",
               max_new_tokens: int | None = None) -> str:
    if isinstance(kind, MaskScheme):
        kind = kind.kind
    return transcribe_batch(bundle, [feats], [context], kind, max_new_tokens)[0]
