"""Character tokenizer shared by CTC pretraining, the base LM and fine-tuning."""
from __future__ import annotations

import hashlib
import string

PAD, BOS, EOS = 0, 1, 2
SPECIALS = ("<pad>", "<bos>", "<eos>")
CHARS = " '" + string.digits + string.ascii_lowercase + string.ascii_uppercase
VOCAB = SPECIALS + tuple(CHARS)
VOCAB_SIZE = len(VOCAB)
# CTC uses one extra class after the vocabulary
BLANK = VOCAB_SIZE

_index = {c: i + len(SPECIALS) for i, c in enumerate(CHARS)}


def ascii_filter(text: str) -> str:
    return "".join(c for c in text if ord(c) < 128)


def tokenize(text: str) -> list[int]:
    """Characters outside the vocabulary (including all non-ASCII) are dropped."""
    return [_index[c] for c in text if c in _index]


def detokenize(ids) -> str:
    out = []
    for i in ids:
        i = int(i)
        if i >= len(SPECIALS) and i < VOCAB_SIZE:
            out.append(VOCAB[i])
    return "".join(out)


def tokenizer_hash() -> str:
    return hashlib.sha256("\x00".join(VOCAB).encode()).hexdigest()[:16]
