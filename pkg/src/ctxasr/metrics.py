"""WER with SUB/INS/DEL breakdown, Rare WER and context perturbations."""
from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .kernels import OP_DEL, OP_INS, OP_SUB, edit_alignment


@dataclass
class WerReport:
    n_ref_words: int = 0
    sub: int = 0
    ins: int = 0
    dels: int = 0
    rare_ref_words: int = 0
    rare_errors: int = 0
    label: str = ""

    @property
    def errors(self) -> int:
        return self.sub + self.ins + self.dels

    @property
    def wer(self) -> float:
        return self.errors / max(1, self.n_ref_words)

    @property
    def rare_wer(self) -> float | None:
        """None when the reference holds no rare words."""
        if self.rare_ref_words == 0:
            return None
        return self.rare_errors / self.rare_ref_words

    def __add__(self, other: "WerReport") -> "WerReport":
        return WerReport(self.n_ref_words + other.n_ref_words, self.sub + other.sub, self.ins + other.ins,
                         self.dels + other.dels, self.rare_ref_words + other.rare_ref_words,
                         self.rare_errors + other.rare_errors, self.label or other.label)

    def as_dict(self) -> dict:
        n = max(1, self.n_ref_words)
        return {
            "label": self.label,
            "n_ref_words": self.n_ref_words,
            "sub": self.sub, "ins": self.ins, "del": self.dels,
            "wer": self.wer,
            "sub_rate": self.sub / n, "ins_rate": self.ins / n, "del_rate": self.dels / n,
            "rare_ref_words": self.rare_ref_words, "rare_errors": self.rare_errors,
            "rare_wer": self.rare_wer,
        }


def _words(x):
    return x.split() if isinstance(x, str) else list(x)


def align_wer(ref_words, hyp_words, rare_set=frozenset(), label: str = "") -> WerReport:
    """Unit-cost Levenshtein alignment of two word sequences.

    Rare words count as errors when their reference occurrence is substituted
    or deleted. Inserted words are never attributed to the rare count.
    """
    ref, hyp = _words(ref_words), _words(hyp_words)
    vocab = {}
    r = [vocab.setdefault(w, len(vocab)) for w in ref]
    h = [vocab.setdefault(w, len(vocab)) for w in hyp]
    ops = edit_alignment(r, h)
    rep = WerReport(n_ref_words=len(ref), label=label)
    i = 0
    for op in ops:
        if op == OP_INS:
            rep.ins += 1
            continue
        rare = ref[i] in rare_set
        rep.rare_ref_words += rare
        if op == OP_SUB:
            rep.sub += 1
            rep.rare_errors += rare
        elif op == OP_DEL:
            rep.dels += 1
            rep.rare_errors += rare
        i += 1
    return rep


def score(refs, hyps, rare_set=frozenset(), label: str = "") -> WerReport:
    """Corpus-level report: counts summed over utterances."""
    total = WerReport(label=label)
    for r, h in zip(refs, hyps, strict=True):
        total = total + align_wer(r, h, rare_set)
    total.label = label
    return total


def rare_wer(reports) -> float | None:
    tot = sum(reports, WerReport())
    return tot.rare_wer


def word_counts(transcripts) -> Counter:
    c = Counter()
    for t in transcripts:
        c.update(_words(t))
    return c


def rare_word_set(train_transcripts, mass: float = 0.9, rule: str = "token_mass") -> set:
    """Words outside the most frequent set covering ``mass`` of the training tokens.

    Ties in count are broken alphabetically. ``rule="type_fraction"`` instead
    keeps the top ``mass`` fraction of word types as frequent.
    """
    counts = word_counts(train_transcripts)
    if not counts:
        raise ValueError("rare_word_set: no training words")
    ranked = sorted(counts, key=lambda w: (-counts[w], w))
    if rule == "token_mass":
        total = sum(counts.values())
        cum = np.cumsum([counts[w] for w in ranked])
        k = int(np.searchsorted(cum, mass * total - 1e-9)) + 1
    elif rule == "type_fraction":
        k = int(np.ceil(mass * len(ranked)))
    else:
        raise ValueError(f"unknown rule {rule!r}")
    return set(ranked[k:])


# ---------------------------------------------------------------- perturbations

class PerturbKind(str, Enum):
    NONE = "none"
    REMOVE_ALL = "remove"
    RANDOM = "random"
    RESPELL_REPLACE = "respell-replace"
    RESPELL_APPEND = "respell-append"
    GROUND_TRUTH = "ground-truth"

    @classmethod
    def parse(cls, s) -> "PerturbKind":
        if isinstance(s, cls):
            return s
        aliases = {"remove_all": "remove", "respell_replace": "respell-replace",
                   "respell_append": "respell-append", "ground_truth": "ground-truth"}
        try:
            return cls(aliases.get(s, s))
        except ValueError:
            raise ValueError(f"unknown perturbation {s!r}; choose from {[k.value for k in cls]}") from None


def perturb_context(transcript: str, context: str | None, kind, respell: dict, rare_set,
                    rng: np.random.Generator | None = None, word_dist=None) -> str | None:
    """Apply one context perturbation.

    ``word_dist`` is a (words, probabilities) pair for the random kind,
    normally the training unigram distribution.
    """
    kind = PerturbKind.parse(kind)
    if kind is PerturbKind.NONE:
        return context
    if kind is PerturbKind.REMOVE_ALL:
        return None
    ref = _words(transcript)
    if kind is PerturbKind.GROUND_TRUTH:
        seen = []
        for w in ref:
            if w in rare_set and w not in seen:
                seen.append(w)
        return " ".join(seen)
    if context is None:
        raise ValueError(f"perturbation {kind.value} needs an existing context")
    ctx = context.split()
    if kind is PerturbKind.RANDOM:
        if rng is None or word_dist is None:
            raise ValueError("random perturbation needs rng and word_dist")
        words, probs = word_dist
        return " ".join(words[i] for i in rng.choice(len(words), size=len(ctx), p=probs))
    hit = set(ref) & set(rare_set)
    out = []
    for w in ctx:
        if w in hit:
            if kind is PerturbKind.RESPELL_APPEND:
                out.append(w)
            out.append(respell[w])
        else:
            out.append(w)
    return " ".join(out)


def unigram_dist(train_transcripts):
    c = word_counts(train_transcripts)
    words = sorted(c)
    p = np.array([c[w] for w in words], dtype=np.float64)
    return words, p / p.sum()


# ---------------------------------------------------------------- tables

RESULT_COLUMNS = ("model", "context-train", "context-eval", "WER", "SUB", "INS", "DEL", "RareWER")


def _pct(x):
    return "NA" if x is None else f"{100 * x:.2f}"


def markdown_table(rows, columns) -> str:
    """Rows are dicts; floats in [0, 1] under rate columns are shown as percentages."""
    lines = ["| " + " | ".join(columns) + " |", "|" + "|".join("---" for _ in columns) + "|"]
    for r in rows:
        cells = []
        for c in columns:
            v = r.get(c)
            if c in ("WER", "SUB", "INS", "DEL", "RareWER"):
                cells.append(_pct(v))
            elif isinstance(v, float):
                cells.append(f"{v:.4g}")
            else:
                cells.append("" if v is None else str(v))
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def report_row(rep: WerReport, **extra) -> dict:
    n = max(1, rep.n_ref_words)
    row = dict(extra)
    row.update({"WER": rep.wer, "SUB": rep.sub / n, "INS": rep.ins / n, "DEL": rep.dels / n,
                "RareWER": rep.rare_wer})
    return row


def json_table(rows) -> str:
    return json.dumps(rows, indent=1, sort_keys=True)
