"""Synthetic speech corpus where side-text context measurably matters.

Each word has a *prototype spelling* that drives its acoustic features. Rare
homophone pairs share one prototype, so their clean audio is identical and
only the context string can tell them apart.
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .metrics import rare_word_set
from .tokenizer import tokenize

FRAME_SHIFT_MS = 10

# (canonical, alternate) grapheme pairs; both spellings share a pronunciation
RESPELL_RULES = (
    ("ee", "ea"), ("all", "awl"), ("ph", "f"), ("c", "k"),
    ("oo", "ue"), ("s", "z"), ("ai", "ay"), ("x", "ks"),
)
_PLAIN_CONS = "bdghjlmnrtvw"
_PLAIN_VOWELS = "aeiou"
_LETTERS = "abcdefghijklmnopqrstuvwxyz"


@dataclass
class CorpusConfig:
    n_words: int = 300
    rare_fraction: float = 0.6
    n_homophone_pairs: int = 32
    n_train: int = 1200
    n_eval: int = 150
    n_lm: int = 4000
    feat_dim: int = 16
    frames_per_char: tuple = (40, 56)
    jitter: float = 0.1
    words_per_utt: tuple = (5, 12)
    context_fraction: float = 0.25
    rare_rate: float = 0.4
    distractors: tuple = (5, 15)
    eval_homophone_fraction: float = 0.5
    lm_context_fraction: float = 0.5
    successor_prob: float = 0.5

    def __post_init__(self):
        self.frames_per_char = tuple(self.frames_per_char)
        self.words_per_utt = tuple(self.words_per_utt)
        self.distractors = tuple(self.distractors)
        if min(self.n_train, self.n_eval) < 1:
            raise ValueError("corpus split sizes must be >= 1")


@dataclass
class Lexicon:
    seed: int
    words: list                 # index = frequency rank - 1
    weights: np.ndarray         # Zipf(1.2) over ranks
    rare: np.ndarray            # bool per word
    homophone_pairs: list       # (word_a, word_b, prototype_id)
    respell: dict               # word -> respelled word
    prototype: dict             # word -> prototype spelling
    prototype_id: dict          # word -> int
    successor: dict             # frequent word -> favoured next word
    feat_dim: int
    char_vectors: np.ndarray = field(repr=False)   # [27, feat_dim]; row 26 is the word gap

    @property
    def rare_words(self):
        return [w for w, r in zip(self.words, self.rare) if r]

    @property
    def frequent_words(self):
        return [w for w, r in zip(self.words, self.rare) if not r]

    def partner(self, word):
        for a, b, _ in self.homophone_pairs:
            if word == a:
                return b
            if word == b:
                return a
        return None

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "words": self.words,
            "weights": [float(w) for w in self.weights],
            "rare": [bool(r) for r in self.rare],
            "homophone_pairs": [list(p) for p in self.homophone_pairs],
            "respell": self.respell,
            "prototype": self.prototype,
            "prototype_id": self.prototype_id,
            "successor": self.successor,
            "feat_dim": self.feat_dim,
            "char_vectors": self.char_vectors.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "Lexicon":
        return cls(
            seed=d["seed"], words=list(d["words"]), weights=np.asarray(d["weights"]),
            rare=np.asarray(d["rare"], dtype=bool),
            homophone_pairs=[tuple(p) for p in d["homophone_pairs"]],
            respell=dict(d["respell"]), prototype=dict(d["prototype"]),
            prototype_id={k: int(v) for k, v in d["prototype_id"].items()},
            successor=dict(d["successor"]), feat_dim=int(d["feat_dim"]),
            char_vectors=np.asarray(d["char_vectors"]),
        )


@dataclass
class Sample:
    id: str
    transcript: str
    context: str | None
    rare_words: list
    feats: np.ndarray | None = None

    @property
    def transcript_tokens(self):
        return tokenize(self.transcript)


@dataclass
class AugmentConfig:
    freq_masks: int = 2
    freq_mask_width: int = 5        # 27 at 80 dims, scaled to the feature size
    time_masks: int = 10
    time_mask_max_frac: float = 0.04
    speed_factors: tuple = (0.9, 1.0, 1.1)
    noise_sigma: float = 0.0

    def __post_init__(self):
        self.speed_factors = tuple(self.speed_factors)
        if not 0.0 <= self.time_mask_max_frac <= 1.0:
            raise ValueError("time_mask_max_frac must be in [0, 1]")
        if self.noise_sigma < 0 or self.freq_mask_width < 0:
            raise ValueError("negative augmentation parameter")

    @classmethod
    def scaled(cls, feat_dim: int, **kw):
        return cls(freq_mask_width=round(27 * feat_dim / 80), **kw)

    @classmethod
    def identity(cls):
        return cls(freq_masks=0, time_masks=0, speed_factors=(1.0,), noise_sigma=0.0)


# ---------------------------------------------------------------- respelling

def respell_word(word: str, avoid=frozenset()) -> str:
    """Rule-based alternative spelling with the same pronunciation."""
    for canon, alt in RESPELL_RULES:
        if canon in word:
            cand = word.replace(canon, alt, 1)
            if cand != word and cand not in avoid:
                return cand
    for canon, alt in RESPELL_RULES:
        if alt in word:
            cand = word.replace(alt, canon, 1)
            if cand != word and cand not in avoid:
                return cand
    cand = word + "h" if word[-1] in _PLAIN_VOWELS else word + word[-1]
    return cand if cand not in avoid else word + "h" + word[-1]


# ---------------------------------------------------------------- lexicon

def _syl(rng):
    return rng.choice(list(_PLAIN_CONS)) + rng.choice(list(_PLAIN_VOWELS))


def _core(rng):
    c = rng.choice(list(_PLAIN_CONS))
    v = rng.choice(list(_PLAIN_VOWELS))
    return [c + "ee", c + "all", "ph" + v, "c" + v, c + "oo", "s" + v, c + "ai", v + "x"][rng.integers(8)]


def _frequent_word(rng):
    n = rng.integers(3)
    w = _syl(rng)
    if n >= 1:
        w += rng.choice(list(_PLAIN_CONS))
    if n == 2:
        w += rng.choice(list(_PLAIN_VOWELS))
    return w


def _rare_word(rng):
    if rng.random() < 0.5:
        return _syl(rng) + _core(rng) + _syl(rng)
    return _core(rng) + _syl(rng)


def build_lexicon(seed: int, n_words: int = 300, rare_fraction: float = 0.6,
                  n_pairs: int = 32, feat_dim: int = 16) -> Lexicon:
    if n_words < 100:
        raise ValueError("n_words must be >= 100")
    if not 0.0 < rare_fraction < 1.0:
        raise ValueError("rare_fraction must lie in (0, 1)")
    rng = np.random.default_rng([seed, 101])
    n_rare = int(round(n_words * rare_fraction))
    n_freq = n_words - n_rare
    if n_pairs < 20 or 2 * n_pairs > n_rare:
        raise ValueError(f"need 20 <= n_pairs <= n_rare/2, got {n_pairs} with {n_rare} rare words")

    taken: set = set()
    frequent = []
    while len(frequent) < n_freq:
        w = _frequent_word(rng)
        if w not in taken:
            taken.add(w)
            frequent.append(w)

    # rare entries: pairs (a, respell(a)) and singles, each kept off the others' respellings
    units = []
    n_single = n_rare - 2 * n_pairs
    # pairs sit at the low-weight end so they stay well inside the empirical rare set
    kinds = ["single"] * n_single + ["pair"] * n_pairs
    for kind in kinds:
        while True:
            a = _rare_word(rng)
            b = respell_word(a)
            if a in taken or b in taken or b == a:
                continue
            taken.update((a, b))
            units.append((a, b) if kind == "pair" else (a,))
            break

    words = list(frequent)
    pairs = []
    proto, proto_id = {}, {}
    for w in frequent:
        proto[w] = w
        proto_id[w] = len(proto_id)
    for u in units:
        pid = len(set(proto_id.values()))
        for w in u:
            words.append(w)
            proto[w] = u[0]
            proto_id[w] = pid
        if len(u) == 2:
            pairs.append((u[0], u[1], pid))

    ranks = np.arange(1, n_words + 1, dtype=np.float64)
    weights = ranks ** -1.2
    weights /= weights.sum()
    rare = np.zeros(n_words, dtype=bool)
    rare[n_freq:] = True

    lex_words = set(words)
    respell = {}
    for a, b, _ in pairs:
        respell[a], respell[b] = b, a
    for w in words:
        if w not in respell:
            respell[w] = respell_word(w, avoid=lex_words)

    successor = {w: frequent[int(rng.integers(n_freq))] for w in frequent}
    char_vectors = rng.normal(0.0, 1.0, (len(_LETTERS) + 1, feat_dim))
    char_vectors[-1] = 0.0
    return Lexicon(seed, words, weights, rare, pairs, respell, proto, proto_id, successor,
                   feat_dim, char_vectors)


# ---------------------------------------------------------------- features

def features_for(transcript: str, lexicon: Lexicon, seed, frames_per_char=(40, 56), jitter=0.1) -> np.ndarray:
    """Synthetic filterbank-like frames [T, feat_dim] for a word string.

    Every character of each word's prototype spelling contributes its fixed
    vector for a seeded number of frames; a silence gap separates words.
    """
    words = transcript.split()
    if not words:
        raise ValueError("features_for: empty transcript")
    rng = np.random.default_rng(seed)
    lo, hi = frames_per_char
    rows = []
    for k, w in enumerate(words):
        if w not in lexicon.prototype:
            raise KeyError(f"features_for: out-of-vocabulary word {w!r}")
        if k:
            rows.append(np.full(int(rng.integers(lo, hi + 1)), 26))
        for ch in lexicon.prototype[w]:
            rows.append(np.full(int(rng.integers(lo, hi + 1)), ord(ch) - 97))
    idx = np.concatenate(rows)
    clean = lexicon.char_vectors[idx]
    return (clean + rng.normal(0.0, jitter, clean.shape)).astype(np.float32)


def augment(feats: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Speed perturbation, additive noise, then frequency and time masks."""
    x = np.array(feats, copy=True)
    speed = cfg.speed_factors[int(rng.integers(len(cfg.speed_factors)))] if cfg.speed_factors else 1.0
    if speed != 1.0:
        T = x.shape[0]
        n = max(1, int(round(T / speed)))
        idx = np.minimum(T - 1, np.round(np.arange(n) * speed).astype(np.int64))
        x = x[idx]
    if cfg.noise_sigma > 0:
        x = x + rng.normal(0.0, cfg.noise_sigma, x.shape).astype(x.dtype)
    T, F = x.shape
    for _ in range(cfg.freq_masks):
        w = int(rng.integers(0, min(cfg.freq_mask_width, F) + 1))
        f0 = int(rng.integers(0, F - w + 1))
        x[:, f0:f0 + w] = 0.0
    max_t = int(math.floor(cfg.time_mask_max_frac * T))
    for _ in range(cfg.time_masks):
        w = int(rng.integers(0, max_t + 1))
        t0 = int(rng.integers(0, T - w + 1))
        x[t0:t0 + w] = 0.0
    return x


# ---------------------------------------------------------------- transcripts and contexts

def _draw(rng, pool, weights, k=1):
    return [pool[i] for i in rng.choice(len(pool), size=k, p=weights)]


class _Sampler:
    def __init__(self, lex: Lexicon, cfg: CorpusConfig, allowed=None):
        self.lex, self.cfg = lex, cfg
        self.freq = lex.frequent_words
        fw = lex.weights[~lex.rare]
        self.freq_w = fw / fw.sum()
        self.rare = lex.rare_words
        rw = lex.weights[lex.rare]
        self.rare_w = rw / rw.sum()
        paired = {w for a, b, _ in lex.homophone_pairs for w in (a, b)}
        ok = (lambda w: True) if allowed is None else (lambda w: w in allowed)
        self.homophones = sorted(w for w in paired if ok(w))
        self.singles = [w for w in self.rare if w not in paired and ok(w)]

    def frequent_chain(self, rng, n):
        out = _draw(rng, self.freq, self.freq_w)
        while len(out) < n:
            if rng.random() < self.cfg.successor_prob:
                out.append(self.lex.successor[out[-1]])
            else:
                out.extend(_draw(rng, self.freq, self.freq_w))
        return out

    def rare_pick(self, rng, homophone_bias=None):
        if homophone_bias is None:
            return _draw(rng, self.rare, self.rare_w)[0]
        pool = self.homophones if rng.random() < homophone_bias else self.singles
        # tiny corpora can leave one pool empty
        pool = pool or self.homophones or self.singles
        if not pool:
            raise ValueError("no rare words available for eval sampling; enlarge n_train")
        return pool[int(rng.integers(len(pool)))]

    def transcript(self, rng, n_rare, homophone_bias=None):
        lo, hi = self.cfg.words_per_utt
        n = int(rng.integers(lo, hi + 1))
        words = self.frequent_chain(rng, n - n_rare)
        rares = []
        # a tiny allowed pool may not hold n_rare compatible words; settle for fewer
        for _ in range(100 * n_rare):
            if len(rares) == n_rare:
                break
            w = self.rare_pick(rng, homophone_bias)
            if w not in rares and self.lex.partner(w) not in rares:
                rares.append(w)
        for w in rares:
            words.insert(int(rng.integers(len(words) + 1)), w)
        return " ".join(words), rares

    def context(self, rng, rares):
        lo, hi = self.cfg.distractors
        k = int(rng.integers(lo, hi + 1))
        banned = set(rares) | {self.lex.partner(w) for w in rares}
        bag = list(rares)
        while len(bag) < len(rares) + k:
            if rng.random() < 0.5:
                bag.extend(_draw(rng, self.freq, self.freq_w))
            else:
                w = self.rare[int(rng.integers(len(self.rare)))]
                if w not in banned:
                    bag.append(w)
        rng.shuffle(bag)
        return " ".join(bag)


def _n_rare(rng, forced: bool, rate: float) -> int:
    if forced:
        return 1 + int(rng.random() < 0.3)
    return int(rng.random() < rate) + int(rng.random() < rate * 0.25)


def generate_corpus(cfg: CorpusConfig, seed: int, workers: int = 1):
    """Build the lexicon and the eval/train/lm splits.

    Text is drawn sequentially from one stream per split; features use a
    per-sample seed, so the output does not depend on ``workers``.
    """
    lex = build_lexicon(seed, cfg.n_words, cfg.rare_fraction, cfg.n_homophone_pairs, cfg.feat_dim)
    sm = _Sampler(lex, cfg)

    rng = np.random.default_rng([seed, 2])
    n_ctx = int(round(cfg.context_fraction * cfg.n_train))
    with_ctx = set(rng.choice(cfg.n_train, size=n_ctx, replace=False).tolist())
    train_items = []
    for i in range(cfg.n_train):
        has = i in with_ctx
        tr, rares = sm.transcript(rng, _n_rare(rng, has, cfg.rare_rate))
        train_items.append((tr, sm.context(rng, rares) if has else None, rares))

    rng = np.random.default_rng([seed, 3])
    lm_items = []
    while len(lm_items) < cfg.n_lm:
        has = rng.random() < cfg.lm_context_fraction
        tr, rares = sm.transcript(rng, _n_rare(rng, has, cfg.rare_rate))
        lm_items.append((tr, sm.context(rng, rares) if has else None, rares))

    # eval rare words must be rare by the training-data rule, and eval transcripts unseen
    rare_emp = rare_word_set([tr for tr, _, _ in train_items])
    esm = _Sampler(lex, cfg, allowed=rare_emp)
    seen = {tr for tr, _, _ in train_items} | {tr for tr, _, _ in lm_items}
    rng = np.random.default_rng([seed, 1])
    eval_items = []
    while len(eval_items) < cfg.n_eval:
        tr, rares = esm.transcript(rng, _n_rare(rng, True, 0), cfg.eval_homophone_fraction)
        if tr in seen:
            continue
        seen.add(tr)
        eval_items.append((tr, esm.context(rng, rares), rares))

    def feats(split_code, i, tr):
        return features_for(tr, lex, [seed, split_code, i], cfg.frames_per_char, cfg.jitter)

    def build(split, code, items, audio=True):
        if not audio:
            return [Sample(f"{split}-{i:05d}", tr, c, r) for i, (tr, c, r) in enumerate(items)]
        with ThreadPoolExecutor(max_workers=max(1, workers)) as ex:
            fs = list(ex.map(lambda a: feats(code, a[0], a[1][0]), enumerate(items)))
        return [Sample(f"{split}-{i:05d}", tr, c, r, f) for i, ((tr, c, r), f) in enumerate(zip(items, fs))]

    return lex, {
        "train": build("train", 2, train_items),
        "eval": build("eval", 1, eval_items),
        "lm": build("lm", 3, lm_items, audio=False),
    }


# ---------------------------------------------------------------- disk format

SPLIT_FILES = {"train": "train.jsonl", "eval": "eval.jsonl", "lm": "lm_text.jsonl"}


def feats_file(split: str) -> str:
    """All frames of a split stacked row-wise; the JSONL lines hold each sample's frame count."""
    return f"{split}_feats.npy"


def _sample_line(s: Sample) -> str:
    d = {"id": s.id, "transcript": s.transcript, "context": s.context, "rare_words": s.rare_words}
    if s.feats is not None:
        d["frames"] = len(s.feats)
    return json.dumps(d, separators=(",", ":"))


def write_corpus(out_dir, lexicon: Lexicon, splits: dict, cfg: CorpusConfig | None = None, seed=None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "lexicon.json").write_text(json.dumps(lexicon.to_json(), sort_keys=True))
    for name, samples in splits.items():
        with open(out / SPLIT_FILES[name], "w") as f:
            for s in samples:
                f.write(_sample_line(s))
                f.write("\n")
        audio = [s.feats for s in samples if s.feats is not None]
        if audio:
            np.save(out / feats_file(name), np.concatenate(audio).astype(np.float32))
    if cfg is not None:
        meta = {"seed": seed, "corpus": asdict(cfg)}
        (out / "corpus_meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1))


def read_split(path, feats_path=None) -> list:
    """Samples of one split; features are attached only when ``feats_path`` is given."""
    frames = np.load(feats_path) if feats_path is not None else None
    out, row = [], 0
    with open(path) as f:
        for line in f:
            d = json.loads(line)
            n = d.get("frames")
            x = None
            if n is not None and frames is not None:
                x, row = frames[row:row + n], row + n
            out.append(Sample(d["id"], d["transcript"], d["context"], list(d["rare_words"]), x))
    return out


def read_corpus(data_dir, splits=("train", "eval", "lm"), audio=None):
    """Lexicon and splits; ``audio`` names the splits whose features are loaded (default: all)."""
    d = Path(data_dir)
    lex = Lexicon.from_json(json.loads((d / "lexicon.json").read_text()))
    out = {}
    for s in splits:
        fp = d / feats_file(s)
        load = fp.exists() and (audio is None or s in audio)
        out[s] = read_split(d / SPLIT_FILES[s], fp if load else None)
    return lex, out