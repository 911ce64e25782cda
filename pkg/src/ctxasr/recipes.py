"""Model construction and the three training stages, plus the evaluation harness."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autograd as ag
from .config import ExperimentConfig
from .corpus import Lexicon, read_corpus
from .decoder import ModelBundle, init_adapters, init_decoder_base
from .encoder import init_encoder
from .metrics import PerturbKind, WerReport, perturb_context, rare_word_set, score, unigram_dist
from .params import ParamStore
from .pipeline import transcribe_batch
from .train import lm_eval_loss, run_phase

log = logging.getLogger(__name__)

TRAIN_DTYPE = np.float32


class MissingArtifact(FileNotFoundError):
    """A prerequisite output of an earlier command is absent."""


def require(path, what: str, hint: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise MissingArtifact(f"missing {what}: {p} (run `{hint}` first)")
    return p


def _rng(cfg: ExperimentConfig, tag: int):
    return np.random.default_rng([cfg.seed, tag])


# ---------------------------------------------------------------- stage 1: CTC encoder

def new_ctc_bundle(cfg: ExperimentConfig) -> ModelBundle:
    p = ParamStore()
    with ag.default_dtype(TRAIN_DTYPE):
        init_encoder(p, cfg.encoder, _rng(cfg, 101), ctc_head=True)
    # the final downsampling block and the projection only exist after CTC pretraining
    p.freeze_prefix("encoder.post")
    p.freeze_prefix("encoder.proj")
    return ModelBundle(p, cfg.encoder, cfg.decoder, meta={"stage": "ctc", "seed": cfg.seed})


def pretrain_ctc(cfg: ExperimentConfig, splits: dict, out_dir, stop_at=None) -> ModelBundle:
    b = new_ctc_bundle(cfg)
    with ag.default_dtype(TRAIN_DTYPE):
        run_phase("ctc_pretrain", b, splits["train"], cfg.ctc, out_dir, cfg.seed,
                  eval_samples=splits["train"], opt_cfg=cfg.optimizer, aug_cfg=cfg.augment, stop_at=stop_at)
    return b


# ---------------------------------------------------------------- stage 2: base LM

def new_lm_bundle(cfg: ExperimentConfig) -> ModelBundle:
    p = ParamStore()
    with ag.default_dtype(TRAIN_DTYPE):
        init_decoder_base(p, cfg.decoder, _rng(cfg, 102))
    return ModelBundle(p, cfg.encoder, cfg.decoder, meta={"stage": "lm", "seed": cfg.seed})


def base_pretrain(cfg: ExperimentConfig, splits: dict, out_dir, stop_at=None) -> ModelBundle:
    """Train the text-only decoder, then mark every decoder parameter frozen."""
    b = new_lm_bundle(cfg)
    held = splits["eval"]
    with ag.default_dtype(TRAIN_DTYPE):
        run_phase("lm_pretrain", b, splits["lm"], cfg.lm, out_dir, cfg.seed, eval_samples=held,
                  opt_cfg=cfg.optimizer, aug_cfg=cfg.augment, stop_at=stop_at)
    b.params.freeze_prefix("decoder.")
    b.meta["heldout_loss"] = lm_eval_loss(b, held)
    b.save(out_dir, "bundle")
    return b


# ---------------------------------------------------------------- stage 3: joint fine-tuning

def new_finetune_bundle(cfg: ExperimentConfig, ctc: ModelBundle, lm: ModelBundle) -> ModelBundle:
    if ctc.enc_cfg != cfg.encoder:
        raise ValueError("CTC checkpoint encoder config differs from the experiment config")
    lm_dec = lm.dec_cfg
    for k in ("vocab_size", "model_dim", "num_layers", "num_heads", "ff_dim"):
        if getattr(lm_dec, k) != getattr(cfg.decoder, k):
            raise ValueError(f"LM checkpoint decoder.{k} differs from the experiment config")
    p = ParamStore()
    with ag.default_dtype(TRAIN_DTYPE):
        for k in ctc.params.names:
            if k.startswith("encoder."):
                p.add(k, ctc.params[k].data.copy(), trainable=True)
        for k in lm.params.names:
            p.add(k, lm.params[k].data.copy(), trainable=False)
        init_adapters(p, cfg.decoder, _rng(cfg, 103))
    return ModelBundle(p, cfg.encoder, cfg.decoder, meta={"stage": "finetune", "seed": cfg.seed,
                                                          "context_in_training": cfg.context_in_training,
                                                          "mask_scheme": cfg.mask_scheme})


def finetune(cfg: ExperimentConfig, splits: dict, ctc: ModelBundle, lm: ModelBundle, out_dir,
             stop_at=None, resume=True) -> ModelBundle:
    b = new_finetune_bundle(cfg, ctc, lm)
    with ag.default_dtype(TRAIN_DTYPE):
        run_phase("finetune", b, splits["train"], cfg.finetune_phase, out_dir, cfg.seed,
                  eval_samples=splits["eval"], opt_cfg=cfg.optimizer, aug_cfg=cfg.augment,
                  stop_at=stop_at, resume=resume)
    return b


# ---------------------------------------------------------------- evaluation

@dataclass
class EvalData:
    lexicon: Lexicon
    eval: list
    rare_set: set
    word_dist: tuple


def eval_data(lexicon: Lexicon, splits: dict) -> EvalData:
    train_text = [s.transcript for s in splits["train"]]
    return EvalData(lexicon, splits["eval"], rare_word_set(train_text), unigram_dist(train_text))


def evaluate(bundle: ModelBundle, data: EvalData, context: bool = True, perturb="none", mask: str = "causal",
             seed: int = 0, batch_size: int = 50, limit: int | None = None):
    """Transcribe the eval split under one condition; returns (WerReport, contexts, hypotheses)."""
    kind = PerturbKind.parse(perturb)
    if not context:
        kind = PerturbKind.REMOVE_ALL
    samples = data.eval[:limit] if limit else data.eval
    rng = np.random.default_rng([seed, 7])
    ctxs = [perturb_context(s.transcript, s.context, kind, data.lexicon.respell, data.rare_set, rng,
                            data.word_dist) for s in samples]
    with ag.default_dtype(TRAIN_DTYPE):
        hyps = transcribe_batch(bundle, [s.feats for s in samples], ctxs, mask, batch_size=batch_size)
    rep = score([s.transcript for s in samples], hyps, data.rare_set, label=kind.value)
    return rep, ctxs, hyps


def load_bundle(run_dir, name="bundle") -> ModelBundle:
    d = Path(run_dir)
    require(d / f"{name}.json", "checkpoint manifest", "train")
    return ModelBundle.load(d, name)


def load_data(data_dir, splits=("train", "eval", "lm"), audio=None):
    d = require(Path(data_dir) / "lexicon.json", "corpus", "ctxasr gen-data").parent
    return read_corpus(d, splits, audio)


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


__all__ = ["pretrain_ctc", "base_pretrain", "finetune", "evaluate", "eval_data", "EvalData", "WerReport",
           "MissingArtifact", "load_bundle", "load_data"]
