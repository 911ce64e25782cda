"""Adam, the warmup/decay schedule and the phase loop with checkpoint/resume."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autograd as ag
from .corpus import AugmentConfig, augment
from .decoder import ModelBundle, decoder_forward
from .encoder import ctc_batch_loss, ctc_greedy_decode, ctc_log_probs, encode, encode_hidden
from .metrics import score
from .nn import MaskScheme
from .params import ParamStore, load_tensors, save_tensors
from .pipeline import MAX_CONTEXT, assemble_prompt, batch_loss, crop_context, transcribe_batch
from .tokenizer import BOS, EOS, PAD, detokenize, tokenize

log = logging.getLogger(__name__)

PHASES = ("ctc_pretrain", "lm_pretrain", "finetune")
_PHASE_CODE = {p: i + 10 for i, p in enumerate(PHASES)}


@dataclass(frozen=True)
class OptimizerConfig:
    beta1: float = 0.9
    beta2: float = 0.98
    weight_decay: float = 1e-5
    grad_clip_norm: float = 1.0
    eps: float = 1e-8

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")
        if self.grad_clip_norm <= 0:
            raise ValueError("grad_clip_norm must be positive")


@dataclass(frozen=True)
class ScheduleConfig:
    peak_lr: float = 5e-4
    floor_lr: float = 1e-5
    warmup_steps: int = 200
    total_steps: int = 4000

    def __post_init__(self):
        if not 0 < self.floor_lr <= self.peak_lr:
            raise ValueError("need 0 < floor_lr <= peak_lr")
        if not 0 < self.warmup_steps < self.total_steps:
            raise ValueError("need 0 < warmup_steps < total_steps")


def lr_at(step: int, cfg: ScheduleConfig) -> float:
    """Linear warmup to the peak, then geometric decay reaching the floor at the last step."""
    if not 0 <= step <= cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    if step <= cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    frac = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    return cfg.peak_lr * (cfg.floor_lr / cfg.peak_lr) ** frac


class Adam:
    """Adam with bias correction, global-norm clipping and decoupled weight decay."""

    def __init__(self, cfg: OptimizerConfig):
        self.cfg = cfg
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: ParamStore, lr: float) -> float:
        """Update trainable entries in place and return the pre-clip gradient norm."""
        c = self.cfg
        items = [(n, t) for n, t in params.trainable() if t.grad is not None]
        sq = 0.0
        for n, t in items:
            sq += float(np.sum(np.square(t.grad, dtype=np.float64)))
        norm = math.sqrt(sq)
        if not math.isfinite(norm):
            bad = [n for n, t in items if not np.all(np.isfinite(t.grad))]
            raise ag.NumericError(f"non-finite gradient in {bad[:5]}; step skipped")
        clip = min(1.0, c.grad_clip_norm / (norm + 1e-12))
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for n, t in params.trainable():
            g = t.grad * clip if t.grad is not None else np.zeros_like(t.data)
            m = self.m.setdefault(n, np.zeros_like(t.data))
            v = self.v.setdefault(n, np.zeros_like(t.data))
            m *= c.beta1
            m += (1 - c.beta1) * g
            v *= c.beta2
            v += (1 - c.beta2) * g * g
            t.data *= 1.0 - lr * c.weight_decay
            t.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)
        return norm

    def state(self) -> dict[str, np.ndarray]:
        out = {"adam.t": np.array([self.t], dtype=np.int64)}
        out.update({f"adam.m/{k}": v for k, v in self.m.items()})
        out.update({f"adam.v/{k}": v for k, v in self.v.items()})
        return out

    def load(self, arrays: dict):
        self.t = int(arrays["adam.t"][0])
        self.m = {k[7:]: v.copy() for k, v in arrays.items() if k.startswith("adam.m/")}
        self.v = {k[7:]: v.copy() for k, v in arrays.items() if k.startswith("adam.v/")}


def adam_step(params: ParamStore, state: Adam, lr: float) -> float:
    return state.step(params, lr)


# ---------------------------------------------------------------- phase loop

@dataclass(frozen=True)
class PhaseConfig:
    steps: int = 1000
    batch_size: int = 8
    warmup_steps: int = 100
    peak_lr: float = 5e-4
    floor_lr: float = 1e-5
    eval_every: int = 0
    eval_samples: int = 60
    checkpoint_every: int = 0
    log_every: int = 10
    context_in_training: bool = True
    mask: str = "causal"
    augment: bool = True
    copy_fraction: float = 0.0

    @property
    def schedule(self) -> ScheduleConfig:
        return ScheduleConfig(self.peak_lr, self.floor_lr, self.warmup_steps, self.steps)


def _batch_indices(n: int, batch: int, seed: int, phase: str, step: int) -> np.ndarray:
    """Batch composition depends only on (seed, phase, step); each epoch is a fresh permutation."""
    per_epoch = max(1, n // batch)
    epoch, k = divmod(step, per_epoch)
    perm = np.random.default_rng([seed, _PHASE_CODE[phase], epoch]).permutation(n)
    return perm[k * batch:(k + 1) * batch]


def _ctc_loss(bundle, samples, cfg: PhaseConfig, aug: AugmentConfig, rng):
    feats = [augment(s.feats, aug, rng) if cfg.augment else s.feats for s in samples]
    h, lens = encode_hidden(bundle.params, bundle.enc_cfg, feats, training=True, rng=rng)
    loss, skipped = ctc_batch_loss(ctc_log_probs(bundle.params, h), lens, [s.transcript_tokens for s in samples])
    return loss


def copy_stream(text: str, rng) -> list[int]:
    """Uppercased ``text`` with every character emitted once or twice.

    Placed between <bos> and the transcript it mimics the layout of an audio
    prompt, so the base LM learns to transcribe a stretched symbol stream.
    """
    reps = rng.integers(1, 3, len(text))
    return tokenize("".join(c * int(r) for c, r in zip(text.upper(), reps)))


def lm_sequence(sample, rng=None, mode="train", copy_fraction=0.0) -> list[int]:
    """Text-only training sequence: optional context, <bos>, optional copy stream, transcript, <eos>."""
    ctx = crop_context(tokenize(sample.context), MAX_CONTEXT, mode, rng) if sample.context else []
    stream = []
    if mode == "train" and copy_fraction > 0 and rng.random() < copy_fraction:
        stream = copy_stream(sample.transcript, rng)
    return ctx + [BOS] + stream + sample.transcript_tokens + [EOS]


def _lm_batch(seqs):
    N = max(len(s) for s in seqs) - 1
    ids = np.full((len(seqs), N), PAD, dtype=np.int64)
    tgt = np.zeros((len(seqs), N), dtype=np.int64)
    w = np.zeros((len(seqs), N))
    for b, s in enumerate(seqs):
        ids[b, :len(s) - 1] = s[:-1]
        tgt[b, :len(s) - 1] = s[1:]
        w[b, :len(s) - 1] = 1.0
    return ids, tgt, w


def lm_loss(params, dec_cfg, seqs, training=False, rng=None):
    ids, tgt, w = _lm_batch(seqs)
    emb = ag.embedding_lookup(params["decoder.embed"], ids)
    logits = decoder_forward(params, dec_cfg, emb, MaskScheme("causal"), training=training, rng=rng,
                             use_lora=False)
    return ag.pick_mean(ag.log_softmax_lastdim(logits), tgt, w)


def _lm_loss(bundle, samples, cfg, aug, rng):
    return lm_loss(bundle.params, bundle.dec_cfg, [lm_sequence(s, rng, copy_fraction=cfg.copy_fraction) for s in samples],
                   True, rng)


def finetune_loss(bundle, samples, cfg: PhaseConfig, aug: AugmentConfig, rng, training=True):
    feats = [augment(s.feats, aug, rng) if (cfg.augment and training) else s.feats for s in samples]
    audio, lens = encode(bundle.params, bundle.enc_cfg, feats, training=training, rng=rng)
    in_prompt = bundle.variant == "decoder_only"
    prompts = []
    for s, n in zip(samples, lens):
        ctx = s.context if cfg.context_in_training else None
        prompts.append(assemble_prompt(ctx, int(n), s.transcript_tokens, "train", rng, audio_in_prompt=in_prompt))
    return batch_loss(bundle, prompts, audio, lens, cfg.mask, training=training, rng=rng)


_LOSSES = {"ctc_pretrain": _ctc_loss, "lm_pretrain": _lm_loss, "finetune": finetune_loss}


def ctc_eval_wer(bundle, samples) -> float:
    with ag.no_grad():
        h, lens = encode_hidden(bundle.params, bundle.enc_cfg, [s.feats for s in samples])
        lp = ctc_log_probs(bundle.params, h).data
    hyps = [detokenize(ctc_greedy_decode(lp[b, :n])) for b, n in enumerate(lens)]
    return score([s.transcript for s in samples], hyps).wer


def finetune_eval_wer(bundle, samples, cfg: PhaseConfig) -> float:
    ctx = [s.context if cfg.context_in_training else None for s in samples]
    hyps = transcribe_batch(bundle, [s.feats for s in samples], ctx, cfg.mask)
    return score([s.transcript for s in samples], hyps).wer


def lm_eval_loss(bundle, samples) -> float:
    with ag.no_grad():
        return float(lm_loss(bundle.params, bundle.dec_cfg, [lm_sequence(s, mode="infer") for s in samples]).data)


def _eval(phase, bundle, samples, cfg):
    if phase == "ctc_pretrain":
        return {"eval_wer": ctc_eval_wer(bundle, samples)}
    if phase == "lm_pretrain":
        return {"eval_loss": lm_eval_loss(bundle, samples)}
    return {"eval_wer": finetune_eval_wer(bundle, samples, cfg)}


def _save_state(out: Path, bundle: ModelBundle, opt: Adam, step: int, phase: str, seed: int):
    arrays = {f"param/{k}": v for k, v in bundle.params.state().items()}
    arrays.update(opt.state())
    save_tensors(out / "state.ckpt", arrays)
    (out / "state.json").write_text(json.dumps({"step": step, "phase": phase, "seed": seed}))


def _load_state(out: Path, bundle: ModelBundle, opt: Adam) -> int:
    meta = json.loads((out / "state.json").read_text())
    arrays = load_tensors(out / "state.ckpt")
    bundle.params.load_state({k[6:]: v for k, v in arrays.items() if k.startswith("param/")})
    opt.load(arrays)
    return int(meta["step"])


def run_phase(phase: str, bundle: ModelBundle, train: list, cfg: PhaseConfig, out_dir, seed: int,
              eval_samples: list | None = None, opt_cfg: OptimizerConfig = OptimizerConfig(),
              aug_cfg: AugmentConfig | None = None, resume: bool = True, stop_at: int | None = None) -> dict:
    """Train the trainable subset of ``bundle`` for one phase.

    Writes ``metrics.jsonl``, a resumable ``state.ckpt`` and the final bundle
    to ``out_dir``. ``stop_at`` ends the run early (as if interrupted) after
    writing a resumable state.
    """
    if phase not in PHASES:
        raise ValueError(f"phase must be one of {PHASES}")
    if not train:
        raise ValueError("run_phase: empty training set")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    aug_cfg = aug_cfg or AugmentConfig.scaled(bundle.enc_cfg.feat_dim)
    sched = cfg.schedule
    opt = Adam(opt_cfg)
    loss_fn = _LOSSES[phase]
    frozen = sorted(bundle.params.frozen_names)
    frozen_sum = bundle.params.checksum(frozen)
    metrics_path = out / "metrics.jsonl"
    step = 0
    if resume and (out / "state.json").exists():
        step = _load_state(out, bundle, opt)
        log.info("%s: resuming at step %d", phase, step)
        _truncate_log(metrics_path, step)
    elif metrics_path.exists():
        metrics_path.unlink()
    best = None
    end = cfg.steps if stop_at is None else min(stop_at, cfg.steps)
    with open(metrics_path, "a") as logf:
        while step < end:
            idx = _batch_indices(len(train), cfg.batch_size, seed, phase, step)
            rng = np.random.default_rng([seed, _PHASE_CODE[phase], step, 1])
            bundle.params.zero_grad()
            loss = loss_fn(bundle, [train[i] for i in idx], cfg, aug_cfg, rng)
            step += 1
            lr = lr_at(step, sched)
            if loss is None:
                log.warning("%s step %d: every sample infeasible, skipping", phase, step)
                continue
            val = float(loss.data)
            if not math.isfinite(val):
                raise ag.NumericError(f"{phase} step {step}: loss is {val}")
            ag.backward(loss)
            gnorm = opt.step(bundle.params, lr)
            rec = {"phase": phase, "step": step, "lr": lr, "loss": round(val, 6), "grad_norm": round(gnorm, 6)}
            if cfg.eval_every and eval_samples and (step % cfg.eval_every == 0 or step == cfg.steps):
                rec.update(_eval(phase, bundle, eval_samples[:cfg.eval_samples], cfg))
                key = rec.get("eval_wer", rec.get("eval_loss"))
                if best is None or key < best:
                    best = key
                    bundle.save(out, "best")
            if step % cfg.log_every == 0 or "eval_wer" in rec or "eval_loss" in rec or step == end:
                logf.write(json.dumps(rec, sort_keys=True) + "\n")
                logf.flush()
            if cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                _save_state(out, bundle, opt, step, phase, seed)
    if bundle.params.checksum(frozen) != frozen_sum:
        raise RuntimeError(f"{phase}: frozen parameters changed during training")
    _save_state(out, bundle, opt, step, phase, seed)
    if step >= cfg.steps:
        bundle.save(out, "bundle")
    return {"phase": phase, "step": step, "checksum": bundle.params.checksum(), "best": best}


def _truncate_log(path: Path, step: int):
    """Drop log records past ``step`` so a resumed run rewrites them identically."""
    if not path.exists():
        return
    keep = [ln for ln in path.read_text().splitlines() if json.loads(ln)["step"] <= step]
    path.write_text("".join(ln + "\n" for ln in keep))
