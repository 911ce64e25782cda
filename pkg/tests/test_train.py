import json
import math

import numpy as np
import pytest

from ctxasr import autograd as ag
from ctxasr import recipes as R
from ctxasr.config import ExperimentConfig
from ctxasr.corpus import CorpusConfig, generate_corpus
from ctxasr.decoder import DecoderConfig
from ctxasr.encoder import EncoderConfig
from ctxasr.nn import LoraConfig
from ctxasr.params import ParamStore
from ctxasr.train import (Adam, OptimizerConfig, PhaseConfig, ScheduleConfig, adam_step, copy_stream, lm_sequence,
                          lr_at)
from ctxasr.tokenizer import BOS, EOS, detokenize

pytestmark = pytest.mark.usefixtures("f64")


# ---------------------------------------------------------------- schedule

def test_lr_schedule_endpoints():
    cfg = ScheduleConfig(5e-4, 1e-5, 200, 4000)
    assert lr_at(0, cfg) == 0
    assert lr_at(200, cfg) == pytest.approx(5e-4)
    assert lr_at(4000, cfg) == pytest.approx(1e-5)
    assert lr_at(100, cfg) == pytest.approx(2.5e-4)


def test_lr_schedule_shape():
    cfg = ScheduleConfig(5e-4, 1e-5, 200, 4000)
    lrs = np.array([lr_at(s, cfg) for s in range(4001)])
    assert np.all(np.diff(lrs[:201]) > 0) and np.all(np.diff(lrs[200:]) < 0)
    # geometric decay: constant ratio between consecutive steps
    r = lrs[201:] / lrs[200:-1]
    np.testing.assert_allclose(r, r[0], rtol=1e-9)
    assert lr_at(200, cfg) == pytest.approx(cfg.peak_lr * (cfg.floor_lr / cfg.peak_lr) ** 0)


def test_schedule_validation():
    with pytest.raises(ValueError):
        ScheduleConfig(1e-5, 5e-4, 10, 100)
    with pytest.raises(ValueError):
        ScheduleConfig(5e-4, 1e-5, 100, 100)
    with pytest.raises(ValueError):
        lr_at(-1, ScheduleConfig())
    with pytest.raises(ValueError):
        OptimizerConfig(beta1=1.0)


# ---------------------------------------------------------------- optimizer

def _store(x, frozen=None):
    p = ParamStore()
    p.add("x", np.array(x, dtype=np.float64))
    if frozen is not None:
        p.add("f", np.array(frozen, dtype=np.float64), trainable=False)
    return p


def test_zero_grad_only_weight_decay():
    p = _store([1.0, -2.0])
    p["x"].grad = np.zeros(2)
    Adam(OptimizerConfig(weight_decay=0.1)).step(p, 0.5)
    np.testing.assert_allclose(p["x"].data, np.array([1.0, -2.0]) * (1 - 0.5 * 0.1), rtol=1e-12)


def test_clipping_scales_gradient():
    cfg = OptimizerConfig(weight_decay=0.0)
    a, b = _store([0.0, 0.0]), _store([0.0, 0.0])
    a["x"].grad = np.array([6.0, 8.0])        # norm 10
    b["x"].grad = np.array([0.6, 0.8])
    oa, ob = Adam(cfg), Adam(cfg)
    assert oa.step(a, 0.1) == pytest.approx(10.0)
    ob.step(b, 0.1)
    np.testing.assert_allclose(oa.m["x"], ob.m["x"], rtol=1e-10)
    np.testing.assert_allclose(oa.v["x"], ob.v["x"], rtol=1e-10)


def test_first_adam_step_is_signed_lr():
    p = _store([1.0, 1.0, 1.0])
    p["x"].grad = np.array([0.3, -0.02, 0.0])
    Adam(OptimizerConfig(weight_decay=0.0, eps=0.0 + 1e-30)).step(p, 0.01)
    np.testing.assert_allclose(p["x"].data, [0.99, 1.01, 1.0], atol=1e-12)


def test_quadratic_bowl_converges():
    p = _store([1.0])
    opt = Adam(OptimizerConfig(weight_decay=0.0))
    for _ in range(500):
        p["x"].grad = 2 * p["x"].data
        adam_step(p, opt, 0.05)
    assert abs(p["x"].data[0]) < 1e-3


def test_frozen_untouched_and_nan_rejected():
    p = _store([1.0], frozen=[3.0])
    p["x"].grad = np.array([1.0])
    p["f"].grad = np.array([1.0])
    Adam(OptimizerConfig()).step(p, 0.1)
    assert p["f"].data[0] == 3.0
    p["x"].grad = np.array([np.nan])
    before = p["x"].data.copy()
    with pytest.raises(ag.NumericError):
        Adam(OptimizerConfig()).step(p, 0.1)
    np.testing.assert_array_equal(p["x"].data, before)


def test_optimizer_state_round_trip():
    p = _store([1.0, 2.0])
    opt = Adam(OptimizerConfig())
    p["x"].grad = np.array([0.5, -1.0])
    opt.step(p, 0.1)
    other = Adam(OptimizerConfig())
    other.load(opt.state())
    assert other.t == 1
    np.testing.assert_array_equal(other.m["x"], opt.m["x"])


# ---------------------------------------------------------------- LM sequences

class _S:
    transcript = "the cat"
    transcript_tokens = [int(i) for i in np.frombuffer(b"", dtype=np.int64)]
    context = None


def test_copy_stream_stretches_uppercase():
    rng = np.random.default_rng(0)
    s = detokenize(copy_stream("ab c", rng))
    assert s.replace("AA", "A").replace("BB", "B").replace("CC", "C").replace("  ", " ") == "AB C"
    assert 4 <= len(s) <= 8


def test_lm_sequence_layouts():
    from ctxasr.tokenizer import tokenize
    s = _S()
    s.transcript_tokens = tokenize("the cat")
    assert lm_sequence(s, mode="infer") == [BOS] + s.transcript_tokens + [EOS]
    rng = np.random.default_rng(1)
    seq = lm_sequence(s, rng, copy_fraction=1.0)
    stream = detokenize(seq[1:-1 - len(s.transcript_tokens)])
    assert stream.isupper() and seq[-1] == EOS


# ---------------------------------------------------------------- phase loop

TINY = ExperimentConfig(
    seed=3,
    corpus=CorpusConfig(n_train=16, n_eval=4, n_lm=16, frames_per_char=(6, 8)),
    encoder=EncoderConfig(hidden_dim=8, num_conformer_blocks=1, num_heads=2, conv_kernel=3, decoder_dim=8),
    decoder=DecoderConfig(model_dim=8, num_layers=1, num_heads=2, ff_dim=16, lora=LoraConfig(rank=2)),
    ctc=PhaseConfig(steps=4, batch_size=2, warmup_steps=1, log_every=1),
    lm=PhaseConfig(steps=4, batch_size=4, warmup_steps=1, log_every=1, augment=False, copy_fraction=0.5),
    finetune=PhaseConfig(steps=6, batch_size=2, warmup_steps=2, log_every=1),
)


@pytest.fixture(scope="module")
def tiny():
    lex, sp = generate_corpus(TINY.corpus, TINY.seed)
    return lex, sp


@pytest.fixture(scope="module")
def pretrained(tiny, tmp_path_factory):
    _, sp = tiny
    d = tmp_path_factory.mktemp("pre")
    ctc = R.pretrain_ctc(TINY, sp, d / "ctc")
    lm = R.base_pretrain(TINY, sp, d / "lm")
    return ctc, lm


def test_lm_pretrain_freezes_decoder(pretrained):
    _, lm = pretrained
    assert lm.params.trainable_names == set()
    assert math.isfinite(lm.meta["heldout_loss"])


def test_finetune_deterministic(tiny, pretrained, tmp_path):
    _, sp = tiny
    ctc, lm = pretrained
    a = R.finetune(TINY, sp, ctc, lm, tmp_path / "a")
    b = R.finetune(TINY, sp, ctc, lm, tmp_path / "b")
    assert a.params.checksum() == b.params.checksum()
    assert (tmp_path / "a/metrics.jsonl").read_bytes() == (tmp_path / "b/metrics.jsonl").read_bytes()
    assert (tmp_path / "a/bundle.ckpt").read_bytes() == (tmp_path / "b/bundle.ckpt").read_bytes()


def test_finetune_resume_matches(tiny, pretrained, tmp_path):
    _, sp = tiny
    ctc, lm = pretrained
    full = R.finetune(TINY, sp, ctc, lm, tmp_path / "full")
    part = R.finetune(TINY, sp, ctc, lm, tmp_path / "part", stop_at=3)
    assert not (tmp_path / "part/bundle.json").exists()
    resumed = R.finetune(TINY, sp, ctc, lm, tmp_path / "part")
    for n in full.params.names:
        np.testing.assert_allclose(resumed.params[n].data, full.params[n].data, atol=1e-7, rtol=0)
    steps = [json.loads(x)["step"] for x in (tmp_path / "part/metrics.jsonl").read_text().splitlines()]
    assert steps == list(range(1, 7))


def test_finetune_keeps_base_frozen(tiny, pretrained, tmp_path):
    _, sp = tiny
    ctc, lm = pretrained
    ft = R.finetune(TINY, sp, ctc, lm, tmp_path / "ft")
    for n in lm.params.names:
        assert ft.params[n].data.tobytes() == lm.params[n].data.tobytes()
        assert n in ft.params.frozen_names


def test_finetune_rejects_mismatched_checkpoint(tiny, pretrained, tmp_path):
    from dataclasses import replace
    _, sp = tiny
    ctc, lm = pretrained
    other = replace(TINY, decoder=replace(TINY.decoder, ff_dim=32))
    with pytest.raises(ValueError, match="ff_dim"):
        R.finetune(other, sp, ctc, lm, tmp_path / "x")
