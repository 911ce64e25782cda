"""Encoder, decoder and prompt pipeline on small random models."""
import numpy as np
import pytest

from ctxasr import autograd as ag
from ctxasr.decoder import (DecoderConfig, ModelBundle, decoder_forward, embed_tokens, greedy_generate,
                            init_adapters, init_decoder_base)
from ctxasr.encoder import EncoderConfig, encode, encoded_length, init_encoder
from ctxasr.nn import LoraConfig, MaskScheme
from ctxasr.params import ParamStore
from ctxasr.pipeline import (NO_LABEL, SRC_AUDIO, SRC_BOS, SRC_CONTEXT, assemble_prompt, batch_loss,
                             crop_context, prompt_embeddings, sequence_loss, transcribe, transcribe_batch)
from ctxasr.tokenizer import EOS, VOCAB_SIZE, tokenize
from gradcheck import check_grads

pytestmark = pytest.mark.usefixtures("f64")

ENC = EncoderConfig(feat_dim=4, hidden_dim=8, num_conformer_blocks=1, num_heads=2, conv_kernel=3, decoder_dim=8)


def make_bundle(variant="decoder_only", seed=0, rank=2, layers=2, lora_b=0.0):
    rng = np.random.default_rng(seed)
    dec = DecoderConfig(model_dim=8, num_layers=layers, num_heads=2, ff_dim=16,
                        lora=LoraConfig(rank=rank, dropout_rate=0.0), variant=variant)
    p = ParamStore()
    init_encoder(p, ENC, rng, ctc_head=False)
    init_decoder_base(p, dec, rng)
    p.freeze_prefix("decoder.")
    init_adapters(p, dec, rng)
    if lora_b:
        for n in p.names:
            if n.endswith("lora_b") or ".xattn.o." in n:
                p[n].data[:] = rng.normal(0.0, lora_b, p[n].shape)
    return ModelBundle(p, ENC, dec)


# ---------------------------------------------------------------- encoder

@pytest.mark.parametrize("T,expect", [(320, 10), (1, 1), (33, 2)])
def test_encode_lengths(T, expect):
    b = make_bundle()
    emb, lens = encode(b.params, ENC, [np.zeros((T, 4))])
    assert emb.shape == (1, expect, 8) and lens[0] == expect


def test_encode_length_is_pure_function_of_T():
    b = make_bundle()
    Ts = [1, 2, 31, 64, 65, 200, 400]
    emb, lens = encode(b.params, ENC, [np.ones((t, 4)) for t in Ts])
    assert list(lens) == [encoded_length(t, ENC) for t in Ts]
    assert np.all(np.isfinite(emb.data))


def test_encode_batch_matches_single():
    b = make_bundle()
    rng = np.random.default_rng(1)
    feats = [rng.normal(size=(t, 4)) for t in (40, 17)]
    emb, lens = encode(b.params, ENC, feats)
    one, _ = encode(b.params, ENC, [feats[1]])
    np.testing.assert_allclose(emb.data[1, :lens[1]], one.data[0], atol=1e-10)


def test_encode_feat_dim_mismatch():
    with pytest.raises(ag.ShapeError):
        encode(make_bundle().params, ENC, [np.zeros((5, 3))])


# ---------------------------------------------------------------- decoder

def test_single_position_depends_only_on_itself():
    b = make_bundle(lora_b=0.5)
    x = np.random.default_rng(2).normal(size=(1, 8))
    a = decoder_forward(b.params, b.dec_cfg, ag.Tensor(x), MaskScheme("causal")).data
    xx = np.vstack([x, np.ones((3, 8))])
    c = decoder_forward(b.params, b.dec_cfg, ag.Tensor(xx), MaskScheme("causal")).data
    np.testing.assert_allclose(a[0], c[0], atol=1e-12)


@pytest.mark.parametrize("n", [4, 17, 64])
def test_decoder_causal_leakage(n):
    b = make_bundle(lora_b=0.5)
    rng = np.random.default_rng(n)
    x = rng.normal(size=(n, 8))
    base = decoder_forward(b.params, b.dec_cfg, ag.Tensor(x), MaskScheme("causal")).data
    x[-1] += 3.0
    pert = decoder_forward(b.params, b.dec_cfg, ag.Tensor(x), MaskScheme("causal")).data
    assert np.max(np.abs(pert[:-1] - base[:-1])) < 1e-6
    assert np.max(np.abs(pert[-1] - base[-1])) > 1e-6


@pytest.mark.parametrize("n", [4, 17, 64])
def test_decoder_prefix_leakage(n):
    b = make_bundle(lora_b=0.5)
    rng = np.random.default_rng(n + 1)
    P = n // 2
    x = rng.normal(size=(n, 8))
    scheme = MaskScheme("prefix_full", P)
    base = decoder_forward(b.params, b.dec_cfg, ag.Tensor(x), scheme).data
    # a late prefix position is visible to the whole prefix
    x2 = x.copy()
    x2[P - 1] += 3.0
    pert = decoder_forward(b.params, b.dec_cfg, ag.Tensor(x2), scheme).data
    assert np.max(np.abs(pert[:P - 1] - base[:P - 1])) > 1e-6
    # a suffix position is invisible to everything before it
    x3 = x.copy()
    x3[P] += 3.0
    pert = decoder_forward(b.params, b.dec_cfg, ag.Tensor(x3), scheme).data
    assert np.max(np.abs(pert[:P] - base[:P])) < 1e-6
    zero = decoder_forward(b.params, b.dec_cfg, ag.Tensor(x), MaskScheme("prefix_full", 0)).data
    causal = decoder_forward(b.params, b.dec_cfg, ag.Tensor(x), MaskScheme("causal")).data
    assert zero.tobytes() == causal.tobytes()


def test_zero_adapters_equal_frozen_base():
    b = make_bundle()
    x = ag.Tensor(np.random.default_rng(3).normal(size=(2, 6, 8)))
    with_lora = decoder_forward(b.params, b.dec_cfg, x, MaskScheme("causal")).data
    base = decoder_forward(b.params, b.dec_cfg, x, MaskScheme("causal"), use_lora=False).data
    assert with_lora.tobytes() == base.tobytes()


def test_variant_argument_contract():
    x = ag.Tensor(np.zeros((3, 8)))
    b = make_bundle("decoder_only")
    with pytest.raises(ValueError):
        decoder_forward(b.params, b.dec_cfg, x, MaskScheme("causal"), encoder_out=ag.Tensor(np.zeros((2, 8))))
    e = make_bundle("encoder_decoder")
    with pytest.raises(ValueError):
        decoder_forward(e.params, e.dec_cfg, x, MaskScheme("causal"))
    with pytest.raises(ValueError):
        decoder_forward(e.params, e.dec_cfg, x, MaskScheme("causal"), encoder_out=ag.Tensor(np.zeros((0, 8))))
    y = decoder_forward(e.params, e.dec_cfg, x, MaskScheme("causal"), encoder_out=ag.Tensor(np.ones((2, 8))))
    assert y.shape == (3, VOCAB_SIZE)


def test_cross_attention_starts_as_identity():
    e = make_bundle("encoder_decoder")
    d = make_bundle("decoder_only")
    x = ag.Tensor(np.random.default_rng(4).normal(size=(4, 8)))
    enc = ag.Tensor(np.random.default_rng(5).normal(size=(3, 8)))
    a = decoder_forward(e.params, e.dec_cfg, x, MaskScheme("causal"), encoder_out=enc).data
    c = decoder_forward(d.params, d.dec_cfg, x, MaskScheme("causal")).data
    np.testing.assert_array_equal(a, c)


def test_greedy_eos_head_gives_empty():
    b = make_bundle()
    # silence every residual branch so the final features equal the normalized prompt row
    for n in b.params.names:
        if n.endswith((".attn.o.w", ".ff.down.w")):
            b.params[n].data[:] = 0.0
    head = b.params["decoder.head.w"].data
    head[:] = 0.0
    head[EOS] = 1.0
    out = greedy_generate(b.params, b.dec_cfg, [np.ones((3, 8)), np.ones((1, 8))], 5, MaskScheme("causal"))
    assert out == [[], []]


def test_greedy_deterministic_and_cache_consistent():
    for variant in ("decoder_only", "encoder_decoder"):
        b = make_bundle(variant, lora_b=0.5)
        rng = np.random.default_rng(6)
        prompts = [rng.normal(size=(n, 8)) for n in (3, 7, 5)]
        schemes = [MaskScheme("prefix_full", len(q)) for q in prompts]
        kw = {}
        if variant == "encoder_decoder":
            kw = dict(encoder_out=ag.Tensor(rng.normal(size=(3, 4, 8))), encoder_lengths=np.array([4, 2, 3]))
        a = greedy_generate(b.params, b.dec_cfg, prompts, 9, schemes, **kw)
        c = greedy_generate(b.params, b.dec_cfg, prompts, 9, schemes, **kw)
        u = greedy_generate(b.params, b.dec_cfg, prompts, 9, schemes, use_cache=False, **kw)
        assert a == c == u


def test_greedy_rejects_zero_budget():
    b = make_bundle()
    with pytest.raises(ValueError):
        greedy_generate(b.params, b.dec_cfg, [np.ones((2, 8))], 0, MaskScheme("causal"))


def test_bundle_round_trip(tmp_path):
    b = make_bundle(lora_b=0.3)
    b.save(tmp_path)
    c = ModelBundle.load(tmp_path)
    assert c.params.checksum() == b.params.checksum()
    assert c.params.frozen_names == b.params.frozen_names
    assert c.dec_cfg == b.dec_cfg and c.enc_cfg == b.enc_cfg


def test_bundle_refuses_foreign_tokenizer(tmp_path):
    b = make_bundle()
    b.tok_hash = "0" * 16
    b.save(tmp_path)
    with pytest.raises(ValueError, match="tokenizer hash"):
        ModelBundle.load(tmp_path)


def test_bundle_trainable_partition():
    b = make_bundle("encoder_decoder")
    tr, fr = b.params.trainable_names, b.params.frozen_names
    assert not tr & fr
    assert all(n.startswith("decoder.") for n in fr)
    assert all(n.startswith("encoder.") or ".lora_" in n or ".xattn" in n for n in tr)


# ---------------------------------------------------------------- prompt assembly

def test_crop_context_modes():
    t = list(range(80))
    assert crop_context(t[:30], 50, "train", np.random.default_rng(0)) == t[:30]
    assert crop_context(t[:30], 50, "infer") == t[:30]
    assert crop_context(t, 50, "infer") == t[30:]
    w = crop_context(t, 50, "train", np.random.default_rng(0))
    assert len(w) == 50 and w == t[w[0]:w[0] + 50] and 0 <= w[0] <= 30
    with pytest.raises(ValueError):
        crop_context(t, 0)


def test_crop_context_uniform_starts():
    rng = np.random.default_rng(42)
    t = list(range(80))
    starts = np.array([crop_context(t, 50, "train", rng)[0] for _ in range(10_000)])
    counts = np.bincount(starts, minlength=31)
    assert len(counts) == 31
    expected = len(starts) / 31
    chi2 = float(((counts - expected) ** 2 / expected).sum())
    # 30 degrees of freedom: the 0.999 quantile is about 59.7
    assert chi2 < 59.7


def test_assemble_prompt_layout():
    q = assemble_prompt(list(range(3, 8)), 10, list(range(10, 17)), "train")
    assert q.length == 24
    assert q.loss_mask.sum() == 8
    assert q.prefix_len == 16
    assert list(q.sources[:7]) == [SRC_CONTEXT] * 5 + [SRC_BOS, SRC_AUDIO]
    # labels exist exactly where the next position is a spoken token or eos
    assert (q.labels != NO_LABEL).sum() == 8
    assert q.labels[15] == 10 and q.labels[22] == EOS


def test_assemble_prompt_edge_cases():
    q = assemble_prompt(None, 4, mode="infer")
    assert q.prefix_len == 5 and q.length == 5
    assert assemble_prompt(list(range(80)), 3, mode="infer").n_context == 50
    with pytest.raises(ValueError):
        assemble_prompt(None, 0, [5], "train")
    with pytest.raises(ValueError):
        assemble_prompt(None, 3, [5], "infer")
    with pytest.raises(ValueError):
        assemble_prompt(None, 3, [], "train")


def _audio(b, rng, T=40):
    feats = [rng.normal(size=(T, 4))]
    emb, lens = encode(b.params, ENC, feats)
    return feats, emb, lens


def test_loss_averages_only_transcript_and_eos_targets():
    b = make_bundle(lora_b=0.3)
    rng = np.random.default_rng(7)
    _, emb, lens = _audio(b, rng)
    ctx, tr = tokenize("some context"), tokenize("hi there")
    q = assemble_prompt(ctx, int(lens[0]), tr, "train")
    loss = sequence_loss(b, q, ag.reshape(emb, emb.shape[1:])).item()
    x = prompt_embeddings(b, [q], emb)
    logits = decoder_forward(b.params, b.dec_cfg, x, q.scheme("causal")).data[0]
    logp = logits - np.log(np.exp(logits).sum(-1, keepdims=True))
    rows = np.flatnonzero(q.target_weights)
    assert len(rows) == len(tr) + 1
    assert list(q.labels[rows]) == tr + [EOS]
    assert loss == pytest.approx(-logp[rows, q.labels[rows]].mean(), rel=1e-10)


def test_loss_ignores_labels_at_context_and_audio_positions():
    b = make_bundle(lora_b=0.3)
    rng = np.random.default_rng(17)
    _, emb, lens = _audio(b, rng)
    q = assemble_prompt(tokenize("some context"), int(lens[0]), tokenize("hi there"), "train")
    audio = ag.reshape(emb, emb.shape[1:])
    base = sequence_loss(b, q, audio).data
    masked = q.target_weights == 0
    for _ in range(3):
        q.labels[masked] = rng.integers(0, VOCAB_SIZE, masked.sum())
        assert sequence_loss(b, q, audio).data.tobytes() == base.tobytes()


def test_uniform_logits_give_log_vocab():
    b = make_bundle()
    b.params["decoder.head.w"].data[:] = 0.0
    rng = np.random.default_rng(8)
    _, emb, lens = _audio(b, rng)
    q = assemble_prompt(None, int(lens[0]), tokenize("abc"), "train")
    assert sequence_loss(b, q, ag.reshape(emb, emb.shape[1:])).item() == pytest.approx(np.log(VOCAB_SIZE))


def test_sequence_loss_gradients():
    b = make_bundle(lora_b=0.3)
    rng = np.random.default_rng(9)
    feats = [rng.normal(size=(40, 4))]
    q = assemble_prompt(tokenize("ctx"), encoded_length(40, ENC), tokenize("ab"), "train")

    def f():
        emb, lens = encode(b.params, ENC, feats)
        return batch_loss(b, [q], emb, lens, "prefix_full")

    params = [t for _, t in b.params.trainable()]
    assert check_grads(f, params, probes=20, rng=np.random.default_rng(1)) < 1e-3


def test_context_embeddings_receive_gradient():
    b = make_bundle(lora_b=0.3)
    rng = np.random.default_rng(10)
    _, emb, lens = _audio(b, rng)
    q = assemble_prompt(tokenize("xy"), int(lens[0]), tokenize("ab"), "train")
    table = b.params["decoder.embed"]
    table.requires_grad = True
    try:
        loss = sequence_loss(b, q, ag.reshape(emb, emb.shape[1:]))
        ag.backward(loss)
        ctx_ids = q.token_ids[q.sources == SRC_CONTEXT]
        assert np.abs(table.grad[ctx_ids]).sum() > 0
    finally:
        table.requires_grad = False
        table.grad = None


def test_prompt_embeddings_place_audio_rows():
    b = make_bundle()
    rng = np.random.default_rng(11)
    _, emb, lens = _audio(b, rng)
    q = assemble_prompt(tokenize("ab"), int(lens[0]), mode="infer")
    E = prompt_embeddings(b, [q], emb).data[0]
    np.testing.assert_array_equal(E[3:], emb.data[0])
    np.testing.assert_array_equal(E[:2], b.params["decoder.embed"].data[tokenize("ab")])


def test_transcribe_contracts():
    b = make_bundle(lora_b=0.3)
    rng = np.random.default_rng(12)
    feats = rng.normal(size=(50, 4))
    a = transcribe(b, feats, None)
    assert a == transcribe(b, feats, "")
    assert a == transcribe(b, feats, None)
    many = transcribe_batch(b, [feats, feats[:20]], [None, "ctx words"])
    assert many[0] == a


def test_lora_training_touches_only_trainable():
    b = make_bundle()
    frozen = sorted(b.params.frozen_names)
    before = b.params.checksum(frozen)
    rng = np.random.default_rng(13)
    _, emb, lens = _audio(b, rng)
    q = assemble_prompt(None, int(lens[0]), tokenize("ab"), "train")
    ag.backward(sequence_loss(b, q, ag.reshape(emb, emb.shape[1:])))
    for n in frozen:
        assert b.params[n].grad is None
    assert b.params.checksum(frozen) == before
    assert embed_tokens(b.params, [1]).shape == (1, 8)
