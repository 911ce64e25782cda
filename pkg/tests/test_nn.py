import numpy as np
import pytest

from ctxasr import autograd as ag
from ctxasr.nn import (AttentionConfig, LoraConfig, MaskScheme, build_mask, conformer_block, downsample_block,
                       downsampled_length, init_attention, init_conformer_block, init_downsample, init_linear,
                       init_lora, lora_linear, lora_param_count, mha_forward, rope_apply)
from ctxasr.params import ParamStore
from gradcheck import check_grads

pytestmark = pytest.mark.usefixtures("f64")


def weighted(y, w):
    return ag.sum(ag.mul(y, w))


# ---------------------------------------------------------------- rotary embeddings

def test_rope_position_zero_is_identity(rng):
    x = ag.Tensor(rng.normal(size=(1, 2, 8)))
    np.testing.assert_array_equal(rope_apply(x, [0]).data, x.data)


def test_rope_scores_depend_on_offset_only(rng):
    q = rng.normal(size=(1, 1, 8))
    k = rng.normal(size=(1, 1, 8))

    def score(m, n):
        a = rope_apply(ag.Tensor(q), [m]).data.ravel()
        b = rope_apply(ag.Tensor(k), [n]).data.ravel()
        return a @ b

    assert score(3, 1) == pytest.approx(score(10, 8), abs=1e-12)
    assert score(7, 7) == pytest.approx(score(0, 0), abs=1e-12)


def test_rope_preserves_norm(rng):
    x = ag.Tensor(rng.normal(size=(5, 2, 6)))
    y = rope_apply(x, np.arange(5) * 13)
    np.testing.assert_allclose(np.linalg.norm(y.data, axis=-1), np.linalg.norm(x.data, axis=-1), atol=1e-12)


def test_rope_odd_head_dim_rejected(rng):
    with pytest.raises(ValueError):
        rope_apply(ag.Tensor(rng.normal(size=(2, 1, 5))), [0, 1])


# ---------------------------------------------------------------- masks

def test_causal_mask_shape():
    m = build_mask(MaskScheme("causal"), 3)
    np.testing.assert_array_equal(m, np.tril(np.ones((3, 3), dtype=bool)))


def test_prefix_full_mask_blocks():
    m = build_mask(MaskScheme("prefix_full", 2), 4)
    expect = np.array([[1, 1, 0, 0], [1, 1, 0, 0], [1, 1, 1, 0], [1, 1, 1, 1]], dtype=bool)
    np.testing.assert_array_equal(m, expect)


def test_prefix_zero_equals_causal():
    for n in (1, 4, 17):
        np.testing.assert_array_equal(build_mask(MaskScheme("prefix_full", 0), n), build_mask(MaskScheme("causal"), n))


def test_mask_errors():
    with pytest.raises(ValueError):
        MaskScheme("bidirectional")
    with pytest.raises(ValueError):
        build_mask(MaskScheme("prefix_full", 5), 3)
    with pytest.raises(ValueError):
        build_mask(MaskScheme("causal"), 0)


def _attn(rng, d=16, heads=4, lora=None):
    p = ParamStore()
    init_attention(p, "a", d, rng, lora=lora)
    return p, AttentionConfig(d, heads)


@pytest.mark.parametrize("n", [4, 17, 64])
def test_attention_leakage(n, rng):
    p, cfg = _attn(rng)
    x = rng.normal(size=(n, 16))
    for scheme in (MaskScheme("causal"), MaskScheme("prefix_full", n // 2)):
        mask = build_mask(scheme, n)
        base = mha_forward(ag.Tensor(x), cfg, p, "a", mask=mask).data
        for j in range(n):
            x2 = x.copy()
            x2[j] += rng.normal(size=16)
            y = mha_forward(ag.Tensor(x2), cfg, p, "a", mask=mask).data
            unaffected = ~mask[:, j]
            assert np.max(np.abs(y[unaffected] - base[unaffected]), initial=0.0) < 1e-6
            # positions that may see j do react
            assert np.max(np.abs(y[mask[:, j]] - base[mask[:, j]])) > 1e-6


def test_attention_key_mask_ignores_padding(rng):
    p, cfg = _attn(rng)
    x = rng.normal(size=(2, 6, 16))
    km = np.array([[1, 1, 1, 1, 0, 0], [1] * 6], dtype=bool)
    y = mha_forward(ag.Tensor(x), cfg, p, "a", key_mask=km).data
    x[0, 4:] = 99.0
    y2 = mha_forward(ag.Tensor(x), cfg, p, "a", key_mask=km).data
    np.testing.assert_array_equal(y[0, :4], y2[0, :4])


def test_cross_attention_rejects_square_mask(rng):
    p, cfg = _attn(rng)
    x = ag.Tensor(rng.normal(size=(3, 16)))
    src = ag.Tensor(rng.normal(size=(5, 16)))
    assert mha_forward(x, cfg, p, "a", kv_source=src).shape == (3, 16)
    with pytest.raises(ValueError):
        mha_forward(x, cfg, p, "a", mask=np.ones((3, 5), bool), kv_source=src)


# ---------------------------------------------------------------- LoRA

def test_lora_zero_b_is_bitwise_base(rng):
    p = ParamStore()
    cfg = LoraConfig(rank=4)
    init_linear(p, "l", 6, 5, rng)
    init_lora(p, "l", 6, 5, cfg, rng)
    x = ag.Tensor(rng.normal(size=(3, 5)))
    base = ag.linear(x, p["l.w"], p["l.b"]).data
    y = lora_linear(x, p["l.w"], p["l.lora_a"], p["l.lora_b"], cfg, bias=p["l.b"]).data
    assert y.tobytes() == base.tobytes()


def test_lora_adds_scaled_low_rank_update(rng):
    cfg = LoraConfig(rank=2, scaling=0.05)
    W, A, B = rng.normal(size=(4, 3)), rng.normal(size=(2, 3)), rng.normal(size=(4, 2))
    x = rng.normal(size=(5, 3))
    y = lora_linear(ag.Tensor(x), ag.Tensor(W), ag.Tensor(A), ag.Tensor(B), cfg).data
    np.testing.assert_allclose(y, x @ W.T + 0.05 * x @ A.T @ B.T, atol=1e-12)


def test_lora_rank_mismatch(rng):
    with pytest.raises(ag.ShapeError):
        lora_linear(ag.Tensor(np.ones((1, 3))), ag.Tensor(np.ones((4, 3))), ag.Tensor(np.ones((2, 3))),
                    ag.Tensor(np.ones((4, 3))), LoraConfig(rank=2))


def test_lora_config_validation():
    with pytest.raises(ValueError):
        LoraConfig(rank=0)
    with pytest.raises(ValueError):
        LoraConfig(dropout_rate=1.0)
    with pytest.raises(ValueError):
        LoraConfig(target_projections=("q", "z"))


def test_lora_count_formula():
    assert lora_param_count(32, 4096, 32) == 33_554_432
    p = ParamStore()
    cfg = LoraConfig(rank=3)
    rng = np.random.default_rng(0)
    for i in range(2):
        init_attention(p, f"l{i}", 8, rng, lora=cfg)
    assert p.count(True, "") - 2 * 4 * (8 * 8 + 8) == lora_param_count(2, 8, 3)


def test_mha_with_lora_gradients(rng):
    cfg = LoraConfig(rank=2, dropout_rate=0.0)
    p, acfg = _attn(rng, lora=cfg)
    for n in p.names:
        if n.endswith("lora_b"):
            p[n].data[:] = rng.normal(size=p[n].shape)
    x = ag.Tensor(rng.normal(size=(2, 5, 16)), requires_grad=True)
    mask = build_mask(MaskScheme("prefix_full", 2), 5)
    w = rng.normal(size=(2, 5, 16))
    params = [x] + [t for _, t in p.trainable()]
    err = check_grads(lambda: weighted(mha_forward(x, acfg, p, "a", mask=mask, lora=cfg), w), params, probes=40)
    assert err < 1e-4


# ---------------------------------------------------------------- conformer and downsampling

def test_conformer_gradients_and_shape(rng):
    p = ParamStore()
    init_conformer_block(p, "c", 8, 3, rng)
    cfg = AttentionConfig(8, 2)
    x = ag.Tensor(rng.normal(size=(2, 7, 8)), requires_grad=True)
    y = conformer_block(x, p, "c", cfg, 3, lengths=[7, 4])
    assert y.shape == (2, 7, 8)
    w = rng.normal(size=(2, 7, 8))
    params = [x] + [t for _, t in p.trainable()]
    err = check_grads(lambda: weighted(conformer_block(x, p, "c", cfg, 3, lengths=[7, 4]), w), params, probes=40)
    assert err < 1e-4


def test_conformer_padding_does_not_leak(rng):
    p = ParamStore()
    init_conformer_block(p, "c", 8, 3, rng)
    cfg = AttentionConfig(8, 2)
    x = rng.normal(size=(1, 9, 8))
    y = conformer_block(ag.Tensor(x), p, "c", cfg, 3, lengths=[5]).data
    x[0, 5:] = rng.normal(size=(4, 8)) * 50
    y2 = conformer_block(ag.Tensor(x), p, "c", cfg, 3, lengths=[5]).data
    np.testing.assert_allclose(y[0, :5], y2[0, :5], atol=1e-12)


def test_conformer_even_kernel_rejected(rng):
    with pytest.raises(ValueError):
        init_conformer_block(ParamStore(), "c", 8, 4, rng)


def test_downsample_lengths(rng):
    p = ParamStore()
    init_downsample(p, "d", 3, 4, rng)
    y, n = downsample_block(ag.Tensor(rng.normal(size=(2, 9, 3))), p, "d", lengths=[9, 4])
    assert y.shape == (2, 5, 4)
    assert list(n) == [5, 2]
    assert np.all(y.data[1, 2:] == 0)
    assert downsampled_length(33, 5) == 2
    assert downsampled_length(320, 5) == 10
    assert downsampled_length(1, 5) == 1
