import numpy as np
import pytest

from smoothrot import (
    AttentionBlock,
    FfnBlock,
    ForwardTrace,
    KvCache,
    ModelConfig,
    OrthogonalTransform,
    QuantConfig,
    QuantSpec,
    Rng,
    attention_forward,
    build_model,
    ffn_forward,
    fuse_rmsnorm,
    load_model,
    model_forward,
    random_hadamard,
    rel_inf_error,
    rotate_model,
    save_model,
)
from conftest import make_model, make_spiked_model, make_tokens


# ---------------------------------------------------------------------------
# FFN forward
# ---------------------------------------------------------------------------


def test_zero_input_gives_zero_output():
    block = FfnBlock(
        w_gate=Rng(0).normal((4, 8)),
        w_up=Rng(1).normal((4, 8)),
        w_down=Rng(2).normal((8, 4)),
    )
    out = ffn_forward(block, np.zeros((3, 4), dtype=np.float32))
    assert np.array_equal(out, np.zeros((3, 4), dtype=np.float32))


def test_hand_computed_single_token():
    # d = m = 2, identity-like weights, one token [1, 2]:
    # gate = [1, 2], up = [1, 2], z = silu(gate) * up, y = z (identity down)
    eye = np.eye(2, dtype=np.float32)
    block = FfnBlock(w_gate=eye.copy(), w_up=eye.copy(), w_down=eye.copy())
    x = np.array([[1.0, 2.0]], dtype=np.float32)
    silu = lambda v: v / (1.0 + np.exp(-v))
    expected = silu(np.array([1.0, 2.0])) * np.array([1.0, 2.0])
    out = ffn_forward(block, x)
    assert np.allclose(out, expected[None, :], rtol=1e-6)


def test_high_bit_quantization_close_to_float():
    block = FfnBlock(
        w_gate=Rng(0).normal((16, 32), 0.25),
        w_up=Rng(1).normal((16, 32), 0.25),
        w_down=Rng(2).normal((32, 16), 0.18),
    )
    x = Rng(3).normal((20, 16))
    quant = QuantConfig(act_spec=QuantSpec(8, "symmetric", "per-token"))
    out_q = ffn_forward(block, x, quant)
    out_f = ffn_forward(block, x)
    assert rel_inf_error(out_q, out_f) <= 1e-2


def test_ffn_shape_error():
    block = FfnBlock(
        w_gate=np.ones((4, 8), np.float32),
        w_up=np.ones((4, 8), np.float32),
        w_down=np.ones((8, 4), np.float32),
    )
    with pytest.raises(Exception):
        ffn_forward(block, np.ones((3, 5), dtype=np.float32))


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------


def _identity_attention(d=4, heads=2):
    eye = np.eye(d, dtype=np.float32)
    return AttentionBlock(eye.copy(), eye.copy(), eye.copy(), eye.copy(), head_count=heads)


def test_single_token_returns_value_row():
    block = _identity_attention()
    x = np.array([[[0.3, -0.7, 1.1, 0.2]]], dtype=np.float32)
    out = attention_forward(block, x)
    assert np.allclose(out, x, atol=1e-6)  # softmax over one key is 1


def test_kv_quant_high_bits_close_to_float():
    rng = Rng(4)
    d = 32
    block = AttentionBlock(
        rng.normal((d, d), d**-0.5),
        rng.normal((d, d), d**-0.5),
        rng.normal((d, d), d**-0.5),
        rng.normal((d, d), d**-0.5),
        head_count=4,
    )
    x = Rng(5).normal((2, 16, d))
    kv8 = QuantConfig(kv_spec=QuantSpec(8, "asymmetric", "per-group", group_size=d))
    out_q = attention_forward(block, x, kv8)
    out_f = attention_forward(block, x)
    assert rel_inf_error(out_q, out_f) <= 1e-2


def test_kv_quant_disabled_equals_float_exactly():
    rng = Rng(6)
    d = 16
    block = AttentionBlock(
        rng.normal((d, d)), rng.normal((d, d)), rng.normal((d, d)), rng.normal((d, d)),
        head_count=2,
    )
    x = Rng(7).normal((1, 8, d))
    disabled = QuantConfig(act_spec=None, kv_spec=None)
    assert np.array_equal(attention_forward(block, x, disabled), attention_forward(block, x))


def test_incremental_cache_matches_full_pass():
    rng = Rng(8)
    d = 16
    block = AttentionBlock(
        rng.normal((d, d), 0.25), rng.normal((d, d), 0.25),
        rng.normal((d, d), 0.25), rng.normal((d, d), 0.25), head_count=2,
    )
    x = Rng(9).normal((1, 12, d))
    full = attention_forward(block, x)
    cache = KvCache()
    chunks = [attention_forward(block, x[:, :5], cache=cache),
              attention_forward(block, x[:, 5:9], cache=cache),
              attention_forward(block, x[:, 9:], cache=cache)]
    incremental = np.concatenate(chunks, axis=1)
    assert np.allclose(incremental, full, atol=1e-5)
    assert cache.length == 12


def test_head_mismatch_rejected():
    with pytest.raises(Exception):
        AttentionBlock(
            np.ones((6, 6), np.float32), np.ones((6, 6), np.float32),
            np.ones((6, 6), np.float32), np.ones((6, 6), np.float32), head_count=4,
        )


# ---------------------------------------------------------------------------
# model forward
# ---------------------------------------------------------------------------


def test_logits_shape_and_finiteness():
    model = make_model(seed=0, d=16, layers=1, vocab=32)
    logits = model_forward(model, np.arange(4))
    assert logits.shape == (4, 32)
    assert np.all(np.isfinite(logits))


def test_token_out_of_range():
    model = make_model(seed=0, d=16, layers=1, vocab=32)
    with pytest.raises(ValueError):
        model_forward(model, np.array([0, 99]))


def test_quantized_run_differs_from_float():
    model = make_model(seed=1, d=32)
    tokens = make_tokens(seed=2)
    q4 = QuantConfig(act_spec=QuantSpec(4, "symmetric", "per-token", clip_ratio=0.9))
    assert not np.array_equal(model_forward(model, tokens, q4), model_forward(model, tokens))


def test_forward_deterministic():
    model = make_model(seed=3)
    tokens = make_tokens(seed=4)
    assert np.array_equal(model_forward(model, tokens), model_forward(model, tokens))


# ---------------------------------------------------------------------------
# RMSNorm fusion
# ---------------------------------------------------------------------------


def test_fuse_unit_gamma_keeps_weights():
    model = make_model(seed=5, d=16, layers=1)
    for layer in model.layers:
        layer.attn_norm.gamma = np.ones_like(layer.attn_norm.gamma)
        layer.ffn_norm.gamma = np.ones_like(layer.ffn_norm.gamma)
    w_before = model.layers[0].attn.w_q.copy()
    fuse_rmsnorm(model)
    assert np.array_equal(model.layers[0].attn.w_q, w_before)


def test_fuse_scalar_gamma_doubles_rows():
    model = make_model(seed=6, d=16, layers=1)
    layer = model.layers[0]
    layer.attn_norm.gamma = np.full(16, 2.0, dtype=np.float32)
    w_before = layer.attn.w_q.copy()
    tokens = make_tokens(seed=7, vocab=model.vocab_size)
    base = model_forward(model, tokens)
    fuse_rmsnorm(model)
    assert np.allclose(layer.attn.w_q, 2.0 * w_before)
    assert np.all(layer.attn_norm.gamma == 1.0)
    assert rel_inf_error(model_forward(model, tokens), base) <= 1e-5


def test_fuse_random_gamma_invariant():
    model = make_model(seed=8, d=32)
    tokens = make_tokens(seed=9, vocab=model.vocab_size)
    base = model_forward(model, tokens)
    fuse_rmsnorm(model)
    assert rel_inf_error(model_forward(model, tokens), base) <= 1e-5
    assert model.rmsnorm_fused


def test_refusing_is_warning_noop():
    model = make_model(seed=10, d=16, layers=1)
    fuse_rmsnorm(model)
    w = model.layers[0].attn.w_q.copy()
    with pytest.warns(UserWarning):
        fuse_rmsnorm(model)
    assert np.array_equal(model.layers[0].attn.w_q, w)


# ---------------------------------------------------------------------------
# rotation surgery
# ---------------------------------------------------------------------------


def test_identity_rotation_without_hadamard_is_noop():
    model = make_model(seed=11, d=16, layers=1)
    fuse_rmsnorm(model)
    snapshot = model.copy()
    rotate_model(model, OrthogonalTransform.explicit(np.eye(16, dtype=np.float32)),
                 online_hadamard=False)
    assert np.array_equal(model.layers[0].ffn.w_down, snapshot.layers[0].ffn.w_down)
    assert np.array_equal(model.embedding, snapshot.embedding)
    assert model.transform_state == "rotated"
    assert not model.layers[0].ffn.online_hadamard


def test_rotation_invariance_two_layer():
    model = make_model(seed=12, d=32, layers=2)
    tokens = make_tokens(seed=13, vocab=model.vocab_size)
    base = model_forward(model, tokens)
    fuse_rmsnorm(model)
    rotate_model(model, random_hadamard(32, Rng(14)))
    assert rel_inf_error(model_forward(model, tokens), base) <= 1e-5
    assert model.layers[0].ffn.online_hadamard


def test_rotation_requires_fused_gamma():
    model = make_model(seed=15, d=16, layers=1)
    with pytest.raises(ValueError) as err:
        rotate_model(model, random_hadamard(16, Rng(0)))
    assert "fuse" in str(err.value).lower()


def test_double_rotation_rejected():
    model = make_model(seed=16, d=16, layers=1)
    fuse_rmsnorm(model)
    rotate_model(model, random_hadamard(16, Rng(1)))
    with pytest.raises(ValueError):
        rotate_model(model, random_hadamard(16, Rng(2)))


def test_rotation_shrinks_spiked_down_input():
    model = make_spiked_model(seed=17, d=32, channels=(5, 40))
    tokens = make_tokens(seed=18, vocab=model.vocab_size)
    trace = ForwardTrace(store_down_inputs=True)
    model_forward(model, tokens, trace=trace)
    before = max(np.abs(trace.down_input(i)).max() for i in range(2))

    fuse_rmsnorm(model)
    rotate_model(model, random_hadamard(32, Rng(19)))
    trace2 = ForwardTrace(store_down_inputs=True)
    model_forward(model, tokens, trace=trace2)
    after = max(np.abs(trace2.down_input(i)).max() for i in range(2))
    assert after < before


def test_o_proj_hadamard_flag_keeps_invariance():
    model = make_model(seed=20, d=32, layers=1)
    tokens = make_tokens(seed=21, vocab=model.vocab_size)
    base = model_forward(model, tokens)
    fuse_rmsnorm(model)
    rotate_model(model, random_hadamard(32, Rng(22)), o_proj_hadamard=True)
    assert model.layers[0].attn.online_hadamard
    assert rel_inf_error(model_forward(model, tokens), base) <= 1e-5


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def test_save_load_round_trip(tmp_path):
    model = make_spiked_model(seed=23, d=32)
    fuse_rmsnorm(model)
    rotate_model(model, random_hadamard(32, Rng(24)))
    path = tmp_path / "model.tarc"
    save_model(model, path)
    back = load_model(path)
    tokens = make_tokens(seed=25, vocab=model.vocab_size)
    assert back.transform_state == model.transform_state
    assert back.rmsnorm_fused == model.rmsnorm_fused
    assert back.layers[0].ffn.online_hadamard
    assert np.array_equal(model_forward(back, tokens), model_forward(model, tokens))


def test_model_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(hidden_dim=48)  # not a power of two
    with pytest.raises(ValueError):
        ModelConfig(hidden_dim=64, n_heads=5)
