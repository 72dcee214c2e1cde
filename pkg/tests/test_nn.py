import math

import numpy as np
import pytest

from mpma import autodiff as ad
from mpma import nn
from mpma.autodiff import ShapeError, Tensor

from conftest import assert_fd_match


def attn_params(d, heads=1, scale_mode="per_head", rng=None, identity=False):
    if identity:
        ws = [np.eye(d) for _ in range(4)]
    else:
        ws = [rng.normal(scale=0.5, size=(d, d)) for _ in range(4)]
    return nn.AttentionParams(*(Tensor(w) for w in ws), heads=heads, scale_mode=scale_mode)


def block_params(d, rng, zero_out=False):
    specs = nn.block_param_specs(d, mlp_ratio=2)
    arrays = {}
    for name, (shape, _) in specs.items():
        if name.startswith("ln") and name.endswith(".g"):
            arrays[name] = np.ones(shape)
        else:
            arrays[name] = rng.normal(scale=0.3, size=shape)
    if zero_out:
        for k in ("attn.wm", "fc2.w", "fc2.b"):
            arrays[k] = np.zeros_like(arrays[k])
    return nn.BlockParams.view({f"b.{k}": Tensor(v) for k, v in arrays.items()}, "b", heads=2), arrays


def test_single_key_returns_value():
    p = attn_params(3, identity=True)
    x = Tensor([[0.3, -1.0, 2.0]])
    np.testing.assert_allclose(nn.mca(x, x, x, p).data, x.data)


def test_hand_evaluated_two_key_example():
    p = attn_params(2, identity=True)
    out = nn.mca(Tensor([[1.0, 0.0]]), Tensor(np.eye(2)), Tensor(np.eye(2)), p)
    w = np.exp([1 / math.sqrt(2), 0.0])
    w /= w.sum()
    np.testing.assert_allclose(w, [0.6698, 0.3302], atol=1e-4)
    np.testing.assert_allclose(out.data, [w], atol=1e-12)


def test_scale_modes():
    r = np.random.default_rng(0)
    assert attn_params(8, heads=2, rng=r).scale == pytest.approx(2.0)
    assert attn_params(8, heads=2, scale_mode="literal_d", rng=r).scale == pytest.approx(math.sqrt(8))


def test_attention_rows_sum_to_one(rng):
    p = attn_params(6, heads=3, rng=rng)
    w = nn.attention_weights(Tensor(rng.normal(size=(2, 4, 6))), Tensor(rng.normal(size=(2, 5, 6))), p)
    np.testing.assert_allclose(w.data.sum(-1), 1.0, atol=1e-6)


def test_key_permutation_equivariance(rng):
    p = attn_params(4, heads=2, rng=rng)
    q, kv = rng.normal(size=(3, 4)), rng.normal(size=(5, 4))
    perm = rng.permutation(5)
    a = nn.mca(Tensor(q), Tensor(kv), Tensor(kv), p).data
    b = nn.mca(Tensor(q), Tensor(kv[perm]), Tensor(kv[perm]), p).data
    np.testing.assert_allclose(a, b, atol=1e-6)


def test_masked_keys_get_no_weight(rng):
    p = attn_params(4, heads=2, rng=rng)
    q, kv = rng.normal(size=(1, 2, 4)), rng.normal(size=(1, 4, 4))
    valid = np.array([[True, True, False, False]])
    full = nn.mca(Tensor(q), Tensor(kv), Tensor(kv), p, key_valid=valid).data
    trimmed = nn.mca(Tensor(q), Tensor(kv[:, :2]), Tensor(kv[:, :2]), p).data
    np.testing.assert_allclose(full, trimmed, atol=1e-9)


def test_mca_errors():
    p = attn_params(2, identity=True)
    with pytest.raises(ShapeError):
        nn.mca(Tensor(np.ones((1, 2))), Tensor(np.zeros((0, 2))), Tensor(np.zeros((0, 2))), p)
    with pytest.raises(ShapeError):
        nn.mca(Tensor(np.ones((1, 3))), Tensor(np.ones((2, 2))), Tensor(np.ones((2, 2))), p)
    with pytest.raises(ShapeError):
        nn.mca(Tensor(np.ones((1, 2))), Tensor(np.ones((2, 2))), Tensor(np.ones((3, 2))), p)


def test_empty_memory_is_bit_identical(rng):
    p = attn_params(4, heads=2, rng=rng)
    q, kv = Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(5, 4)))
    a = nn.mca_with_memory(q, kv, Tensor(np.zeros((0, 4))), p).data
    b = nn.mca(q, kv, kv, p).data
    assert np.array_equal(a, b)


def test_memory_equals_concatenated_keys(rng):
    p = attn_params(4, heads=2, rng=rng)
    q, kv, mem = rng.normal(size=(3, 4)), rng.normal(size=(5, 4)), rng.normal(size=(2, 4))
    ext = np.concatenate([kv, mem])
    a = nn.mca_with_memory(Tensor(q), Tensor(kv), Tensor(mem), p).data
    np.testing.assert_allclose(a, nn.mca(Tensor(q), Tensor(ext), Tensor(ext), p).data, atol=1e-12)


def test_far_memory_row_tends_to_plain_attention(rng):
    p = attn_params(2, identity=True)
    q, kv = np.array([[1.0, 0.0]]), rng.normal(size=(3, 2))
    mem = np.array([[-50.0 * math.sqrt(2), 0.0]])  # logit offset of -50
    a = nn.mca_with_memory(Tensor(q), Tensor(kv), Tensor(mem), p).data
    np.testing.assert_allclose(a, nn.mca(Tensor(q), Tensor(kv), Tensor(kv), p).data, atol=1e-12)


def test_memory_rows_receive_gradient(rng):
    p_arr = {k: rng.normal(scale=0.5, size=(4, 4)) for k in ("wq", "wk", "wv", "wm")}
    with ad.Tape() as tape:
        pt = {k: tape.watch(k, v) for k, v in p_arr.items()}
        mem = tape.watch("mem", rng.normal(size=(2, 4)))
        p = nn.AttentionParams(pt["wq"], pt["wk"], pt["wv"], pt["wm"], heads=2)
        out = nn.mca_with_memory(Tensor(rng.normal(size=(2, 3, 4))), Tensor(rng.normal(size=(2, 5, 4))), mem, p)
        loss = ad.sum(ad.mul(out, out))
    g = ad.backward(loss, tape)
    assert np.abs(g["mem"]).sum() > 0


def test_zero_output_projections_make_block_identity(rng):
    p, _ = block_params(4, rng, zero_out=True)
    x = rng.normal(size=(5, 4))
    np.testing.assert_array_equal(nn.transformer_block(Tensor(x), p).data, x)


@pytest.mark.parametrize("length", [1, 7, 196])
def test_block_preserves_shape(length, rng):
    p, _ = block_params(4, rng)
    assert nn.transformer_block(Tensor(rng.normal(size=(length, 4))), p).shape == (length, 4)


def test_block_rejects_width_mismatch(rng):
    p, _ = block_params(4, rng)
    with pytest.raises(ShapeError):
        nn.transformer_block(Tensor(np.ones((2, 3))), p)


def test_block_gradient_matches_finite_differences(rng):
    _, arrays = block_params(4, rng)
    inputs = {f"b.{k}": v for k, v in arrays.items()}
    inputs["x"] = rng.normal(size=(3, 4))
    probe = rng.normal(size=(3, 4))

    def build(t):
        p = nn.BlockParams.view(t, "b", heads=2)
        return ad.sum(ad.mul(nn.transformer_block(t["x"], p), Tensor(probe)))

    assert_fd_match(build, inputs)


def test_mca_with_memory_gradient(rng):
    inputs = {k: rng.normal(scale=0.5, size=(4, 4)) for k in ("wq", "wk", "wv", "wm")}
    inputs.update(q=rng.normal(size=(2, 3, 4)), kv=rng.normal(size=(2, 2, 4)), mem=rng.normal(size=(2, 4)))
    valid = np.array([[True, False], [True, True]])

    def build(t):
        p = nn.AttentionParams(t["wq"], t["wk"], t["wv"], t["wm"], heads=2)
        out = nn.mca_with_memory(t["q"], t["kv"], t["mem"], p, key_valid=valid)
        return ad.sum(ad.mul(out, out))

    assert_fd_match(build, inputs)


def test_sinusoidal_table():
    t = nn.sinusoidal_table(5, 6)
    np.testing.assert_array_equal(t[0], [0, 1, 0, 1, 0, 1])
    np.testing.assert_array_equal(t, nn.sinusoidal_table(5, 6))


def test_positional_embedding_kinds(rng):
    learned = nn.positional_embedding(4, 6, "learned", rng)
    assert learned.shape == (4, 6) and np.abs(learned).sum() > 0
    np.testing.assert_array_equal(nn.positional_embedding(4, 6, "sinusoidal", rng, np.float64), nn.sinusoidal_table(4, 6))
