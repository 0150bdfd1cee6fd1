import numpy as np
import pytest

from cmfusion import tensor as T
from cmfusion.gradcheck import BranchMemo
from cmfusion.layers import layer_norm, linear_forward
from cmfusion.model import (
    STREAMS, AttentionLayer, CMRobertaModel, CrossAttentionLayer, ModelConfig,
    attention_block_finish, cross_attention_block, cross_attention_propagate, predict_proba,
    residual_norm_update, self_attention_block, tiny_config,
)
from cmfusion.tensor import ShapeError, Tensor


def _batch(rng, cfg, B=2, steps=4):
    return (rng.standard_normal((B, steps, cfg.d_audio_in)), rng.standard_normal((B, steps, cfg.d_text_in)))


def _attention(rng, d=2):
    return AttentionLayer(d, None, rng)


# -- config ---------------------------------------------------------------------

def test_defaults_follow_feature_dimensions():
    c = ModelConfig()
    assert (c.d_audio_in, c.d_text_in, c.d_model, c.n_sca_layers, c.n_classes) == (12696, 4096, 128, 2, 7)
    assert c.aggregation_width == 896
    assert c.lld_dim == 6552


@pytest.mark.parametrize("kw", [dict(d_model=7), dict(n_classes=1), dict(d_model=0),
                                dict(streams=("bogus",)), dict(streams=())])
def test_invalid_configs(kw):
    with pytest.raises(ValueError):
        ModelConfig(**kw)


def test_config_roundtrip():
    c = tiny_config(streams=("r_t", "mid"), audio_zero_range=(0, 2))
    assert ModelConfig.from_dict(c.to_dict()) == c
    assert c.streams == ("mid", "r_t")


# -- encoder and attention primitives ---------------------------------------------------

def test_encode_shapes_and_masked_rows(rng):
    cfg = tiny_config()
    model = CMRobertaModel(cfg)
    Xa, Xt = _batch(rng, cfg)
    mask = np.array([[1, 1, 1, 1], [1, 1, 0, 0]], dtype=float)
    Ha, Ht = model.encode(Tensor(Xa), Tensor(Xt), mask)
    assert Ha.shape == Ht.shape == (2, 4, 8)
    np.testing.assert_array_equal(Ha.data[1, 2:], 0.0)


def test_unaligned_modalities_rejected(rng):
    cfg = tiny_config()
    with pytest.raises(ShapeError):
        CMRobertaModel(cfg)(rng.standard_normal((3, 6)), rng.standard_normal((4, 8)))


def test_single_key_attention_returns_value_row(rng):
    layer = _attention(rng, 3)
    q, kv = Tensor(rng.standard_normal((1, 1, 3))), Tensor(rng.standard_normal((1, 1, 3)))
    out = layer.propagate(q, kv, np.ones((1, 1)))
    np.testing.assert_allclose(out.data, kv.data @ layer.W_V.data.T, atol=1e-15)


def test_identical_keys_average_values(rng):
    layer = _attention(rng, 2)
    layer.W_K.data[...] = 0.0  # every logit equal
    kv = Tensor(rng.standard_normal((1, 3, 2)))
    out = layer.propagate(Tensor(rng.standard_normal((1, 3, 2))), kv, np.ones((1, 3)))
    v = kv.data[0] @ layer.W_V.data.T
    np.testing.assert_allclose(out.data[0], np.tile(v.mean(axis=0), (3, 1)), atol=1e-15)


def test_attention_hand_oracle(rng):
    # Q=[[1,0],[0,2]], K=[[1,1],[0,1]], V=[[1,2],[3,4]], d=2; 30-digit script oracle
    layer = _attention(rng, 2)
    for W in (layer.W_Q, layer.W_K, layer.W_V):
        W.data[...] = np.eye(2)
    q = Tensor([[[1.0, 0.0], [0.0, 2.0]]])
    kv_k = np.array([[1.0, 1.0], [0.0, 1.0]])
    layer.W_V.data[...] = np.linalg.solve(kv_k, np.array([[1.0, 2.0], [3.0, 4.0]])).T
    out = layer.propagate(q, Tensor(kv_k[None]), np.ones((1, 2))).data[0]
    np.testing.assert_allclose(out, [[1.6604769013466861, 2.6604769013466861], [2.0, 3.0]], rtol=1e-13)


def test_cross_propagation_directions(rng):
    layer = CrossAttentionLayer(4, None, 0, "x")
    Ha, Ht = Tensor(rng.standard_normal((1, 3, 4))), Tensor(rng.standard_normal((1, 3, 4)))
    mask = np.ones((1, 3))
    d_at, d_ta = cross_attention_propagate(layer, Ha, Ht, mask)
    np.testing.assert_array_equal(d_at.data, layer.to_text.propagate(Ha, Ht, mask).data)
    np.testing.assert_array_equal(d_ta.data, layer.to_audio.propagate(Ht, Ha, mask).data)


def test_masked_keys_get_no_weight(rng):
    layer = _attention(rng, 3)
    x = rng.standard_normal((1, 4, 3))
    mask = np.array([[1, 1, 0, 0]], dtype=float)
    out = layer.propagate(Tensor(x), Tensor(x), mask).data
    y = x.copy()
    y[0, 2:] = 1e3 * rng.standard_normal((2, 3))
    out2 = layer.propagate(Tensor(y), Tensor(y), mask).data
    np.testing.assert_allclose(out[0, :2], out2[0, :2], atol=1e-12)


def test_residual_norm_update_cases(rng):
    ln = _attention(rng, 2).ln1
    H = Tensor(rng.standard_normal((1, 3, 2)))
    np.testing.assert_array_equal(residual_norm_update(ln, H, Tensor(np.zeros((1, 3, 2)))).data, ln(H).data)
    out = residual_norm_update(ln, Tensor([[[1.0, 2.0]]]), Tensor([[[0.0, 1.0]]])).data
    np.testing.assert_allclose(out, [[[-0.99999500003749969, 0.99999500003749969]]], rtol=1e-14)
    with pytest.raises(ShapeError):
        residual_norm_update(ln, H, Tensor(np.zeros((1, 2, 2))))


def test_block_finish_with_silent_feed_forward(rng):
    layer = _attention(rng, 4)
    for p in layer.ff.parameters():
        p.data[...] = 0.0
    h = Tensor(rng.standard_normal((1, 3, 4)))
    np.testing.assert_array_equal(attention_block_finish(layer, h).data, layer.ln2(h).data)


def test_block_finish_composition(rng):
    layer = _attention(rng, 4)
    h = Tensor(rng.standard_normal((1, 2, 4)))
    manual = layer_norm(layer.ln2, T.add(h, layer.ff(h))).data
    out = attention_block_finish(layer, h).data
    np.testing.assert_array_equal(out, manual)
    assert out.shape == h.shape


def test_self_block_single_step(rng):
    layer = _attention(rng, 4)
    H = Tensor(rng.standard_normal((1, 1, 4)))
    v = Tensor(H.data @ layer.W_V.data.T)
    expected = attention_block_finish(layer, layer.ln1(T.add(H, v))).data
    np.testing.assert_allclose(self_attention_block(layer, H, np.ones((1, 1))).data, expected, atol=1e-15)


def test_self_block_two_step_oracle(rng):
    layer = _attention(rng, 2)
    H = rng.standard_normal((2, 2))
    q, k, v = H @ layer.W_Q.data.T, H @ layer.W_K.data.T, H @ layer.W_V.data.T
    logits = q @ k.T / np.sqrt(2)
    w = np.exp(logits - logits.max(axis=1, keepdims=True))
    w /= w.sum(axis=1, keepdims=True)

    def ln(x, g, b):
        m = x.mean(axis=-1, keepdims=True)
        return (x - m) / np.sqrt(((x - m) ** 2).mean(axis=-1, keepdims=True) + 1e-5) * g + b

    h1 = ln(H + w @ v, layer.ln1.gamma.data, layer.ln1.beta.data)
    f = np.maximum(h1 @ layer.ff.fc1.W.data.T + layer.ff.fc1.b.data, 0) @ layer.ff.fc2.W.data.T + layer.ff.fc2.b.data
    expected = ln(h1 + f, layer.ln2.gamma.data, layer.ln2.beta.data)
    out = self_attention_block(layer, Tensor(H[None]), np.ones((1, 2))).data[0]
    np.testing.assert_allclose(out, expected, atol=1e-13)


def test_self_attention_branch_is_permutation_equivariant(rng):
    cfg = tiny_config()
    model = CMRobertaModel(cfg)
    H = Tensor(rng.standard_normal((1, 5, 8)))
    perm = rng.permutation(5)
    mask = np.ones((1, 5))
    out = model.self_branch(H, "a", mask).data
    out_p = model.self_branch(Tensor(H.data[:, perm]), "a", mask).data
    np.testing.assert_allclose(out_p, out[:, perm], atol=1e-13)


def test_single_sca_layer_equals_manual_composition(rng):
    cfg = tiny_config(n_sca_layers=1)
    model = CMRobertaModel(cfg)
    Ha, Ht = Tensor(rng.standard_normal((1, 3, 8))), Tensor(rng.standard_normal((1, 3, 8)))
    mask = np.ones((1, 3))
    out = model.sca_forward(Ha, Ht, mask)
    ca, ct = cross_attention_block(model.cross[0], Ha, Ht, mask)
    np.testing.assert_array_equal(out["c_a"].data, ca.data)
    np.testing.assert_array_equal(out["c_t"].data, ct.data)
    np.testing.assert_array_equal(out["s_a"].data, self_attention_block(model.self_a[0], Ha, mask).data)
    np.testing.assert_array_equal(out["s_t"].data, self_attention_block(model.self_t[0], Ht, mask).data)
    assert all(v.shape == (1, 3, 8) for v in out.values())


def test_mid_fusion_composition(rng):
    cfg = tiny_config()
    model = CMRobertaModel(cfg)
    Xa, Xt = (Tensor(a) for a in _batch(rng, cfg, 1, 3))
    mask = np.ones((1, 3))
    a = model.mid_a2(model.mid_a1(Xa, mask), mask)
    t = model.mid_t2(model.mid_t1(Xt, mask), mask)
    manual = model.mid_ff(model.mid_join(T.concat([a, t], axis=-1), mask)).data
    out = model.mid_level_fusion(Xa, Xt, mask).data
    np.testing.assert_array_equal(out, manual)
    assert out.shape == (1, 3, 8)


def test_residual_branch_cases(rng):
    cfg = tiny_config()
    model = CMRobertaModel(cfg)
    X = Tensor(rng.standard_normal((1, 3, 6)))
    manual = layer_norm(model.res_a_ln, linear_forward(model.res_a, X)).data
    np.testing.assert_array_equal(model.residual_branch(X, "a").data, manual)
    model.res_t.b.data[...] = rng.standard_normal(8)
    zero = model.residual_branch(Tensor(np.zeros((1, 4, 8))), "t").data[0]
    np.testing.assert_array_equal(zero, np.tile(zero[0], (4, 1)))


def test_share_encoders_reuses_encoder_parameters():
    shared = CMRobertaModel(tiny_config(share_encoders=True))
    names = dict(shared.named_parameters())
    assert not any(n.startswith(("mid_a1", "mid_t1")) for n in names)


# -- whole network ------------------------------------------------------------------

def test_full_feature_width_forward():
    model = CMRobertaModel(ModelConfig())
    rng = np.random.default_rng(0)
    logits = model(rng.standard_normal((5, 12696)), rng.standard_normal((5, 4096)))
    assert logits.shape == (5, 7)
    agg, _ = model.aggregate(rng.standard_normal((5, 12696)), rng.standard_normal((5, 4096)))
    assert agg.shape == (1, 5, 896)


def test_probabilities_sum_to_one(rng):
    cfg = tiny_config()
    p = predict_proba(CMRobertaModel(cfg), *_batch(rng, cfg))
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_mask_isolation(seed):
    cfg = tiny_config(seed=seed)
    model = CMRobertaModel(cfg)
    r = np.random.default_rng(seed)
    Xa, Xt = _batch(r, cfg, 1, 3)
    ref = model(Xa, Xt).data
    pad_a = np.concatenate([Xa, 100 * r.standard_normal((1, 2, 6))], axis=1)
    pad_t = np.concatenate([Xt, 100 * r.standard_normal((1, 2, 8))], axis=1)
    mask = np.array([[1, 1, 1, 0, 0]], dtype=float)
    out = model(pad_a, pad_t, mask).data
    np.testing.assert_allclose(out[:, :3], ref, atol=1e-9)


def test_stream_zeroing_touches_only_its_slice(rng):
    cfg = tiny_config()
    model = CMRobertaModel(cfg)
    Xa, Xt = _batch(rng, cfg)
    full, _ = model.aggregate(Xa, Xt)
    for i, key in enumerate(STREAMS):
        z, _ = model.aggregate(Xa, Xt, zero_streams=(key,))
        sl = slice(8 * i, 8 * (i + 1))
        np.testing.assert_array_equal(z.data[..., sl], 0.0)
        rest = np.delete(np.arange(56), np.arange(56)[sl])
        np.testing.assert_array_equal(z.data[..., rest], full.data[..., rest])


def test_every_parameter_receives_gradient(rng):
    cfg = tiny_config()
    model = CMRobertaModel(cfg)
    Xa, Xt = _batch(rng, cfg)
    T.sum(T.mul(model(Xa, Xt), Tensor(rng.standard_normal((2, 4, 3))))).backward()
    missing = [n for n, p in model.named_parameters() if p.grad is None or not np.any(p.grad)]
    assert not missing


def test_forward_is_reproducible():
    cfg = tiny_config(seed=4)
    r = np.random.default_rng(1)
    Xa, Xt = _batch(r, cfg)
    a = CMRobertaModel(cfg)(Xa, Xt).data
    b = CMRobertaModel(cfg)(Xa, Xt).data
    assert a.tobytes() == b.tobytes()


def test_module_init_independent_of_other_streams():
    full = dict(CMRobertaModel(tiny_config()).named_parameters())
    part = dict(CMRobertaModel(tiny_config(streams=("mid", "r_a", "r_t"))).named_parameters())
    for name, p in part.items():
        if not name.startswith("head"):
            assert p.data.tobytes() == full[name].data.tobytes()


def test_stream_errors_name_the_stream(rng):
    model = CMRobertaModel(tiny_config())
    with pytest.raises(ShapeError, match="audio"):
        model(rng.standard_normal((3, 5)), rng.standard_normal((3, 8)))


def test_branch_memo_matches_plain_forward(rng):
    cfg = tiny_config()
    model = CMRobertaModel(cfg)
    Xa, Xt = _batch(rng, cfg)
    memo = BranchMemo(model)
    with T.no_grad(), T.record_kinks():
        ref = model(Xa, Xt).data
        model(Xa, Xt, memo=memo)
        p = dict(model.named_parameters())["res_a.W"]
        p.data[0, 0] += 0.1
        with T.record_kinks() as memo_log:
            out = model(Xa, Xt, memo=memo).data
        p.data[0, 0] -= 0.1
        changed = model(Xa, Xt).data
        p.data[0, 0] += 0.1
        with T.record_kinks() as plain_log:
            expected = model(Xa, Xt).data
    assert memo.hits > 0
    np.testing.assert_array_equal(out, expected)
    np.testing.assert_array_equal(changed, ref)
    assert memo_log == plain_log


def test_branch_memo_is_bypassed_without_a_sign_log(rng):
    cfg = tiny_config()
    model = CMRobertaModel(cfg)
    memo = BranchMemo(model)
    with T.no_grad():
        model(*_batch(rng, cfg), memo=memo)
        model(*_batch(rng, cfg), memo=memo)
    assert memo.hits == memo.misses == 0
