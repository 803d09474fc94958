import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sdrgnn import diffcore as dc
from sdrgnn.data import MODALITIES, Dataset, apply_missing
from sdrgnn.graph import HypergraphWeights, build_interaction_graph, custom_hypergraph
from sdrgnn.model import (GRU, ConfigError, Linear, ModelConfig, SDRGNN, classify, freq_gate, fuse,
                          hypergraph_conv, load_checkpoint, multi_head_attention, prepare, rgcn, save_checkpoint)
from sdrgnn.training import batch_loss

from conftest import make_conversation

SMALL = dict(dims=(3, 3, 3), num_classes=3, num_speakers=2, hidden=4, window=2, heads=2)


def _batch(rng, n=5, cfg=None, rate=0.0):
    cfg = cfg or ModelConfig(**SMALL)
    conv = make_conversation(rng, n=n, dims=cfg.dims, classes=cfg.num_classes)
    if rate:
        conv = apply_missing(Dataset([conv], cfg.num_classes, cfg.dims), rate, 0)[0].conversations[0]
    return prepare(conv, cfg)


# ---------------------------------------------------------------- encoder

def test_encoder_single_utterance_shape(rng):
    model = SDRGNN(ModelConfig(**SMALL))
    assert model.encode(_batch(rng, n=1)).shape == (1, 9)


def test_gru_direction_symmetry(rng):
    gru = GRU("g", 3, 4, rng)
    X = rng.standard_normal((6, 3))
    fwd_on_reversed = gru(dc.Tensor(X[::-1].copy())).data[::-1]
    np.testing.assert_allclose(fwd_on_reversed, gru(dc.Tensor(X), reverse=True).data, atol=1e-15)


def test_gru_cell_hand_evaluation(rng):
    gru = GRU("g", 2, 2, rng)
    x = np.array([[0.3, -0.8]])
    h = np.array([[0.5, -0.1]])
    sig = lambda a: 1 / (1 + np.exp(-a))
    Wx, Wh, bx, bh = gru.W_x.data, gru.W_h.data, gru.b_x.data, gru.b_h.data
    gx, gh = x @ Wx + bx, h @ Wh + bh
    r = sig(gx[:, 0:2] + gh[:, 0:2])
    z = sig(gx[:, 2:4] + gh[:, 2:4])
    n = np.tanh(gx[:, 4:6] + r * gh[:, 4:6])
    expected = (1 - z) * n + z * h
    np.testing.assert_allclose(gru.step(dc.Tensor(x), dc.Tensor(h)).data, expected, atol=1e-12)


# ---------------------------------------------------------------- rgcn

def _single_relation_agg(n, pairs):
    A = np.zeros((1, n, n))
    for i, js in pairs.items():
        for j in js:
            A[0, i, j] = 1.0 / len(js)
    return A


def test_rgcn_single_neighbor_identity():
    h = dc.Tensor([[1.0, -2.0], [3.0, -4.0]])
    out = rgcn(h, _single_relation_agg(2, {0: [1]}), [dc.Tensor(np.eye(2))])
    assert out.data[0].tolist() == [3.0, 0.0]


def test_rgcn_single_neighbor_general_weight(rng):
    h = rng.standard_normal((3, 2))
    W = rng.standard_normal((2, 4))
    out = rgcn(dc.Tensor(h), _single_relation_agg(3, {0: [2], 1: [0], 2: [1]}), [dc.Tensor(W)])
    np.testing.assert_array_equal(out.data, np.maximum(h[[2, 0, 1]] @ W, 0))


def test_rgcn_mean_of_two_neighbors():
    h = dc.Tensor([[9.0, 9.0], [2.0, 0.0], [0.0, 2.0]])
    out = rgcn(h, _single_relation_agg(3, {0: [1, 2]}), [dc.Tensor(np.eye(2))])
    assert out.data[0].tolist() == [1.0, 1.0]


def test_rgcn_relu_clamp():
    h = dc.Tensor([[0.0, 0.0], [1.0, 1.0]])
    out = rgcn(h, _single_relation_agg(2, {0: [1]}), [dc.Tensor(-np.eye(2))])
    assert out.data[0].tolist() == [0.0, 0.0]


# ---------------------------------------------------------------- hypergraph conv

def test_hypergraph_identity_is_leaky_relu():
    hg = custom_hypergraph(1, [(0,)])
    out = hypergraph_conv(dc.Tensor([[1.0, -1.0]]), hg, HypergraphWeights.explicit(hg, 1.0, 1.0), 1)
    assert out.data.tolist() == [[1.0, -0.01]]


def test_hypergraph_single_edge_mean():
    hg = custom_hypergraph(2, [(0, 1)])
    out = hypergraph_conv(dc.Tensor([[2.0], [0.0]]), hg, HypergraphWeights.explicit(hg, 1.0, 1.0), 1)
    assert out.data.tolist() == [[1.0], [1.0]]


def test_hypergraph_zero_layers_identity(rng):
    hg = custom_hypergraph(2, [(0, 1)])
    V = dc.Tensor(rng.standard_normal((2, 3)))
    assert hypergraph_conv(V, hg, HypergraphWeights.explicit(hg, 1.0, 1.0), 0) is V


# ---------------------------------------------------------------- frequency gate

def test_freq_gate_zero_weights_identity(rng):
    g = build_interaction_graph([0, 1, 1, 0, 1], 2)
    v = dc.Tensor(rng.standard_normal((5, 3)))
    out = freq_gate(v, g.context_adj, [dc.Tensor(np.zeros((6, 1)))] * 3)
    np.testing.assert_array_equal(out.data, v.data)


@pytest.mark.parametrize("sign", [1.0, -1.0])
def test_freq_gate_saturation(sign):
    adj = np.zeros((1, 2, 2))
    adj[0, 0, 1] = 1.0
    v = dc.Tensor([[1.0], [2.0]])
    out = freq_gate(v, adj, [dc.Tensor([[sign * 1000.0], [0.0]])])
    assert out.data[0, 0] == pytest.approx(1.0 + sign * 2.0, abs=1e-12)
    assert out.data[1, 0] == 2.0


def test_freq_gate_residual_argument(rng):
    g = build_interaction_graph([0, 1, 0], 1)
    v = dc.Tensor(rng.standard_normal((3, 2)))
    res = dc.Tensor(rng.standard_normal((3, 2)))
    out = freq_gate(v, g.context_adj, [dc.Tensor(np.zeros((4, 1)))] * 3, residual=res)
    np.testing.assert_array_equal(out.data, res.data)


# ---------------------------------------------------------------- fusion, heads

def test_fuse_shapes(rng):
    a, b = dc.Tensor(rng.standard_normal((4, 3))), dc.Tensor(rng.standard_normal((4, 3)))
    assert fuse(a, b).shape == (4, 6)
    assert fuse(None, b) is b
    with pytest.raises(dc.DimensionError):
        fuse(a, dc.Tensor(np.zeros((3, 3))))


def test_fuse_then_project_is_order_sensitive(rng):
    a, b = dc.Tensor(rng.standard_normal((4, 3))), dc.Tensor(rng.standard_normal((4, 3)))
    W = dc.Tensor(rng.standard_normal((6, 2)))
    assert not np.allclose(dc.matmul(fuse(a, b), W).data, dc.matmul(fuse(b, a), W).data)


def test_speaker_ablation_latent_is_context_stream(rng):
    cfg = ModelConfig(**SMALL, use_speaker=False, dropout=0.0)
    model = SDRGNN(cfg)
    b = _batch(rng, cfg=cfg)
    out = model(b)
    assert out.latent.shape == (5, 4)
    np.testing.assert_array_equal(out.latent.data, model.stream("co", model.encode(b), b).data)


def test_reconstruction_examples(rng):
    lin = Linear("r", 2, 1, rng)
    lin.W.assign(np.zeros((2, 1)))
    lin.b.assign(np.zeros(1))
    assert lin(dc.Tensor([[2.0, 3.0]])).data.tolist() == [[0.0]]
    lin.W.assign([[1.0], [1.0]])
    lin.b.assign([1.0])
    assert lin(dc.Tensor([[2.0, 3.0]])).data.tolist() == [[6.0]]
    model = SDRGNN(ModelConfig(**SMALL))
    rec = model.reconstruct(dc.Tensor(rng.standard_normal((5, 8))))
    assert [rec[m].shape for m in MODALITIES] == [(5, 3)] * 3


def test_attention_single_position(rng):
    F = dc.Tensor(rng.standard_normal((1, 6)))
    Wq, Wk, Wv = (dc.Tensor(rng.standard_normal((6, 4))) for _ in range(3))
    Wo = dc.Tensor(rng.standard_normal((4, 6)))
    out = multi_head_attention(F, Wq, Wk, Wv, Wo, 2)
    np.testing.assert_allclose(out.data, F.data @ Wv.data @ Wo.data, atol=1e-12)


def test_attention_identical_keys_uniform(rng):
    F = dc.Tensor(rng.standard_normal((2, 6)))
    Wq, Wv = dc.Tensor(rng.standard_normal((6, 4))), dc.Tensor(rng.standard_normal((6, 4)))
    Wo = dc.Tensor(np.eye(4, 6))
    out = multi_head_attention(F, Wq, dc.Tensor(np.zeros((6, 4))), Wv, Wo, 2)
    mean_v = (F.data @ Wv.data).mean(0) @ Wo.data
    np.testing.assert_allclose(out.data, np.stack([mean_v, mean_v]), atol=1e-12)


def test_attention_heads_must_divide(rng):
    W = dc.Tensor(np.zeros((6, 5)))
    with pytest.raises(dc.DimensionError):
        multi_head_attention(dc.Tensor(np.zeros((2, 6))), W, W, W, dc.Tensor(np.zeros((5, 6))), 2)


@settings(max_examples=40)
@given(st.integers(2, 7), st.integers(0, 2**31 - 1))
def test_attention_permutation_equivariant(n, seed):
    rng = np.random.default_rng(seed)
    F = rng.standard_normal((n, 6))
    Ws = [dc.Tensor(rng.standard_normal((6, 4))) for _ in range(3)]
    Wo = dc.Tensor(rng.standard_normal((4, 6)))
    perm = rng.permutation(n)
    a = multi_head_attention(dc.Tensor(F[perm]), *Ws, Wo, 2).data
    b = multi_head_attention(dc.Tensor(F), *Ws, Wo, 2).data[perm]
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_self_opt_disabled_returns_linear_reconstruction(rng):
    cfg = ModelConfig(**SMALL, use_self_opt=False)
    out = SDRGNN(cfg)(_batch(rng, cfg=cfg))
    for m in MODALITIES:
        assert out.recon[m] is out.recon_linear[m]


def test_classify_examples(rng):
    probs = classify(dc.Tensor(rng.standard_normal((3, 5))), dc.Tensor(np.zeros((5, 4))), dc.Tensor(np.zeros(4)))
    np.testing.assert_array_equal(probs.data, np.full((3, 4), 0.25))
    probs = classify(dc.Tensor(rng.standard_normal((2, 5))), dc.Tensor(np.zeros((5, 2))),
                     dc.Tensor([0.0, math.log(3.0)]))
    np.testing.assert_allclose(probs.data, [[0.25, 0.75]] * 2, atol=1e-15)


@given(st.integers(0, 2**31 - 1), st.floats(-50, 50))
def test_classify_rows_sum_and_shift_invariance(seed, shift):
    rng = np.random.default_rng(seed)
    L = dc.Tensor(rng.standard_normal((4, 5)))
    W = dc.Tensor(rng.standard_normal((5, 3)))
    b = rng.standard_normal(3)
    p = classify(L, W, dc.Tensor(b)).data
    np.testing.assert_allclose(p.sum(1), 1.0, atol=1e-9)
    np.testing.assert_allclose(classify(L, W, dc.Tensor(b + shift)).data, p, atol=1e-12)


# ---------------------------------------------------------------- full forward

def test_forward_shapes(rng):
    cfg = ModelConfig(**SMALL)
    out = SDRGNN(cfg)(_batch(rng, n=4, cfg=cfg))
    assert out.latent.shape == (4, 8)
    assert all(out.recon[m].shape == (4, 3) for m in MODALITIES)
    assert out.probs.shape == (4, 3)


def test_gate_ablation_passes_hypergraph_output(rng):
    cfg = ModelConfig(**SMALL, use_freq_gate=False)
    model = SDRGNN(cfg)
    b = _batch(rng, cfg=cfg)
    h = model.encode(b)
    st_ = model.streams["co"]
    v = rgcn(h, b.context_agg, st_["rgcn"])
    expected = hypergraph_conv(v, b.hypergraph, st_["hyper"], cfg.hyper_layers)
    np.testing.assert_array_equal(model.stream("co", h, b).data, expected.data)
    assert not any("gate" in name for name in model.named_parameters())


def test_eval_forward_deterministic(rng):
    cfg = ModelConfig(**SMALL)
    b = _batch(rng, cfg=cfg)
    a = SDRGNN(cfg)(b).probs.data
    c = SDRGNN(cfg)(b).probs.data
    assert a.tobytes() == c.tobytes()


def test_training_forward_uses_dropout(rng):
    cfg = ModelConfig(**SMALL)
    model, b = SDRGNN(cfg), _batch(rng, cfg=cfg)
    a = model(b, training=True, rng=np.random.default_rng(0)).probs.data
    assert not np.array_equal(a, model(b).probs.data)


def test_every_parameter_gets_gradient(rng):
    cfg = ModelConfig(**SMALL, dropout=0.0)
    model = SDRGNN(cfg)
    hit = {p.name: False for p in model.parameters()}
    for seed in range(3):
        b = _batch(np.random.default_rng(seed), n=6, cfg=cfg, rate=0.3)
        for p in model.parameters():
            p.zero_grad()
        dc.backward(batch_loss(model, b, 0.5, "all_slots")[0])
        for p in model.parameters():
            hit[p.name] |= bool(np.any(p.grad != 0))
    assert all(hit.values()), [k for k, v in hit.items() if not v]


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(hidden=6, heads=4).validate()
    with pytest.raises(ConfigError):
        ModelConfig(use_speaker=False, use_context=False).validate()
    assert ModelConfig(hidden=6, heads=4, attn_dim=8).validate().attention_dim == 8


def test_checkpoint_round_trip_bit_exact(tmp_path, rng):
    cfg = ModelConfig(**SMALL, seed=5)
    model = SDRGNN(cfg)
    for p in model.parameters():
        p.assign(rng.standard_normal(p.shape))
    save_checkpoint(model, tmp_path / "ck.npz", extra={"note": 1})
    back, meta = load_checkpoint(tmp_path / "ck.npz")
    assert meta["note"] == 1
    assert back.cfg == cfg
    for name, p in model.named_parameters().items():
        assert back.named_parameters()[name].data.tobytes() == p.data.tobytes()


def test_load_state_mismatch():
    model = SDRGNN(ModelConfig(**SMALL))
    other = SDRGNN(ModelConfig(**{**SMALL, "hidden": 6}))
    with pytest.raises(ConfigError, match="shape"):
        model.load_state(other.state())
    with pytest.raises(ConfigError, match="missing"):
        SDRGNN(ModelConfig(**SMALL, use_self_opt=False)).load_state(model.state())
