import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from audioret import numerics as nx
from audioret.errors import ConfigError, UsageError
from audioret.refinement import (
    CrossAttentionParams,
    RefinerConfig,
    RefinerParams,
    SharedProjectionParams,
    TransformerBlockParams,
    cross_attend,
    embed_batch,
    embed_single,
    linear_project,
    pad_batch,
    refine_batch,
    refine_pair,
    transformer_project,
)


# --------------------------------------------------------- scalar oracles

def _erf_gelu(v: float) -> float:
    return 0.5 * v * (1.0 + math.erf(v / math.sqrt(2.0)))


def brute_block(x, blk: TransformerBlockParams):
    """Scalar-loop residual block: H = MHA(X) + X, Z = FFN(H) + H."""
    n, d = x.shape
    h = blk.n_heads
    dh = d // h
    W = {k: getattr(blk, k).data for k in ("wq", "wk", "wv", "wo", "w1", "b1", "w2", "b2")}

    def lin(row, w):
        return [sum(row[i] * w[i][j] for i in range(len(row))) for j in range(len(w[0]))]

    q = [lin(x[i], W["wq"]) for i in range(n)]
    k = [lin(x[i], W["wk"]) for i in range(n)]
    v = [lin(x[i], W["wv"]) for i in range(n)]
    concat = [[0.0] * d for _ in range(n)]
    for head in range(h):
        cols = range(head * dh, (head + 1) * dh)
        for i in range(n):
            logits = [sum(q[i][c] * k[j][c] for c in cols) / math.sqrt(dh) for j in range(n)]
            m = max(logits)
            e = [math.exp(s - m) for s in logits]
            z = sum(e)
            for c in cols:
                concat[i][c] = sum(e[j] / z * v[j][c] for j in range(n))
    H = [[a + b for a, b in zip(lin(concat[i], W["wo"]), x[i])] for i in range(n)]
    out = []
    for i in range(n):
        hidden = [_erf_gelu(a + b) for a, b in zip(lin(H[i], W["w1"]), W["b1"])]
        f = [a + b for a, b in zip(lin(hidden, W["w2"]), W["b2"])]
        out.append([a + b for a, b in zip(f, H[i])])
    return np.array(out)


def brute_cross(ea, et, p: CrossAttentionParams):
    def attend(qs, ks, wq, wk, wv):
        d = wk.shape[1]
        out = []
        for qi in qs:
            qv = qi @ wq
            logits = np.array([qv @ (kj @ wk) / math.sqrt(d) for kj in ks])
            w = np.exp(logits - logits.max())
            w /= w.sum()
            out.append(sum(w[j] * (ks[j] @ wv) for j in range(len(ks))))
        return np.array(out)

    a = ea + attend(ea, et, p.wq_a.data, p.wk_t.data, p.wv_t.data)
    t = et + attend(et, ea, p.wq_t.data, p.wk_a.data, p.wv_a.data)
    return a, t


def _random_block(d, heads, seed):
    blk = TransformerBlockParams.init(d, nx.make_rng(seed), "blk", n_heads=heads, dropout=0.0)
    rng = np.random.default_rng(seed)
    for t in (blk.b1, blk.b2):
        t.data = rng.normal(size=t.shape)
    return blk


# ------------------------------------------------------------------ tests

def test_transformer_block_matches_brute_force_n2_d2():
    blk = TransformerBlockParams.init(2, nx.make_rng(0), "blk", n_heads=1, dropout=0.0)
    blk.wq.data = np.array([[0.5, -1.0], [2.0, 0.25]])
    blk.wk.data = np.array([[1.0, 0.0], [0.5, -0.5]])
    blk.wv.data = np.array([[0.3, 0.7], [-0.2, 1.1]])
    blk.wo.data = np.array([[1.0, -0.4], [0.6, 0.9]])
    blk.b1.data = np.linspace(-0.5, 0.5, 8)
    blk.b2.data = np.array([0.1, -0.2])
    x = np.array([[1.0, -2.0], [0.5, 0.75]])
    assert np.allclose(transformer_project(x, blk).data, brute_block(x, blk), atol=1e-12)


@pytest.mark.parametrize("d,heads,n", [(8, 8, 3), (16, 8, 5), (4, 2, 1)])
def test_transformer_block_matches_brute_force_multihead(d, heads, n):
    blk = _random_block(d, heads, seed=d + n)
    x = np.random.default_rng(n).normal(size=(n, d))
    assert np.allclose(transformer_project(x, blk).data, brute_block(x, blk), atol=1e-10)


def test_zero_value_and_ffn_weights_give_identity():
    blk = TransformerBlockParams.init(16, nx.make_rng(1), "blk")
    for t in (blk.wv, blk.w2, blk.b2):
        t.data = np.zeros(t.shape)
    x = np.random.default_rng(0).normal(size=(5, 16))
    assert np.array_equal(transformer_project(x, blk).data, x)


def test_single_token_attention_is_output_projection_of_value():
    blk = TransformerBlockParams.init(8, nx.make_rng(2), "blk")
    for t in (blk.w1, blk.w2):
        t.data = np.zeros(t.shape)
    x = np.random.default_rng(1).normal(size=(1, 8))
    expected = x @ blk.wv.data @ blk.wo.data + x
    assert np.allclose(transformer_project(x, blk).data, expected, atol=1e-13)


def test_transformer_rejects_bad_dims():
    blk = TransformerBlockParams.init(8, nx.make_rng(0), "blk")
    with pytest.raises(ConfigError):
        transformer_project(np.ones((2, 4)), blk)
    with pytest.raises(ConfigError):
        RefinerConfig(d_model=12, n_heads=8)


def test_padding_does_not_change_valid_rows():
    blk = _random_block(8, 8, seed=5)
    rng = np.random.default_rng(0)
    seqs = [rng.normal(size=(3, 8)), rng.normal(size=(1, 8))]
    x, valid = pad_batch(seqs)
    batched = transformer_project(x, blk, valid=valid).data
    for i, s in enumerate(seqs):
        assert np.allclose(batched[i, : len(s)], transformer_project(s, blk).data, atol=1e-13)


def test_linear_project_identity_and_bias():
    p = SharedProjectionParams(nx.Tensor(np.eye(3)), nx.Tensor(np.zeros(3)))
    z = np.random.default_rng(0).normal(size=(4, 3))
    assert np.array_equal(linear_project(z, p).data, z)
    p = SharedProjectionParams(nx.Tensor(np.ones((3, 2))), nx.Tensor(np.array([0.5, -1.0])))
    assert np.array_equal(linear_project(np.zeros((2, 3)), p).data, np.array([[0.5, -1.0], [0.5, -1.0]]))


def test_linear_project_hand_arithmetic():
    z = np.array([[1.0, 2.0, 0.0, -1.0], [0.5, 0.0, 3.0, 2.0], [-2.0, 1.0, 1.0, 0.0]])
    w = np.array([[1.0, 0.0], [0.0, 1.0], [2.0, -1.0], [0.5, 0.5]])
    b = np.array([0.1, -0.1])
    expected = np.array([[0.6, 1.4], [7.6, -2.1], [0.1, -0.1]])
    out = linear_project(z, SharedProjectionParams(nx.Tensor(w), nx.Tensor(b))).data
    assert np.allclose(out, expected, atol=1e-12)


def test_linear_project_shape_mismatch():
    p = SharedProjectionParams(nx.Tensor(np.ones((3, 2))), nx.Tensor(np.zeros(2)))
    with pytest.raises(ConfigError):
        linear_project(np.ones((2, 4)), p)


def _random_cross(d, seed):
    p = CrossAttentionParams.init(d, nx.make_rng(seed), zero_values=False)
    return p


def test_cross_attention_matches_brute_force():
    p = _random_cross(2, 0)
    ea = np.array([[1.0, -0.5], [0.25, 2.0]])
    et = np.array([[0.3, 0.3], [-1.0, 0.5]])
    a, t = cross_attend(ea, et, p)
    ba, bt = brute_cross(ea, et, p)
    assert np.allclose(a.data, ba, atol=1e-13)
    assert np.allclose(t.data, bt, atol=1e-13)


def test_cross_attention_single_text_token():
    p = _random_cross(4, 1)
    ea = np.random.default_rng(0).normal(size=(3, 4))
    et = np.random.default_rng(1).normal(size=(1, 4))
    a, _, w_at, _ = cross_attend(ea, et, p, return_weights=True)
    assert np.allclose(w_at.data, 1.0)
    assert np.allclose(a.data - ea, et @ p.wv_t.data, atol=1e-13)


def test_cross_attention_zero_values_is_identity():
    p = CrossAttentionParams.init(4, nx.make_rng(0))  # values start at zero
    ea = np.random.default_rng(0).normal(size=(3, 4))
    et = np.random.default_rng(1).normal(size=(2, 4))
    a, t = cross_attend(ea, et, p)
    assert np.array_equal(a.data, ea) and np.array_equal(t.data, et)


def test_cross_attention_empty_is_usage_error():
    p = _random_cross(4, 1)
    with pytest.raises(UsageError):
        cross_attend(np.zeros((0, 4)), np.ones((2, 4)), p)


@settings(max_examples=50)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 10_000))
def test_cross_attention_rows_are_stochastic(n_a, n_t, seed):
    rng = np.random.default_rng(seed)
    p = _random_cross(4, seed)
    _, _, w_at, w_ta = cross_attend(rng.normal(size=(n_a, 4)) * 3, rng.normal(size=(n_t, 4)) * 3, p,
                                    return_weights=True)
    assert np.allclose(w_at.data.sum(-1), 1.0, atol=1e-9)
    assert np.allclose(w_ta.data.sum(-1), 1.0, atol=1e-9)


def _params(**kw):
    cfg = RefinerConfig(d_model=16, d_shared=8, **kw)
    return RefinerParams.init(cfg, seed=0)


def test_refine_pair_outputs_unit_and_deterministic():
    p = _params()
    rng = np.random.default_rng(0)
    a, t = rng.normal(size=(4, 16)), rng.normal(size=(3, 16))
    va, vt = refine_pair(a, t, p, nx.make_rng(9))
    assert np.linalg.norm(va.data) == pytest.approx(1.0, abs=1e-9)
    assert np.linalg.norm(vt.data) == pytest.approx(1.0, abs=1e-9)
    va2, vt2 = refine_pair(a, t, p, nx.make_rng(9))
    assert np.array_equal(va.data, va2.data) and np.array_equal(vt.data, vt2.data)


def test_training_path_reduces_to_inference_path_without_cross_values():
    # no dropout and always the learned query: only cross-attention separates the paths
    p = _params(dropout=0.0, replace_prob=1.0)
    rng = np.random.default_rng(1)
    p.pool.q_pool.data = rng.normal(size=8)
    a, t = rng.normal(size=(4, 16)), rng.normal(size=(3, 16))
    va, vt = refine_pair(a, t, p, nx.make_rng(0))
    assert np.allclose(va.data, embed_single(a, "audio", p), atol=1e-12)
    assert np.allclose(vt.data, embed_single(t, "text", p), atol=1e-12)


def test_embed_single_unit_and_repeatable():
    p = _params()
    x = np.random.default_rng(2).normal(size=(5, 16))
    v = embed_single(x, "audio", p)
    assert np.linalg.norm(v) == pytest.approx(1.0, abs=1e-9)
    assert np.array_equal(v, embed_single(x, "audio", p))


def test_embed_single_one_chunk_ignores_pooling_query():
    p = _params()
    x = np.random.default_rng(3).normal(size=(1, 16))
    before = embed_single(x, "audio", p)
    p.pool.q_pool.data = np.random.default_rng(4).normal(size=8) * 10
    assert np.allclose(before, embed_single(x, "audio", p), atol=1e-12)


def test_embed_single_is_permutation_invariant():
    p = _params()
    rng = np.random.default_rng(5)
    p.pool.q_pool.data = rng.normal(size=8)
    x = rng.normal(size=(6, 16))
    perm = rng.permutation(6)
    assert np.allclose(embed_single(x, "audio", p), embed_single(x[perm], "audio", p), atol=1e-9)


def test_embed_single_empty_is_usage_error():
    with pytest.raises(UsageError):
        embed_single(np.zeros((0, 16)), "audio", _params())


def test_embed_batch_matches_embed_single():
    p = _params()
    rng = np.random.default_rng(6)
    seqs = [rng.normal(size=(n, 16)) for n in (1, 4, 2)]
    x, valid = pad_batch(seqs)
    batched = embed_batch(x, valid, "audio", p)
    for i, s in enumerate(seqs):
        assert np.allclose(batched[i], embed_single(s, "audio", p), atol=1e-12)


def test_linear_projection_variant_has_no_blocks():
    p = _params(projection="linear")
    assert p.audio_blocks == [] and p.text_blocks == []
    x = np.random.default_rng(0).normal(size=(3, 16))
    e = x @ p.audio_proj.w.data + p.audio_proj.b.data
    assert np.allclose(embed_single(x, "audio", p), e.mean(0) / np.linalg.norm(e.mean(0)), atol=1e-12)


def test_state_round_trip():
    p = _params()
    q = RefinerParams.init(p.config, seed=5)
    q.load_state(p.state())
    for (na, a), (nb, b) in zip(p.named_tensors(), q.named_tensors()):
        assert na == nb and np.array_equal(a.data, b.data)


def test_parameter_names_are_unique():
    names = [n for n, _ in _params(pre_norm=True, bilinear_pool=True).named_tensors()]
    assert len(names) == len(set(names))


def test_batched_training_path_gradcheck_with_prenorm_and_bilinear():
    cfg = RefinerConfig(d_model=8, d_shared=4, replace_prob=0.5, pre_norm=True, bilinear_pool=True)
    p = RefinerParams.init(cfg, seed=1, learnable_temperature=0.1)
    rng = np.random.default_rng(0)
    for t in p.tensors():
        t.data = t.data + rng.normal(0, 0.3, t.shape)
    A, av = pad_batch([rng.normal(size=(2, 8)), rng.normal(size=(3, 8))])
    T, tv = pad_batch([rng.normal(size=(2, 8)), rng.normal(size=(1, 8))])
    from audioret.objective import hybrid_loss

    def loss():
        out = refine_batch(A, av, T, tv, p, nx.make_rng(3), "train")
        return hybrid_loss(out.audio, out.text, temperature=p.log_temperature)[0]

    report = nx.gradcheck(loss, p.tensors())
    assert max(report.values()) < 1e-4, report
