"""Window partitioning, positional encodings, and gated double attention."""

import math

import numpy as np
import numpy.testing as npt
import pytest

from hitsr import attention as A
from hitsr import tensor as T
from hitsr.errors import ConfigurationError, ContractError, DimensionError, NumericError
from hitsr.gradcheck import grad_check
from hitsr.rng import RngState


def tens(shape, seed=0, dtype=np.float64, grad=False):
    data = np.random.default_rng(seed).normal(size=shape)
    return T.Tensor(data, requires_grad=grad, dtype=dtype)


# ------------------------------------------------------------- config

def test_config_defaults_and_validation():
    cfg = A.AttentionConfig(embed_dim=256, num_heads=4)
    assert cfg.head_dim == 64 and cfg.shift == 4 and cfg.window_size == 8
    with pytest.raises(ConfigurationError):
        A.AttentionConfig(embed_dim=100, num_heads=3)
    with pytest.raises(ConfigurationError):
        A.AttentionConfig(embed_dim=64, num_heads=2, window_size=4, shift=4)


def test_gating_params_count_and_init():
    g = A.GatingParams.create(4, init=1.0)
    assert g.lam.shape == (4,) and g.lam.requires_grad
    npt.assert_allclose(g.lam.data, 1.0)
    npt.assert_allclose(g.sigma_values(), 1 / (1 + math.exp(-1.0)), rtol=1e-6)


# ------------------------------------------------------------- windows

def test_window_count_40x40_k8():
    x = tens((1, 40, 40, 8))
    ws = A.window_partition(x, 8, shifted=False)
    assert ws.num_windows == 25
    assert ws.tokens.shape == (25, 64, 8)


def test_window_zero_matches_brute_force_corner():
    x = tens((2, 8, 8, 3), seed=1)
    ws = A.window_partition(x, 4, shifted=False)
    expect = x.data[0, 0:4, 0:4, :].reshape(16, 3)
    npt.assert_array_equal(ws.tokens.data[0], expect)
    # second batch element starts after the first element's 4 windows
    expect_b1 = x.data[1, 0:4, 0:4, :].reshape(16, 3)
    npt.assert_array_equal(ws.tokens.data[4], expect_b1)


def test_window_round_trip_local_and_shifted():
    rng = np.random.default_rng(3)
    for shifted in (False, True):
        x = T.Tensor(rng.normal(size=(2, 12, 8, 5)), dtype=np.float64)
        ws = A.window_partition(x, 4, shifted=shifted)
        back = A.window_reverse(ws)
        npt.assert_array_equal(back.data, x.data)


def test_shifted_partition_rolls_by_half_window():
    x = tens((1, 8, 8, 1), seed=5)
    ws = A.window_partition(x, 4, shifted=True)
    rolled = np.roll(x.data, (-2, -2), axis=(1, 2))
    npt.assert_array_equal(ws.tokens.data[0], rolled[0, 0:4, 0:4].reshape(16, 1))


def test_window_reverse_twice_rejected():
    ws = A.window_partition(tens((1, 4, 4, 2)), 4, shifted=False)
    A.window_reverse(ws)
    with pytest.raises(ContractError, match="already"):
        A.window_reverse(ws)


def test_window_partition_divisibility_error_names_values():
    with pytest.raises(ConfigurationError, match=r"H=10.*W=8.*k=4"):
        A.window_partition(tens((1, 10, 8, 2)), 4, shifted=False)


def test_window_gradient_flows_through_round_trip():
    x = tens((1, 8, 8, 2), grad=True)
    ws = A.window_partition(x, 4, shifted=True)
    out = A.window_reverse(ws)
    T.backward(T.sum_(T.mul(out, out)))
    npt.assert_allclose(x.grad, 2 * x.data, atol=1e-12)


# ------------------------------------------------------------- encodings

def test_spe_origin_and_range():
    tab = A.spe((4, 4), 16).reshape(4, 4, 16)
    origin = tab[0, 0]
    npt.assert_allclose(origin[0::2], 0.0, atol=1e-7)  # sin channels
    npt.assert_allclose(origin[1::2], 1.0, atol=1e-7)  # cos channels
    assert np.all(tab >= -1.0) and np.all(tab <= 1.0)


def test_spe_positions_distinct_on_4x4():
    tab = A.spe((4, 4), 16)
    for i in range(16):
        for j in range(i + 1, 16):
            assert not np.allclose(tab[i], tab[j]), (i, j)


def test_spe_odd_dim_rejected():
    with pytest.raises(ConfigurationError, match="even"):
        A.spe((4, 4), 7)


def test_relative_position_index_covers_table():
    k = 4
    idx = A.relative_position_index(k)
    assert idx.shape == (16, 16)
    assert idx.min() >= 0 and idx.max() < (2 * k - 1) ** 2
    # zero offset maps every diagonal entry to the same table row
    assert len(set(idx[np.arange(16), np.arange(16)].tolist())) == 1


def test_rpe_bias_shape_and_sharing():
    rpb = A.RelPosBias.create(4, num_heads=3, rng=RngState(0))
    b = rpb.bias()
    assert b.shape == (3, 16, 16)
    # same offset pair pulls the same table row
    i1, j1, i2, j2 = 0, 1, 1, 2  # both are "one step right"
    npt.assert_array_equal(b.data[:, i1, j1], b.data[:, i2, j2])


# ------------------------------------------------------------- projections

def make_weights(D, rng, dtype=np.float64, with_ref=True):
    def w(seed_tag):
        return T.Tensor(rng.normal((D, D), std=0.2), requires_grad=True, dtype=dtype)

    def b():
        return T.Tensor(np.zeros(D), requires_grad=True, dtype=dtype)

    return A.QKVWeights(wq=w("q"), bq=b(), wk=w("k"), bk=b(), wv=w("v"), bv=b(),
                        wq_ref=w("qr") if with_ref else None,
                        bq_ref=b() if with_ref else None)


def test_qkv_zero_weights_zero_outputs():
    cfg = A.AttentionConfig(embed_dim=8, num_heads=2, window_size=2)
    zw = A.QKVWeights(*(T.Tensor(np.zeros((8, 8)), dtype=np.float64) if i % 2 == 0
                        else T.Tensor(np.zeros(8), dtype=np.float64) for i in range(8)))
    x = tens((3, 4, 8))
    q, k, v, qr = A.qkv_project(x, x, cfg, zw)
    for t in (q, k, v, qr):
        npt.assert_array_equal(t.data, 0.0)


def test_qkv_identity_projection_preserves_basis_vector():
    cfg = A.AttentionConfig(embed_dim=4, num_heads=1, window_size=2)
    eye = T.Tensor(np.eye(4), dtype=np.float64)
    zb = T.Tensor(np.zeros(4), dtype=np.float64)
    w = A.QKVWeights(wq=eye, bq=zb, wk=eye, bk=zb, wv=eye, bv=zb, wq_ref=None, bq_ref=None)
    x = np.zeros((1, 2, 4))
    x[0, 0, 0] = 1.0  # e1 token
    q, _, _, _ = A.qkv_project(T.Tensor(x, dtype=np.float64), None, cfg, w)
    npt.assert_array_equal(q.data[0, 0, 0], [1.0, 0, 0, 0])


def test_head_split_merge_round_trip():
    cfg = A.AttentionConfig(embed_dim=12, num_heads=3, window_size=2)
    x = tens((2, 4, 12), seed=2)
    eye = T.Tensor(np.eye(12), dtype=np.float64)
    zb = T.Tensor(np.zeros(12), dtype=np.float64)
    w = A.QKVWeights(wq=eye, bq=zb, wk=eye, bk=zb, wv=eye, bv=zb, wq_ref=None, bq_ref=None)
    q, _, _, _ = A.qkv_project(x, None, cfg, w)
    back = A.merge_heads(q, eye, zb)
    npt.assert_allclose(back.data, x.data, atol=1e-12)


def test_qkv_stream_shape_mismatch():
    cfg = A.AttentionConfig(embed_dim=8, num_heads=2, window_size=2)
    rng = RngState(1)
    w = make_weights(8, rng)
    with pytest.raises(DimensionError, match="reference tokens"):
        A.qkv_project(tens((3, 4, 8)), tens((3, 5, 8)), cfg, w)


# ------------------------------------------------------------- gated attention

def project_case(seed=0, N=2, heads=2, L=4, dh=2):
    rng = np.random.default_rng(seed)
    mk = lambda: T.Tensor(rng.normal(size=(N, heads, L, dh)), dtype=np.float64,
                          requires_grad=True)
    return mk(), mk(), mk(), mk()


def straight_line_eq2(q_s, k, v, q_c, lam, bias):
    """Independent scalar re-implementation of the gated fusion."""
    N, H, L, d = q_s.shape
    out = np.zeros_like(v)
    for n in range(N):
        for h in range(H):
            def sm(m):
                rows = []
                for r in m:
                    e = np.exp(r - r.max())
                    rows.append(e / e.sum())
                return np.array(rows)

            b = bias[h] if bias is not None else 0.0
            s = sm(q_s[n, h] @ k[n, h].T / math.sqrt(d) + b)
            c = sm(q_c[n, h] @ k[n, h].T / math.sqrt(d) + b)
            sig = 1.0 / (1.0 + math.exp(-lam[h]))
            out[n, h] = ((1 - sig) * s + sig * c) @ v[n, h]
    return out


def test_gate_lambda_one_matches_straight_line_oracle():
    q, k, v, qr = project_case(seed=4)
    gating = A.GatingParams.create(2, init=1.0)
    gating.lam = T.Tensor(np.ones(2), requires_grad=True, dtype=np.float64)
    rpb = A.RelPosBias.create(2, num_heads=2, rng=RngState(7))
    rpb.table = T.Tensor(rpb.table.data.astype(np.float64), requires_grad=True,
                         dtype=np.float64)
    got = A.gated_double_attention(q, k, v, qr, gating=gating, rpe=rpb).data
    want = straight_line_eq2(q.data, k.data, v.data, qr.data,
                             np.ones(2), rpb.bias().data)
    npt.assert_allclose(got, want, atol=1e-6)


def test_gate_extremes_select_pure_branches():
    q, k, v, qr = project_case(seed=5)
    self_only = A.gated_double_attention(q, k, v, None).data
    cross_only = A.gated_double_attention(None, k, v, qr).data
    zero = A.gated_double_attention(q, k, v, qr, sigma_override=0.0).data
    one = A.gated_double_attention(q, k, v, qr, sigma_override=1.0).data
    npt.assert_allclose(zero, self_only, atol=1e-12)
    npt.assert_allclose(one, cross_only, atol=1e-12)


def test_gate_interpolation_is_linear():
    q, k, v, qr = project_case(seed=6)
    out0 = A.gated_double_attention(q, k, v, qr, sigma_override=0.0).data
    out1 = A.gated_double_attention(q, k, v, qr, sigma_override=1.0).data
    for s in (0.25, 0.5, 0.75):
        outs = A.gated_double_attention(q, k, v, qr, sigma_override=s).data
        npt.assert_allclose(outs, (1 - s) * out0 + s * out1, atol=1e-5)


def test_gated_rows_are_stochastic():
    q, k, v, qr = project_case(seed=7)
    gating = A.GatingParams.create(2, init=0.3)
    # probe the attention matrix via v = identity columns
    N, H, L, dh = v.shape
    for col in range(dh):
        e = np.zeros((N, H, L, dh))
        e[..., col] = 1.0
        out = A.gated_double_attention(q, k, T.Tensor(e, dtype=np.float64),
                                       qr, gating=gating).data
        npt.assert_allclose(out[..., col], 1.0, atol=1e-5)


def test_identical_queries_make_gating_inert():
    q, k, v, _ = project_case(seed=8)
    self_out = A.gated_double_attention(q, k, v, None).data
    for lam in (-3.0, 0.0, 2.0):
        g = A.GatingParams.create(2, init=lam)
        both = A.gated_double_attention(q, k, v, q_ref=q, gating=g).data
        npt.assert_allclose(both, self_out, atol=1e-12)


def test_window_batch_permutation_equivariance():
    q, k, v, qr = project_case(seed=9, N=5)
    g = A.GatingParams.create(2, init=1.0)
    base = A.gated_double_attention(q, k, v, qr, gating=g).data
    perm = np.array([3, 0, 4, 1, 2])
    qp = T.Tensor(q.data[perm], dtype=np.float64)
    kp = T.Tensor(k.data[perm], dtype=np.float64)
    vp = T.Tensor(v.data[perm], dtype=np.float64)
    qrp = T.Tensor(qr.data[perm], dtype=np.float64)
    permuted = A.gated_double_attention(qp, kp, vp, qrp, gating=g).data
    npt.assert_allclose(permuted, base[perm], atol=1e-12)


def test_nan_logits_report_block_label():
    q, k, v, qr = project_case(seed=10)
    q.data[0, 0, 0, 0] = np.nan
    with pytest.raises(NumericError, match="b1_3/self"):
        A.gated_double_attention(q, k, v, qr, sigma_override=0.5, label="b1_3")


def test_both_branches_absent_rejected():
    _, k, v, _ = project_case(seed=11)
    with pytest.raises(ConfigurationError):
        A.gated_double_attention(None, k, v, None)


# ------------------------------------------------------------- merge

def test_merge_heads_identity_is_concat():
    heads = tens((2, 2, 3, 4), seed=12)
    eye = T.Tensor(np.eye(8), dtype=np.float64)
    out = A.merge_heads(heads, eye)
    want = heads.data.transpose(0, 2, 1, 3).reshape(2, 3, 8)
    npt.assert_allclose(out.data, want, atol=1e-12)


def test_merge_single_head_is_linear_projection():
    heads = tens((2, 1, 3, 4), seed=13)
    w = tens((4, 4), seed=14)
    out = A.merge_heads(heads, w)
    want = heads.data[:, 0] @ w.data
    npt.assert_allclose(out.data, want, atol=1e-12)


def test_merge_heads_gradient_reaches_every_head():
    heads = tens((1, 3, 2, 2), seed=15, grad=True)
    w = tens((6, 6), seed=16, grad=True)

    def fn(h, ww):
        return T.sum_(T.mul(A.merge_heads(h, ww), A.merge_heads(h, ww)))

    res = grad_check(fn, [heads, w], eps=1e-5)
    assert res["max_rel_err"] < 1e-6
    T.backward(fn(heads, w))
    per_head = np.abs(heads.grad).sum(axis=(0, 2, 3))
    assert (per_head > 0).all()


def test_full_attention_path_gradcheck():
    # end-to-end through qkv -> gated attention -> merge, float64
    cfg = A.AttentionConfig(embed_dim=4, num_heads=2, window_size=2)
    rng = RngState(3)
    w = make_weights(4, rng)
    gating = A.GatingParams.create(2, init=1.0)
    gating.lam = T.Tensor(np.ones(2), requires_grad=True, dtype=np.float64)
    rpb = A.RelPosBias.create(2, num_heads=2, rng=RngState(5))
    rpb.table = T.Tensor(rpb.table.data.astype(np.float64), requires_grad=True,
                         dtype=np.float64)
    wo = T.Tensor(np.random.default_rng(8).normal(size=(4, 4)), requires_grad=True,
                  dtype=np.float64)
    x = tens((2, 4, 4), seed=17, grad=True)
    r = tens((2, 4, 4), seed=18, grad=True)

    def fn(xx, rr, lam, table, woo):
        g = A.GatingParams(lam=lam)
        rp = A.RelPosBias(table, 2)
        q, k, v, qr = A.qkv_project(xx, rr, cfg, w)
        att = A.gated_double_attention(q, k, v, qr, gating=g, rpe=rp)
        return T.mean(T.mul(A.merge_heads(att, woo), A.merge_heads(att, woo)))

    res = grad_check(fn, [x, r, gating.lam, rpb.table, wo], eps=1e-5)
    assert res["max_rel_err"] < 1e-6
