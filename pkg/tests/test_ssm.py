import math

import numpy as np
import pytest

from evmamba import tensor as T
from evmamba.ssm import (
    SS2DParams, VSSBlock, _projections, _scan_forward, cross_merge, cross_scan,
    discretize, scan_orders, scan_reference, scan_stats, selective_scan_op, ss2d,
)
from evmamba.tensor import Tensor, no_grad
from conftest import coordinate_check
from gradcheck_cases import run_case
from oracles import scan_loop


def _scan(u, delta, A, B, C, D, a_bias=None):
    args = [Tensor(np.asarray(a)) for a in (u, delta, A, B, C, D)]
    if a_bias is not None:
        args.append(Tensor(np.asarray(a_bias)))
    with no_grad():
        return selective_scan_op(*args).data


def _random_instance(rng, dtype=np.float64):
    L, N, d = int(rng.integers(1, 33)), int(rng.integers(1, 9)), int(rng.integers(1, 5))
    return (rng.uniform(-1, 1, (1, L, d)).astype(dtype),
            rng.uniform(0.001, 1.0, (1, L, d)).astype(dtype),
            -rng.uniform(0.1, 4.0, N).astype(dtype),
            rng.standard_normal((1, L, N)).astype(dtype),
            rng.standard_normal((1, L, N)).astype(dtype),
            rng.standard_normal(d).astype(dtype))


# -- discretization ---------------------------------------------------------------

def test_discretize_half_decay():
    a_bar, b_bar = discretize([-1.0], [2.0], math.log(2))
    assert a_bar[0, 0] == pytest.approx(0.5, abs=1e-15)
    assert b_bar[0, 0] == pytest.approx(2 * math.log(2), abs=1e-15)


def test_discretize_small_step_is_identity():
    a_bar, b_bar = discretize([-1.0, -5.0], [1.0, 3.0], 1e-12)
    np.testing.assert_allclose(a_bar, 1.0, atol=1e-10)
    np.testing.assert_allclose(b_bar, 0.0, atol=1e-10)


def test_discretize_matches_formula(rng):
    for _ in range(20):
        N, d = rng.integers(1, 9, 2)
        A, B, dt = -rng.uniform(0.1, 3, N), rng.standard_normal(N), rng.uniform(0.01, 2, d)
        a_bar, b_bar = discretize(A, B, dt)
        for c in range(d):
            for n in range(N):
                assert a_bar[c, n] == pytest.approx(math.exp(dt[c] * A[n]), rel=1e-14)
                assert b_bar[c, n] == pytest.approx(dt[c] * B[n], rel=1e-14)


@pytest.mark.parametrize("dt", [0.0, -0.1])
def test_discretize_rejects_nonpositive_step(dt):
    with pytest.raises(ValueError):
        discretize([-1.0], [1.0], [0.5, dt])


# -- selective scan ------------------------------------------------------------------

def test_scalar_recurrence_by_hand():
    ln2 = math.log(2)
    y = _scan([[[1.0], [0.0]]], [[[ln2], [ln2]]], [-1.0], [[[1.0], [1.0]]],
              [[[1.0], [1.0]]], [0.0])
    np.testing.assert_allclose(y[0, :, 0], [ln2, 0.5 * ln2], atol=1e-15)
    assert y[0, 0, 0] == pytest.approx(0.6931, abs=1e-4)
    assert y[0, 1, 0] == pytest.approx(0.3466, abs=1e-4)


def test_zero_decay_is_memoryless(rng):
    u, dt, A, B, C, D = _random_instance(rng)
    L, d = u.shape[1:]
    # exp(-1000) underflows to exactly 0, so nothing carries over
    y = _scan(u, dt, A, B, C, D, a_bias=np.full((1, d, len(A)), -1000.0))
    expect = dt[0] * u[0] * (B[0] * C[0]).sum(axis=1)[:, None] + D * u[0]
    np.testing.assert_allclose(y[0], expect, rtol=1e-13, atol=1e-15)


def test_scan_matches_loop_oracle():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        u, dt, A, B, C, D = _random_instance(rng)
        y = _scan(u, dt, A, B, C, D)
        ref = scan_loop(u[0], dt[0], A, B[0], C[0], D)
        assert np.abs(y[0] - ref).max() < 1e-6
        assert np.abs(scan_reference(u[0], dt[0], A, B[0], C[0], D) - ref).max() < 1e-12


def test_scan_float32_close_to_oracle():
    for seed in range(20):
        rng = np.random.default_rng(seed)
        inst = _random_instance(rng, np.float32)
        y = _scan(*inst)
        assert y.dtype == np.float32
        u, dt, A, B, C, D = (np.asarray(a, dtype=np.float64) for a in inst)
        ref = scan_loop(u[0], dt[0], A, B[0], C[0], D)
        assert np.abs(y[0] - ref).max() < 1e-4


def test_scan_with_decay_bias_matches_oracle(rng):
    for _ in range(20):
        u, dt, A, B, C, D = _random_instance(rng)
        bias = -rng.uniform(0, 1, (1, u.shape[2], len(A)))
        y = _scan(u, dt, A, B, C, D, a_bias=bias)
        np.testing.assert_allclose(y[0], scan_loop(u[0], dt[0], A, B[0], C[0], D, bias[0]),
                                   atol=1e-12)


def test_scan_batches_are_independent(rng):
    G, L, d, N = 3, 6, 2, 4
    u, dt = rng.standard_normal((G, L, d)), rng.uniform(0.1, 1, (G, L, d))
    A, B, C, D = -rng.uniform(0.5, 2, N), rng.standard_normal((G, L, N)), \
        rng.standard_normal((G, L, N)), rng.standard_normal(d)
    y = _scan(u, dt, A, B, C, D)
    for g in range(G):
        np.testing.assert_array_equal(y[g:g + 1], _scan(u[g:g + 1], dt[g:g + 1], A,
                                                        B[g:g + 1], C[g:g + 1], D))


def test_scan_shape_mismatch(rng):
    u = rng.standard_normal((1, 4, 2))
    with pytest.raises(ValueError):
        _scan(u, np.ones((1, 4, 2)), -np.ones(3), np.ones((1, 4, 2)), np.ones((1, 4, 3)),
              np.ones(2))
    with pytest.raises(ValueError):
        _scan(u, np.ones((1, 4, 2)), -np.ones(3), np.ones((1, 4, 3)), np.ones((1, 4, 3)),
              np.ones(3))


def test_long_scan_stays_bounded():
    rng = np.random.default_rng(9)
    L, d, N = 10_000, 4, 8
    u = rng.uniform(-1, 1, (1, L, d))
    dt = rng.uniform(0.001, 1.0, (1, L, d))
    A = -np.arange(1.0, N + 1)
    B = rng.uniform(-1, 1, (1, L, N))
    C = rng.uniform(-1, 1, (1, L, N))
    dA = np.exp(dt[..., None] * A)
    y, hs = _scan_forward(u, dt, dA, B, C, np.ones(d))
    assert np.isfinite(y).all() and np.isfinite(hs).all()
    # |h| <= sup|dt*B*u| / (1 - sup A_bar) for a contraction with bounded drive
    bound = np.abs(dt[..., None] * B[:, :, None, :] * u[..., None]).max() / (1 - dA.max())
    assert np.abs(hs).max() <= bound


# -- cross scan / merge ------------------------------------------------------------------

def test_cross_scan_two_by_two():
    x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1))
    seqs = cross_scan(x).data[:, 0, :, 0]
    np.testing.assert_array_equal(seqs, [[1, 2, 3, 4], [4, 3, 2, 1], [1, 3, 2, 4], [4, 2, 3, 1]])


def test_single_row_orders_coincide(rng):
    x = Tensor(rng.standard_normal((2, 1, 7, 3)))
    seqs = cross_scan(x).data
    np.testing.assert_array_equal(seqs[0], seqs[2])
    np.testing.assert_array_equal(seqs[1], seqs[3])


def test_orders_are_permutations(rng):
    for H, W in [(1, 1), (2, 3), (5, 4)]:
        for order in scan_orders(H, W):
            np.testing.assert_array_equal(np.sort(order.permutation), np.arange(H * W))
            np.testing.assert_array_equal(order.permutation[order.inverse], np.arange(H * W))
        x = rng.standard_normal((1, H, W, 2))
        for s in cross_scan(Tensor(x)).data:
            np.testing.assert_array_equal(np.sort(s[0], axis=0), np.sort(x.reshape(-1, 2), axis=0))


def test_merge_of_scan_is_four_times_identity(rng):
    for _ in range(50):
        H, W, d = rng.integers(1, 7, 3)
        x = rng.standard_normal((2, H, W, d))
        out = cross_merge(cross_scan(Tensor(x)), H, W).data
        np.testing.assert_array_equal(out, 4 * x)


def test_merge_of_ones_and_linearity(rng):
    np.testing.assert_array_equal(cross_merge(Tensor(np.ones((4, 1, 6, 2))), 2, 3).data, 4.0)
    x = rng.standard_normal((1, 3, 4, 2))
    seqs = cross_scan(Tensor(x)).data.copy()
    seqs[2] = 0
    np.testing.assert_allclose(cross_merge(Tensor(seqs), 3, 4).data, 3 * x, rtol=1e-15)


def test_merge_length_mismatch():
    with pytest.raises(ValueError):
        cross_merge(Tensor(np.ones((4, 1, 5, 2))), 2, 3)


# -- SS2D -----------------------------------------------------------------------------

def _branch_outputs(x, p):
    """Per-order scan outputs before the merge, shape (4, G, L, d)."""
    G, H, W, d = x.shape
    xs = cross_scan(Tensor(x))
    q = _projections(xs, p)
    y = selective_scan_op(T.reshape(xs, (4 * G, H * W, d)), T.reshape(q["delta"], (4 * G, H * W, d)),
                          p.A(), T.reshape(q["B"], (4 * G, H * W, -1)),
                          T.reshape(q["C"], (4 * G, H * W, -1)), p.D)
    return y.data.reshape(4, G, H * W, d)


def test_single_cell_is_four_single_steps(rng):
    p = SS2DParams(3, 4, rng, dtype=np.float64)
    x = rng.standard_normal((1, 1, 1, 3))
    with no_grad():
        out = ss2d(Tensor(x), p).data[0, 0, 0]
    u = x[0, 0, 0]
    A = -np.exp(p.A_log.data)
    expect = np.zeros(3)
    for k in range(4):
        dt = np.logaddexp(0, u @ p.w_dt.data[k, 0] + p.dt_bias.data[k, 0, 0])
        b, c = u @ p.w_b.data[k, 0], u @ p.w_c.data[k, 0]
        a_bar, b_bar = discretize(A, b, dt)
        expect += (b_bar * u[:, None]) @ c + p.D.data * u
    np.testing.assert_allclose(out, expect, rtol=1e-12)


def test_transpose_swaps_row_and_col_branches(rng):
    p = SS2DParams(3, 4, rng, dtype=np.float64)
    for name in ("w_dt", "dt_bias", "w_b", "w_c"):
        arr = getattr(p, name).data
        arr[1:] = arr[0]
    x = rng.standard_normal((2, 3, 5, 3))
    xt = x.transpose(0, 2, 1, 3)
    with no_grad():
        y, yt = _branch_outputs(x, p), _branch_outputs(xt, p)
        np.testing.assert_allclose(yt[0], y[2], rtol=1e-12)
        np.testing.assert_allclose(yt[1], y[3], rtol=1e-12)
        np.testing.assert_allclose(yt[2], y[0], rtol=1e-12)
        merged = ss2d(Tensor(x), p).data
        merged_t = ss2d(Tensor(xt), p).data
    np.testing.assert_allclose(merged_t, merged.transpose(0, 2, 1, 3), rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize("name", ["ss2d", "vss_block", "vss_block_b_gate", "vss_block_a_gate"])
def test_gradcheck_blocks(name):
    worst = max(run_case(name, seed, coordinate_check) for seed in range(20))
    assert worst < 1e-4, f"{name}: relative error {worst:.2e}"


# -- VSS block --------------------------------------------------------------------------

def test_zeroed_block_is_identity(rng):
    blk = VSSBlock(8, 4, rng, dtype=np.float64)
    for _, p in blk.named_parameters():
        p.data[...] = 0
    x = rng.standard_normal((2, 4, 4, 8))
    with no_grad():
        np.testing.assert_array_equal(blk(Tensor(x)).data, x)


def test_zeroed_output_projection_is_identity(rng):
    blk = VSSBlock(8, 4, rng, dtype=np.float64)
    blk.proj_out.weight.data[...] = 0
    blk.proj_out.bias.data[...] = 0
    x = rng.standard_normal((1, 3, 2, 8))
    with no_grad():
        np.testing.assert_array_equal(blk(Tensor(x)).data, x)


def test_block_preserves_shape(rng):
    for _ in range(5):
        dim = 2 * int(rng.integers(1, 6))
        H, W, G = rng.integers(1, 6, 3)
        blk = VSSBlock(dim, int(rng.integers(1, 5)), rng)
        x = rng.standard_normal((G, H, W, dim)).astype(np.float32)
        with no_grad():
            y = blk(Tensor(x))
        assert y.shape == x.shape and y.data.dtype == np.float32


def test_odd_channels_rejected(rng):
    with pytest.raises(ValueError):
        VSSBlock(7, 4, rng)
    blk = VSSBlock(8, 4, rng)
    with pytest.raises(ValueError):
        blk(Tensor(np.zeros((1, 2, 2, 7), np.float32)))


def test_stats_only_block_returns_partner_stats(rng):
    for mode in ("b-matrix", "a-matrix"):
        blk = VSSBlock(8, 4, rng, stats_only=mode)
        x = Tensor(rng.standard_normal((4, 2, 3, 8)).astype(np.float32))
        out, stats = blk(x, groups=2, stats_mode=mode)
        assert out is None
        if mode == "b-matrix":
            assert stats.B.shape == (4, 2, 1, 4)
        else:
            assert stats.log_decay.shape == (4, 2, 4, 4)
            assert (stats.log_decay.data < 0).all()


def test_gate_with_zero_partner_changes_nothing(rng):
    blk = VSSBlock(8, 4, rng, dtype=np.float64, gate="b-matrix")
    x = Tensor(rng.standard_normal((2, 2, 3, 8)))
    src = SS2DParams(4, 4, rng, dtype=np.float64)
    stats = scan_stats(Tensor(rng.standard_normal((2, 2, 3, 4))), src, 2, "b-matrix")
    stats.B = Tensor(np.zeros_like(stats.B.data))
    with no_grad():
        np.testing.assert_array_equal(blk(x, groups=2, partner=stats).data, blk(x).data)
