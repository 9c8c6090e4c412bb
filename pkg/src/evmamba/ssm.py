"""Selective state-space machinery: discretization, the selective scan,
four-way cross-scan / cross-merge and the VSS residual block.

The scan kernel runs the recurrence sequentially along the sequence and
has a hand-written backward pass; both are compiled with numba and work
for float32 and float64 inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from .nn import LayerNorm, Linear, Module, uniform_fan_in
from .tensor import (
    Parameter, Tensor, _result, depthwise_conv2d, exp, layer_norm, matmul, mul,
    neg, reshape, sigmoid, silu, softplus,
)

SCAN_NAMES = ("row_forward", "row_backward", "col_forward", "col_backward")


def discretize(A, B, delta):
    """Zero-order hold on the state, Euler on the input.

    ``A`` (N,) and ``B`` (N,) belong to one token, ``delta`` is (d,).
    Returns ``A_bar = exp(delta * A)`` and ``B_bar = delta * B``, both (d, N).
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    delta = np.atleast_1d(np.asarray(delta, dtype=np.float64))
    if (delta <= 0).any():
        raise ValueError("step size delta must be positive")
    return np.exp(delta[:, None] * A[None, :]), delta[:, None] * B[None, :]


# -- scan kernels -----------------------------------------------------------------

@numba.njit(cache=True)
def _scan_forward(u, delta, dA, B, C, D):
    G, L, d = u.shape
    N = B.shape[2]
    y = np.empty_like(u)
    hs = np.empty((G, L, d, N), dtype=u.dtype)
    h = np.zeros((d, N), dtype=u.dtype)
    for g in range(G):
        h[:] = 0
        for t in range(L):
            Bt = B[g, t]
            Ct = C[g, t]
            for c in range(d):
                x = delta[g, t, c] * u[g, t, c]
                acc = D[c] * u[g, t, c]
                a = dA[g, t, c]
                hc = h[c]
                out = hs[g, t, c]
                for n in range(N):
                    v = a[n] * hc[n] + x * Bt[n]
                    hc[n] = v
                    out[n] = v
                    acc += Ct[n] * v
                y[g, t, c] = acc
    return y, hs


@numba.njit(cache=True)
def _scan_backward(gy, u, delta, dA, A, B, C, D, hs, keep_glog):
    # Gradients w.r.t. u, delta, A (per g), B, C, D (per g) and log(dA).
    G, L, d = u.shape
    N = B.shape[2]
    gu = np.empty_like(u)
    gdelta = np.empty_like(u)
    gA = np.zeros((G, N), dtype=u.dtype)
    gB = np.zeros_like(B)
    gC = np.zeros_like(C)
    gD = np.zeros((G, d), dtype=u.dtype)
    glog = np.empty_like(dA) if keep_glog else np.empty((1, 1, 1, 1), dtype=u.dtype)
    carry = np.zeros((d, N), dtype=u.dtype)
    zero = np.zeros(N, dtype=u.dtype)
    for g in range(G):
        carry[:] = 0
        for t in range(L - 1, -1, -1):
            Bt = B[g, t]
            Ct = C[g, t]
            gBt = gB[g, t]
            gCt = gC[g, t]
            for c in range(d):
                gyt = gy[g, t, c]
                ut = u[g, t, c]
                x = delta[g, t, c] * ut
                a = dA[g, t, c]
                h = hs[g, t, c]
                prev = hs[g, t - 1, c] if t > 0 else zero
                cc = carry[c]
                dt = delta[g, t, c]
                gAg = gA[g]
                gxt = gyt * 0
                gdl = gyt * 0
                for n in range(N):
                    gh = cc[n] + gyt * Ct[n]
                    gCt[n] += gyt * h[n]
                    v = gh * prev[n] * a[n]
                    if keep_glog:
                        glog[g, t, c, n] = v
                    gdl += v * A[n]
                    gAg[n] += v * dt
                    gBt[n] += gh * x
                    gxt += gh * Bt[n]
                    cc[n] = gh * a[n]
                gdelta[g, t, c] = gxt * ut + gdl
                gu[g, t, c] = gxt * dt + gyt * D[c]
                gD[g, c] += gyt * ut
    return gu, gdelta, gA, gB, gC, gD, glog


def selective_scan_op(u, delta, A, B, C, D, a_bias=None):
    """Differentiable selective scan over a batch of sequences.

    Shapes: ``u``, ``delta`` (G, L, d); ``A`` (N,) negative; ``B``, ``C``
    (G, L, N); ``D`` (d,). ``a_bias`` (G', d, N) with G divisible by G'
    is added to ``delta * A`` before the exponential, sequence ``g`` using
    row ``g // (G / G')``. Recurrence, starting from h = 0::

        h_t = exp(delta_t * A + a_bias) * h_{t-1} + delta_t * B_t * u_t
        y_t = C_t . h_t + D * u_t
    """
    G, L, d = u.shape
    N = A.shape[0]
    if delta.shape != u.shape or B.shape != (G, L, N) or C.shape != (G, L, N) or D.shape != (d,):
        raise ValueError(
            f"selective_scan: inconsistent shapes u={u.shape} delta={delta.shape} "
            f"A={A.shape} B={B.shape} C={C.shape} D={D.shape}"
        )
    dtype = u.dtype
    ud, dd, Ad, Bd, Cd, Dd = (np.ascontiguousarray(t.data, dtype=dtype)
                              for t in (u, delta, A, B, C, D))
    parents = [u, delta, A, B, C, D]
    log_a = dd[..., None] * Ad
    if a_bias is not None:
        if G % a_bias.shape[0] or a_bias.shape[1:] != (d, N):
            raise ValueError(f"selective_scan: a_bias {a_bias.shape} incompatible with G={G}")
        groups = a_bias.shape[0]
        log_a = (log_a.reshape(groups, G // groups, L, d, N)
                 + a_bias.data.astype(dtype)[:, None, None]).reshape(G, L, d, N)
        parents.append(a_bias)
    dA = np.exp(log_a)
    y, hs = _scan_forward(ud, dd, dA, Bd, Cd, Dd)

    def backward(gy):
        gu, gdelta, gA, gB, gC, gD, glog = _scan_backward(
            np.ascontiguousarray(gy, dtype=dtype), ud, dd, dA, Ad, Bd, Cd, Dd, hs, a_bias is not None
        )
        grads = [gu, gdelta, gA.sum(axis=0), gB, gC, gD.sum(axis=0)]
        if a_bias is not None:
            grads.append(glog.reshape(groups, -1, d, N).sum(axis=1))
        return grads

    return _result(y, parents, backward)


def scan_reference(u, delta, A, B, C, D):
    """Plain-loop 64-bit evaluation of the same recurrence, for testing."""
    u, delta, A, B, C, D = (np.asarray(a, dtype=np.float64) for a in (u, delta, A, B, C, D))
    L, d = u.shape
    h = np.zeros((d, len(A)))
    y = np.zeros((L, d))
    for t in range(L):
        a_bar, b_bar = discretize(A, B[t], delta[t])
        h = a_bar * h + b_bar * u[t][:, None]
        y[t] = h @ C[t] + D * u[t]
    return y


# -- four-way scan orders --------------------------------------------------------

@dataclass(frozen=True)
class ScanOrder:
    name: str
    permutation: np.ndarray
    inverse: np.ndarray


def scan_orders(height, width):
    """Row-major and column-major traversals of an H x W grid, each both ways."""
    idx = np.arange(height * width).reshape(height, width)
    perms = [idx.reshape(-1), idx.reshape(-1)[::-1], idx.T.reshape(-1), idx.T.reshape(-1)[::-1]]
    return [ScanOrder(n, p.copy(), np.argsort(p)) for n, p in zip(SCAN_NAMES, perms)]


def _gather(flat, orders):
    return np.stack([flat[:, o.permutation] for o in orders])


def _scatter_sum(seqs, orders):
    return sum(seqs[k][:, o.inverse] for k, o in enumerate(orders))


def cross_scan(x):
    """(G, H, W, d) grid -> (4, G, H*W, d) sequences in the four scan orders."""
    G, H, W, d = x.shape
    orders = scan_orders(H, W)
    flat = x.data.reshape(G, H * W, d)
    return _result(
        _gather(flat, orders), (x,),
        lambda g: (_scatter_sum(g, orders).reshape(G, H, W, d),),
    )


def cross_merge(seqs, height, width):
    """Undo each scan order and sum: (4, G, H*W, d) -> (G, H, W, d)."""
    K, G, L, d = seqs.shape
    if K != 4 or L != height * width:
        raise ValueError(f"cross_merge: expected (4, G, {height * width}, d), got {seqs.shape}")
    orders = scan_orders(height, width)
    return _result(
        _scatter_sum(seqs.data, orders).reshape(G, height, width, d), (seqs,),
        lambda g: (_gather(g.reshape(G, L, d), orders),),
    )


# -- SS2D ------------------------------------------------------------------------------

class SS2DParams(Module):
    """Selective-scan parameters for the four scan directions.

    ``A`` and ``D`` are shared; each direction has its own projections for
    the step size and for B and C. ``A = -exp(A_log)`` keeps the state
    matrix strictly negative.
    """

    def __init__(self, dim, state_size, rng, dtype=np.float32, n_dirs=4,
                 dt_min=0.001, dt_max=0.1):
        self.A_log = Parameter(np.log(np.arange(1, state_size + 1)).astype(dtype), decay=False)
        self.D = Parameter(np.ones(dim, dtype), decay=False)
        self.w_dt = Parameter(uniform_fan_in(rng, (n_dirs, 1, dim, dim), dim, dtype))
        dt = np.exp(rng.uniform(np.log(dt_min), np.log(dt_max), (n_dirs, 1, 1, dim)))
        self.dt_bias = Parameter((dt + np.log(-np.expm1(-dt))).astype(dtype), decay=False)
        self.w_b = Parameter(uniform_fan_in(rng, (n_dirs, 1, dim, state_size), dim, dtype))
        self.w_c = Parameter(uniform_fan_in(rng, (n_dirs, 1, dim, state_size), dim, dtype))

    @property
    def state_size(self):
        return self.A_log.shape[0]

    def A(self):
        return neg(exp(self.A_log))


@dataclass
class ScanStats:
    """Per-sample pooled scan quantities a partner branch can inject.

    ``B`` is (4, groups, 1, N): the input matrix averaged over each group's
    tokens. ``log_decay`` is (4, groups, d, N): the mean step size times A.
    Only the field the partner's gate mode needs is filled in.
    """

    B: Tensor = None
    log_decay: Tensor = None


def _projections(xs, params, need=("delta", "B", "C")):
    out = {}
    if "delta" in need:
        out["delta"] = softplus(matmul(xs, params.w_dt) + params.dt_bias)
    if "B" in need:
        out["B"] = matmul(xs, params.w_b)
    if "C" in need:
        out["C"] = matmul(xs, params.w_c)
    return out


def _pool_groups(t, groups):
    K, G, L, n = t.shape
    return reshape(t, (K, groups, G // groups * L, n)).mean(axis=2, keepdims=True)


def scan_stats(x, params, groups, mode):
    """Pooled B (``"b-matrix"``) or log state decay (``"a-matrix"``) of ``x``."""
    xs = cross_scan(x)
    if mode == "b-matrix":
        return ScanStats(B=_pool_groups(_projections(xs, params, ("B",))["B"], groups))
    if mode == "a-matrix":
        delta = _projections(xs, params, ("delta",))["delta"]
        dt = _pool_groups(delta, groups)  # (4, groups, 1, d)
        d, N = delta.shape[-1], params.state_size
        log_decay = mul(reshape(dt, (4, groups, d, 1)), reshape(params.A(), (1, 1, 1, N)))
        return ScanStats(log_decay=log_decay)
    raise ValueError(f"unknown gate mode {mode!r}")


def ss2d(x, params: SS2DParams, groups=1, b_extra=None, a_extra=None):
    """Cross-scan, run the selective scan along each order, cross-merge.

    ``x`` is (G, H, W, d). ``b_extra`` (4, groups, 1, N) is added to B and
    ``a_extra`` (4, groups, d, N) to the log state decay; the G sequences
    are split into ``groups`` contiguous groups for broadcasting.
    """
    G, H, W, d = x.shape
    L = H * W
    N = params.state_size
    xs = cross_scan(x)
    p = _projections(xs, params)
    B = p["B"]
    if b_extra is not None:
        B = reshape(reshape(B, (4, groups, G // groups * L, N)) + b_extra, (4, G, L, N))
    a_bias = None
    if a_extra is not None:
        a_bias = reshape(a_extra, (4 * groups, d, N))
    y = selective_scan_op(
        reshape(xs, (4 * G, L, d)), reshape(p["delta"], (4 * G, L, d)), params.A(),
        reshape(B, (4 * G, L, N)), reshape(p["C"], (4 * G, L, N)), params.D, a_bias,
    )
    return cross_merge(reshape(y, (4, G, L, d)), H, W)


# -- VSS block ---------------------------------------------------------------------------

class VSSBlock(Module):
    """Residual block: LN, split into (x, z), SS2D path on x, SiLU gate from z.

    ``X' = Linear(LN(SS2D(SiLU(DW(Linear(x))))) * SiLU(Linear(z))) + X``
    """

    def __init__(self, dim, state_size, rng, inner_dim=None, kernel=3, dtype=np.float32,
                 gate=None, stats_only=False, norm_eps=1e-5):
        if dim % 2:
            raise ValueError(f"model dim {dim} must be even to split into x and z")
        half = dim // 2
        inner = inner_dim or half
        self.norm_in = LayerNorm(dim, norm_eps, dtype)
        self.proj_x = Linear(half, inner, rng, dtype=dtype)
        self.proj_z = Linear(half, inner, rng, dtype=dtype)
        self.dw_kernel = Parameter(uniform_fan_in(rng, (inner, kernel, kernel), kernel * kernel, dtype))
        self.dw_bias = Parameter(np.zeros(inner, dtype), decay=False)
        self.ssm = SS2DParams(inner, state_size, rng, dtype=dtype)
        # A stats-only block only feeds a partner branch (``stats_only`` names
        # the partner's gate mode); it keeps just the parameters that need.
        self.stats_only = stats_only
        if stats_only:
            del self.proj_z, self.ssm.D, self.ssm.w_c
            if stats_only == "b-matrix":
                del self.ssm.A_log, self.ssm.w_dt, self.ssm.dt_bias
            else:
                del self.ssm.w_b
        else:
            self.norm_out = LayerNorm(inner, norm_eps, dtype)
            self.proj_out = Linear(inner, dim, rng, dtype=dtype)
        # learned gate for a partner branch's B ("b-matrix") or decay ("a-matrix")
        self.gate_mode = gate
        if gate is not None:
            self.gate = Parameter(np.zeros(state_size, dtype), decay=False)

    def forward(self, X, groups=1, partner=None, stats_mode=None):
        """``X`` is (G, H, W, dim). ``partner`` is a :class:`ScanStats` whose
        B or log-decay (per the block's gate mode) is gated in. With
        ``stats_mode`` set, also returns this block's own :class:`ScanStats`."""
        dim = X.shape[-1]
        if dim % 2:
            raise ValueError(f"channel count {dim} is odd; cannot split")
        h = self.norm_in(X)
        x, z = h[..., : dim // 2], h[..., dim // 2:]
        x = self.proj_x(x)
        x = silu(depthwise_conv2d(x, self.dw_kernel, self.dw_bias, channels_last=True))
        b_extra = a_extra = None
        if partner is not None:
            g = reshape(sigmoid(self.gate), (1, 1, 1, -1))
            if self.gate_mode == "b-matrix":
                b_extra = mul(partner.B, g)
            else:
                a_extra = mul(partner.log_decay, g)
        stats = scan_stats(x, self.ssm, groups, stats_mode) if stats_mode else None
        if self.stats_only:
            return None, stats
        y = ss2d(x, self.ssm, groups, b_extra, a_extra)
        y = layer_norm(y, self.norm_out.gain, self.norm_out.offset, self.norm_out.eps)
        out = self.proj_out(mul(y, silu(self.proj_z(z)))) + X
        return (out, stats) if stats_mode else out
