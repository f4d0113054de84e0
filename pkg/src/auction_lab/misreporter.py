"""Amortized misreport optimizer: one shared network predicts every bidder's
best misreport from the (bidder-rotated) valuation profile."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .auctioneer import (
    AuctioneerParams,
    auctioneer_backward,
    auctioneer_forward,
    bidder_rotation_index,
    _scatter_rotations,
)
from .distributions import AuctionShape, PowerTail, ProductDistribution
from .mechanisms import linear_utility
from .nn import DivergenceError, MlpParams, MlpSpec, mlp_backward, mlp_forward, mlp_init


@dataclass
class MisreporterParams:
    shape: AuctionShape
    net: MlpParams

    def __post_init__(self):
        n, m = self.shape.n, self.shape.m
        spec = self.net.spec
        if (spec.input_dim, spec.output_dim) != (n * m, m):
            raise ValueError(f"misreporter {spec} inconsistent with shape {self.shape}")
        if spec.output_activation == "identity":
            raise ValueError("misreporter needs a projecting output activation")

    @property
    def nets(self) -> list[MlpParams]:
        return [self.net]

    def copy(self) -> "MisreporterParams":
        return MisreporterParams(self.shape, self.net.copy())

    def projection_range(self, lo=None, hi=None):
        spec = self.net.spec
        m = self.shape.m
        if spec.output_activation == "sigmoid":
            return np.zeros(m), np.ones(m)
        if spec.output_activation == "softplus":
            top = np.full(m, np.inf) if spec.hi is None else np.array(spec.hi)
            return np.zeros(m), top if hi is None else np.asarray(hi, dtype=float)
        return (np.array(spec.lo) if lo is None else np.asarray(lo, dtype=float),
                np.array(spec.hi) if hi is None else np.asarray(hi, dtype=float))


def projection_spec(dist: ProductDistribution, n_M: int, h_M: int, t: float = 0.0) -> MlpSpec:
    """Network spec whose output activation maps into the valuation support.

    Bounded supports use a (scaled) sigmoid; unbounded ones a softplus capped
    at the search quantile of each marginal.
    """
    n, m = dist.shape.n, dist.shape.m
    lo, hi = dist.support(t)
    if any(isinstance(mg, PowerTail) for mg in dist.marginals):
        if np.any(lo != 0):
            raise ValueError("softplus projection needs every support to start at 0")
        return MlpSpec(n * m, n_M, h_M, m, "softplus", hi=tuple(hi))
    if np.all(lo == 0) and np.all(hi == 1) and not dist.time_varying:
        return MlpSpec(n * m, n_M, h_M, m, "sigmoid")
    return MlpSpec(n * m, n_M, h_M, m, "scaled_sigmoid", tuple(lo), tuple(hi))


def misreporter_init(dist: ProductDistribution, n_M: int, h_M: int, seed, t: float = 0.0) -> MisreporterParams:
    return MisreporterParams(dist.shape, mlp_init(projection_spec(dist, n_M, h_M, t), seed))


def misreport(params: MisreporterParams, B, lo=None, hi=None):
    """Predicted misreport of every bidder, shape (L, n, m), and the cache.

    Row ``i`` is ``Proj(MLP(B_(i)))``. ``lo``/``hi`` override the projection
    bounds of a scaled-sigmoid head (used when the support moves over time).
    """
    n, m = params.shape.n, params.shape.m
    B = np.asarray(B, dtype=np.float64)
    if B.shape[-2:] != (n, m):
        raise ValueError(f"profiles of shape {B.shape} for a {n}x{m} misreporter")
    lead = B.shape[:-2]
    x = B.reshape(-1, n * m)
    L = x.shape[0]
    xi = x[:, bidder_rotation_index(n, m)].reshape(L * n, n * m)
    out, cache = mlp_forward(params.net, xi, lo=lo, hi=hi)
    return out.reshape(lead + (n, m)), cache


def misreport_backward(params: MisreporterParams, cache, dM, need_input_grad=False):
    n, m = params.shape.n, params.shape.m
    dM = np.asarray(dM, dtype=np.float64).reshape(-1, m)
    d_in, grads = mlp_backward(cache, dM, need_input_grad=need_input_grad)
    if need_input_grad:
        L = dM.shape[0] // n
        d_in = _scatter_rotations(d_in.reshape(L, n, n * m), bidder_rotation_index(n, m)).reshape(L, n, m)
    return d_in, grads


def replaced_batch(V, M):
    """Stack ``(M_i, V_{-i})`` for every bidder: shape (n, L, n, m)."""
    L, n, m = V.shape
    bids = np.broadcast_to(V[None], (n, L, n, m)).copy()
    for i in range(n):
        bids[i, :, i, :] = M[:, i, :]
    return bids


def deviation_utilities(auct: AuctioneerParams, V, M):
    """Utility of each bidder when only that bidder reports ``M_i``.

    Returns ``(u (L, n), cache)``; the cache feeds :func:`deviation_backward`.
    """
    L, n, m = V.shape
    bids = replaced_batch(V, M)
    g, p, cache = auctioneer_forward(auct, bids.reshape(n * L, n, m))
    g = g.reshape(n, L, n, m)
    p = p.reshape(n, L, n)
    u = np.empty((L, n))
    for i in range(n):
        u[:, i] = linear_utility(V[:, i, :], g[i, :, i, :], p[i, :, i])
    return u, cache


def deviation_backward(cache, V, du, need_param_grads=False, need_input_grad=True):
    """Backprop ``sum(du * u)`` of :func:`deviation_utilities`.

    Returns ``(d_misreports (L, n, m) or None, auctioneer param grads or None)``.
    """
    L, n, m = V.shape
    dg = np.zeros((n, L, n, m))
    dp = np.zeros((n, L, n))
    for i in range(n):
        dg[i, :, i, :] = du[:, i, None] * V[:, i, :]
        dp[i, :, i] = -du[:, i]
    dB, pg = auctioneer_backward(cache, dg.reshape(n * L, n, m), dp.reshape(n * L, n),
                                 need_param_grads=need_param_grads, need_input_grad=need_input_grad)
    dM = None
    if need_input_grad:
        dB = dB.reshape(n, L, n, m)
        dM = np.stack([dB[i, :, i, :] for i in range(n)], axis=1)
    return dM, pg


def misreporter_loss(mis: MisreporterParams, auct: AuctioneerParams, V, lo=None, hi=None):
    """``L_r = -mean_l sum_i u_i(v_i, (M_i(V), V_{-i}))`` and its gradient in the
    misreporter parameters (auctioneer frozen). Returns ``(loss, [grad])``."""
    V = np.asarray(V, dtype=np.float64)
    L = V.shape[0]
    M, mcache = misreport(mis, V, lo, hi)
    u, acache = deviation_utilities(auct, V, M)
    loss = -float(u.sum(axis=1).mean())
    if not np.isfinite(loss):
        raise DivergenceError("non-finite misreporter loss")
    dM, _ = deviation_backward(acache, V, np.full(u.shape, -1.0 / L))
    _, grads = misreport_backward(mis, mcache, dM)
    return loss, [grads]


class MisreporterOracle:
    """Callable wrapper: profiles -> predicted misreports, for metric estimation."""

    def __init__(self, params: MisreporterParams, lo=None, hi=None):
        self.params, self.lo, self.hi = params, lo, hi

    def __call__(self, V):
        return misreport(self.params, V, self.lo, self.hi)[0]
