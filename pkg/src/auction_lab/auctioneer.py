"""Neural auctioneer: allocation = item-sale probability x bidder softmax,
payment = learned fraction of the reported welfare.

Feasible (column sums <= 1) and individually rational at the bid level by
construction.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .distributions import AuctionShape
from .mechanisms import DifferentiableMechanism
from .nn import (
    MlpParams,
    MlpSpec,
    mlp_backward,
    mlp_forward,
    mlp_init,
    softmax_columns,
    softmax_columns_backward,
)


@lru_cache(maxsize=None)
def bidder_rotation_index(n: int, m: int) -> np.ndarray:
    """Row ``i`` holds flat indices of ``B_(i)``: bidder i's row first, others in order."""
    idx = np.empty((n, n * m), dtype=np.intp)
    for i in range(n):
        order = [i] + [r for r in range(n) if r != i]
        idx[i] = [r * m + j for r in order for j in range(m)]
    return idx


@lru_cache(maxsize=None)
def item_rotation_index(n: int, m: int) -> np.ndarray:
    """Row ``j`` flattens the columns of ``B`` with column j first, column by column."""
    idx = np.empty((m, n * m), dtype=np.intp)
    for j in range(m):
        order = [j] + [c for c in range(m) if c != j]
        idx[j] = [r * m + c for c in order for r in range(n)]
    return idx


def bidder_rotate(B, i: int) -> np.ndarray:
    B = np.asarray(B, dtype=np.float64)
    n, m = B.shape[-2:]
    if not 0 <= i < n:
        raise IndexError(f"bidder index {i} out of range for n={n}")
    return B.reshape(B.shape[:-2] + (n * m,))[..., bidder_rotation_index(n, m)[i]]


def item_rotate(B, j: int) -> np.ndarray:
    B = np.asarray(B, dtype=np.float64)
    n, m = B.shape[-2:]
    if not 0 <= j < m:
        raise IndexError(f"item index {j} out of range for m={m}")
    return B.reshape(B.shape[:-2] + (n * m,))[..., item_rotation_index(n, m)[j]]


def _scatter_rotations(d_rot, index):
    """Adjoint of ``x[:, index]``: d_rot (L, k, nm) -> (L, nm)."""
    out = np.zeros((d_rot.shape[0], index.shape[1]))
    for k in range(index.shape[0]):
        out[:, index[k]] += d_rot[:, k, :]
    return out


@dataclass
class AuctioneerParams:
    shape: AuctionShape
    f1: MlpParams
    f2: MlpParams
    pay: MlpParams

    def __post_init__(self):
        n, m = self.shape.n, self.shape.m
        expect = {"f1": (n * m, m, "sigmoid"), "f2": (n * m, n, "identity"), "pay": (n * m, 1, "sigmoid")}
        for name, (d_in, d_out, act) in expect.items():
            spec = getattr(self, name).spec
            if (spec.input_dim, spec.output_dim, spec.output_activation) != (d_in, d_out, act):
                raise ValueError(f"{name} head {spec} inconsistent with shape {self.shape}")

    @property
    def nets(self) -> list[MlpParams]:
        return [self.f1, self.f2, self.pay]

    def copy(self) -> "AuctioneerParams":
        return AuctioneerParams(self.shape, self.f1.copy(), self.f2.copy(), self.pay.copy())


def auctioneer_init(shape: AuctionShape, n_a: int, h_a: int, n_p: int, h_p: int, seed) -> AuctioneerParams:
    n, m = shape.n, shape.m
    seeds = np.random.SeedSequence(seed).spawn(3)
    return AuctioneerParams(
        shape,
        mlp_init(MlpSpec(n * m, n_a, h_a, m, "sigmoid"), seeds[0]),
        mlp_init(MlpSpec(n * m, n_a, h_a, n, "identity"), seeds[1]),
        mlp_init(MlpSpec(n * m, n_p, h_p, 1, "sigmoid"), seeds[2]),
    )


@dataclass
class AuctioneerCache:
    params: AuctioneerParams
    lead: tuple
    B: np.ndarray
    a: np.ndarray
    S: np.ndarray
    g: np.ndarray
    frac: np.ndarray
    welfare: np.ndarray
    c_f1: object
    c_f2: object
    c_pay: object


def auctioneer_forward(params: AuctioneerParams, B):
    """Allocation and payment for bids of shape (..., n, m); returns ``(g, p, cache)``."""
    n, m = params.shape.n, params.shape.m
    B = np.asarray(B, dtype=np.float64)
    if B.shape[-2:] != (n, m):
        raise ValueError(f"bids of shape {B.shape} for a {n}x{m} auctioneer")
    lead = B.shape[:-2]
    B = B.reshape(-1, n, m)
    L = B.shape[0]
    x = B.reshape(L, n * m)

    a, c_f1 = mlp_forward(params.f1, x)
    if n == 1:
        S, c_f2 = np.ones((L, 1, m)), None
    else:
        xj = x[:, item_rotation_index(n, m)].reshape(L * m, n * m)
        logits, c_f2 = mlp_forward(params.f2, xj)
        S = softmax_columns(logits.reshape(L, m, n).transpose(0, 2, 1))
    g = a[:, None, :] * S

    xi = x[:, bidder_rotation_index(n, m)].reshape(L * n, n * m)
    frac, c_pay = mlp_forward(params.pay, xi)
    frac = frac.reshape(L, n)
    welfare = (B * g).sum(axis=-1)
    p = frac * welfare

    cache = AuctioneerCache(params, lead, B, a, S, g, frac, welfare, c_f1, c_f2, c_pay)
    return g.reshape(lead + (n, m)), p.reshape(lead + (n,)), cache


def allocate(params: AuctioneerParams, B):
    return auctioneer_forward(params, B)[0]


def pay(params: AuctioneerParams, B, g=None):
    """Payments ``frac_i * sum_j B_ij g_ij``; ``g`` defaults to ``allocate(params, B)``."""
    g_net, p, cache = auctioneer_forward(params, B)
    if g is None:
        return p
    g = np.asarray(g, dtype=np.float64)
    if g.shape != g_net.shape:
        raise ValueError("allocation shape does not match bids")
    welfare = (np.asarray(B, dtype=np.float64) * g).sum(axis=-1)
    return cache.frac.reshape(welfare.shape) * welfare


def auctioneer_backward(cache: AuctioneerCache, dg=None, dp=None, need_param_grads=True, need_input_grad=True):
    """Reverse pass for ``sum(dg * g) + sum(dp * p)``.

    Returns ``(dB, [d_f1, d_f2, d_pay])``; entries are ``None`` when not requested.
    """
    params = cache.params
    n, m = params.shape.n, params.shape.m
    B, g, S, a = cache.B, cache.g, cache.S, cache.a
    L = B.shape[0]
    dg = np.zeros((L, n, m)) if dg is None else np.asarray(dg, dtype=np.float64).reshape(L, n, m)
    dp = np.zeros((L, n)) if dp is None else np.asarray(dp, dtype=np.float64).reshape(L, n)

    # p = frac * welfare, welfare = sum_j B g
    d_frac = dp * cache.welfare
    d_welf = dp * cache.frac
    dB = d_welf[:, :, None] * g
    dg_tot = dg + d_welf[:, :, None] * B

    # g = a * S
    da = (dg_tot * S).sum(axis=1)
    d_in_f1, d_f1 = mlp_backward(cache.c_f1, da, need_input_grad, need_param_grads)
    if need_input_grad:
        dB += d_in_f1.reshape(L, n, m)

    if n == 1:
        d_f2 = params.f2.zeros_like() if need_param_grads else None
    else:
        dS = dg_tot * a[:, None, :]
        d_logits = softmax_columns_backward(S, dS).transpose(0, 2, 1).reshape(L * m, n)
        d_in_f2, d_f2 = mlp_backward(cache.c_f2, d_logits, need_input_grad, need_param_grads)
        if need_input_grad:
            dB += _scatter_rotations(d_in_f2.reshape(L, m, n * m), item_rotation_index(n, m)).reshape(L, n, m)

    d_in_pay, d_pay = mlp_backward(cache.c_pay, d_frac.reshape(L * n, 1), need_input_grad, need_param_grads)
    if need_input_grad:
        dB += _scatter_rotations(d_in_pay.reshape(L, n, n * m), bidder_rotation_index(n, m)).reshape(L, n, m)
        dB = dB.reshape(cache.lead + (n, m))
    else:
        dB = None
    return dB, ([d_f1, d_f2, d_pay] if need_param_grads else None)


class NeuralMechanism(DifferentiableMechanism):
    """Frozen auctioneer parameters exposed through the mechanism interface."""

    def __init__(self, params: AuctioneerParams):
        self.params = params
        self.shape = params.shape

    def forward(self, bids):
        return auctioneer_forward(self.params, self._check(bids))

    def backward(self, cache, dg, dp):
        return auctioneer_backward(cache, dg, dp, need_param_grads=False)[0]
