"""Comparison metric, stationary game loss and the augmented Lagrangian baseline."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .nn import DivergenceError

SQRT_STABILIZER = 1e-8


class ProvenanceError(ValueError):
    """Two metric records were produced by different regret estimators."""


def p_star(P: float, R: float) -> float:
    """Revenue ``(sqrt(P) - sqrt(R))^2`` of the zero-regret mechanism certified
    from total revenue ``P`` and total regret ``R``; 0 when ``R > P``."""
    if P < 0 or R < 0:
        raise ValueError("revenue and regret must be nonnegative")
    if R > P:
        return 0.0
    if R == 0:
        return float(P)
    return (math.sqrt(P) - math.sqrt(R)) ** 2


def score(P: float, R: float) -> float:
    return math.sqrt(P) - math.sqrt(R)


def compare(a, b) -> int:
    """Order two metric records by ``sqrt(P) - sqrt(R)``, then by lower total regret.

    Returns 1 if ``a`` is better, -1 if ``b`` is, 0 on a tie.
    """
    if a.regret_estimator != b.regret_estimator:
        raise ProvenanceError(
            f"cannot compare {a.regret_estimator!r} regret with {b.regret_estimator!r} regret"
        )
    sa, sb = score(a.rev, a.total_regret), score(b.rev, b.total_regret)
    if sa != sb:
        return 1 if sa > sb else -1
    if a.total_regret != b.total_regret:
        return 1 if a.total_regret < b.total_regret else -1
    return 0


def epsilon_star(P: float, R: float) -> float:
    """Price discount ``min(sqrt(R / P), 1)`` maximizing the certified revenue."""
    if P < 0 or R < 0:
        raise ValueError("revenue and regret must be nonnegative")
    if P == 0:
        return 1.0
    return min(math.sqrt(R / P), 1.0)


def certified_revenue(P: float, R: float, eps: float) -> float:
    """Revenue guaranteed after discounting prices by ``1 - eps``."""
    if eps <= 0:
        return P if R == 0 else -math.inf
    return (1.0 - eps) * P - (1.0 - eps) / eps * R


def loss_m(revenues, regrets, delta: float = SQRT_STABILIZER):
    """Auctioneer loss ``-sqrt(P) + sqrt(R) + R`` over a batch.

    ``revenues`` and ``regrets`` are per-profile totals over bidders (regrets
    already clamped at zero). Returns ``(loss, d_revenues, d_regrets)`` where
    the gradients are with respect to each per-profile entry.
    """
    revenues = np.asarray(revenues, dtype=np.float64)
    regrets = np.asarray(regrets, dtype=np.float64)
    if not (np.all(np.isfinite(revenues)) and np.all(np.isfinite(regrets))):
        raise DivergenceError("non-finite revenue or regret in loss_m")
    L = revenues.shape[0]
    P = revenues.mean()
    R = regrets.mean()
    sp, sr = math.sqrt(P + delta), math.sqrt(R + delta)
    loss = -sp + sr + R
    d_rev = np.full(L, -0.5 / sp / L)
    d_rgt = np.full(L, (0.5 / sr + 1.0) / L)
    return loss, d_rev, d_rgt


@dataclass
class LagrangianState:
    lam: np.ndarray
    rho: float
    c: float
    T_rho: int
    T_lambda: int

    def __post_init__(self):
        self.lam = np.array(self.lam, dtype=np.float64).reshape(-1)
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        if self.T_rho < 1 or self.T_lambda < 1:
            raise ValueError("update periods must be >= 1")

    @classmethod
    def initial(cls, n: int, lam0: float, rho0: float, c: float, T_rho: int, T_lambda: int):
        return cls(np.full(n, float(lam0)), float(rho0), float(c), int(T_rho), int(T_lambda))

    def to_dict(self) -> dict:
        return {"lam": self.lam.tolist(), "rho": self.rho, "c": self.c,
                "T_rho": self.T_rho, "T_lambda": self.T_lambda}

    @classmethod
    def from_dict(cls, d: dict):
        return cls(np.array(d["lam"]), d["rho"], d["c"], d["T_rho"], d["T_lambda"])


def lagrangian_loss(revenues, bidder_regrets, state: LagrangianState):
    """``-mean revenue + sum_i lam_i r_i + rho/2 (sum_i r_i)^2`` with batch means r_i.

    ``bidder_regrets`` has shape (L, n). Returns ``(loss, d_revenues, d_regrets)``.
    """
    revenues = np.asarray(revenues, dtype=np.float64)
    bidder_regrets = np.asarray(bidder_regrets, dtype=np.float64)
    L, n = bidder_regrets.shape
    if revenues.shape != (L,) or state.lam.shape != (n,):
        raise ValueError("shape mismatch in lagrangian_loss")
    r_hat = bidder_regrets.mean(axis=0)
    total = r_hat.sum()
    loss = -revenues.mean() + float(state.lam @ r_hat) + 0.5 * state.rho * total ** 2
    d_rev = np.full(L, -1.0 / L)
    d_rgt = np.broadcast_to((state.lam + state.rho * total) / L, (L, n)).copy()
    return loss, d_rev, d_rgt


def schedule_step(state: LagrangianState, t: int, r_hat) -> LagrangianState:
    """Apply the rho/lambda schedule after step ``t`` (1-based); returns a new state."""
    if t < 1:
        raise ValueError("steps are numbered from 1")
    rho, lam = state.rho, state.lam.copy()
    if t % state.T_lambda == 0:
        lam = lam + state.rho * np.asarray(r_hat, dtype=np.float64)
    if t % state.T_rho == 0:
        rho = state.rho + state.c
    return LagrangianState(lam, rho, state.c, state.T_rho, state.T_lambda)
