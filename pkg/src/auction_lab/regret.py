"""Ex-post regret oracles and test-set metrics.

Both oracles include the truthful report among their candidates, so every
estimate is nonnegative by construction.
"""

from __future__ import annotations

import csv
import itertools
import os
from dataclasses import asdict, dataclass

import numpy as np

from .distributions import ProductDistribution, sample_profiles
from .losses import p_star
from .mechanisms import DifferentiableMechanism, Mechanism, linear_utility
from .nn import DivergenceError

GRID_BUDGET = 10 ** 6
ASCENT_BETAS = (0.9, 0.999)
ESTIMATORS = ("misreporter", "gradient_ascent", "grid")
CSV_COLUMNS = ("step", "t", "rev", "rgt", "total_regret", "p_star", "estimator", "seed")


class GridBudgetError(ValueError):
    pass


class EstimatorMismatchError(TypeError):
    pass


def lattice(lo, hi, points_per_dim: int) -> np.ndarray:
    """All points of a regular per-item lattice over the box ``[lo, hi]``; shape (K, m)."""
    lo, hi = np.atleast_1d(lo).astype(float), np.atleast_1d(hi).astype(float)
    m = lo.size
    if points_per_dim < 1:
        raise ValueError("need at least one grid point per dimension")
    if points_per_dim ** m > GRID_BUDGET:
        raise GridBudgetError(f"{points_per_dim}^{m} candidates exceeds the budget of {GRID_BUDGET}")
    if points_per_dim == 1:
        axes = [np.array([0.5 * (a + b)]) for a, b in zip(lo, hi)]
    else:
        axes = [np.linspace(a, b, points_per_dim) for a, b in zip(lo, hi)]
    return np.array(list(itertools.product(*axes)), dtype=np.float64).reshape(-1, m)


def _chunks(total: int, size: int):
    for start in range(0, total, size):
        yield slice(start, min(start + size, total))


def grid_regrets(mech: Mechanism, V, i: int, candidates, chunk: int = 512):
    """Exhaustive regret of bidder ``i`` for each profile in ``V`` (L, n, m).

    ``candidates`` is a (K, m) array of misreports; the truthful report is
    always added. Returns ``(regret (L,), argmax misreport (L, m))``.
    """
    V = np.asarray(V, dtype=np.float64)
    candidates = np.asarray(candidates, dtype=np.float64).reshape(-1, mech.shape.m)
    if candidates.shape[0] > GRID_BUDGET:
        raise GridBudgetError(f"{candidates.shape[0]} candidates exceeds the budget of {GRID_BUDGET}")
    L = V.shape[0]
    g0, p0 = mech.outcome(V)
    u_true = linear_utility(V[:, i, :], g0[:, i, :], p0[:, i])
    best_u = u_true.copy()
    best_b = V[:, i, :].copy()
    K = candidates.shape[0]
    if mech.shape.n == 1:
        # the outcome of a lone bidder does not depend on anyone else
        gc, pc = mech.outcome(candidates[:, None, :])
        ga, pa = gc[:, 0, :], pc[:, 0]
        for sl in _chunks(L, max(1, 4_000_000 // max(K, 1))):
            u = linear_utility(V[sl, None, 0, :], ga[None, :, :], pa[None, :])
            k = np.argmax(u, axis=1)
            uk = u[np.arange(u.shape[0]), k]
            better = uk > best_u[sl]
            best_u[sl] = np.where(better, uk, best_u[sl])
            best_b[sl] = np.where(better[:, None], candidates[k], best_b[sl])
    else:
        for ell in range(L):
            for sl in _chunks(K, chunk * 8):
                bids = np.repeat(V[ell][None], sl.stop - sl.start, axis=0)
                bids[:, i, :] = candidates[sl]
                g, p = mech.outcome(bids)
                u = linear_utility(V[ell, i][None, :], g[:, i, :], p[:, i])
                k = int(np.argmax(u))
                if u[k] > best_u[ell]:
                    best_u[ell] = u[k]
                    best_b[ell] = candidates[sl][k]
    return best_u - u_true, best_b


def regret_grid(mech: Mechanism, V, i: int, grid_points_per_dim: int, support=None):
    """Regret of bidder ``i`` at one profile by exhaustive lattice search.

    ``support`` is the (lo, hi) box spanned by the lattice, default [0, 1]^m.
    """
    V = np.asarray(V, dtype=np.float64)
    lo, hi = support if support is not None else (np.zeros(mech.shape.m), np.ones(mech.shape.m))
    cands = lattice(lo, hi, grid_points_per_dim)
    r, b = grid_regrets(mech, V[None], i, cands)
    return float(r[0]), b[0]


def ascent_regrets(mech: DifferentiableMechanism, V, i: int, steps: int, step_size: float,
                   restarts: int, rng_seed, support, chunk: int = 20000):
    """Projected gradient ascent on bidder ``i``'s misreport for every profile.

    Steps are Adam-normalized, so each coordinate moves about ``step_size``
    per step however flat the utility is. Restart 0 starts from the truthful
    report, the others uniformly in the support box. Returns
    ``(regret (L,), best misreport (L, m))``.
    """
    if not isinstance(mech, DifferentiableMechanism):
        raise EstimatorMismatchError("gradient ascent needs a differentiable mechanism")
    V = np.asarray(V, dtype=np.float64)
    L, n, m = V.shape
    lo, hi = (np.broadcast_to(np.asarray(x, dtype=float), (m,)) for x in support)
    rng = np.random.default_rng(rng_seed)
    starts = np.empty((restarts, L, m))
    if restarts > 0:
        starts[0] = np.clip(V[:, i, :], lo, hi)
        starts[1:] = lo + (hi - lo) * rng.random((restarts - 1, L, m))

    g0, p0 = mech.outcome(V)
    u_true = linear_utility(V[:, i, :], g0[:, i, :], p0[:, i])
    best_u = u_true.copy()
    best_b = V[:, i, :].copy()

    # profiles x restarts flattened into one batch, processed in chunks
    flat_V = np.broadcast_to(V[None], (restarts, L, n, m)).reshape(-1, n, m)
    flat_x = starts.reshape(-1, m)
    profile = np.tile(np.arange(L), restarts)
    for sl in _chunks(flat_x.shape[0], chunk):
        Vc = flat_V[sl]
        x = flat_x[sl].copy()
        vi = Vc[:, i, :]
        bu = np.full(x.shape[0], -np.inf)
        bb = x.copy()
        dg = np.zeros_like(Vc)
        dg[:, i, :] = vi
        dp = np.zeros(Vc.shape[:2])
        dp[:, i] = -1.0
        mom, sq = np.zeros_like(x), np.zeros_like(x)
        for step in range(steps + 1):
            bids = Vc.copy()
            bids[:, i, :] = x
            g, p, cache = mech.forward(bids)
            u = linear_utility(vi, g[:, i, :], p[:, i])
            better = u > bu
            bu = np.where(better, u, bu)
            bb = np.where(better[:, None], x, bb)
            if step == steps:
                break
            grad = mech.backward(cache, dg, dp)[:, i, :]
            if not np.all(np.isfinite(grad)):
                raise DivergenceError("non-finite utility gradient during regret ascent")
            mom = ASCENT_BETAS[0] * mom + (1 - ASCENT_BETAS[0]) * grad
            sq = ASCENT_BETAS[1] * sq + (1 - ASCENT_BETAS[1]) * grad * grad
            k = step + 1
            mhat = mom / (1 - ASCENT_BETAS[0] ** k)
            vhat = sq / (1 - ASCENT_BETAS[1] ** k)
            x = np.clip(x + step_size * mhat / (np.sqrt(vhat) + 1e-12), lo, hi)
        # reduce restarts onto their profiles
        prof = profile[sl]
        order = np.lexsort((-bu, prof))
        first = np.ones(order.size, dtype=bool)
        first[1:] = prof[order][1:] != prof[order][:-1]
        sel = order[first]
        tgt = prof[sel]
        improve = bu[sel] > best_u[tgt]
        best_u[tgt[improve]] = bu[sel][improve]
        best_b[tgt[improve]] = bb[sel][improve]
    return best_u - u_true, best_b


def regret_gradient_ascent(mech, V, i, steps, step_size, restarts, rng_seed, support):
    r, b = ascent_regrets(mech, np.asarray(V, dtype=np.float64)[None], i, steps, step_size,
                          restarts, rng_seed, support)
    return float(r[0]), b[0]


def misreporter_regrets(mech: Mechanism, V, misreports):
    """Per-bidder regret lower bound using predicted misreports (L, n, m), clamped at 0."""
    V = np.asarray(V, dtype=np.float64)
    L, n, m = V.shape
    g0, p0 = mech.outcome(V)
    out = np.empty((L, n))
    for i in range(n):
        bids = V.copy()
        bids[:, i, :] = misreports[:, i, :]
        g, p = mech.outcome(bids)
        u_mis = linear_utility(V[:, i, :], g[:, i, :], p[:, i])
        u_true = linear_utility(V[:, i, :], g0[:, i, :], p0[:, i])
        out[:, i] = np.maximum(u_mis - u_true, 0.0)
    return out


@dataclass(frozen=True)
class OracleConfig:
    """How test-time regret is estimated."""

    kind: str = "gradient_ascent"
    restarts: int = 10
    steps: int = 200
    step_size: float = 0.01  # relative to the support width of each item
    grid_points: int = 101

    def __post_init__(self):
        if self.kind not in ESTIMATORS:
            raise ValueError(f"unknown regret estimator {self.kind!r}")


def profile_regrets(mech: Mechanism, V, dist: ProductDistribution, oracle: OracleConfig,
                    rng_seed=0, t: float = 0.0, misreporter=None) -> np.ndarray:
    """Regret of every bidder at every profile: shape (L, n)."""
    V = np.asarray(V, dtype=np.float64)
    L, n, m = V.shape
    lo, hi = dist.support(t)
    if oracle.kind == "misreporter":
        if misreporter is None:
            raise EstimatorMismatchError("misreporter estimator needs a trained misreporter")
        return misreporter_regrets(mech, V, misreporter(V))
    out = np.empty((L, n))
    if oracle.kind == "grid":
        cands = lattice(lo, hi, oracle.grid_points)
        for i in range(n):
            out[:, i] = grid_regrets(mech, V, i, cands)[0]
        return out
    ss = rng_seed if isinstance(rng_seed, np.random.SeedSequence) else np.random.SeedSequence(rng_seed)
    seeds = ss.spawn(n)
    # absolute step scales with the item's support width
    step = oracle.step_size * float(np.mean(hi - lo))
    for i in range(n):
        out[:, i] = ascent_regrets(mech, V, i, oracle.steps, step, oracle.restarts, seeds[i], (lo, hi))[0]
    return out


@dataclass
class MetricsRecord:
    rev: float
    rgt: float
    total_regret: float
    p_star: float
    regret_estimator: str
    sample_count: int
    seed: int
    step: int = 0
    t: float = 0.0

    @classmethod
    def from_samples(cls, payments, regrets, estimator, seed, step=0, t=0.0):
        payments = np.asarray(payments)
        regrets = np.asarray(regrets)
        n = regrets.shape[1]
        rev = float(payments.sum(axis=1).mean())
        rgt = float(regrets.sum(axis=1).mean() / n)
        total = n * rgt
        return cls(rev, rgt, total, p_star(max(rev, 0.0), total), estimator,
                   int(payments.shape[0]), int(seed), int(step), float(t))

    def csv_row(self) -> dict:
        return {"step": self.step, "t": self.t, "rev": repr(self.rev), "rgt": repr(self.rgt),
                "total_regret": repr(self.total_regret), "p_star": repr(self.p_star),
                "estimator": self.regret_estimator, "seed": self.seed}

    @classmethod
    def from_csv_row(cls, row: dict, sample_count: int = 0):
        return cls(float(row["rev"]), float(row["rgt"]), float(row["total_regret"]),
                   float(row["p_star"]), row["estimator"], sample_count, int(row["seed"]),
                   int(row["step"]), float(row["t"]))

    def as_dict(self) -> dict:
        return asdict(self)


def write_metrics_csv(path, records, append: bool = False) -> None:
    mode = "a" if append else "w"
    new = not append or not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, mode, newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        if new:
            w.writeheader()
        for rec in records:
            w.writerow(rec.csv_row())


def read_metrics_csv(path) -> list:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ValueError(f"{path}: unexpected columns {reader.fieldnames}")
        return [MetricsRecord.from_csv_row(row) for row in reader]


def evaluate_on(mech: Mechanism, V, dist: ProductDistribution, oracle: OracleConfig,
                rng_seed=0, t: float = 0.0, misreporter=None):
    """Payments at truthful bids and per-bidder regrets on the profiles ``V``."""
    _, p = mech.outcome(V)
    regrets = profile_regrets(mech, V, dist, oracle, rng_seed, t, misreporter)
    return p, regrets


def empirical_metrics(mech: Mechanism, dist: ProductDistribution, sample_count: int,
                      estimator="gradient_ascent", rng_seed=0, t: float = 0.0,
                      misreporter=None, step: int = 0) -> MetricsRecord:
    """Revenue, average regret and P* on ``sample_count`` fresh profiles."""
    oracle = estimator if isinstance(estimator, OracleConfig) else OracleConfig(kind=estimator)
    if oracle.kind == "gradient_ascent" and not isinstance(mech, DifferentiableMechanism):
        raise EstimatorMismatchError("gradient ascent needs a differentiable mechanism")
    ss = rng_seed if isinstance(rng_seed, np.random.SeedSequence) else np.random.SeedSequence(rng_seed)
    data_seed, oracle_seed = ss.spawn(2)
    V = sample_profiles(dist, sample_count, data_seed, t)
    p, r = evaluate_on(mech, V, dist, oracle, oracle_seed, t, misreporter)
    return MetricsRecord.from_samples(p, r, oracle.kind, rng_seed if isinstance(rng_seed, int) else 0, step, t)

