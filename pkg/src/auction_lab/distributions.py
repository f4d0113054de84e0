"""Valuation distributions: per-item marginals shared by i.i.d. bidders."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

# misreport search and grids stop at this quantile of unbounded marginals
SEARCH_QUANTILE = 0.9999


@dataclass(frozen=True)
class AuctionShape:
    n: int
    m: int

    def __post_init__(self):
        if int(self.n) < 1 or int(self.m) < 1:
            raise ValueError("an auction needs at least one bidder and one item")


@dataclass(frozen=True)
class Uniform:
    lo: float = 0.0
    hi: float = 1.0

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError("Uniform requires lo < hi")

    def quantile(self, u, t=0.0):
        return self.lo + (self.hi - self.lo) * np.asarray(u)

    def support(self, t=0.0):
        return self.lo, self.hi

    def mean(self, t=0.0):
        return 0.5 * (self.lo + self.hi)


@dataclass(frozen=True)
class PowerTail:
    """Density ``k / (1 + x)^(k + 1)`` on ``[0, inf)``."""

    k: float

    def __post_init__(self):
        if not self.k > 1:
            raise ValueError("PowerTail needs k > 1 for a finite mean")

    def quantile(self, u, t=0.0):
        return (1.0 - np.asarray(u)) ** (-1.0 / self.k) - 1.0

    def support(self, t=0.0):
        return 0.0, float(self.quantile(SEARCH_QUANTILE))

    def mean(self, t=0.0):
        return 1.0 / (self.k - 1.0)


@dataclass(frozen=True)
class TimeScaledUniform:
    """``U[lo * s(t), hi * s(t)]`` with linear scale ``s(t) = 1 + slope * t``."""

    lo: float = 0.0
    hi: float = 1.0
    slope: float = 1.0

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError("TimeScaledUniform requires lo < hi")

    def scale(self, t):
        s = 1.0 + self.slope * t
        if s <= 0:
            raise ValueError(f"scale factor {s} at t={t} is not positive")
        return s

    def quantile(self, u, t=0.0):
        s = self.scale(t)
        return s * (self.lo + (self.hi - self.lo) * np.asarray(u))

    def support(self, t=0.0):
        s = self.scale(t)
        return self.lo * s, self.hi * s

    def mean(self, t=0.0):
        return 0.5 * (self.lo + self.hi) * self.scale(t)


Marginal = Union[Uniform, PowerTail, TimeScaledUniform]


@dataclass(frozen=True)
class ProductDistribution:
    shape: AuctionShape
    marginals: tuple

    def __post_init__(self):
        object.__setattr__(self, "marginals", tuple(self.marginals))
        if len(self.marginals) != self.shape.m:
            raise ValueError(f"{len(self.marginals)} marginals for {self.shape.m} items")

    def support(self, t=0.0):
        """Per-item (lo, hi) arrays of the search box at time ``t``."""
        lo, hi = zip(*(mg.support(t) for mg in self.marginals))
        return np.array(lo, dtype=float), np.array(hi, dtype=float)

    def sample(self, count: int, rng, t=0.0) -> np.ndarray:
        """``count`` profiles of shape (n, m), by inverse CDF."""
        n, m = self.shape.n, self.shape.m
        u = rng.random((count, n, m))
        out = np.empty_like(u)
        for j, mg in enumerate(self.marginals):
            out[:, :, j] = mg.quantile(u[:, :, j], t)
        return out

    @property
    def time_varying(self) -> bool:
        return any(isinstance(mg, TimeScaledUniform) for mg in self.marginals)


def iid(shape: AuctionShape, marginal: Marginal) -> ProductDistribution:
    return ProductDistribution(shape, (marginal,) * shape.m)


def sample_profile(dist: ProductDistribution, t: float, rng_seed) -> np.ndarray:
    return dist.sample(1, np.random.default_rng(rng_seed), t)[0]


def sample_profiles(dist: ProductDistribution, count: int, rng_seed, t: float = 0.0) -> np.ndarray:
    return dist.sample(count, np.random.default_rng(rng_seed), t)


def marginal_from_dict(d: dict) -> Marginal:
    kind = d.get("kind")
    if kind == "uniform":
        return Uniform(float(d["lo"]), float(d["hi"]))
    if kind == "power_tail":
        return PowerTail(float(d["k"]))
    if kind == "time_scaled_uniform":
        return TimeScaledUniform(float(d.get("lo", 0.0)), float(d.get("hi", 1.0)), float(d.get("slope", 1.0)))
    raise ValueError(f"unknown marginal kind {kind!r}")


def marginal_to_dict(mg: Marginal) -> dict:
    if isinstance(mg, Uniform):
        return {"kind": "uniform", "lo": mg.lo, "hi": mg.hi}
    if isinstance(mg, PowerTail):
        return {"kind": "power_tail", "k": mg.k}
    return {"kind": "time_scaled_uniform", "lo": mg.lo, "hi": mg.hi, "slope": mg.slope}


def distribution_from_dict(shape: AuctionShape, d: dict) -> ProductDistribution:
    marginals: Sequence = d["marginals"]
    if isinstance(marginals, dict):
        marginals = [marginals] * shape.m
    return ProductDistribution(shape, tuple(marginal_from_dict(x) for x in marginals))


def distribution_to_dict(dist: ProductDistribution) -> dict:
    return {"marginals": [marginal_to_dict(mg) for mg in dist.marginals]}
