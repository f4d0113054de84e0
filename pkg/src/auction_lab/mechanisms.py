"""Mechanism interface, utilities and a few analytic mechanisms.

Bids are arrays of shape (..., n, m). A mechanism returns the fractional
allocation ``g`` of shape (..., n, m), with every item column summing to at
most one, and nonnegative payments ``p`` of shape (..., n). Allocations are
treated as exact fractional quantities, never sampled.
"""

from __future__ import annotations

import numpy as np

from .distributions import AuctionShape


class Mechanism:
    """Base class: subclasses implement :meth:`outcome`."""

    shape: AuctionShape

    def outcome(self, bids):
        raise NotImplementedError

    def allocate(self, bids):
        return self.outcome(bids)[0]

    def pay(self, bids):
        return self.outcome(bids)[1]

    def _check(self, bids):
        bids = np.asarray(bids, dtype=np.float64)
        if bids.shape[-2:] != (self.shape.n, self.shape.m):
            raise ValueError(f"bids of shape {bids.shape} for a {self.shape.n}x{self.shape.m} auction")
        return bids


class DifferentiableMechanism(Mechanism):
    """Mechanism whose outcome can be differentiated with respect to the bids."""

    def forward(self, bids):
        """Return ``(g, p, cache)``."""
        raise NotImplementedError

    def backward(self, cache, dg, dp):
        """Gradient of ``sum(dg * g) + sum(dp * p)`` with respect to the bids."""
        raise NotImplementedError

    def outcome(self, bids):
        g, p, _ = self.forward(bids)
        return g, p


def linear_utility(values, alloc, price):
    """``<values, alloc> - price`` summed item by item in a fixed order.

    Every utility in the package goes through this function so that equal
    inputs give bitwise equal utilities; the zero-regret guarantees of menu
    mechanisms depend on it.
    """
    values = np.asarray(values)
    alloc = np.asarray(alloc)
    acc = values[..., 0] * alloc[..., 0]
    for j in range(1, values.shape[-1]):
        acc = acc + values[..., j] * alloc[..., j]
    return acc - price


def utility(mech: Mechanism, i: int, true_values, bids):
    """Utility of bidder ``i`` with valuation ``true_values`` when ``bids`` are reported."""
    bids = np.asarray(bids, dtype=np.float64)
    true_values = np.asarray(true_values, dtype=np.float64)
    if true_values.shape[-1] != mech.shape.m or bids.shape[-2:] != (mech.shape.n, mech.shape.m):
        raise ValueError("shape mismatch between values, bids and mechanism")
    if not 0 <= i < mech.shape.n:
        raise IndexError(f"bidder index {i} out of range")
    g, p = mech.outcome(bids)
    return linear_utility(true_values, g[..., i, :], p[..., i])


def with_row(bids, i: int, row):
    """Copy of ``bids`` with bidder ``i``'s row replaced, i.e. ``(b'_i, B_{-i})``."""
    out = np.array(bids, dtype=np.float64, copy=True)
    out[..., i, :] = row
    return out


def without_row(bids, i: int):
    """``B_{-i}``: the bid matrix with bidder ``i`` removed."""
    return np.delete(np.asarray(bids), i, axis=-2)


def insert_row(others, i: int, row):
    """Inverse of :func:`without_row`."""
    others = np.asarray(others, dtype=np.float64)
    row = np.broadcast_to(np.asarray(row, dtype=np.float64), others.shape[:-2] + (others.shape[-1],))
    return np.concatenate([others[..., :i, :], row[..., None, :], others[..., i:, :]], axis=-2)


class PostedPrice(Mechanism):
    """Item prices offered to bidders in index order.

    Each bidder takes every still-available item whose bid is at least its
    price. With additive values the choice is item by item, so truthful
    bidding is optimal for every bidder.
    """

    def __init__(self, shape: AuctionShape, prices):
        self.shape = shape
        self.prices = np.broadcast_to(np.asarray(prices, dtype=np.float64), (shape.m,)).copy()
        if np.any(self.prices < 0):
            raise ValueError("prices must be nonnegative")

    def outcome(self, bids):
        bids = self._check(bids)
        g = np.zeros_like(bids)
        available = np.ones(bids.shape[:-2] + (self.shape.m,), dtype=bool)
        for i in range(self.shape.n):
            take = available & (bids[..., i, :] >= self.prices)
            g[..., i, :] = take
            available &= ~take
        p = (g * self.prices).sum(axis=-1)
        return g, p


class PayYourBidAbove(Mechanism):
    """Single bidder, single item: sold iff the bid is at least ``threshold``, at the bid."""

    def __init__(self, threshold: float = 0.5):
        self.shape = AuctionShape(1, 1)
        self.threshold = float(threshold)

    def outcome(self, bids):
        bids = self._check(bids)
        g = (bids >= self.threshold).astype(np.float64)
        p = (g * bids)[..., 0]
        return g, p


class GiveAway(Mechanism):
    """Everything to bidder 0 for free."""

    def __init__(self, shape: AuctionShape):
        self.shape = shape

    def outcome(self, bids):
        bids = self._check(bids)
        g = np.zeros_like(bids)
        g[..., 0, :] = 1.0
        return g, np.zeros(bids.shape[:-1])
