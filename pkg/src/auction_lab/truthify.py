"""Single-bidder truthification through menus.

Any one-bidder mechanism is a menu of (allocation, price) options. Offering
the extracted menu with every price discounted by ``1 - eps`` and letting the
bidder pick their favourite entry gives an exactly truthful mechanism whose
revenue is at least ``(1 - eps) P - (1 - eps) / eps * R``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .distributions import AuctionShape, ProductDistribution
from .losses import certified_revenue, epsilon_star
from .mechanisms import Mechanism, linear_utility
from .regret import MetricsRecord, OracleConfig, evaluate_on, lattice

MERGE_TOL = 1e-9


class OutOfScopeError(ValueError):
    pass


@dataclass
class Menu:
    """Options ``(allocations[k], prices[k])``; entry 0 is always the null option."""

    allocations: np.ndarray
    prices: np.ndarray

    def __post_init__(self):
        self.allocations = np.atleast_2d(np.asarray(self.allocations, dtype=np.float64))
        self.prices = np.asarray(self.prices, dtype=np.float64).reshape(-1)
        if self.allocations.shape[0] != self.prices.shape[0]:
            raise ValueError("one price per allocation")
        if np.any(self.prices < 0):
            raise ValueError("menu prices must be nonnegative")
        if np.any(self.allocations < 0) or np.any(self.allocations > 1 + 1e-12):
            raise ValueError("menu allocations must lie in [0, 1]")
        if not (np.all(self.allocations[0] == 0) and self.prices[0] == 0):
            raise ValueError("entry 0 must be the null option")

    @property
    def m(self) -> int:
        return self.allocations.shape[1]

    def __len__(self):
        return self.prices.shape[0]


def _merge(allocations, prices, m: int) -> Menu:
    allocations = np.vstack([np.zeros((1, m)), allocations])
    prices = np.concatenate([[0.0], prices])
    keys = np.round(allocations / MERGE_TOL).astype(np.int64)
    # keep the cheapest entry for every allocation; null first, then first-seen order
    order = np.lexsort((np.arange(prices.size), prices))
    _, first = np.unique(keys[order], axis=0, return_index=True)
    keep = np.sort(order[first])
    if keep[0] != 0:
        keep = np.concatenate([[0], keep[keep != 0]])
    return Menu(allocations[keep], prices[keep])


def extract_menu(mech: Mechanism, grid) -> Menu:
    """Outcomes of a one-bidder mechanism at every report in ``grid`` (K, m), plus null."""
    if mech.shape.n != 1:
        raise OutOfScopeError("menus are extracted from single-bidder mechanisms only")
    grid = np.asarray(grid, dtype=np.float64).reshape(-1, mech.shape.m)
    g, p = mech.outcome(grid[:, None, :])
    return _merge(np.clip(g[:, 0, :], 0.0, 1.0), np.maximum(p[:, 0], 0.0), mech.shape.m)


def discount_menu(menu: Menu, eps: float) -> Menu:
    if not 0.0 <= eps <= 1.0:
        raise ValueError("eps must lie in [0, 1]")
    return Menu(menu.allocations.copy(), menu.prices * (1.0 - eps))


class MenuMechanism(Mechanism):
    """The bidder gets their utility-maximizing menu entry.

    Ties go to the lower price, then the lower entry index.
    """

    def __init__(self, menu: Menu):
        self.menu = menu
        self.shape = AuctionShape(1, menu.m)

    def choose(self, bids):
        bids = self._check(bids)
        A, P = self.menu.allocations, self.menu.prices
        lead = bids.shape[:-2]
        b = bids.reshape(-1, self.shape.m)
        choice = np.empty(b.shape[0], dtype=np.intp)
        step = max(1, 2_000_000 // len(P))
        for s in range(0, b.shape[0], step):
            u = linear_utility(b[s:s + step, None, :], A[None, :, :], P[None, :])
            best = u.max(axis=1, keepdims=True)
            price = np.where(u == best, P[None, :], np.inf)
            cheapest = price.min(axis=1, keepdims=True)
            choice[s:s + step] = np.argmax((u == best) & (price == cheapest), axis=1)
        return choice.reshape(lead)

    def outcome(self, bids):
        k = self.choose(bids)
        g = self.menu.allocations[k][..., None, :]
        p = self.menu.prices[k][..., None]
        return g, p


def menu_mechanism(menu: Menu) -> MenuMechanism:
    return MenuMechanism(menu)


@dataclass
class TruthifyResult:
    mechanism: MenuMechanism
    epsilon: float
    input_record: MetricsRecord
    output_record: MetricsRecord
    certified_bound: float
    output_revenue_se: float
    max_output_regret: float
    menu: Menu


def truthify(mech: Mechanism, dist: ProductDistribution, test_profiles, grid_points: int = 51,
             oracle_points: int = 101, seed: int = 0) -> TruthifyResult:
    """Measure (P, R) with the grid oracle, discount the extracted menu by
    ``eps* = sqrt(R / P)`` and measure the resulting menu mechanism."""
    if mech.shape.n != 1:
        raise OutOfScopeError("multi-bidder transform out of scope: only single-bidder mechanisms can be truthified")
    V = np.asarray(test_profiles, dtype=np.float64)
    oracle = OracleConfig(kind="grid", grid_points=oracle_points)
    p_in, r_in = evaluate_on(mech, V, dist, oracle)
    rec_in = MetricsRecord.from_samples(p_in, r_in, "grid", seed)
    eps = epsilon_star(rec_in.rev, rec_in.total_regret)
    lo, hi = dist.support()
    menu = discount_menu(extract_menu(mech, lattice(lo, hi, grid_points)), eps)
    out = MenuMechanism(menu)
    p_out, r_out = evaluate_on(out, V, dist, oracle)
    rec_out = MetricsRecord.from_samples(p_out, r_out, "grid", seed)
    se = float(p_out.sum(axis=1).std(ddof=1) / np.sqrt(V.shape[0])) if V.shape[0] > 1 else 0.0
    return TruthifyResult(out, eps, rec_in, rec_out, certified_revenue(rec_in.rev, rec_in.total_regret, eps),
                          se, float(r_out.max()), menu)


def write_menu_csv(path, menu: Menu) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"alloc_{j + 1}" for j in range(menu.m)] + ["price"])
        for a, p in zip(menu.allocations, menu.prices):
            w.writerow([repr(float(x)) for x in a] + [repr(float(p))])


def read_menu_csv(path) -> Menu:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty menu file")
    header = rows[0]
    m = len(header) - 1
    if m < 1 or header[-1] != "price" or header[:-1] != [f"alloc_{j + 1}" for j in range(m)]:
        raise ValueError(f"{path}: bad menu header {header}")
    data = np.array([[float(x) for x in r] for r in rows[1:]], dtype=np.float64).reshape(-1, m + 1)
    return Menu(data[:, :m], data[:, m])
