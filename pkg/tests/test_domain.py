import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from auction_lab.auctioneer import NeuralMechanism, auctioneer_init
from auction_lab.distributions import (
    AuctionShape,
    PowerTail,
    ProductDistribution,
    TimeScaledUniform,
    Uniform,
    distribution_from_dict,
    distribution_to_dict,
    iid,
    sample_profile,
    sample_profiles,
)
from auction_lab.mechanisms import (
    DifferentiableMechanism,
    GiveAway,
    PayYourBidAbove,
    PostedPrice,
    insert_row,
    linear_utility,
    utility,
    with_row,
    without_row,
)
from auction_lab.regret import (
    GridBudgetError,
    EstimatorMismatchError,
    MetricsRecord,
    OracleConfig,
    empirical_metrics,
    lattice,
    read_metrics_csv,
    regret_gradient_ascent,
    regret_grid,
    write_metrics_csv,
)

UNIT_1x2 = iid(AuctionShape(1, 2), Uniform(0, 1))


class TestShapes:
    def test_rejects_empty(self):
        with pytest.raises(ValueError):
            AuctionShape(0, 2)

    def test_marginal_count(self):
        with pytest.raises(ValueError):
            ProductDistribution(AuctionShape(1, 2), (Uniform(),))

    def test_bad_marginals(self):
        with pytest.raises(ValueError):
            Uniform(1, 1)
        with pytest.raises(ValueError):
            PowerTail(1.0)


class TestSampling:
    def test_uniform_support(self):
        V = sample_profiles(iid(AuctionShape(3, 4), Uniform(0, 1)), 1000, 0)
        assert V.shape == (1000, 3, 4)
        assert V.min() >= 0 and V.max() <= 1

    def test_setting_b_support(self):
        dist = ProductDistribution(AuctionShape(1, 2), (Uniform(4, 16), Uniform(4, 7)))
        V = sample_profiles(dist, 1000, 1)
        assert np.all((V[..., 0] >= 4) & (V[..., 0] <= 16))
        assert np.all((V[..., 1] >= 4) & (V[..., 1] <= 7))

    def test_power_tail_quantile(self):
        assert PowerTail(5).quantile(1 - 2.0 ** -5) == 1.0

    def test_power_tail_mean(self):
        x = PowerTail(5).quantile(np.random.default_rng(0).random(10 ** 6))
        se = x.std() / np.sqrt(x.size)
        assert abs(x.mean() - 0.25) <= min(3 * se, 0.005)

    def test_power_tail_search_box(self):
        lo, hi = PowerTail(5).support()
        assert lo == 0 and hi == pytest.approx(10 ** 0.8 - 1)

    def test_time_scaled(self):
        mg = TimeScaledUniform(0, 1, 1.0)
        assert mg.support(0.5) == (0.0, 1.5)
        dist = iid(AuctionShape(1, 2), mg)
        assert dist.time_varying
        assert sample_profiles(dist, 500, 0, t=1.0).max() <= 2.0

    def test_deterministic(self):
        assert np.array_equal(sample_profile(UNIT_1x2, 0.0, 5), sample_profile(UNIT_1x2, 0.0, 5))

    def test_dict_round_trip(self):
        dist = ProductDistribution(AuctionShape(2, 3), (Uniform(4, 16), PowerTail(6), TimeScaledUniform(0, 1, 2)))
        assert distribution_from_dict(dist.shape, distribution_to_dict(dist)) == dist

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            distribution_from_dict(AuctionShape(1, 1), {"marginals": [{"kind": "beta"}]})


class Fixed:
    """Single bidder, one item: the allocation and price do not depend on bids."""

    def __init__(self, g, p):
        self.shape = AuctionShape(1, len(g))
        self.g, self.p = np.array(g, dtype=float), float(p)

    def outcome(self, bids):
        bids = np.asarray(bids)
        lead = bids.shape[:-2]
        return np.broadcast_to(self.g, lead + (1, self.shape.m)), np.full(lead + (1,), self.p)


class TestUtility:
    def test_zero_outcome(self):
        assert utility(Fixed([0.0], 0.0), 0, [0.9], [[0.9]]) == 0.0

    def test_arithmetic(self):
        assert utility(Fixed([1.0], 0.3), 0, [0.7], [[0.1]]) == pytest.approx(0.4, abs=1e-15)

    def test_ir_at_truthful_bids(self):
        mech = NeuralMechanism(auctioneer_init(AuctionShape(2, 2), 2, 8, 2, 8, 0))
        V = sample_profiles(iid(AuctionShape(2, 2), Uniform()), 200, 0)
        for i in range(2):
            assert np.all(utility(mech, i, V[:, i, :], V) >= 0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            utility(Fixed([1.0], 0.0), 0, [0.1, 0.2], [[0.1]])

    def test_linear_utility_fractional(self):
        assert linear_utility(np.array([0.5, 0.8]), np.array([0.5, 0.25]), 0.1) == pytest.approx(0.35)


class TestRowHelpers:
    @given(st.integers(1, 5), st.integers(1, 4), st.integers(0, 2 ** 31))
    @settings(max_examples=40)
    def test_insert_reproduces_profile(self, n, m, seed):
        V = np.random.default_rng(seed).random((n, m))
        for i in range(n):
            replaced = with_row(V, i, np.full(m, -1.0))
            assert np.array_equal(insert_row(without_row(replaced, i), i, V[i]), V)

    def test_with_row_copies(self):
        V = np.zeros((2, 2))
        with_row(V, 1, [1.0, 1.0])
        assert not V.any()


class TestFeasibility:
    @pytest.mark.parametrize("mech", [
        PostedPrice(AuctionShape(3, 2), [0.3, 0.6]),
        GiveAway(AuctionShape(3, 2)),
        NeuralMechanism(auctioneer_init(AuctionShape(3, 2), 2, 16, 2, 16, 1)),
    ])
    def test_column_sums(self, mech):
        B = np.random.default_rng(0).random((20000, 3, 2)) * 3
        g, p = mech.outcome(B)
        assert g.sum(axis=-2).max() <= 1 + 1e-9
        assert p.min() >= 0


class TestRegretGrid:
    def test_posted_price_zero(self):
        mech = PostedPrice(AuctionShape(1, 2), [0.4, 0.7])
        for V in sample_profiles(UNIT_1x2, 50, 0):
            assert regret_grid(mech, V, 0, 101)[0] == 0.0

    def test_posted_price_two_bidders(self):
        mech = PostedPrice(AuctionShape(2, 2), [0.5, 0.5])
        for V in sample_profiles(iid(AuctionShape(2, 2), Uniform()), 10, 1):
            for i in range(2):
                assert regret_grid(mech, V, i, 21)[0] == 0.0

    def test_pay_your_bid(self):
        r, b = regret_grid(PayYourBidAbove(0.5), np.array([[0.8]]), 0, 101)
        assert r == pytest.approx(0.3, abs=1e-12)
        assert b[0] == pytest.approx(0.5)

    def test_truthful_only(self):
        r, _ = regret_grid(PayYourBidAbove(0.5), np.array([[0.8]]), 0, 1, support=([0.8], [0.8]))
        assert r == 0.0

    def test_budget(self):
        with pytest.raises(GridBudgetError):
            lattice(np.zeros(4), np.ones(4), 101)

    def test_monotone_refinement(self):
        mech = NeuralMechanism(auctioneer_init(AuctionShape(1, 2), 2, 16, 2, 16, 3))
        for V in sample_profiles(UNIT_1x2, 10, 2):
            coarse = regret_grid(mech, V, 0, 11)[0]
            fine = regret_grid(mech, V, 0, 101)[0]
            assert fine >= coarse >= 0


class TestGradientAscent:
    def test_zero_steps_truthful_start(self):
        mech = NeuralMechanism(auctioneer_init(AuctionShape(1, 2), 2, 16, 2, 16, 0))
        r, b = regret_gradient_ascent(mech, np.array([[0.3, 0.6]]), 0, 0, 0.01, 1, 0, (np.zeros(2), np.ones(2)))
        assert r == 0.0

    def test_needs_differentiable(self):
        with pytest.raises(EstimatorMismatchError):
            regret_gradient_ascent(PostedPrice(AuctionShape(1, 2), 0.5), np.ones((1, 2)), 0, 5, 0.01, 1, 0,
                                   (np.zeros(2), np.ones(2)))

    def test_flat_utility_reaches_corner(self):
        # always allocate, charge 1% of the bid: best report is 0, regret 0.01 v
        class Skim(DifferentiableMechanism):
            shape = AuctionShape(1, 1)

            def forward(self, bids):
                bids = self._check(bids)
                return np.ones_like(bids), 0.01 * bids[..., 0], None

            def backward(self, cache, dg, dp):
                return 0.01 * dp[..., None]

        r, b = regret_gradient_ascent(Skim(), np.array([[0.9]]), 0, 200, 0.01, 1, 0, ([0.0], [1.0]))
        assert b[0] == 0.0
        assert r == pytest.approx(0.009, abs=1e-15)

    def test_agrees_with_grid(self):
        mech = NeuralMechanism(auctioneer_init(AuctionShape(1, 2), 2, 16, 2, 16, 4))
        for V in sample_profiles(UNIT_1x2, 10, 3):
            grid = regret_grid(mech, V, 0, 101)[0]
            ga = regret_gradient_ascent(mech, V, 0, 200, 0.01, 10, 0, (np.zeros(2), np.ones(2)))[0]
            assert ga >= 0 and abs(ga - grid) <= 1e-3


class TestEmpiricalMetrics:
    def test_posted_price_revenue(self):
        dist = iid(AuctionShape(1, 1), Uniform())
        rec = empirical_metrics(PostedPrice(AuctionShape(1, 1), 2 / 3), dist, 100000, "grid", 0)
        assert rec.rev == pytest.approx(2 / 9, abs=0.005)
        assert rec.rgt == 0.0 and rec.p_star == rec.rev

    def test_give_away(self):
        rec = empirical_metrics(GiveAway(AuctionShape(2, 2)), iid(AuctionShape(2, 2), Uniform()), 50,
                                OracleConfig(kind="grid", grid_points=11), 0)
        assert rec.rev == 0.0 and rec.rgt == 0.0

    def test_reproducible(self):
        mech = NeuralMechanism(auctioneer_init(AuctionShape(2, 2), 2, 8, 2, 8, 0))
        dist = iid(AuctionShape(2, 2), Uniform())
        oracle = OracleConfig(restarts=2, steps=10)
        a = empirical_metrics(mech, dist, 100, oracle, 9)
        b = empirical_metrics(mech, dist, 100, oracle, 9)
        assert a == b
        assert a.total_regret == pytest.approx(2 * a.rgt)

    def test_estimator_mismatch(self):
        with pytest.raises(EstimatorMismatchError):
            empirical_metrics(PostedPrice(AuctionShape(1, 2), 0.5), UNIT_1x2, 10, "gradient_ascent")
        with pytest.raises(EstimatorMismatchError):
            empirical_metrics(PostedPrice(AuctionShape(1, 2), 0.5), UNIT_1x2, 10, "misreporter")

    def test_csv_round_trip(self, tmp_path):
        recs = [MetricsRecord(0.5, 0.001, 0.002, 0.45, "grid", 0, 3, step=s, t=0.1 * s) for s in (1, 2)]
        path = tmp_path / "m.csv"
        write_metrics_csv(path, recs[:1])
        write_metrics_csv(path, recs[1:], append=True)
        back = read_metrics_csv(path)
        assert [(r.step, r.rev, r.t, r.regret_estimator) for r in back] == [(1, 0.5, 0.1, "grid"), (2, 0.5, 0.2, "grid")]
