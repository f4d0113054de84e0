import numpy as np
import pytest

from auction_lab.auctioneer import NeuralMechanism, auctioneer_init
from auction_lab.distributions import AuctionShape, Uniform, iid, sample_profiles
from auction_lab.losses import certified_revenue, epsilon_star, p_star
from auction_lab.mechanisms import GiveAway, PostedPrice
from auction_lab.regret import OracleConfig, lattice, profile_regrets
from auction_lab.truthify import (
    Menu,
    MenuMechanism,
    OutOfScopeError,
    discount_menu,
    extract_menu,
    menu_mechanism,
    read_menu_csv,
    truthify,
    write_menu_csv,
)

UNIT_1x1 = iid(AuctionShape(1, 1), Uniform())
UNIT_1x2 = iid(AuctionShape(1, 2), Uniform())


def neural_1x2(seed, scale=1.0):
    p = auctioneer_init(AuctionShape(1, 2), 2, 16, 2, 16, seed)
    rng = np.random.default_rng(seed)
    for net in p.nets:
        net.flat += scale * rng.standard_normal(net.flat.size)
    return NeuralMechanism(p)


class TestMenu:
    def test_requires_null_first(self):
        with pytest.raises(ValueError):
            Menu([[1.0]], [0.5])

    def test_rejects_negative_price(self):
        with pytest.raises(ValueError):
            Menu([[0.0], [1.0]], [0.0, -0.1])


class TestExtract:
    def test_posted_price_collapses(self):
        menu = extract_menu(PostedPrice(AuctionShape(1, 1), 2 / 3), lattice([0.0], [1.0], 51))
        assert len(menu) == 2
        assert np.array_equal(menu.allocations, [[0.0], [1.0]])
        assert np.array_equal(menu.prices, [0.0, 2 / 3])

    def test_give_away(self):
        menu = extract_menu(GiveAway(AuctionShape(1, 2)), lattice([0, 0], [1, 1], 11))
        assert np.array_equal(menu.allocations, [[0, 0], [1, 1]])
        assert np.array_equal(menu.prices, [0, 0])

    def test_duplicate_keeps_lower_price(self):
        class TwoPrices:
            shape = AuctionShape(1, 1)

            def outcome(self, bids):
                b = np.asarray(bids)
                g = np.ones_like(b)
                return g, np.where(b[..., 0] > 0.5, 0.3, 0.2)

        menu = extract_menu(TwoPrices(), lattice([0.0], [1.0], 5))
        assert np.array_equal(menu.prices, [0.0, 0.2])

    def test_neural_entry_count(self):
        menu = extract_menu(neural_1x2(0), lattice([0, 0], [1, 1], 51))
        assert len(menu) <= 2602
        assert menu.allocations.min() >= 0 and menu.allocations.max() <= 1

    def test_multi_bidder_refused(self):
        with pytest.raises(OutOfScopeError):
            extract_menu(GiveAway(AuctionShape(2, 1)), lattice([0.0], [1.0], 3))


class TestDiscount:
    menu = Menu([[0.0], [1.0]], [0.0, 1.0])

    def test_zero(self):
        assert np.array_equal(discount_menu(self.menu, 0.0).prices, self.menu.prices)

    def test_one(self):
        assert np.all(discount_menu(self.menu, 1.0).prices == 0)

    def test_arithmetic(self):
        assert discount_menu(self.menu, 0.2).prices[1] == pytest.approx(0.8, abs=1e-15)
        assert np.array_equal(discount_menu(self.menu, 0.2).allocations, self.menu.allocations)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            discount_menu(self.menu, 1.5)


class TestMenuMechanism:
    menu = Menu([[0.0], [1.0]], [0.0, 2 / 3])

    def test_buys_above_price(self):
        mech = menu_mechanism(self.menu)
        g, p = mech.outcome(np.array([[0.7]]))
        assert g[0, 0] == 1.0 and p[0] == 2 / 3
        assert 0.7 - p[0] == pytest.approx(1 / 30)

    def test_null_below_price(self):
        g, p = MenuMechanism(self.menu).outcome(np.array([[0.5]]))
        assert g[0, 0] == 0.0 and p[0] == 0.0

    def test_tie_goes_to_lower_price(self):
        g, p = MenuMechanism(self.menu).outcome(np.array([[2 / 3]]))
        assert p[0] == 0.0

    def test_zero_regret_on_random_menus(self):
        rng = np.random.default_rng(0)
        for k in range(20):
            A = rng.random((30, 2))
            P = rng.random(30) * 1.5
            menu = Menu(np.vstack([[0, 0], A]), np.concatenate([[0], P]))
            mech = MenuMechanism(menu)
            V = rng.random((200, 1, 2))
            r = profile_regrets(mech, V, UNIT_1x2, OracleConfig(kind="grid", grid_points=51))
            assert np.all(r == 0.0)
            _, p = mech.outcome(V)
            g, _ = mech.outcome(V)
            assert np.all((g[:, 0] * V[:, 0]).sum(-1) - p[:, 0] >= 0)


class TestTruthify:
    def test_posted_price_unchanged(self):
        mech = PostedPrice(AuctionShape(1, 2), [0.5, 0.6])
        V = sample_profiles(UNIT_1x2, 500, 0)
        res = truthify(mech, UNIT_1x2, V, grid_points=21, oracle_points=51)
        assert res.epsilon == 0.0
        assert res.output_record.rev == res.input_record.rev
        assert res.max_output_regret == 0.0

    def test_neural_mechanism(self):
        mech = neural_1x2(3, 0.5)
        V = sample_profiles(UNIT_1x2, 500, 1)
        res = truthify(mech, UNIT_1x2, V, grid_points=51, oracle_points=51)
        assert res.max_output_regret == 0.0
        assert res.output_record.rgt == 0.0
        P, R = res.input_record.rev, res.input_record.total_regret
        assert res.epsilon == pytest.approx(epsilon_star(P, R))
        assert res.output_record.rev >= res.certified_bound - 3 * res.output_revenue_se - 0.01

    def test_multi_bidder_out_of_scope(self):
        mech = NeuralMechanism(auctioneer_init(AuctionShape(2, 2), 1, 4, 1, 4, 0))
        with pytest.raises(OutOfScopeError, match="multi-bidder transform out of scope"):
            truthify(mech, iid(AuctionShape(2, 2), Uniform()), np.zeros((1, 2, 2)))


class TestBound:
    def test_hand_value(self):
        eps = epsilon_star(1.0, 0.04)
        assert eps == pytest.approx(0.2)
        assert certified_revenue(1.0, 0.04, eps) == pytest.approx(0.64, abs=1e-12)
        assert p_star(1.0, 0.04) == pytest.approx(0.64, abs=1e-12)

    @pytest.mark.parametrize("P,R", [(1.0, 0.04), (0.55, 0.002), (0.17, 0.01), (2.0, 1.5)])
    def test_eps_star_best_on_grid(self, P, R):
        grid = np.round(np.arange(0.01, 1.0001, 0.01), 2)
        values = [certified_revenue(P, R, e) for e in grid]
        best = grid[int(np.argmax(values))]
        assert abs(best - epsilon_star(P, R)) <= 0.01 + 1e-12
        # unimodal: increasing before the peak, decreasing after
        k = int(np.argmax(values))
        assert all(np.diff(values[:k + 1]) >= 0) and all(np.diff(values[k:]) <= 0)


def test_menu_csv_round_trip(tmp_path):
    menu = extract_menu(neural_1x2(1), lattice([0, 0], [1, 1], 11))
    path = tmp_path / "menu.csv"
    write_menu_csv(path, menu)
    back = read_menu_csv(path)
    assert np.array_equal(back.allocations, menu.allocations)
    assert np.array_equal(back.prices, menu.prices)
    assert path.read_text().splitlines()[0] == "alloc_1,alloc_2,price"


def test_menu_csv_bad_header(tmp_path):
    path = tmp_path / "menu.csv"
    path.write_text("a,b\n0,0\n")
    with pytest.raises(ValueError):
        read_menu_csv(path)
