import numpy as np
import pytest

from auction_lab.auctioneer import auctioneer_init
from auction_lab.distributions import AuctionShape, TimeScaledUniform, Uniform, iid
from auction_lab.losses import LagrangianState, lagrangian_loss, p_star
from auction_lab.misreporter import misreporter_loss
from auction_lab.nn import AdamW, CheckpointError, grad_check
from auction_lab.regret import MetricsRecord, OracleConfig
from auction_lab.trainers import (
    AlgnetTrainer,
    GameTrainConfig,
    RegretNetConfig,
    RegretNetTrainer,
    TrainingDiverged,
    TrainLog,
    auctioneer_pass,
    config_from_dict,
    config_hash,
    config_to_dict,
    linear_ramp,
    loss_m_per_bidder,
    make_trainer,
    online_target,
    run_online_experiment,
    train_algnet,
    train_regretnet,
    train_regretnet_online,
)

UNIT_1x2 = iid(AuctionShape(1, 2), Uniform())
UNIT_2x2 = iid(AuctionShape(2, 2), Uniform())
FAST_ORACLE = OracleConfig(restarts=2, steps=5)


def game_config(**kw):
    base = dict(batch_size=16, steps=24, T_init=5, T_limit=12, tau=2, n_a=1, h_a=8, n_p=1, h_p=8,
                n_M=1, h_M=8, eval_every=8, eval_size=32, eval_oracle=FAST_ORACLE, seed=0)
    base.update(kw)
    return GameTrainConfig(**base)


def regretnet_config(**kw):
    base = dict(batch_size=16, steps=24, inner_steps=3, T_rho=10, T_lambda=4, dataset_size=40, n_a=1, h_a=8,
                n_p=1, h_p=8, eval_every=8, eval_size=32, eval_oracle=FAST_ORACLE, seed=0)
    base.update(kw)
    return RegretNetConfig(**base)


class TestConfig:
    def test_invariants(self):
        with pytest.raises(ValueError):
            game_config(T_init=20, T_limit=10)
        with pytest.raises(ValueError):
            game_config(tau=0)
        with pytest.raises(ValueError):
            regretnet_config(inner_steps=0)

    def test_full_scale_defaults(self):
        c = GameTrainConfig()
        assert (c.batch_size, c.tau, c.lr) == (500, 100, 1e-3)

    def test_dict_round_trip(self):
        c = game_config()
        assert config_from_dict(GameTrainConfig, config_to_dict(c)) == c

    def test_unknown_key(self):
        with pytest.raises(ValueError, match="bogus"):
            config_from_dict(GameTrainConfig, {"bogus": 1})

    def test_hash_sensitive(self):
        assert config_hash(game_config(), UNIT_1x2) != config_hash(game_config(seed=1), UNIT_1x2)
        assert config_hash(game_config(), UNIT_1x2) == config_hash(game_config(), UNIT_1x2)


class TestTrainLog:
    def test_increasing_steps(self):
        log = TrainLog(0, "x")
        log.append(MetricsRecord(0.1, 0, 0, 0.1, "grid", 1, 0, step=5), 0.0)
        with pytest.raises(ValueError):
            log.append(MetricsRecord(0.1, 0, 0, 0.1, "grid", 1, 0, step=5), 0.0)


class TestAuctioneerPass:
    @pytest.mark.parametrize("which", ["game", "lagrangian"])
    def test_gradients(self, which):
        rng = np.random.default_rng(0)
        worst = 0.0
        for k in range(100):
            n, m = int(rng.integers(1, 3)), int(rng.integers(1, 3))
            shape = AuctionShape(n, m)
            auct = auctioneer_init(shape, 1, 4, 1, 4, k)
            for net in auct.nets:
                net.flat += 0.5 * rng.standard_normal(net.flat.size)
            V = rng.random((4, n, m))
            M = rng.random((4, n, m))
            state = LagrangianState(rng.uniform(0, 5, n), rng.uniform(0.5, 5), 1.0, 1, 1)
            loss_fn = loss_m_per_bidder if which == "game" else (lambda r, g: lagrangian_loss(r, g, state))
            for h in range(3):
                if n == 1 and h == 1:
                    continue

                def f(w, h=h):
                    q = auct.copy()
                    q.nets[h].flat[:] = w
                    loss, grads, _, _ = auctioneer_pass(q, V, M, loss_fn)
                    return loss, grads[h].flat

                worst = max(worst, grad_check(f, auct.nets[h].flat.copy()))
        assert worst <= 1e-4


class TestAlgnet:
    def test_deterministic(self):
        a = AlgnetTrainer(game_config(), UNIT_1x2).run()
        b = AlgnetTrainer(game_config(), UNIT_1x2).run()
        assert a.log.records == b.log.records
        assert all(x.flat.tobytes() == y.flat.tobytes() for x, y in zip(a.auct.nets, b.auct.nets))

    def test_reinit_count(self):
        for T_init, T_limit in [(5, 12), (4, 12), (3, 24), (24, 24)]:
            tr = AlgnetTrainer(game_config(T_init=T_init, T_limit=T_limit), UNIT_1x2).run()
            assert tr.reinit_count == (T_limit - 1) // T_init

    def test_log_cadence_and_p_star(self):
        _, _, log = train_algnet(game_config(steps=20), UNIT_2x2)
        assert [r.step for r in log.records] == [8, 16, 20]
        for r in log.records:
            assert r.total_regret == pytest.approx(2 * r.rgt, abs=1e-15)
            assert r.p_star == pytest.approx(p_star(r.rev, r.total_regret), abs=1e-12)

    def test_resume_matches_uninterrupted(self, tmp_path):
        full = AlgnetTrainer(game_config(), UNIT_1x2).run()
        part = AlgnetTrainer(game_config(), UNIT_1x2).run(until=11)
        path = tmp_path / "ck.bin"
        part.save(path)
        resumed = AlgnetTrainer.load(path, UNIT_1x2).run()
        assert resumed.log.records == full.log.records
        assert all(x.flat.tobytes() == y.flat.tobytes() for x, y in zip(resumed.auct.nets, full.auct.nets))
        assert resumed.mis.net.flat.tobytes() == full.mis.net.flat.tobytes()

    def test_round_trip(self):
        tr = AlgnetTrainer(game_config(), UNIT_1x2).run(until=7)
        back = AlgnetTrainer.from_bytes(tr.state_bytes(), UNIT_1x2)
        assert back.step == 7 and back.reinit_count == tr.reinit_count
        assert back.rng.bit_generator.state == tr.rng.bit_generator.state
        assert all(np.array_equal(a, b) for a, b in zip(back.opt_a.exp_avg, tr.opt_a.exp_avg))

    def test_corrupt_checkpoint(self, tmp_path):
        data = AlgnetTrainer(game_config(), UNIT_1x2).run(until=3).state_bytes()
        with pytest.raises(CheckpointError):
            AlgnetTrainer.from_bytes(data[:-10], UNIT_1x2)
        with pytest.raises(CheckpointError):
            AlgnetTrainer.from_bytes(b"JUNK" + data[4:], UNIT_1x2)
        with pytest.raises(CheckpointError):
            AlgnetTrainer.from_bytes(data, iid(AuctionShape(1, 2), Uniform(0, 2)))
        with pytest.raises(CheckpointError):
            RegretNetTrainer.from_bytes(data, UNIT_1x2)

    def test_misreporter_descent_with_frozen_auctioneer(self):
        tr = AlgnetTrainer(game_config(), UNIT_2x2).run(until=6)
        S = UNIT_2x2.sample(64, np.random.default_rng(1))
        opt = AdamW(tr.mis.nets, lr=1e-4)
        prev, _ = misreporter_loss(tr.mis, tr.auct, S)
        for _ in range(10):
            _, grads = misreporter_loss(tr.mis, tr.auct, S)
            opt.step(tr.mis.nets, grads)
            cur, _ = misreporter_loss(tr.mis, tr.auct, S)
            assert cur <= prev + 1e-12
            prev = cur

    def test_weight_average(self):
        # decay d after k steps: avg = d^k w0 + (1 - d) sum d^(k-j) w_j
        d = 0.9
        tr = AlgnetTrainer(game_config(ema_decay=d), UNIT_1x2)
        want = [net.flat.copy() for net in tr.auct.nets]
        for _ in range(5):
            tr.run(until=tr.step + 1)
            want = [d * w + (1 - d) * net.flat for w, net in zip(want, tr.auct.nets)]
        assert all(np.allclose(a.flat, w, atol=1e-15) for a, w in zip(tr.avg.nets, want))
        assert tr.deployed is tr.avg
        assert AlgnetTrainer(game_config(), UNIT_1x2).avg is None

    def test_weight_average_resumes(self, tmp_path):
        cfg = game_config(ema_decay=0.9)
        full = AlgnetTrainer(cfg, UNIT_1x2).run()
        part = AlgnetTrainer(cfg, UNIT_1x2).run(until=11)
        part.save(tmp_path / "ck.bin")
        resumed = AlgnetTrainer.load(tmp_path / "ck.bin", UNIT_1x2).run()
        assert resumed.log.records == full.log.records
        assert all(x.flat.tobytes() == y.flat.tobytes() for x, y in zip(resumed.avg.nets, full.avg.nets))

    def test_ema_decay_range(self):
        with pytest.raises(ValueError):
            game_config(ema_decay=1.0)

    def test_divergence_reports_last_good(self):
        tr = AlgnetTrainer(game_config(), UNIT_1x2).run(until=8)
        tr.auct.f1.flat[:] = np.nan
        with pytest.raises(TrainingDiverged) as info:
            tr.run()
        assert info.value.step == 9
        assert AlgnetTrainer.from_bytes(info.value.last_good, UNIT_1x2).step == 8


class TestRegretNet:
    def test_deterministic_and_resumable(self, tmp_path):
        full = RegretNetTrainer(regretnet_config(), UNIT_1x2).run()
        part = RegretNetTrainer(regretnet_config(), UNIT_1x2).run(until=9)
        part.save(tmp_path / "r.bin")
        resumed = RegretNetTrainer.load(tmp_path / "r.bin", UNIT_1x2).run()
        assert resumed.log.records == full.log.records
        assert np.array_equal(resumed.misreports, full.misreports)
        assert resumed.lagrangian.to_dict() == full.lagrangian.to_dict()

    def test_schedule_applied(self):
        tr = RegretNetTrainer(regretnet_config(steps=20), UNIT_1x2).run()
        assert tr.lagrangian.rho == 1.0 + 2 * 50.0
        assert np.all(tr.lagrangian.lam >= 5.0)

    def test_persistent_misreports_stay_in_support(self):
        tr = RegretNetTrainer(regretnet_config(), UNIT_1x2).run()
        assert tr.misreports.min() >= 0 and tr.misreports.max() <= 1

    def test_online(self):
        _, log = train_regretnet_online(regretnet_config(), UNIT_1x2)
        assert log.records[-1].step == 24

    def test_offline_entry_point_rejects_online(self):
        with pytest.raises(ValueError):
            train_regretnet(regretnet_config(online=True), UNIT_1x2)

    def test_revenue_only_raises_regret(self):
        common = dict(steps=300, batch_size=64, lr=1e-2, T_rho=10 ** 6, T_lambda=10 ** 6, eval_every=300,
                      eval_size=200, eval_oracle=OracleConfig(kind="grid", grid_points=21), dataset_size=640)
        free = RegretNetTrainer(regretnet_config(lam0=0.0, rho0=1e-9, **common), UNIT_1x2).run()
        rec = free.log.records[-1]
        assert rec.rev > 0.7 and rec.rgt > 0.05


class TestOnline:
    def test_ramp(self):
        f = linear_ramp(100)
        assert (f(0), f(50), f(100)) == (0.0, 0.5, 1.0)

    def test_targets(self):
        assert online_target(0.0) == 0.55
        assert online_target(1.0) == pytest.approx(1.10)

    def test_logs_follow_ramp(self):
        dist = iid(AuctionShape(1, 2), TimeScaledUniform())
        log = run_online_experiment("algnet", game_config(), dist)
        assert [r.t for r in log.records] == [pytest.approx(s / 24) for s in (8, 16, 24)]

    def test_offline_regretnet_trains_at_zero(self):
        dist = iid(AuctionShape(1, 2), TimeScaledUniform())
        tr = make_trainer("regretnet", regretnet_config(), dist, linear_ramp(24)).run()
        assert tr.dataset.max() <= 1.0
        assert tr.log.records[-1].t == 1.0

    def test_needs_time_varying(self):
        with pytest.raises(ValueError):
            run_online_experiment("algnet", game_config(), UNIT_1x2)

    def test_unknown_algorithm(self):
        with pytest.raises(ValueError):
            make_trainer("gan", game_config(), UNIT_1x2)
