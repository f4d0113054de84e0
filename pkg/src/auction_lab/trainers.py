"""Training procedures: the auctioneer/misreporter game, the augmented
Lagrangian baseline (offline and online) and the drifting-distribution driver.

Every trainer is a deterministic function of its config and seed. Trainers
checkpoint their complete state (parameters, optimizer moments, schedule,
step counter and RNG state) so a resumed run continues bit for bit.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time as _time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .auctioneer import AuctioneerParams, NeuralMechanism, auctioneer_backward, auctioneer_forward, auctioneer_init
from .checkpoint import (
    auctioneer_from_sections,
    auctioneer_sections,
    pack_container,
    unpack_container,
    write_atomic,
)
from .distributions import ProductDistribution, distribution_to_dict
from .losses import LagrangianState, lagrangian_loss, loss_m, schedule_step
from .mechanisms import linear_utility
from .misreporter import (
    MisreporterOracle,
    MisreporterParams,
    deviation_backward,
    deviation_utilities,
    misreport,
    misreporter_init,
    misreporter_loss,
    replaced_batch,
)
from .nn import AdamW, CheckpointError, DivergenceError
from .regret import MetricsRecord, OracleConfig, evaluate_on

log = logging.getLogger(__name__)

# online experiment: optimal revenue for 1 bidder, 2 items i.i.d. U[0, 1+t]
MANELLI_VINCENT_REVENUE = 0.55


class TrainingDiverged(RuntimeError):
    """Raised when a loss or gradient becomes non-finite.

    ``last_good`` holds the checkpoint bytes of the most recent evaluation
    point (or the initial state).
    """

    def __init__(self, message, step, last_good: bytes):
        super().__init__(message)
        self.step = step
        self.last_good = last_good


def _oracle_from(value) -> OracleConfig:
    if isinstance(value, OracleConfig):
        return value
    return OracleConfig(**(value or {}))


@dataclass
class GameTrainConfig:
    """Auctioneer/misreporter game. Defaults are the full-scale budget."""

    lr: float = 1e-3
    batch_size: int = 500
    steps: int = 160000
    T_init: int = 800
    T_limit: int = 40000
    tau: int = 100
    n_a: int = 3
    h_a: int = 100
    n_p: int = 3
    h_p: int = 100
    n_M: int = 3
    h_M: int = 100
    weight_decay: float = 1e-4
    betas: tuple = (0.9, 0.999)
    # > 0 keeps an exponential moving average of the auctioneer weights and
    # reports/exports it instead of the last iterate; 0 disables it
    ema_decay: float = 0.0
    eval_every: int = 1000
    eval_size: int = 1000
    eval_oracle: OracleConfig = field(default_factory=OracleConfig)
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.eval_oracle = _oracle_from(self.eval_oracle)
        if not (1 <= self.T_init <= self.T_limit <= self.steps):
            raise ValueError("need 1 <= T_init <= T_limit <= steps")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must be in [0, 1)")
        if self.tau < 1 or self.batch_size < 1:
            raise ValueError("tau and batch_size must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


@dataclass
class RegretNetConfig:
    """Augmented-Lagrangian baseline; ``inner_steps`` misreport ascent steps per batch."""

    lr: float = 1e-3
    misreport_lr: float = 0.1
    inner_steps: int = 25
    lam0: float = 5.0
    rho0: float = 1.0
    c: float = 50.0
    T_rho: int = 10000
    T_lambda: int = 100
    batch_size: int = 500
    steps: int = 160000
    dataset_size: int = 640000
    online: bool = False
    n_a: int = 3
    h_a: int = 100
    n_p: int = 3
    h_p: int = 100
    weight_decay: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eval_every: int = 1000
    eval_size: int = 1000
    eval_oracle: OracleConfig = field(default_factory=OracleConfig)
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.eval_oracle = _oracle_from(self.eval_oracle)
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be >= 1")
        if self.lr <= 0 or self.misreport_lr <= 0:
            raise ValueError("step sizes must be positive")
        if self.batch_size < 1 or self.steps < 1:
            raise ValueError("batch_size and steps must be >= 1")
        if not self.online and self.dataset_size < self.batch_size:
            raise ValueError("offline dataset smaller than one batch")


def config_to_dict(config) -> dict:
    d = asdict(config)
    d["betas"] = list(config.betas)
    return d


def config_from_dict(cls, d: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**d)


def config_hash(config, dist: ProductDistribution) -> str:
    blob = json.dumps({"config": config_to_dict(config), "dist": distribution_to_dict(dist),
                       "kind": type(config).__name__}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class TrainLog:
    seed: int
    config_hash: str
    records: list = field(default_factory=list)
    wall_times: list = field(default_factory=list)

    def append(self, record: MetricsRecord, wall: float) -> None:
        if self.records and record.step <= self.records[-1].step:
            raise ValueError("log steps must be strictly increasing")
        self.records.append(record)
        self.wall_times.append(wall)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "config_hash": self.config_hash,
                "records": [r.as_dict() for r in self.records], "wall_times": self.wall_times}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainLog":
        return cls(d["seed"], d["config_hash"], [MetricsRecord(**r) for r in d["records"]], list(d["wall_times"]))


def loss_m_per_bidder(revenues, bidder_regrets):
    loss, d_rev, d_rgt = loss_m(revenues, bidder_regrets.sum(axis=1))
    return loss, d_rev, np.broadcast_to(d_rgt[:, None], bidder_regrets.shape)


def auctioneer_pass(auct: AuctioneerParams, V, M, loss_fn):
    """Revenue at truthful bids and clamped regrets at the fixed misreports ``M``,
    fed through ``loss_fn``; returns ``(loss, grads, revenues, bidder_regrets)``.

    ``loss_fn(revenues (L,), regrets (L, n))`` returns the loss and its
    gradients in both arguments. Misreports are constants here.
    """
    L, n, m = V.shape
    bids = np.concatenate([V[None], replaced_batch(V, M)])
    g, p, cache = auctioneer_forward(auct, bids.reshape(-1, n, m))
    g = g.reshape(n + 1, L, n, m)
    p = p.reshape(n + 1, L, n)
    diff = np.empty((L, n))
    for i in range(n):
        u_true = linear_utility(V[:, i, :], g[0, :, i, :], p[0, :, i])
        u_mis = linear_utility(V[:, i, :], g[i + 1, :, i, :], p[i + 1, :, i])
        diff[:, i] = u_mis - u_true
    regrets = np.maximum(diff, 0.0)
    revenues = p[0].sum(axis=1)
    loss, d_rev, d_reg = loss_fn(revenues, regrets)
    if not np.isfinite(loss):
        raise DivergenceError("non-finite auctioneer loss")
    d_reg = np.where(diff > 0, d_reg, 0.0)

    dg = np.zeros((n + 1, L, n, m))
    dp = np.zeros((n + 1, L, n))
    dp[0] = d_rev[:, None]
    for i in range(n):
        dg[0, :, i, :] = -d_reg[:, i, None] * V[:, i, :]
        dp[0, :, i] += d_reg[:, i]
        dg[i + 1, :, i, :] = d_reg[:, i, None] * V[:, i, :]
        dp[i + 1, :, i] = -d_reg[:, i]
    _, grads = auctioneer_backward(cache, dg.reshape(-1, n, m), dp.reshape(-1, n), need_input_grad=False)
    return loss, grads, revenues, regrets


def _save_adam(prefix: str, opt: AdamW, sections: dict) -> dict:
    for k, (m, v) in enumerate(zip(opt.exp_avg, opt.exp_avg_sq)):
        sections[f"{prefix}/m/{k}"] = m.copy()
        sections[f"{prefix}/v/{k}"] = v.copy()
    return opt.state_dict()


def _load_adam(prefix: str, opt: AdamW, sections: dict, state: dict) -> None:
    for k in range(len(opt.exp_avg)):
        m, v = sections[f"{prefix}/m/{k}"], sections[f"{prefix}/v/{k}"]
        if m.shape != opt.exp_avg[k].shape:
            raise CheckpointError(f"optimizer state {prefix} has the wrong shape")
        opt.exp_avg[k][...] = m
        opt.exp_avg_sq[k][...] = v
    opt.step_count = int(state["step_count"])


class _Trainer:
    kind = ""
    config_cls = None

    def __init__(self, config, dist: ProductDistribution, time_fn=None):
        self.config = config
        self.dist = dist
        self.time_fn = time_fn
        self.step = 0
        self.log = TrainLog(config.seed, config_hash(config, dist))
        self._eval_u = np.random.default_rng([config.seed, 3]).random((config.eval_size, dist.shape.n, dist.shape.m))
        self._start = None
        self._last_good = None

    def time_at(self, step: int) -> float:
        return 0.0 if self.time_fn is None else float(self.time_fn(step))

    def eval_profiles(self, t: float) -> np.ndarray:
        """Fixed uniforms pushed through the marginals at time ``t``."""
        out = np.empty_like(self._eval_u)
        for j, mg in enumerate(self.dist.marginals):
            out[:, :, j] = mg.quantile(self._eval_u[:, :, j], t)
        return out

    def bounds(self, t: float):
        return self.dist.support(t) if self.dist.time_varying else (None, None)

    def mechanism(self) -> NeuralMechanism:
        return NeuralMechanism(self.auct)

    def evaluate(self, t: float) -> MetricsRecord:
        c = self.config
        V = self.eval_profiles(t)
        mis = self.misreporter_oracle(t)
        p, r = evaluate_on(self.mechanism(), V, self.dist, c.eval_oracle,
                           np.random.SeedSequence([c.seed, 4, self.step]), t, mis)
        return MetricsRecord.from_samples(p, r, c.eval_oracle.kind, c.seed, self.step, t)

    def misreporter_oracle(self, t):
        return None

    def run(self, until: int = None):
        """Train up to step ``until`` (default: the configured budget)."""
        until = self.config.steps if until is None else min(until, self.config.steps)
        if self._last_good is None:
            self._last_good = self.state_bytes()
        self._start = _time.perf_counter()
        while self.step < until:
            try:
                self.train_step()
            except DivergenceError as exc:
                raise TrainingDiverged(f"diverged at step {self.step + 1}: {exc}", self.step + 1, self._last_good) from exc
            if self.step % self.config.eval_every == 0 or self.step == self.config.steps:
                rec = self.evaluate(self.eval_time(self.step))
                self.log.append(rec, _time.perf_counter() - self._start)
                self._last_good = self.state_bytes()
                log.info("%s step %d t=%.3f rev=%.4f rgt=%.2e p*=%.4f", self.kind, rec.step, rec.t,
                         rec.rev, rec.rgt, rec.p_star)
        return self

    def eval_time(self, step: int) -> float:
        return self.time_at(step)

    # --- checkpointing ----------------------------------------------------

    def _extra_state(self, sections: dict) -> dict:
        return {}

    def _load_extra(self, sections: dict, state: dict) -> None:
        pass

    def state_bytes(self) -> bytes:
        sections = auctioneer_sections(self.auct, "auct/")
        state = {
            "kind": self.kind,
            "step": self.step,
            "config": config_to_dict(self.config),
            "dist": distribution_to_dict(self.dist),
            "rng": self.rng.bit_generator.state,
            "opt_a": _save_adam("opt_a", self.opt_a, sections),
            "log": self.log.to_dict(),
        }
        state.update(self._extra_state(sections))
        sections["state"] = state
        return pack_container(self.dist.shape, sections)

    def save(self, path) -> None:
        write_atomic(path, self.state_bytes())

    @classmethod
    def from_bytes(cls, data: bytes, dist: ProductDistribution, time_fn=None):
        shape, sections = unpack_container(data)
        state = sections.get("state")
        if not isinstance(state, dict) or state.get("kind") != cls.kind:
            raise CheckpointError(f"not a {cls.kind} trainer checkpoint")
        if shape != dist.shape:
            raise CheckpointError(f"checkpoint shape {shape} does not match distribution {dist.shape}")
        if state["dist"] != distribution_to_dict(dist):
            raise CheckpointError("checkpoint was trained on a different distribution")
        config = config_from_dict(cls.config_cls, state["config"])
        self = cls(config, dist, time_fn)
        auct = auctioneer_from_sections(shape, sections, "auct/")
        for dst, src in zip(self.auct.nets, auct.nets):
            if dst.spec != src.spec:
                raise CheckpointError("auctioneer architecture mismatch")
            dst.flat[...] = src.flat
        _load_adam("opt_a", self.opt_a, sections, state["opt_a"])
        self.rng.bit_generator.state = state["rng"]
        self.step = int(state["step"])
        self.log = TrainLog.from_dict(state["log"])
        self._load_extra(sections, state)
        return self

    @classmethod
    def load(cls, path, dist: ProductDistribution, time_fn=None):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read(), dist, time_fn)


class AlgnetTrainer(_Trainer):
    """Alternating game: ``tau`` misreporter steps on ``L_r`` then one
    auctioneer step on ``L_m`` per sampled batch."""

    kind = "algnet"
    config_cls = GameTrainConfig

    def __init__(self, config: GameTrainConfig, dist: ProductDistribution, time_fn=None):
        super().__init__(config, dist, time_fn)
        c = config
        self.auct = auctioneer_init(dist.shape, c.n_a, c.h_a, c.n_p, c.h_p, [c.seed, 0])
        self.opt_a = AdamW(self.auct.nets, c.lr, c.betas, weight_decay=c.weight_decay)
        self._new_misreporter(0)
        self.reinit_count = 0
        self.rng = np.random.default_rng([c.seed, 2])
        self.avg = self.auct.copy() if c.ema_decay > 0 else None

    @property
    def deployed(self) -> AuctioneerParams:
        """The auctioneer that is evaluated and exported."""
        return self.auct if self.avg is None else self.avg

    def mechanism(self) -> NeuralMechanism:
        return NeuralMechanism(self.deployed)

    def _new_misreporter(self, step: int) -> None:
        c = self.config
        self.mis = misreporter_init(self.dist, c.n_M, c.h_M, [c.seed, 1, step], self.time_at(max(step, 1)))
        self.opt_m = AdamW(self.mis.nets, c.lr, c.betas, weight_decay=c.weight_decay)

    def train_step(self) -> None:
        c = self.config
        t_idx = self.step + 1
        now = self.time_at(t_idx)
        if t_idx % c.T_init == 0 and t_idx < c.T_limit:
            # fresh weights make the old moments meaningless: reset both
            self._new_misreporter(t_idx)
            self.reinit_count += 1
        S = self.dist.sample(c.batch_size, self.rng, now)
        lo, hi = self.bounds(now)
        for _ in range(c.tau):
            _, grads = misreporter_loss(self.mis, self.auct, S, lo, hi)
            self.opt_m.step(self.mis.nets, grads)
        M, _ = misreport(self.mis, S, lo, hi)
        _, grads, _, _ = auctioneer_pass(self.auct, S, M, loss_m_per_bidder)
        self.opt_a.step(self.auct.nets, grads)
        if self.avg is not None:
            d = c.ema_decay
            for a, net in zip(self.avg.nets, self.auct.nets):
                a.flat *= d
                a.flat += (1.0 - d) * net.flat
        self.step = t_idx

    def misreporter_oracle(self, t):
        lo, hi = self.bounds(t)
        return MisreporterOracle(self.mis, lo, hi)

    def _extra_state(self, sections):
        sections["mis/net"] = self.mis.net
        if self.avg is not None:
            sections.update(auctioneer_sections(self.avg, "avg/"))
        return {"opt_m": _save_adam("opt_m", self.opt_m, sections), "reinit_count": self.reinit_count}

    def _load_extra(self, sections, state):
        net = sections["mis/net"]
        if net.spec != self.mis.net.spec:
            raise CheckpointError("misreporter architecture mismatch")
        self.mis = MisreporterParams(self.dist.shape, net)
        self.opt_m = AdamW(self.mis.nets, self.config.lr, self.config.betas, weight_decay=self.config.weight_decay)
        _load_adam("opt_m", self.opt_m, sections, state["opt_m"])
        self.reinit_count = int(state["reinit_count"])
        if self.avg is not None:
            avg = auctioneer_from_sections(self.dist.shape, sections, "avg/")
            for dst, src in zip(self.avg.nets, avg.nets):
                dst.flat[...] = src.flat


class RegretNetTrainer(_Trainer):
    """Augmented-Lagrangian training with per-profile misreport ascent.

    Offline mode draws a fixed dataset at ``t = 0`` and keeps one persistent
    misreport per sample across epochs; online mode samples a fresh batch and
    fresh misreports every step.
    """

    kind = "regretnet"
    config_cls = RegretNetConfig

    def __init__(self, config: RegretNetConfig, dist: ProductDistribution, time_fn=None):
        super().__init__(config, dist, time_fn)
        c = config
        n = dist.shape.n
        self.auct = auctioneer_init(dist.shape, c.n_a, c.h_a, c.n_p, c.h_p, [c.seed, 0])
        self.opt_a = AdamW(self.auct.nets, c.lr, c.betas, weight_decay=c.weight_decay)
        self.lagrangian = LagrangianState.initial(n, c.lam0, c.rho0, c.c, c.T_rho, c.T_lambda)
        self.rng = np.random.default_rng([c.seed, 2])
        if not c.online:
            self.dataset = dist.sample(c.dataset_size, np.random.default_rng([c.seed, 5]), 0.0)
            self.misreports = dist.sample(c.dataset_size, np.random.default_rng([c.seed, 6]), 0.0)
            self.perm = self.rng.permutation(c.dataset_size)
            self.cursor = 0

    def _next_batch(self):
        c = self.config
        if self.cursor + c.batch_size > c.dataset_size:
            self.perm = self.rng.permutation(c.dataset_size)
            self.cursor = 0
        idx = self.perm[self.cursor:self.cursor + c.batch_size]
        self.cursor += c.batch_size
        return idx

    def train_time(self, step: int) -> float:
        return self.time_at(step) if self.config.online else 0.0

    def train_step(self) -> None:
        c = self.config
        t_idx = self.step + 1
        now = self.train_time(t_idx)
        if c.online:
            S = self.dist.sample(c.batch_size, self.rng, now)
            Mis = self.dist.sample(c.batch_size, self.rng, now)
        else:
            idx = self._next_batch()
            S = self.dataset[idx]
            Mis = self.misreports[idx]
        lo, hi = self.dist.support(now)
        for _ in range(c.inner_steps):
            _, cache = deviation_utilities(self.auct, S, Mis)
            dM, _ = deviation_backward(cache, S, np.ones((S.shape[0], S.shape[1])))
            if not np.all(np.isfinite(dM)):
                raise DivergenceError("non-finite misreport gradient")
            Mis = np.clip(Mis + c.misreport_lr * dM, lo, hi)
        if not c.online:
            self.misreports[idx] = Mis

        state = self.lagrangian

        def lagr(rev, reg):
            return lagrangian_loss(rev, reg, state)

        _, grads, _, regrets = auctioneer_pass(self.auct, S, Mis, lagr)
        self.opt_a.step(self.auct.nets, grads)
        self.lagrangian = schedule_step(self.lagrangian, t_idx, regrets.mean(axis=0))
        self.step = t_idx

    def _extra_state(self, sections):
        extra = {"lagrangian": self.lagrangian.to_dict()}
        if not self.config.online:
            sections["misreports"] = self.misreports.copy()
            sections["perm"] = self.perm.astype(np.float64)
            extra["cursor"] = self.cursor
        return extra

    def _load_extra(self, sections, state):
        self.lagrangian = LagrangianState.from_dict(state["lagrangian"])
        if not self.config.online:
            if sections["misreports"].shape != self.misreports.shape:
                raise CheckpointError("persistent misreports have the wrong shape")
            self.misreports = sections["misreports"].copy()
            self.perm = sections["perm"].astype(np.intp)
            self.cursor = int(state["cursor"])


def train_algnet(config: GameTrainConfig, dist: ProductDistribution, time_fn=None):
    tr = AlgnetTrainer(config, dist, time_fn).run()
    return tr.deployed, tr.mis, tr.log


def train_regretnet(config: RegretNetConfig, dist: ProductDistribution, time_fn=None):
    if config.online:
        raise ValueError("use train_regretnet_online for online configs")
    tr = RegretNetTrainer(config, dist, time_fn).run()
    return tr.auct, tr.log


def train_regretnet_online(config: RegretNetConfig, dist: ProductDistribution, time_fn=None):
    if not config.online:
        config = RegretNetConfig(**{**config_to_dict(config), "online": True})
    tr = RegretNetTrainer(config, dist, time_fn).run()
    return tr.auct, tr.log


def linear_ramp(steps: int, t_start: float = 0.0, t_end: float = 1.0):
    """``t`` rising at a steady rate from ``t_start`` (step 0) to ``t_end`` (last step)."""
    def time_fn(step):
        return t_start + (t_end - t_start) * step / steps
    return time_fn


def online_target(t: float) -> float:
    return MANELLI_VINCENT_REVENUE * (1.0 + t)


def make_trainer(algorithm: str, config, dist: ProductDistribution, time_fn=None):
    if algorithm in ("algnet", "algnet_online"):
        return AlgnetTrainer(config, dist, time_fn)
    if algorithm == "regretnet":
        if config.online:
            raise ValueError("algorithm 'regretnet' is offline; use 'regretnet_online'")
        return RegretNetTrainer(config, dist, time_fn)
    if algorithm == "regretnet_online":
        if not config.online:
            config = RegretNetConfig(**{**config_to_dict(config), "online": True})
        return RegretNetTrainer(config, dist, time_fn)
    raise ValueError(f"unknown algorithm {algorithm!r}")


def run_online_experiment(algorithm: str, config, dist: ProductDistribution, ramp=(0.0, 1.0)):
    """Train under a linear ramp of ``t`` and log rev/rgt/P* at the current ``t``.

    For offline RegretNet only evaluation follows the ramp; its training data
    stays at ``t = 0``.
    """
    if not dist.time_varying:
        raise ValueError("online experiments need a time-varying distribution")
    time_fn = linear_ramp(config.steps, *ramp)
    tr = make_trainer(algorithm, config, dist, time_fn).run()
    return tr.log
