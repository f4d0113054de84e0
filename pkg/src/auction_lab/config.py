"""Experiment configuration files.

One JSON file describes one experiment::

    {
      "setting": "A",
      "shape": {"n": 1, "m": 2},
      "distribution": {"marginals": [{"kind": "uniform", "lo": 0, "hi": 1}, ...]},
      "algorithm": "algnet",
      "algnet": {...GameTrainConfig fields...},
      "seeds": [0, 1, 2],
      "test_size": 10000,
      "test_seed": 12345,
      "oracle": {"kind": "gradient_ascent", "restarts": 10, "steps": 200},
      "output_dir": "runs/A",
      "ramp": [0.0, 1.0]
    }

``regretnet`` and ``regretnet_online`` take a ``"regretnet"`` block instead
of ``"algnet"``; ``ramp`` is only used by online experiments.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .distributions import (
    AuctionShape,
    ProductDistribution,
    distribution_from_dict,
    distribution_to_dict,
)
from .regret import OracleConfig
from .trainers import GameTrainConfig, RegretNetConfig, config_from_dict, config_to_dict

ALGORITHMS = ("algnet", "regretnet", "regretnet_online", "algnet_online")
ORACLE_ALIASES = {"ascent": "gradient_ascent", "gradient_ascent": "gradient_ascent",
                  "grid": "grid", "misreporter": "misreporter"}


class ConfigError(ValueError):
    pass


def _block_name(algorithm: str) -> str:
    return "algnet" if algorithm.startswith("algnet") else "regretnet"


@dataclass
class ExperimentConfig:
    setting: str
    shape: AuctionShape
    distribution: ProductDistribution
    algorithm: str
    trainer: object
    seeds: list
    test_size: int = 10000
    test_seed: int = 12345
    oracle: OracleConfig = field(default_factory=OracleConfig)
    output_dir: str = "runs"
    ramp: tuple = (0.0, 1.0)

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}; expected one of {ALGORITHMS}")
        expected = GameTrainConfig if _block_name(self.algorithm) == "algnet" else RegretNetConfig
        if not isinstance(self.trainer, expected):
            raise ConfigError(f"algorithm {self.algorithm!r} needs a {expected.__name__}")
        if not self.seeds:
            raise ConfigError("seeds must be a nonempty list")
        if self.test_size < 1:
            raise ConfigError("test_size must be >= 1")
        self.ramp = tuple(float(x) for x in self.ramp)
        if len(self.ramp) != 2:
            raise ConfigError("ramp must be [t_start, t_end]")

    @property
    def online(self) -> bool:
        return self.algorithm.endswith("_online") or self.distribution.time_varying

    def trainer_for_seed(self, seed: int):
        d = config_to_dict(self.trainer)
        d["seed"] = int(seed)
        return config_from_dict(type(self.trainer), d)

    def to_dict(self) -> dict:
        oracle = self.oracle
        return {
            "setting": self.setting,
            "shape": {"n": self.shape.n, "m": self.shape.m},
            "distribution": distribution_to_dict(self.distribution),
            "algorithm": self.algorithm,
            _block_name(self.algorithm): {k: v for k, v in config_to_dict(self.trainer).items() if k != "seed"},
            "seeds": list(self.seeds),
            "test_size": self.test_size,
            "test_seed": self.test_seed,
            "oracle": {"kind": oracle.kind, "restarts": oracle.restarts, "steps": oracle.steps,
                       "step_size": oracle.step_size, "grid_points": oracle.grid_points},
            "output_dir": self.output_dir,
            "ramp": list(self.ramp),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("experiment config must be a JSON object")
        for key in ("setting", "shape", "distribution", "algorithm", "seeds"):
            if key not in d:
                raise ConfigError(f"missing key {key!r} in experiment config")
        known = {"setting", "shape", "distribution", "algorithm", "algnet", "regretnet", "seeds", "test_size",
                 "test_seed", "oracle", "output_dir", "ramp"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown keys in experiment config: {sorted(unknown)}")
        algorithm = d["algorithm"]
        if algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {algorithm!r}; expected one of {ALGORITHMS}")
        block = _block_name(algorithm)
        if block not in d:
            raise ConfigError(f"missing key {block!r} for algorithm {algorithm!r}")
        other = "regretnet" if block == "algnet" else "algnet"
        if other in d:
            raise ConfigError(f"exactly one trainer block allowed; found both {block!r} and {other!r}")
        try:
            shape = AuctionShape(int(d["shape"]["n"]), int(d["shape"]["m"]))
        except KeyError as exc:
            raise ConfigError(f"missing key {exc.args[0]!r} in 'shape'") from exc
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad 'shape': {exc}") from exc
        try:
            dist = distribution_from_dict(shape, d["distribution"])
        except KeyError as exc:
            raise ConfigError(f"missing key {exc.args[0]!r} in 'distribution'") from exc
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad 'distribution': {exc}") from exc
        cls_ = GameTrainConfig if block == "algnet" else RegretNetConfig
        seeds = d["seeds"]
        if not isinstance(seeds, list) or not all(isinstance(s, int) for s in seeds):
            raise ConfigError("'seeds' must be a list of integers")
        params = dict(d[block])
        params.setdefault("seed", seeds[0] if seeds else 0)
        if algorithm == "regretnet_online":
            params.setdefault("online", True)
        try:
            trainer = config_from_dict(cls_, params)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad {block!r} block: {exc}") from exc
        try:
            oracle = oracle_from_dict(d.get("oracle", {}))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad 'oracle': {exc}") from exc
        return cls(str(d["setting"]), shape, dist, algorithm, trainer, list(seeds),
                   int(d.get("test_size", 10000)), int(d.get("test_seed", 12345)), oracle,
                   str(d.get("output_dir", "runs")), tuple(d.get("ramp", (0.0, 1.0))))


def oracle_from_dict(d: dict) -> OracleConfig:
    d = dict(d)
    if "kind" in d:
        if d["kind"] not in ORACLE_ALIASES:
            raise ValueError(f"unknown regret estimator {d['kind']!r}")
        d["kind"] = ORACLE_ALIASES[d["kind"]]
    return OracleConfig(**d)


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    try:
        return ExperimentConfig.from_dict(data)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from exc


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return parse_config(fh.read(), str(path))
