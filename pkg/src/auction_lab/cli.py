"""Command line entry point: ``auction-lab {train,eval,truthify,online,report}``.

Each training run writes one directory per seed holding ``manifest.json``,
``checkpoint.bin`` (full trainer state), ``metrics.csv`` (evaluations logged
during training) and ``eval.csv`` (the final test-set record).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from .auctioneer import NeuralMechanism
from .checkpoint import auctioneer_from_sections, unpack_container
from .config import ConfigError, ExperimentConfig, load_config, oracle_from_dict
from .distributions import sample_profiles
from .misreporter import MisreporterOracle, MisreporterParams
from .nn import CheckpointError
from .regret import (
    EstimatorMismatchError,
    MetricsRecord,
    evaluate_on,
    read_metrics_csv,
    write_metrics_csv,
)
from .trainers import (
    TrainingDiverged,
    config_hash,
    linear_ramp,
    make_trainer,
    online_target,
)
from .truthify import OutOfScopeError, truthify, write_menu_csv

log = logging.getLogger("auction_lab")

SUMMARY_COLUMNS = ("setting", "algorithm", "estimator", "runs", "rev_mean", "rev_std", "rgt_mean", "rgt_std",
                   "p_star_mean", "p_star_std")
SERIES_COLUMNS = ("step", "t", "rev", "rgt", "p_star", "target")


class CliError(RuntimeError):
    pass


def code_hash() -> str:
    """Content hash of the package sources, recorded in run manifests."""
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


def thread_cap() -> int:
    raw = os.environ.get("AUCTION_LAB_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise CliError(f"AUCTION_LAB_THREADS must be an integer, got {raw!r}")


def final_time(exp: ExperimentConfig) -> float:
    return exp.ramp[1] if exp.distribution.time_varying else 0.0


def holdout_profiles(exp: ExperimentConfig, t: float = 0.0) -> np.ndarray:
    return sample_profiles(exp.distribution, exp.test_size, exp.test_seed, t)


def _time_fn(exp: ExperimentConfig):
    if not exp.distribution.time_varying:
        return None
    return linear_ramp(exp.trainer.steps, *exp.ramp)


# --- checkpoints ------------------------------------------------------------

def load_checkpoint(path, exp: ExperimentConfig):
    """Auctioneer and misreporter (or None) from a trainer or mechanism checkpoint."""
    try:
        with open(path, "rb") as fh:
            shape, sections = unpack_container(fh.read())
    except OSError as exc:
        raise CliError(f"cannot read checkpoint {path}: {exc}") from exc
    if shape != exp.shape:
        raise CliError(f"checkpoint shape {shape.n}x{shape.m} does not match config shape "
                       f"{exp.shape.n}x{exp.shape.m}")
    # trainer checkpoints: prefer the weight average when one was kept
    prefix = ("avg/" if "avg/f1" in sections else "auct/") if "state" in sections else ""
    auct = auctioneer_from_sections(shape, sections, prefix)
    net = sections.get("mis/net", sections.get("misreporter"))
    mis = MisreporterParams(shape, net) if net is not None else None
    return auct, mis


def evaluate_checkpoint(path, exp: ExperimentConfig, oracle=None, seed: int = 0) -> MetricsRecord:
    oracle = oracle or exp.oracle
    auct, mis = load_checkpoint(path, exp)
    t = final_time(exp)
    mis_oracle = None
    if oracle.kind == "misreporter":
        if mis is None:
            raise CliError("checkpoint has no misreporter; choose another --oracle")
        lo, hi = exp.distribution.support(t) if exp.distribution.time_varying else (None, None)
        mis_oracle = MisreporterOracle(mis, lo, hi)
    V = holdout_profiles(exp, t)
    p, r = evaluate_on(NeuralMechanism(auct), V, exp.distribution, oracle,
                       np.random.SeedSequence([exp.test_seed, seed, 7]), t, mis_oracle)
    return MetricsRecord.from_samples(p, r, oracle.kind, seed, t=t)


# --- train ------------------------------------------------------------------

def run_seed(exp_dict: dict, seed: int, out_dir: str, code: str) -> dict:
    """Train one seed into ``out_dir/seed_<seed>``; never raises on divergence."""
    exp = ExperimentConfig.from_dict(exp_dict)
    run_dir = Path(out_dir) / f"seed_{seed}"
    run_dir.mkdir(parents=True, exist_ok=True)
    config = exp.trainer_for_seed(seed)
    manifest = {
        "experiment": exp.to_dict(),
        "seed": seed,
        "config_hash": config_hash(config, exp.distribution),
        "code_hash": code,
        "status": "running",
    }
    _write_json(run_dir / "manifest.json", manifest)
    trainer = make_trainer(exp.algorithm, config, exp.distribution, _time_fn(exp))
    try:
        trainer.run()
    except TrainingDiverged as exc:
        (run_dir / "checkpoint.bin").write_bytes(exc.last_good)
        write_metrics_csv(run_dir / "metrics.csv", trainer.log.records)
        manifest.update(status="diverged", diverged_at=exc.step, message=str(exc))
        _write_json(run_dir / "manifest.json", manifest)
        log.warning("seed %d diverged at step %d", seed, exc.step)
        return manifest
    trainer.save(run_dir / "checkpoint.bin")
    write_metrics_csv(run_dir / "metrics.csv", trainer.log.records)
    if exp.distribution.time_varying:
        write_series(run_dir / "online.csv", trainer.log.records)
    rec = evaluate_checkpoint(run_dir / "checkpoint.bin", exp, seed=seed)
    write_metrics_csv(run_dir / "eval.csv", [rec])
    manifest.update(status="completed", steps=trainer.step, final=rec.as_dict(),
                    wall_time=trainer.log.wall_times[-1] if trainer.log.wall_times else 0.0)
    _write_json(run_dir / "manifest.json", manifest)
    return manifest


def cmd_train(exp: ExperimentConfig, out: str = None, seeds=None) -> list:
    out = out or exp.output_dir
    seeds = list(seeds) if seeds is not None else list(exp.seeds)
    code = code_hash()
    data = exp.to_dict()
    workers = min(thread_cap(), len(seeds))
    if workers == 1:
        results = [run_seed(data, s, out, code) for s in seeds]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_seed, [data] * len(seeds), seeds, [out] * len(seeds), [code] * len(seeds)))
    for res in results:
        final = res.get("final")
        if final:
            print(f"seed {res['seed']}: rev={final['rev']:.4f} rgt={final['rgt']:.3e} "
                  f"p*={final['p_star']:.4f} ({final['regret_estimator']})")
        else:
            print(f"seed {res['seed']}: {res['status']} ({res.get('message', '')})")
    return results


# --- eval / truthify --------------------------------------------------------

def cmd_eval(exp: ExperimentConfig, checkpoint, oracle=None, out=None, seed: int = 0) -> MetricsRecord:
    rec = evaluate_checkpoint(checkpoint, exp, oracle, seed)
    out = out or Path(checkpoint).with_name("eval.csv")
    write_metrics_csv(out, [rec], append=True)
    print(f"rev={rec.rev:.6f} rgt={rec.rgt:.6e} total_regret={rec.total_regret:.6e} "
          f"p*={rec.p_star:.6f} estimator={rec.regret_estimator} n={rec.sample_count}")
    return rec


def cmd_truthify(exp: ExperimentConfig, checkpoint, out=None, grid_points: int = 51, oracle_points: int = 101):
    if exp.shape.n != 1:
        raise CliError("multi-bidder transform out of scope: truthify handles single-bidder mechanisms only")
    auct, _ = load_checkpoint(checkpoint, exp)
    out = Path(out) if out else Path(checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    V = holdout_profiles(exp)
    res = truthify(NeuralMechanism(auct), exp.distribution, V, grid_points, oracle_points)
    write_menu_csv(out / "menu.csv", res.menu)
    write_metrics_csv(out / "truthify.csv", [res.input_record, res.output_record])
    summary = {
        "epsilon": res.epsilon,
        "input": res.input_record.as_dict(),
        "output": res.output_record.as_dict(),
        "certified_revenue": res.certified_bound,
        "p_star_bound": res.input_record.p_star,
        "output_revenue_se": res.output_revenue_se,
        "max_output_regret": res.max_output_regret,
        "zero_regret": res.max_output_regret == 0.0,
        "menu_entries": len(res.menu),
    }
    _write_json(out / "truthify.json", summary)
    print(f"eps={res.epsilon:.6f} input rev={res.input_record.rev:.6f} rgt={res.input_record.rgt:.3e} "
          f"bound={res.input_record.p_star:.6f} output rev={res.output_record.rev:.6f} "
          f"max regret={res.max_output_regret:g} menu={len(res.menu)}")
    return res


# --- online -----------------------------------------------------------------

def write_series(path, records) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SERIES_COLUMNS)
        for r in records:
            w.writerow([r.step, repr(r.t), repr(r.rev), repr(r.rgt), repr(r.p_star), repr(online_target(r.t))])


def cmd_online(exp: ExperimentConfig, out=None, seeds=None) -> list:
    if not exp.distribution.time_varying:
        raise CliError("online experiments need a time_scaled_uniform distribution")
    return cmd_train(exp, out, seeds)


# --- report -----------------------------------------------------------------

def _run_dirs(paths) -> list:
    found = []
    for p in map(Path, paths):
        if (p / "manifest.json").exists():
            found.append(p)
        else:
            found.extend(sorted(q.parent for q in p.glob("*/manifest.json")))
    if not found:
        raise CliError("no run directories found")
    return found


def cmd_report(paths, out) -> list:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    groups = {}
    for run in _run_dirs(paths):
        manifest = json.loads((run / "manifest.json").read_text())
        if manifest.get("status") != "completed":
            log.warning("skipping %s (%s)", run, manifest.get("status"))
            continue
        exp = manifest["experiment"]
        final = read_metrics_csv(run / "eval.csv")[0]
        key = (exp["setting"], exp["algorithm"])
        groups.setdefault(key, []).append(final)
        if (run / "metrics.csv").exists():
            series = read_metrics_csv(run / "metrics.csv")
            write_series(out / f"series_{exp['setting']}_{exp['algorithm']}_seed{manifest['seed']}.csv", series)
    if not groups:
        raise CliError("no completed runs to report")
    rows = []
    for (setting, algorithm), recs in sorted(groups.items()):
        estimators = {r.regret_estimator for r in recs}
        if len(estimators) > 1:
            raise EstimatorMismatchError(
                f"{setting}/{algorithm}: refusing to aggregate mixed regret estimators {sorted(estimators)}")
        row = {"setting": setting, "algorithm": algorithm, "estimator": estimators.pop(), "runs": len(recs)}
        for name in ("rev", "rgt", "p_star"):
            vals = np.array([getattr(r, name) for r in recs])
            row[f"{name}_mean"] = repr(float(vals.mean()))
            row[f"{name}_std"] = repr(float(vals.std()))
        rows.append(row)
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS)
        w.writeheader()
        w.writerows(rows)
    for row in rows:
        print(f"{row['setting']:>8} {row['algorithm']:>16}  rev {float(row['rev_mean']):.4f} "
              f"(±{float(row['rev_std']):.4f})  rgt {float(row['rgt_mean']):.2e} (±{float(row['rgt_std']):.1e})  "
              f"P* {float(row['p_star_mean']):.4f}  [{row['estimator']}, {row['runs']} runs]")
    return rows


# --- plumbing ---------------------------------------------------------------

def _write_json(path, data) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
    os.replace(tmp, path)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="auction-lab", description="Train and evaluate learned auctions.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False, oracle=False):
        p.add_argument("--config", required=True, help="experiment JSON file")
        p.add_argument("--out", help="output directory (or CSV file for eval)")
        p.add_argument("--seed", type=int, help="run only this seed")
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="trainer or mechanism checkpoint")
        if oracle:
            p.add_argument("--oracle", choices=("grid", "ascent", "misreporter"), help="regret estimator")

    common(sub.add_parser("train", help="train every seed of an experiment"))
    common(sub.add_parser("eval", help="evaluate a checkpoint on the test set"), checkpoint=True, oracle=True)
    tp = sub.add_parser("truthify", help="turn a single-bidder checkpoint into a truthful menu")
    common(tp, checkpoint=True)
    tp.add_argument("--grid-points", type=int, default=51)
    common(sub.add_parser("online", help="train under the drifting distribution"))
    rp = sub.add_parser("report", help="aggregate finished runs")
    rp.add_argument("runs", nargs="+", help="run or experiment directories")
    rp.add_argument("--out", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "report":
            cmd_report(args.runs, args.out)
            return 0
        exp = load_config(args.config)
        seeds = [args.seed] if args.seed is not None else None
        if args.command == "train":
            cmd_train(exp, args.out, seeds)
        elif args.command == "online":
            cmd_online(exp, args.out, seeds)
        elif args.command == "eval":
            oracle = oracle_from_dict({**exp.to_dict()["oracle"], "kind": args.oracle}) if args.oracle else None
            cmd_eval(exp, args.checkpoint, oracle, args.out, args.seed or 0)
        elif args.command == "truthify":
            cmd_truthify(exp, args.checkpoint, args.out, args.grid_points)
    except (ConfigError, CliError, CheckpointError, OutOfScopeError, EstimatorMismatchError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
