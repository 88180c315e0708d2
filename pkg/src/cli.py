"""
Command-line entry point: simulate, inject, stats, train, detect, evaluate, serve, replay.

Exit codes: 0 on success, 1 on usage errors, 2 on data or validation errors.
"""

import argparse
import logging
import sys
from collections import defaultdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from utils.errors import PipelineError

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _int_list(text: str) -> List[int]:
    try:
        values = [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not values or any(v < 1 for v in values):
        raise argparse.ArgumentTypeError(f"expected positive integers, got {text!r}")
    return values


def _fraction(text: str) -> float:
    value = float(text)
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"{text} is not in [0, 1]")
    return value


def _kinds(text: str) -> Optional[Dict[str, float]]:
    """'all', 'a,b' or 'a=2,b=1' to attack kind weights."""
    from utils.events import AttackKind

    if text == "all":
        return None
    weights = {}
    for part in text.split(","):
        name, _, weight = part.strip().partition("=")
        try:
            weights[AttackKind(name).value] = float(weight) if weight else 1.0
        except ValueError:
            valid = ", ".join(k.value for k in AttackKind)
            raise argparse.ArgumentTypeError(f"unknown attack kind {name!r} (valid: all, {valid})")
    return weights


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vehicle-hmm", description="Connected-vehicle HMM anomaly detection pipeline")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    parser.add_argument("--quiet", action="store_true", help="Disable progress bars")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="Generate a benign fleet dataset")
    p.add_argument("--drives", type=int, default=100)
    p.add_argument("--vehicles", type=int, default=20)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--story-rate", type=float, default=0.2, help="Interior stories per minute")
    p.add_argument("--noise-profile", choices=["quiet", "default", "heavy"], default="default")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)

    p = sub.add_parser("inject", help="Build a labeled test set from benign drives")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mix", type=_fraction, default=0.5, help="Fraction of anomalous drives")
    p.add_argument("--kinds", type=_kinds, default=None, help="all, a list of kinds, or kind=weight pairs")
    p.add_argument("--drives", type=int, default=None, help="Test set size (default: whole input)")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("stats", help="Summarize a dataset per label")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", default=None, help="Per-drive summary TSV")

    p = sub.add_parser("train", help="Train detector bundles")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True, help="Bundle directory")
    p.add_argument("--transform", choices=["event_id", "discrete"], default="event_id")
    p.add_argument("--states", type=_int_list, default=[5, 15, 20, 30])
    p.add_argument("--folds", type=int, default=3)
    p.add_argument("--split", type=float, default=0.5, help="Share of drives for HMM training")
    p.add_argument("--tau-sigmas", type=float, default=3.0)
    p.add_argument("--max-iters", type=int, default=200)
    p.add_argument("--restarts", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--per-vehicle", action="store_true", help="One bundle per vehicle instead of one fleet bundle")
    p.add_argument("--residual-scale", choices=["prefix", "none"], default="prefix",
                   help="Scale regression residuals by their fitted per-prefix spread")
    p.add_argument("--no-unknown-calibration", action="store_true",
                   help="Keep the epsilon floor as the unknown-symbol emission of discrete alphabets")
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("detect", help="Score a dataset with trained bundles")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--bundle", required=True, help="Bundle directory")
    p.add_argument("--mode", choices=["offline", "online", "both"], default="both")
    p.add_argument("--technique", choices=["regression", "avg", "min", "all"], default="regression")
    p.add_argument("--out", required=True, help="Per-drive TSV")

    p = sub.add_parser("evaluate", help="Run the evaluation grid")
    p.add_argument("--config", default="configs/experiment.yaml")
    p.add_argument("--seed", type=int, default=None, help="Override data.seed")
    p.add_argument("--out", default=None, help="Override output_dir")
    p.add_argument("--jobs", type=int, default=None)

    p = sub.add_parser("serve", help="Run the fleet detection service")
    p.add_argument("--host", default=None)
    p.add_argument("--port", type=int, default=None)
    p.add_argument("--store-dir", default=None)

    p = sub.add_parser("replay", help="Stream a dataset into a running fleet service")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--url", default="http://127.0.0.1:8000")
    p.add_argument("--bundle", default=None, help="Register bundles from this directory first")
    p.add_argument("--batch-size", type=int, default=500)
    return parser


def _require_file(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"input file not found: {path}")
    return p


def cmd_simulate(args) -> int:
    from simulation.simulator import NoiseConfig, SimConfig, generate_fleet
    from utils.data_loader import write_dataset

    config = SimConfig(n_vehicles=args.vehicles, n_drives=args.drives, seed=args.seed,
                       story_rate=args.story_rate, noise=NoiseConfig.profile(args.noise_profile))
    drives = generate_fleet(config, jobs=args.jobs, progress=not args.quiet)
    write_dataset(drives, args.out)
    print(f"Wrote {len(drives)} drives to {args.out}")
    return 0


def cmd_inject(args) -> int:
    from simulation.attacks import build_test_set
    from utils.data_loader import read_dataset, write_dataset

    drives = read_dataset(_require_file(args.input))
    test = build_test_set(drives, args.mix, args.kinds, np.random.default_rng(args.seed), n_drives=args.drives)
    write_dataset(test, args.out)
    print(f"Wrote {len(test)} drives ({sum(not d.is_benign for d in test)} anomalous) to {args.out}")
    return 0


def cmd_stats(args) -> int:
    from utils.data_loader import DataLoader

    summary = DataLoader(_require_file(args.input)).summary()
    if summary.empty:
        print(f"{args.input} holds no drives")
        return 0
    by_label = summary.groupby("label").agg(
        drives=("drive_id", "count"),
        vehicles=("vehicle_id", "nunique"),
        mean_events=("n_events", "mean"),
        mean_duration=("duration", "mean"),
        mean_stories=("n_stories", "mean"),
    )
    print(by_label.round(2).to_string())
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        summary.to_csv(args.out, sep="\t", index=False, float_format="%.6f")
        print(f"Wrote per-drive summary to {args.out}")
    return 0


def cmd_train(args) -> int:
    from models.bundle import FLEET_BUNDLE, bundle_path, train_bundle
    from models.hmm import TrainConfig
    from utils.data_loader import read_dataset

    drives = [d for d in read_dataset(_require_file(args.input)) if d.is_benign]
    config = TrainConfig(max_iters=args.max_iters, n_restarts=args.restarts, seed=args.seed)
    groups: Dict[str, list] = {FLEET_BUNDLE: drives}
    if args.per_vehicle:
        groups = defaultdict(list)
        for drive in drives:
            groups[drive.vehicle_id].append(drive)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    selections = []
    for owner, group in sorted(groups.items()):
        if args.per_vehicle and len(group) < max(2, args.folds):
            logger.warning(f"Skipping {owner}: only {len(group)} benign drives")
            continue
        bundle = train_bundle(group, vehicle_id=owner, kind=args.transform, states=args.states,
                              folds=args.folds, config=config, split_fraction=args.split,
                              tau_sigmas=args.tau_sigmas, jobs=args.jobs, residual_scale=args.residual_scale,
                              calibrate_unknown=not args.no_unknown_calibration)
        bundle.save(bundle_path(out, owner))
        for row in bundle.selection:
            selections.append({"vehicle_id": owner, **row})
        print(f"{owner}: {bundle.alphabet.kind.value} alphabet M={bundle.alphabet.M}, "
              f"N={bundle.hmm.N}, tau={bundle.regressor.tau:.4f}")
    if selections:
        pd.DataFrame(selections).to_csv(out / "selection.tsv", sep="\t", index=False, float_format="%.6f")
    return 0


DETECT_COLUMNS = ["drive_id", "vehicle_id", "label", "technique", "mode", "score", "decision", "first_alert_index"]


def _thresholds(bundle) -> Dict[str, float]:
    return {"regression": bundle.regressor.tau, "avg": bundle.static.avg_norm_ll, "min": bundle.static.min_norm_ll}


def cmd_detect(args) -> int:
    from models.bundle import resolve_bundle
    from models.detector import normalized_trace, residual_trace
    from utils.data_loader import read_dataset
    from utils.evaluation import ModelEvaluator, ScoredSet
    from utils.feature_engineering import transform_drive

    drives = read_dataset(_require_file(args.input))
    techniques = ["regression", "avg", "min"] if args.technique == "all" else [args.technique]
    modes = ["offline", "online"] if args.mode == "both" else [args.mode]
    cache: dict = {}
    rows = []
    for drive in drives:
        if not len(drive):
            logger.warning(f"Skipping empty drive {drive.drive_id}")
            continue
        bundle = resolve_bundle(args.bundle, drive.vehicle_id, cache)
        seq = transform_drive(drive, bundle.alphabet)
        normalized = normalized_trace(bundle.hmm, seq)
        traces = {"regression": residual_trace(bundle.hmm, bundle.regressor, seq), "avg": normalized, "min": normalized}
        thresholds = _thresholds(bundle)
        for technique in techniques:
            trace, threshold = traces[technique], thresholds[technique]
            below = np.flatnonzero(trace < threshold)
            for mode in modes:
                score = float(trace[-1]) if mode == "offline" else float(trace.min())
                rows.append({
                    "drive_id": drive.drive_id,
                    "vehicle_id": drive.vehicle_id,
                    "label": drive.label,
                    "technique": technique,
                    "mode": mode,
                    "score": score,
                    "decision": "anomalous" if score < threshold else "benign",
                    "first_alert_index": int(below[0]) if mode == "online" and len(below) else None,
                    "threshold": threshold,
                })
    table = pd.DataFrame(rows, columns=DETECT_COLUMNS + ["threshold"])
    table["first_alert_index"] = table["first_alert_index"].astype("Int64")
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    table[DETECT_COLUMNS].to_csv(args.out, sep="\t", index=False, float_format="%.6f")
    print(f"Scored {table['drive_id'].nunique()} drives into {args.out}")

    for (technique, mode), part in table.groupby(["technique", "mode"], sort=True):
        scored = ScoredSet(tuple(part["drive_id"]), part["score"].to_numpy(), (part["label"] != "benign").to_numpy())
        if not scored.has_both_classes:
            continue
        # One shared threshold only when a single bundle scored every drive.
        threshold = float(part["threshold"].iloc[0]) if part["threshold"].nunique() == 1 else None
        print(f"\n[{technique} / {mode}]\n{ModelEvaluator(scored, threshold).generate_report()}")
    return 0


def cmd_evaluate(args) -> int:
    from utils.experiment import load_experiment_config, run_experiment

    config = load_experiment_config(_require_file(args.config), {
        "data.seed": args.seed, "output_dir": args.out, "jobs": args.jobs})
    report = run_experiment(config, progress=not args.quiet)
    out = report.write(config.output_dir)
    for transformation in config.grid.transformations:
        print(f"\nAUC ({transformation})\n{report.auc_table(transformation).round(4).to_string()}")
    print(f"\nReport written to {out}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn
    from api.main import Settings, create_app

    settings = Settings.from_env()
    uvicorn.run(create_app(args.store_dir or settings.store_dir),
                host=args.host or settings.host, port=args.port or settings.port,
                log_level=args.log_level.lower())
    return 0


def cmd_replay(args) -> int:
    from api.client import FleetClient, replay_drives
    from models.bundle import resolve_bundle
    from utils.data_loader import read_dataset

    drives = read_dataset(_require_file(args.input))
    client = FleetClient(args.url)
    if args.bundle:
        cache: dict = {}
        for vehicle_id in sorted({d.vehicle_id for d in drives}):
            client.register_model(vehicle_id, resolve_bundle(args.bundle, vehicle_id, cache))
    summary = replay_drives(client, drives, batch_size=args.batch_size, progress=not args.quiet)
    print(f"Replayed {summary.n_drives} drives, {summary.n_events} events, {summary.n_alerts} alerts, "
          f"{summary.n_errors} errors ({summary.events_per_second:.0f} events/s)")
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "inject": cmd_inject,
    "stats": cmd_stats,
    "train": cmd_train,
    "detect": cmd_detect,
    "evaluate": cmd_evaluate,
    "serve": cmd_serve,
    "replay": cmd_replay,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Run one pipeline command.

    Args:
        argv: Command-line arguments (sys.argv[1:] by default)

    Returns:
        Process exit code
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except SystemExit as e:
        return int(e.code or 0)

    logging.basicConfig(level=args.log_level, format=LOG_FORMAT)
    try:
        return COMMANDS[args.command](args)
    except (PipelineError, ValueError, OSError) as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
