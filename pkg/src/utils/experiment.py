"""
Experiment runner: evaluates every (transformation, hidden states, technique, mode)
cell on a labeled test set and writes the result tables.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

import numpy as np
import pandas as pd
import yaml
from joblib import Parallel, delayed
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator
from tqdm import tqdm

from models.bundle import DetectorBundle, train_bundle
from models.detector import normalized_trace, residual_trace, split_training
from models.hmm import TrainConfig, select_model
from simulation.attacks import build_test_set
from simulation.simulator import NoiseConfig, SimConfig, generate_fleet
from utils.data_loader import dataset_digest, read_dataset
from utils.errors import ConfigError
from utils.evaluation import ScoredSet, f_measure, roc_auc, roc_points, tuned_f_measure
from utils.events import AttackKind, Drive
from utils.feature_engineering import BucketConfig, ObservationSequence, build_alphabet, transform_drive, transform_drives

logger = logging.getLogger(__name__)

TECHNIQUES = ("avg", "min", "regression")
MODES = ("offline", "online")
TEST_POOL_FACTOR = 1.5


class DataSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    train_path: Optional[str] = None
    test_path: Optional[str] = None
    n_vehicles: int = Field(20, ge=1)
    n_train: int = Field(2000, ge=2)
    n_test: int = Field(1000, ge=2)
    mix: float = Field(0.5, ge=0.0, le=1.0)
    kinds: Optional[Dict[AttackKind, float]] = None
    seed: int = Field(7, ge=0)
    noise_profile: Literal["quiet", "default", "heavy"] = "default"


class GridSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    transformations: List[Literal["event_id", "discrete"]] = ["event_id", "discrete"]
    states: List[int] = [5, 15, 20, 30]
    techniques: List[Literal["avg", "min", "regression"]] = list(TECHNIQUES)
    modes: List[Literal["offline", "online"]] = list(MODES)

    @field_validator("states")
    @classmethod
    def _positive_states(cls, value: List[int]) -> List[int]:
        if not value or any(n < 1 for n in value):
            raise ValueError("states must be a non-empty list of positive integers")
        return value


class TrainingSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    max_iters: int = Field(200, ge=1)
    tol: float = Field(1e-5, gt=0)
    n_restarts: int = Field(3, ge=1)
    seed: int = Field(0, ge=0)
    epsilon: float = Field(1e-6, gt=0, lt=1)


class BucketSection(BaseModel):
    model_config = ConfigDict(extra="forbid")

    velocity_edges: List[float] = [5.0, 10.0, 20.0, 50.0]
    flow_low_max: int = 2
    flow_medium_max: int = 5
    use_velocity: bool = True
    use_flows: bool = True
    use_file_access: bool = True
    use_vendor: bool = True
    extras: List[str] = []


class ExperimentConfig(BaseModel):
    """Experiment file schema."""
    model_config = ConfigDict(extra="forbid")

    data: DataSection = Field(default_factory=DataSection)
    grid: GridSection = Field(default_factory=GridSection)
    split_fraction: float = Field(0.5, gt=0.0, lt=1.0)
    tau_sigmas: float = Field(3.0, ge=0.0)
    residual_scale: Literal["prefix", "none"] = "prefix"
    calibrate_unknown: bool = True
    training: TrainingSection = Field(default_factory=TrainingSection)
    buckets: BucketSection = Field(default_factory=BucketSection)
    select_states: bool = True
    folds: int = Field(3, ge=2)
    calibration_fraction: float = Field(0.2, gt=0.0, lt=1.0)
    output_dir: str = "results"
    jobs: int = 1

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self.training.model_dump())

    def bucket_config(self) -> BucketConfig:
        try:
            return BucketConfig(**self.buckets.model_dump())
        except ValueError as e:
            raise ConfigError(f"buckets: {e}") from None


def load_experiment_config(path: Union[str, Path], overrides: Optional[Dict[str, Any]] = None) -> ExperimentConfig:
    """
    Load and validate an experiment file.

    Args:
        path: YAML file path
        overrides: Dotted keys to replace, e.g. {"data.seed": 3}

    Raises:
        ConfigError: If the file is not valid YAML or violates the schema
    """
    path = Path(path)
    with open(path, "r", encoding="utf-8") as f:
        try:
            raw = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"{path}: invalid YAML ({e})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        node = raw
        *parents, leaf = dotted.split(".")
        for key in parents:
            node = node.setdefault(key, {})
        node[leaf] = value
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(part) for part in first["loc"])
        raise ConfigError(f"{path}: {where}: {first['msg']}") from None


@dataclass
class EvaluationReport:
    """Grid results, ROC curves, selection tables and run metadata."""
    results: pd.DataFrame
    roc: Dict[str, pd.DataFrame] = field(default_factory=dict)
    selection: Dict[str, pd.DataFrame] = field(default_factory=dict)
    metadata: Dict[str, Any] = field(default_factory=dict)

    def auc_table(self, transformation: str) -> pd.DataFrame:
        """AUC per (mode, technique) row and hidden-state column, plus the best static threshold."""
        rows = self.results[self.results["transformation"] == transformation]
        table = rows.pivot_table(index=["mode", "technique"], columns="n_states", values="auc")
        static = rows[rows["technique"].isin(["avg", "min"])]
        if static["technique"].nunique() == 2:
            best = static.pivot_table(index="mode", columns="n_states", values="auc", aggfunc="max")
            best.index = pd.MultiIndex.from_tuples([(m, "best_static") for m in best.index], names=table.index.names)
            table = pd.concat([table, best]).sort_index()
        return table

    def f1_table(self, transformation: str, mode: str) -> pd.DataFrame:
        rows = self.results[(self.results["transformation"] == transformation) & (self.results["mode"] == mode)]
        return rows.pivot_table(index="technique", columns="n_states", values="f1")

    def write(self, output_dir: Union[str, Path]) -> Path:
        """
        Write report.tsv, roc_<config>.tsv, pivot tables and meta.txt.

        Returns:
            Output directory
        """
        out = Path(output_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.results.to_csv(out / "report.tsv", sep="\t", index=False, float_format="%.6f")
        for name, points in self.roc.items():
            points.to_csv(out / f"roc_{name}.tsv", sep="\t", index=False, float_format="%.6f")
        for transformation in sorted(self.results["transformation"].unique()):
            self.auc_table(transformation).to_csv(out / f"auc_{transformation}.tsv", sep="\t", float_format="%.4f")
            for mode in sorted(self.results["mode"].unique()):
                self.f1_table(transformation, mode).to_csv(
                    out / f"f1_{transformation}_{mode}.tsv", sep="\t", float_format="%.4f")
        for transformation, table in self.selection.items():
            table.to_csv(out / f"selection_{transformation}.tsv", sep="\t", index=False, float_format="%.6f")
        with open(out / "meta.txt", "w", encoding="utf-8") as f:
            f.write(yaml.safe_dump(self.metadata, sort_keys=True))
            for transformation, table in self.selection.items():
                f.write(f"\n# state selection ({transformation})\n")
                f.write(table.to_string(index=False) + "\n")
        logger.info(f"Report written to {out}")
        return out


def load_data(config: ExperimentConfig) -> Tuple[List[Drive], List[Drive]]:
    """
    Training and test drives from files or from simulation.

    The simulated test set is built from its own fleet (seed + 1) so no
    training drive is reused.
    """
    data = config.data
    if data.train_path:
        train = read_dataset(data.train_path)
    else:
        train = generate_fleet(SimConfig(n_vehicles=data.n_vehicles, n_drives=data.n_train, seed=data.seed,
                                         noise=NoiseConfig.profile(data.noise_profile)), jobs=config.jobs)
    if data.test_path:
        test = read_dataset(data.test_path)
    else:
        pool = generate_fleet(SimConfig(n_vehicles=data.n_vehicles,
                                        n_drives=int(math.ceil(TEST_POOL_FACTOR * data.n_test)),
                                        seed=data.seed + 1, noise=NoiseConfig.profile(data.noise_profile)),
                              jobs=config.jobs)
        pool = [replace(d, drive_id=f"test-{d.drive_id}") for d in pool]
        kinds = {k: w for k, w in data.kinds.items()} if data.kinds else None
        test = build_test_set(pool, data.mix, kinds, np.random.default_rng([data.seed, 2]), n_drives=data.n_test)
    benign_train = [d for d in train if d.is_benign]
    if len(benign_train) < len(train):
        logger.warning(f"Dropping {len(train) - len(benign_train)} labeled drives from the training set")
    return benign_train, test


def _scores(bundle: DetectorBundle, sequences: List[ObservationSequence]) -> Dict[Tuple[str, str], Tuple]:
    """Drive scores and first-alert indices per (technique, mode)."""
    out: Dict[Tuple[str, str], Tuple[List[float], List[Optional[int]]]] = {
        (t, m): ([], []) for t in TECHNIQUES for m in MODES}
    thresholds = {"avg": bundle.static.avg_norm_ll, "min": bundle.static.min_norm_ll,
                  "regression": bundle.regressor.tau}
    for seq in sequences:
        traces = {"regression": residual_trace(bundle.hmm, bundle.regressor, seq),
                  "avg": normalized_trace(bundle.hmm, seq)}
        traces["min"] = traces["avg"]
        for technique, trace in traces.items():
            below = np.flatnonzero(trace < thresholds[technique])
            first = int(below[0]) if len(below) else None
            out[(technique, "offline")][0].append(float(trace[-1]))
            out[(technique, "offline")][1].append(None)
            out[(technique, "online")][0].append(float(trace.min()))
            out[(technique, "online")][1].append(first)
    return {key: (np.array(scores), firsts) for key, (scores, firsts) in out.items()}


def evaluate_cell(train: List[Drive], test: List[Drive], transformation: str, n_states: int,
                  config: ExperimentConfig) -> Tuple[List[Dict[str, Any]], Dict[str, pd.DataFrame]]:
    """
    Train one detector and evaluate every technique and mode on the test set.

    Returns:
        (result rows, ROC points per configuration name)
    """
    bundle = train_bundle(train, kind=transformation, buckets=config.bucket_config(), states=[n_states],
                          config=config.train_config(), split_fraction=config.split_fraction,
                          tau_sigmas=config.tau_sigmas, select=False, residual_scale=config.residual_scale,
                          calibrate_unknown=config.calibrate_unknown)
    scorable = [d for d in test if len(d)]
    sequences = [transform_drive(d, bundle.alphabet) for d in scorable]
    truth = [not d.is_benign for d in scorable]
    scores = _scores(bundle, sequences)
    fixed = {"avg": bundle.static.avg_norm_ll, "min": bundle.static.min_norm_ll, "regression": bundle.regressor.tau}

    rows, curves = [], {}
    for technique in config.grid.techniques:
        for mode in config.grid.modes:
            values, firsts = scores[(technique, mode)]
            scored = ScoredSet(tuple(d.drive_id for d in scorable), values, truth)
            threshold, tuned = tuned_f_measure(scored, config.calibration_fraction, config.data.seed)
            at_fixed = f_measure(scored, fixed[technique])
            sound = float("nan")
            if mode == "online":
                alerts = [(first, d.attack_index) for first, d in zip(firsts, scorable)
                          if not d.is_benign and first is not None]
                if alerts:
                    sound = sum(1 for first, attack in alerts if first >= (attack or 0)) / len(alerts)
            rows.append({
                "transformation": transformation,
                "n_states": n_states,
                "technique": technique,
                "mode": mode,
                "auc": roc_auc(scored),
                "f1": tuned.f1,
                "precision": tuned.precision,
                "recall": tuned.recall,
                "threshold": threshold,
                "f1_fixed": at_fixed.f1,
                "precision_fixed": at_fixed.precision,
                "recall_fixed": at_fixed.recall,
                "threshold_fixed": fixed[technique],
                "sound_alert_rate": sound,
            })
            curves[f"{transformation}_{n_states}_{technique}_{mode}"] = roc_points(scored)
    logger.info(f"Evaluated {transformation} with {n_states} states")
    return rows, curves


def _selection_table(train: List[Drive], transformation: str, config: ExperimentConfig) -> pd.DataFrame:
    split = split_training(train, config.split_fraction, config.training.seed)
    alphabet = build_alphabet(transformation, config.bucket_config(), split.p1)
    _, table = select_model(transform_drives(split.p1, alphabet), config.grid.states, config.folds,
                            config.train_config(), alphabet.M, jobs=config.jobs)
    return table


def run_experiment(config: ExperimentConfig, progress: bool = False) -> EvaluationReport:
    """
    Run the full evaluation grid.

    Args:
        config: Validated experiment config
        progress: Show a progress bar over grid cells

    Returns:
        EvaluationReport (deterministic given the config seeds)
    """
    train, test = load_data(config)
    n_anomalous = sum(1 for d in test if not d.is_benign)
    if not 0 < n_anomalous < len(test):
        raise ConfigError("test set must contain both benign and anomalous drives")

    cells = [(t, n) for t in config.grid.transformations for n in config.grid.states]
    logger.info(f"Evaluating {len(cells)} cells on {len(train)} training and {len(test)} test drives")
    outputs = Parallel(n_jobs=config.jobs)(
        delayed(evaluate_cell)(train, test, t, n, config)
        for t, n in tqdm(cells, desc="evaluate", disable=not progress)
    )

    rows: List[Dict[str, Any]] = []
    roc: Dict[str, pd.DataFrame] = {}
    for cell_rows, cell_curves in outputs:
        rows.extend(cell_rows)
        roc.update(cell_curves)
    selection = {}
    if config.select_states and len(config.grid.states) > 1:
        selection = {t: _selection_table(train, t, config) for t in config.grid.transformations}

    metadata = {
        "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "data_seed": config.data.seed,
        "training_seed": config.training.seed,
        "train_sha256": dataset_digest(train),
        "test_sha256": dataset_digest(test),
        "n_train": len(train),
        "n_test": len(test),
        "n_anomalous": n_anomalous,
        "f1_threshold_policy": (f"best F1 on a {config.calibration_fraction:.0%} calibration slice, "
                                f"reported on the remainder; *_fixed columns use each technique's own threshold"),
        "config": config.model_dump(mode="json"),
    }
    return EvaluationReport(pd.DataFrame(rows), roc, selection, metadata)
