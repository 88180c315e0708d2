"""
Detector bundle: everything needed to score one vehicle's (or the fleet's) drives.
"""

import json
import logging
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import pandas as pd

from models.detector import (
    RegressorModel, ResidualScale, StaticThresholds, build_regressor, compute_static_thresholds, split_training,
)
from models.hmm import HmmModel, TrainConfig, select_model, train_hmm
from utils.data_loader import dataset_digest
from utils.errors import ModelValidationError
from utils.events import Drive
from utils.feature_engineering import (
    Alphabet, BucketConfig, TransformKind, build_alphabet, transform_drives, unseen_mass,
)

logger = logging.getLogger(__name__)

BUNDLE_FORMAT = "vehicle-detector-bundle"
BUNDLE_VERSION = 1
FLEET_BUNDLE = "fleet"
MAX_UNKNOWN_MASS = 0.5


@dataclass(frozen=True, eq=False)
class DetectorBundle:
    """HMM, alphabet, regressor and static thresholds of one vehicle or vehicle group."""
    vehicle_id: str
    alphabet: Alphabet
    hmm: HmmModel
    regressor: RegressorModel
    static: StaticThresholds
    selection: List[Dict[str, Any]] = field(default_factory=list)
    metadata: Dict[str, Any] = field(default_factory=dict)

    def validate(self):
        """
        Check that the parts fit together.

        Raises:
            ModelValidationError: If the HMM and alphabet disagree or a part is malformed
        """
        self.hmm.validate()
        if self.hmm.M != self.alphabet.M:
            raise ModelValidationError(
                f"HMM emits {self.hmm.M} symbols but the {self.alphabet.kind.value} alphabet has {self.alphabet.M}")
        self.regressor.validate()
        if self.static.min_norm_ll > self.static.avg_norm_ll:
            raise ModelValidationError("min threshold exceeds avg threshold")

    def selection_table(self) -> pd.DataFrame:
        return pd.DataFrame(self.selection)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "format": BUNDLE_FORMAT,
            "version": BUNDLE_VERSION,
            "vehicle_id": self.vehicle_id,
            "alphabet": self.alphabet.to_dict(),
            "hmm": self.hmm.to_dict(),
            "regressor": self.regressor.to_dict(),
            "static": self.static.to_dict(),
            "selection": self.selection,
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DetectorBundle":
        if not isinstance(data, dict) or data.get("format") != BUNDLE_FORMAT:
            raise ModelValidationError(f"not a {BUNDLE_FORMAT} record")
        if data.get("version") != BUNDLE_VERSION:
            raise ModelValidationError(f"unsupported bundle version {data.get('version')!r}")
        missing = [k for k in ("vehicle_id", "alphabet", "hmm", "regressor", "static") if k not in data]
        if missing:
            raise ModelValidationError(f"bundle is missing {', '.join(missing)}")
        selection, metadata = data.get("selection", []), data.get("metadata", {})
        if not isinstance(selection, list) or not all(isinstance(row, dict) for row in selection):
            raise ModelValidationError("bundle selection must be a list of records")
        if not isinstance(metadata, dict):
            raise ModelValidationError("bundle metadata must be a mapping")
        if not isinstance(data["vehicle_id"], str) or not data["vehicle_id"]:
            raise ModelValidationError("bundle vehicle_id must be a non-empty string")
        bundle = cls(
            vehicle_id=str(data["vehicle_id"]),
            alphabet=Alphabet.from_dict(data["alphabet"]),
            hmm=HmmModel.from_dict(data["hmm"]),
            regressor=RegressorModel.from_dict(data["regressor"]),
            static=StaticThresholds.from_dict(data["static"]),
            selection=[dict(row) for row in selection],
            metadata=dict(metadata),
        )
        bundle.validate()
        return bundle

    def save(self, path: Union[str, Path]) -> Path:
        """Write the bundle as JSON, replacing any existing file atomically."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as f:
                json.dump(self.to_dict(), f)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        logger.info(f"Saved detector bundle for {self.vehicle_id} to {path}")
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "DetectorBundle":
        path = Path(path)
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise ModelValidationError(f"{path}: invalid JSON ({e.msg})") from None
        return cls.from_dict(data)


def bundle_path(directory: Union[str, Path], vehicle_id: Optional[str] = None) -> Path:
    return Path(directory) / f"{vehicle_id or FLEET_BUNDLE}.json"


def resolve_bundle(directory: Union[str, Path], vehicle_id: str,
                   cache: Optional[Dict[str, Optional[DetectorBundle]]] = None) -> DetectorBundle:
    """
    The vehicle's own bundle if one exists, otherwise the fleet bundle.

    Raises:
        FileNotFoundError: If neither bundle exists
    """
    cache = {} if cache is None else cache
    for key in (vehicle_id, FLEET_BUNDLE):
        if key not in cache:
            path = bundle_path(directory, key)
            cache[key] = DetectorBundle.load(path) if path.exists() else None
        if cache[key] is not None:
            return cache[key]
    raise FileNotFoundError(f"no bundle for {vehicle_id} and no {FLEET_BUNDLE}.json in {directory}")


def train_bundle(drives: Sequence[Drive], vehicle_id: str = FLEET_BUNDLE,
                 kind: Union[TransformKind, str] = TransformKind.EVENT_ID,
                 buckets: Optional[BucketConfig] = None, states: Sequence[int] = (5,), folds: int = 3,
                 config: Optional[TrainConfig] = None, split_fraction: float = 0.5, tau_sigmas: float = 3.0,
                 select: bool = True, jobs: int = 1,
                 residual_scale: Union[ResidualScale, str] = ResidualScale.PREFIX,
                 calibrate_unknown: bool = True) -> DetectorBundle:
    """
    Train a detector bundle from benign drives.

    The drives are split into p1 and p2; the alphabet and HMM come from p1, the
    regressor and static thresholds from p2.

    Args:
        drives: Benign training drives
        vehicle_id: Owner of the bundle (FLEET_BUNDLE for a fleet-wide model)
        kind: Transformation kind
        buckets: Bucket limits for the discrete transformation
        states: Candidate hidden-state counts
        folds: Folds for state selection
        config: HMM training settings
        split_fraction: Share of drives used for the HMM
        tau_sigmas: Residual standard deviations below the mean for tau
        select: Cross-validate over states (a single candidate is trained directly)
        jobs: Parallel workers for state selection
        residual_scale: Residual scaling of the regressor ("prefix" or "none")
        calibrate_unknown: Set the unknown-symbol emission of a discrete alphabet to the
            share of singleton tuples in p1 instead of the epsilon floor

    Returns:
        Validated DetectorBundle
    """
    config = config or TrainConfig()
    split = split_training(drives, split_fraction, config.seed)
    alphabet = build_alphabet(kind, buckets, split.p1)
    p1 = transform_drives(split.p1, alphabet)
    p2 = transform_drives(split.p2, alphabet)

    candidates = sorted(set(int(n) for n in states))
    if not candidates:
        raise ValueError("no hidden-state counts given")
    selection: List[Dict[str, Any]] = []
    if select and len(candidates) > 1:
        hmm, table = select_model(p1, candidates, folds, config, alphabet.M, jobs=jobs)
        selection = [{"n_states": int(row.n_states),
                      "mean_ll_per_event": float(row.mean_ll_per_event),
                      "std_ll_per_event": float(row.std_ll_per_event),
                      "folds": int(row.folds),
                      "selected": bool(row.selected)} for row in table.itertuples(index=False)]
    else:
        hmm = train_hmm(p1, config.with_states(candidates[0]), alphabet.M)
    if calibrate_unknown and alphabet.unknown_symbol is not None:
        probability = min(max(unseen_mass(p1), config.epsilon), MAX_UNKNOWN_MASS)
        hmm = hmm.with_emission_mass(alphabet.unknown_symbol, probability)
        logger.info(f"Unknown-symbol emission set to {probability:.3g}")

    bundle = DetectorBundle(
        vehicle_id=vehicle_id,
        alphabet=alphabet,
        hmm=hmm,
        regressor=build_regressor(hmm, p2, tau_sigmas, residual_scale),
        static=compute_static_thresholds(hmm, p2),
        selection=selection,
        metadata={
            "seed": config.seed,
            "n_drives": len(drives),
            "n_p1": len(split.p1),
            "n_p2": len(split.p2),
            "split_fraction": split_fraction,
            "dataset_sha256": dataset_digest(drives),
            "residual_scale": ResidualScale(residual_scale).value,
            "calibrate_unknown": calibrate_unknown,
        },
    )
    bundle.validate()
    return bundle
