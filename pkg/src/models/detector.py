"""
Temporal likelihood-threshold detector.

An HMM trained on one part of the benign drives scores prefixes of the other
part; a linear regression on temporal features of each prefix learns the
log-likelihood a normal prefix of that shape should have. A drive is
anomalous when its likelihood falls below the prediction by more than the
decision threshold tau. Static avg/min thresholds on length-normalized
likelihood are the baselines.
"""

import logging
import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
from sklearn.linear_model import LinearRegression
from sklearn.model_selection import train_test_split

from models.hmm import ForwardAccumulator, HmmModel, prefix_log_likelihoods
from utils.errors import ModelValidationError, TrainingError
from utils.events import Drive
from utils.feature_engineering import ObservationSequence

logger = logging.getLogger(__name__)

FEATURE_NAMES: Tuple[str, ...] = (
    "bias", "prefix_index", "t_since_start", "inter_arrival", "cumulative_mean_gap",
)
# Condition number of the column-scaled Gram matrix above which the ridge term is added.
MAX_CONDITION = 1e10
RIDGE = 1e-8
# Mean squared raw residual at or below which the regression fit counts as exact.
EXACT_FIT = 1e-18
UNIT_VARIANCE: Tuple[float, float, float] = (1.0, 0.0, 0.0)


class Decision(str, Enum):
    BENIGN = "benign"
    ANOMALOUS = "anomalous"


class StaticMode(str, Enum):
    AVG = "avg"
    MIN = "min"


class ScoringMode(str, Enum):
    OFFLINE = "offline"
    ONLINE = "online"


class ResidualScale(str, Enum):
    NONE = "none"
    PREFIX = "prefix"


@dataclass(frozen=True)
class TrainingSplit:
    """Benign training drives split into HMM (p1) and regressor (p2) parts."""
    p1: Tuple[Drive, ...]
    p2: Tuple[Drive, ...]
    split_fraction: float


def split_training(drives: Sequence[Drive], fraction: float = 0.5, seed: int = 0) -> TrainingSplit:
    """
    Deterministically split benign training drives.

    Args:
        drives: Benign training drives
        fraction: Share of drives for HMM training, |p1| = round(fraction * total) with halves rounded up
        seed: Shuffle seed

    Returns:
        TrainingSplit

    Raises:
        TrainingError: If either part would be empty
    """
    if not 0.0 < fraction < 1.0:
        raise TrainingError(f"split fraction {fraction} not in (0, 1)")
    total = len(drives)
    n_p1 = int(math.floor(fraction * total + 0.5))
    if total < 2 or not 0 < n_p1 < total:
        raise TrainingError(f"cannot split {total} drives at fraction {fraction} into two non-empty parts")
    p1, p2 = train_test_split(list(drives), train_size=n_p1, random_state=seed, shuffle=True)
    logger.info(f"Split {total} drives into {len(p1)} for the HMM and {len(p2)} for the regressor")
    return TrainingSplit(tuple(p1), tuple(p2), fraction)


class FeatureTracker:
    """Builds the temporal feature vector of each prefix as events arrive."""

    def __init__(self):
        self.i = 0
        self.previous_t: Optional[float] = None

    def reset(self):
        self.i = 0
        self.previous_t = None

    def push(self, t: float) -> Tuple[float, ...]:
        self.i += 1
        t = float(t)
        gap = t if self.previous_t is None else t - self.previous_t
        self.previous_t = t
        return (1.0, float(self.i), t, gap, t / self.i)


def temporal_features(times: Sequence[float]) -> np.ndarray:
    """Feature matrix with one row per prefix of a drive."""
    tracker = FeatureTracker()
    rows = [tracker.push(t) for t in times]
    return np.array(rows, dtype=float).reshape(len(rows), len(FEATURE_NAMES))


@dataclass(frozen=True)
class RegressorModel:
    """
    Regression weights, residual scale, training residual statistics and decision threshold.

    The residual of prefix i is (LL_i - <w_hat, v_i>) / sqrt(c0 + c1 * i + c2 * i^2) with
    (c0, c1, c2) = variance. The default (1, 0, 0) leaves residuals unscaled.
    """
    w_hat: Tuple[float, ...]
    residual_mu: float
    residual_sigma: float
    tau: float
    tau_sigmas: float = 3.0
    n_train_prefixes: int = 0
    variance: Tuple[float, float, float] = UNIT_VARIANCE

    def predict(self, features: Sequence[float]) -> float:
        """Expected log-likelihood of a prefix with these features."""
        return math.fsum(w * v for w, v in zip(self.w_hat, features))

    def scale(self, i: float) -> float:
        """Expected residual standard deviation at prefix index i."""
        c0, c1, c2 = self.variance
        return math.sqrt(c0 + c1 * i + c2 * i * i)

    def residual(self, log_likelihood: float, features: Sequence[float]) -> float:
        """Scaled residual of one prefix; features[1] is the prefix index."""
        return (log_likelihood - self.predict(features)) / self.scale(features[1])

    def with_tau_sigmas(self, tau_sigmas: float) -> "RegressorModel":
        return replace(self, tau_sigmas=tau_sigmas, tau=self.residual_mu - tau_sigmas * self.residual_sigma)

    def validate(self):
        if len(self.w_hat) != len(FEATURE_NAMES):
            raise ModelValidationError(f"regressor has {len(self.w_hat)} weights, expected {len(FEATURE_NAMES)}")
        if not all(math.isfinite(w) for w in self.w_hat):
            raise ModelValidationError("regressor weights must be finite")
        if not self.residual_sigma >= 0:
            raise ModelValidationError("residual sigma must be >= 0")
        if len(self.variance) != 3 or not all(math.isfinite(c) and c >= 0 for c in self.variance):
            raise ModelValidationError(f"variance coefficients must be three finite values >= 0, got {self.variance}")
        if sum(self.variance) <= 0:
            raise ModelValidationError("variance coefficients must not all be zero")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "features": list(FEATURE_NAMES),
            "w_hat": list(self.w_hat),
            "residual_mu": self.residual_mu,
            "residual_sigma": self.residual_sigma,
            "tau": self.tau,
            "tau_sigmas": self.tau_sigmas,
            "n_train_prefixes": self.n_train_prefixes,
            "variance": list(self.variance),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RegressorModel":
        if list(data.get("features", FEATURE_NAMES)) != list(FEATURE_NAMES):
            raise ModelValidationError(f"unsupported regressor features {data.get('features')}")
        try:
            model = cls(
                w_hat=tuple(float(w) for w in data["w_hat"]),
                residual_mu=float(data["residual_mu"]),
                residual_sigma=float(data["residual_sigma"]),
                tau=float(data["tau"]),
                tau_sigmas=float(data.get("tau_sigmas", 3.0)),
                n_train_prefixes=int(data.get("n_train_prefixes", 0)),
                variance=tuple(float(c) for c in data.get("variance", UNIT_VARIANCE)),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ModelValidationError(f"invalid regressor record: {e}") from None
        model.validate()
        return model


def solve_least_squares(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """
    Least-squares weights via the normal equations.

    Columns are scaled to unit norm before solving. When the scaled Gram
    matrix is ill-conditioned or singular a ridge term RIDGE * I is added.
    """
    norms = np.linalg.norm(X, axis=0)
    norms[norms == 0] = 1.0
    Xs = X / norms
    gram = Xs.T @ Xs
    rhs = Xs.T @ y
    with np.errstate(all="ignore"):
        condition = np.linalg.cond(gram)
    if np.isfinite(condition) and condition < MAX_CONDITION:
        try:
            return np.linalg.solve(gram, rhs) / norms
        except np.linalg.LinAlgError:
            pass
    logger.warning(f"Ill-conditioned normal equations (cond={condition:.3g}); adding ridge {RIDGE:g}")
    return np.linalg.solve(gram + RIDGE * np.eye(gram.shape[0]), rhs) / norms


def fit_residual_variance(prefix_index: np.ndarray, raw_residuals: np.ndarray) -> Tuple[float, float, float]:
    """
    Fit nonnegative (c0, c1, c2) so that c0 + c1 * i + c2 * i^2 tracks the squared residual.

    Coefficients are normalized to a mean fitted variance of 1 over the training
    prefixes. Exact fits and degenerate fits give UNIT_VARIANCE.
    """
    squared = np.asarray(raw_residuals, dtype=float) ** 2
    if squared.mean() <= EXACT_FIT:
        return UNIT_VARIANCE
    i = np.asarray(prefix_index, dtype=float)
    design = np.column_stack([np.ones_like(i), i, i * i])
    fit = LinearRegression(positive=True, fit_intercept=False).fit(design, squared)
    coefficients = np.clip(fit.coef_, 0.0, None)
    fitted = design @ coefficients
    if not np.all(np.isfinite(coefficients)) or fitted.min() <= 0:
        logger.warning("Residual variance fit is degenerate; leaving residuals unscaled")
        return UNIT_VARIANCE
    coefficients = coefficients / fitted.mean()
    return (float(coefficients[0]), float(coefficients[1]), float(coefficients[2]))


def _prefix_data(hmm: HmmModel, sequences: Sequence[ObservationSequence]) -> Tuple[np.ndarray, np.ndarray]:
    features, targets = [], []
    for seq in sequences:
        if len(seq) == 0:
            continue
        features.append(temporal_features(seq.times))
        targets.append(prefix_log_likelihoods(hmm, seq.symbols))
    if not features:
        raise TrainingError("regressor needs at least one non-empty drive")
    return np.vstack(features), np.concatenate(targets)


def build_regressor(hmm: HmmModel, sequences: Sequence[ObservationSequence], tau_sigmas: float = 3.0,
                    residual_scale: Union[ResidualScale, str] = ResidualScale.PREFIX) -> RegressorModel:
    """
    Fit the temporal regression of prefix log-likelihoods.

    Args:
        hmm: HMM trained on the other part of the training drives
        sequences: Observation sequences of the regressor's training drives
        tau_sigmas: tau = residual mean - tau_sigmas * residual std
        residual_scale: "prefix" divides residuals by a fitted per-prefix-index
            standard deviation, "none" keeps the raw difference

    Returns:
        RegressorModel
    """
    X, y = _prefix_data(hmm, sequences)
    w_hat = solve_least_squares(X, y)
    unscaled = RegressorModel(tuple(float(w) for w in w_hat), 0.0, 0.0, 0.0, tau_sigmas, len(y))
    raw = np.array([unscaled.residual(ll, row) for row, ll in zip(X, y)])
    variance = UNIT_VARIANCE
    if ResidualScale(residual_scale) is ResidualScale.PREFIX:
        variance = fit_residual_variance(X[:, 1], raw)
    scaled = replace(unscaled, variance=variance)
    residuals = np.array([scaled.residual(ll, row) for row, ll in zip(X, y)])
    mu = float(residuals.mean())
    sigma = float(residuals.std())
    regressor = replace(scaled, residual_mu=mu, residual_sigma=sigma, tau=mu - tau_sigmas * sigma)
    logger.info(f"Fitted regressor on {len(y)} prefixes: residual mean={mu:.4f}, std={sigma:.4f}, "
                f"tau={regressor.tau:.4f}, variance={variance}")
    return regressor


class OnlineScorer:
    """Per-drive residual stream: one forward step and one prediction per event."""

    def __init__(self, hmm: HmmModel, regressor: RegressorModel):
        self.regressor = regressor
        self.accumulator = ForwardAccumulator(hmm)
        self.features = FeatureTracker()

    def reset(self):
        self.accumulator.reset()
        self.features.reset()

    @property
    def n(self) -> int:
        return self.accumulator.n

    @property
    def log_likelihood(self) -> float:
        return self.accumulator.log_likelihood

    def push(self, symbol: int, t: float) -> float:
        """Consume one event and return the residual of the prefix so far."""
        ll = self.accumulator.push(symbol)
        return self.regressor.residual(ll, self.features.push(t))


class OfflineResult(NamedTuple):
    score: float
    decision: Decision


class OnlineResult(NamedTuple):
    trace: np.ndarray
    first_alert_index: Optional[int]
    score: float
    decision: Decision


def _require_events(sequence: ObservationSequence):
    if len(sequence) == 0:
        raise ValueError(f"drive {sequence.drive_id} has no events to score")


def residual_trace(hmm: HmmModel, regressor: RegressorModel, sequence: ObservationSequence) -> np.ndarray:
    """Residual of every prefix of the drive."""
    scorer = OnlineScorer(hmm, regressor)
    return np.array([scorer.push(int(s), t) for s, t in zip(sequence.symbols, sequence.times)], dtype=float)


def _first_below(trace: np.ndarray, threshold: float) -> Optional[int]:
    below = np.flatnonzero(trace < threshold)
    return int(below[0]) if len(below) else None


def score_offline(hmm: HmmModel, regressor: RegressorModel, sequence: ObservationSequence) -> OfflineResult:
    """Full-drive residual; lower is more anomalous."""
    _require_events(sequence)
    score = float(residual_trace(hmm, regressor, sequence)[-1])
    return OfflineResult(score, Decision.ANOMALOUS if score < regressor.tau else Decision.BENIGN)


def score_online(hmm: HmmModel, regressor: RegressorModel, sequence: ObservationSequence) -> OnlineResult:
    """Per-event residuals, the first alert index and the min-residual drive score."""
    _require_events(sequence)
    trace = residual_trace(hmm, regressor, sequence)
    first = _first_below(trace, regressor.tau)
    return OnlineResult(trace, first, float(trace.min()),
                        Decision.BENIGN if first is None else Decision.ANOMALOUS)


@dataclass(frozen=True)
class StaticThresholds:
    """Average and minimum per-event log-likelihood over training drives."""
    avg_norm_ll: float
    min_norm_ll: float

    def threshold(self, mode: Union[StaticMode, str]) -> float:
        return self.avg_norm_ll if StaticMode(mode) is StaticMode.AVG else self.min_norm_ll

    def to_dict(self) -> Dict[str, float]:
        return {"avg_norm_ll": self.avg_norm_ll, "min_norm_ll": self.min_norm_ll}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "StaticThresholds":
        try:
            thresholds = cls(float(data["avg_norm_ll"]), float(data["min_norm_ll"]))
        except (KeyError, TypeError, ValueError) as e:
            raise ModelValidationError(f"invalid static thresholds: {e}") from None
        if thresholds.min_norm_ll > thresholds.avg_norm_ll:
            raise ModelValidationError("min threshold exceeds avg threshold")
        return thresholds


def compute_static_thresholds(hmm: HmmModel, sequences: Sequence[ObservationSequence]) -> StaticThresholds:
    """
    Static thresholds from per-event normalized log-likelihoods of training drives.

    Args:
        hmm: Trained HMM
        sequences: Training observation sequences

    Returns:
        StaticThresholds with avg and min taken over drives
    """
    normalized = [prefix_log_likelihoods(hmm, s.symbols)[-1] / len(s) for s in sequences if len(s)]
    if not normalized:
        raise TrainingError("static thresholds need at least one non-empty drive")
    values = np.array(normalized, dtype=float)
    thresholds = StaticThresholds(float(values.mean()), float(values.min()))
    logger.info(f"Static thresholds over {len(values)} drives: avg={thresholds.avg_norm_ll:.4f}, "
                f"min={thresholds.min_norm_ll:.4f}")
    return thresholds


def normalized_trace(hmm: HmmModel, sequence: ObservationSequence) -> np.ndarray:
    """Per-event log-likelihood LL_i / i of every prefix."""
    prefixes = prefix_log_likelihoods(hmm, sequence.symbols)
    return prefixes / np.arange(1, len(prefixes) + 1)


def score_static(hmm: HmmModel, thresholds: StaticThresholds, sequence: ObservationSequence,
                 mode: Union[StaticMode, str] = StaticMode.AVG,
                 scoring: Union[ScoringMode, str] = ScoringMode.OFFLINE) -> Union[OfflineResult, OnlineResult]:
    """
    Score a drive against a static threshold.

    Args:
        hmm: Trained HMM
        thresholds: Static thresholds
        sequence: Observation sequence of the drive
        mode: avg or min threshold
        scoring: offline (full drive) or online (every prefix)

    Returns:
        OfflineResult, or OnlineResult whose trace is the per-prefix normalized log-likelihood
    """
    _require_events(sequence)
    threshold = thresholds.threshold(mode)
    trace = normalized_trace(hmm, sequence)
    if ScoringMode(scoring) is ScoringMode.OFFLINE:
        score = float(trace[-1])
        return OfflineResult(score, Decision.ANOMALOUS if score < threshold else Decision.BENIGN)
    first = _first_below(trace, threshold)
    return OnlineResult(trace, first, float(trace.min()),
                        Decision.BENIGN if first is None else Decision.ANOMALOUS)


def training_residuals(hmm: HmmModel, regressor: RegressorModel,
                       sequences: Sequence[ObservationSequence]) -> List[float]:
    """Final-prefix residual of each training drive."""
    return [float(residual_trace(hmm, regressor, s)[-1]) for s in sequences if len(s)]
