"""
Discrete-emission Hidden Markov Model.

Scoring uses the scaled forward recursion one symbol at a time; every scorer in
the package (offline, online, fleet service) goes through ``forward_step`` so
their log-likelihoods agree bit for bit. Training is Baum-Welch over padded
sequence batches with random restarts, and ``select_model`` picks the number
of hidden states by k-fold held-out likelihood.
"""

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from sklearn.model_selection import KFold

from utils.errors import ModelValidationError, TrainingError

logger = logging.getLogger(__name__)

SymbolSequence = Union[np.ndarray, Sequence[int]]


@dataclass(frozen=True)
class TrainConfig:
    """Baum-Welch settings."""
    n_states: int = 5
    max_iters: int = 200
    tol: float = 1e-5
    n_restarts: int = 3
    seed: int = 0
    epsilon: float = 1e-6

    def __post_init__(self):
        if self.n_states < 1:
            raise ValueError("n_states must be >= 1")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.tol <= 0:
            raise ValueError("tol must be > 0")
        if self.n_restarts < 1:
            raise ValueError("n_restarts must be >= 1")
        if not 0 < self.epsilon < 1:
            raise ValueError("epsilon must be in (0, 1)")

    def with_states(self, n_states: int) -> "TrainConfig":
        return replace(self, n_states=n_states)


@dataclass(frozen=True, eq=False)
class HmmModel:
    """HMM with initial distribution pi, transitions A (N x N) and emissions B (N x M)."""
    pi: np.ndarray
    A: np.ndarray
    B: np.ndarray
    train_meta: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        for name in ("pi", "A", "B"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))

    @property
    def N(self) -> int:
        return int(self.pi.shape[0])

    @property
    def M(self) -> int:
        return int(self.B.shape[1])

    def validate(self, epsilon: Optional[float] = None, atol: float = 1e-9):
        """
        Check shapes and stochasticity.

        Raises:
            ModelValidationError: On the first inconsistency found
        """
        n = self.N
        if self.pi.ndim != 1 or n < 1:
            raise ModelValidationError(f"pi must be a non-empty vector, got shape {self.pi.shape}")
        if self.A.shape != (n, n):
            raise ModelValidationError(f"A must be {n}x{n}, got {self.A.shape}")
        if self.B.ndim != 2 or self.B.shape[0] != n or self.B.shape[1] < 1:
            raise ModelValidationError(f"B must be {n}xM, got {self.B.shape}")
        for name, matrix in (("pi", self.pi[None, :]), ("A", self.A), ("B", self.B)):
            if not np.all(np.isfinite(matrix)):
                raise ModelValidationError(f"{name} has non-finite entries")
            if np.any(np.abs(matrix.sum(axis=1) - 1.0) > atol):
                raise ModelValidationError(f"{name} rows do not sum to 1")
            floor = 0.0 if epsilon is None else epsilon * (1 - 1e-9)
            if np.any(matrix < floor):
                raise ModelValidationError(f"{name} has entries below {floor:g}")

    def with_emission_mass(self, symbol: int, probability: float) -> "HmmModel":
        """
        Copy of the model that emits ``symbol`` with the same probability in every state.

        The other emissions of each state are rescaled so rows stay stochastic.
        """
        if not 0 <= symbol < self.M:
            raise ValueError(f"symbol {symbol} outside alphabet of size {self.M}")
        if not 0.0 < probability < 1.0:
            raise ValueError(f"emission probability {probability} not in (0, 1)")
        B = self.B * ((1.0 - probability) / (1.0 - self.B[:, symbol]))[:, None]
        B[:, symbol] = probability
        meta = dict(self.train_meta, fixed_emission={"symbol": int(symbol), "probability": float(probability)})
        return HmmModel(self.pi.copy(), self.A.copy(), B, meta)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "N": self.N,
            "M": self.M,
            "pi": self.pi.tolist(),
            "A": self.A.tolist(),
            "B": self.B.tolist(),
            "train_meta": self.train_meta,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "HmmModel":
        try:
            model = cls(np.array(data["pi"], dtype=float), np.array(data["A"], dtype=float),
                        np.array(data["B"], dtype=float), dict(data.get("train_meta", {})))
        except (KeyError, TypeError, ValueError) as e:
            raise ModelValidationError(f"invalid HMM record: {e}") from None
        if (data.get("N", model.N), data.get("M", model.M)) != (model.N, model.M):
            raise ModelValidationError(f"declared N, M {data.get('N')}, {data.get('M')} "
                                       f"do not match parameters {model.N}, {model.M}")
        model.validate()
        return model


def _symbols(sequence: Any) -> np.ndarray:
    return np.asarray(getattr(sequence, "symbols", sequence), dtype=np.int64)


def _check_range(symbols: np.ndarray, M: int):
    if symbols.size and (symbols.min() < 0 or symbols.max() >= M):
        bad = symbols[(symbols < 0) | (symbols >= M)][0]
        raise ValueError(f"symbol {int(bad)} outside alphabet of size {M}")


def forward_step(model: HmmModel, alpha: Optional[np.ndarray], symbol: int) -> Tuple[np.ndarray, float]:
    """
    One scaled forward step.

    Args:
        model: HMM
        alpha: Normalized forward vector of the previous step, None at the first symbol
        symbol: Next observed symbol

    Returns:
        (normalized forward vector, log of the scale factor)
    """
    emission = model.B[:, symbol]
    f = model.pi * emission if alpha is None else (alpha @ model.A) * emission
    c = float(f.sum())
    if c <= 0.0:
        return f, -math.inf
    return f / c, math.log(c)


class ForwardAccumulator:
    """Incremental prefix log-likelihood; memory depends only on N."""

    def __init__(self, model: HmmModel):
        self.model = model
        self.alpha: Optional[np.ndarray] = None
        self.log_likelihood = 0.0
        self.n = 0

    def reset(self):
        self.alpha = None
        self.log_likelihood = 0.0
        self.n = 0

    def push(self, symbol: int) -> float:
        """Consume one symbol and return the log-likelihood of the prefix so far."""
        if not 0 <= symbol < self.model.M:
            raise ValueError(f"symbol {symbol} outside alphabet of size {self.model.M}")
        self.alpha, log_c = forward_step(self.model, self.alpha, int(symbol))
        self.log_likelihood += log_c
        self.n += 1
        return self.log_likelihood


def prefix_log_likelihoods(model: HmmModel, sequence: SymbolSequence) -> np.ndarray:
    """
    Log-likelihood of every prefix in a single forward pass.

    Args:
        model: HMM
        sequence: Symbols (or an ObservationSequence)

    Returns:
        Array whose element i-1 is log P(first i symbols)
    """
    symbols = _symbols(sequence)
    _check_range(symbols, model.M)
    accumulator = ForwardAccumulator(model)
    return np.array([accumulator.push(int(s)) for s in symbols], dtype=float)


def log_likelihood(model: HmmModel, sequence: SymbolSequence) -> float:
    """Log P(sequence | model); 0.0 for the empty sequence."""
    prefixes = prefix_log_likelihoods(model, sequence)
    return float(prefixes[-1]) if len(prefixes) else 0.0


def sample_sequence(model: HmmModel, length: int, rng: np.random.Generator) -> np.ndarray:
    """Draw a symbol sequence from the model."""
    symbols = np.empty(length, dtype=np.int64)
    state = rng.choice(model.N, p=model.pi)
    for t in range(length):
        if t:
            state = rng.choice(model.N, p=model.A[state])
        symbols[t] = rng.choice(model.M, p=model.B[state])
    return symbols


class _Batch:
    """Sequences padded to a common length with a validity mask."""

    def __init__(self, sequences: List[np.ndarray]):
        self.lengths = np.array([len(s) for s in sequences], dtype=np.int64)
        self.T = int(self.lengths.max())
        self.X = np.zeros((len(sequences), self.T), dtype=np.int64)
        for i, s in enumerate(sequences):
            self.X[i, :len(s)] = s
        self.mask = np.arange(self.T)[None, :] < self.lengths[:, None]
        self.n_events = int(self.lengths.sum())


def _forward_backward(batch: _Batch, pi: np.ndarray, A: np.ndarray, B: np.ndarray,
                      with_backward: bool = True):
    S, T, N = len(batch.X), batch.T, len(pi)
    alpha = np.empty((S, T, N))
    scale = np.ones((S, T))
    for t in range(T):
        emission = B[:, batch.X[:, t]].T
        f = pi[None, :] * emission if t == 0 else (alpha[:, t - 1] @ A) * emission
        c = f.sum(axis=1)
        valid = batch.mask[:, t]
        c = np.where(valid, c, 1.0)
        alpha[:, t] = f / c[:, None]
        scale[:, t] = c
    with np.errstate(divide="ignore"):
        ll = float(np.log(scale).sum())
    if not with_backward:
        return ll, None

    beta = np.ones((S, T, N))
    xi = np.zeros((N, N))
    for t in range(T - 2, -1, -1):
        valid_next = batch.mask[:, t + 1]
        weighted = B[:, batch.X[:, t + 1]].T * beta[:, t + 1] / scale[:, t + 1, None]
        beta[:, t] = np.where(valid_next[:, None], weighted @ A.T, 1.0)
        xi += (alpha[:, t] * valid_next[:, None]).T @ weighted
    xi *= A
    gamma = alpha * beta * batch.mask[:, :, None]
    return ll, (gamma, xi)


def _m_step(batch: _Batch, gamma: np.ndarray, xi: np.ndarray, previous: Tuple[np.ndarray, ...],
            M: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    pi_prev, A_prev, B_prev = previous
    pi = gamma[:, 0].sum(axis=0)
    pi = pi / pi.sum()

    row = xi.sum(axis=1, keepdims=True)
    A = np.where(row > 0, xi / np.where(row > 0, row, 1.0), A_prev)

    counts = np.zeros((M, len(pi)))
    np.add.at(counts, batch.X[batch.mask], gamma[batch.mask])
    counts = counts.T
    row = counts.sum(axis=1, keepdims=True)
    B = np.where(row > 0, counts / np.where(row > 0, row, 1.0), B_prev)
    return pi, A, B


def _floor(matrix: np.ndarray, epsilon: float) -> np.ndarray:
    """Mix each row with the uniform floor so every entry is >= epsilon."""
    k = matrix.shape[-1]
    return (1.0 - k * epsilon) * matrix + epsilon


def _baum_welch(batch: _Batch, M: int, config: TrainConfig, restart: int) -> HmmModel:
    rng = np.random.default_rng([config.seed, restart])
    N = config.n_states
    pi = np.full(N, 1.0 / N)
    A = rng.dirichlet(np.ones(N), size=N)
    B = rng.dirichlet(np.ones(M), size=N)

    history: List[float] = []
    converged = False
    for _ in range(config.max_iters):
        ll, (gamma, xi) = _forward_backward(batch, pi, A, B)
        history.append(ll)
        if len(history) > 1 and history[-1] - history[-2] <= config.tol * abs(history[-2]):
            converged = True
            break
        pi, A, B = _m_step(batch, gamma, xi, (pi, A, B), M)

    floored = (_floor(pi[None, :], config.epsilon)[0], _floor(A, config.epsilon), _floor(B, config.epsilon))
    final_ll, _ = _forward_backward(batch, *floored, with_backward=False)
    meta = {
        "seed": config.seed,
        "restart": restart,
        "n_states": N,
        "iterations": len(history),
        "converged": converged,
        "final_log_likelihood": final_ll,
        "n_sequences": int(len(batch.X)),
        "n_events": batch.n_events,
        "ll_history": history,
    }
    return HmmModel(*floored, train_meta=meta)


def train_hmm(sequences: Sequence[Any], config: TrainConfig, n_symbols: int) -> HmmModel:
    """
    Train an HMM with Baum-Welch, keeping the best of several random restarts.

    Args:
        sequences: Symbol sequences (arrays or ObservationSequence)
        config: Training settings
        n_symbols: Alphabet size M

    Returns:
        Trained HmmModel with every entry >= config.epsilon

    Raises:
        TrainingError: If the corpus is empty or holds out-of-range symbols
    """
    arrays = [_symbols(s) for s in sequences]
    arrays = [a for a in arrays if len(a)]
    if not arrays:
        raise TrainingError("cannot train an HMM on an empty corpus")
    if n_symbols * config.epsilon >= 1 or config.n_states * config.epsilon >= 1:
        raise TrainingError(f"epsilon {config.epsilon:g} too large for {n_symbols} symbols")
    for a in arrays:
        try:
            _check_range(a, n_symbols)
        except ValueError as e:
            raise TrainingError(str(e)) from None

    batch = _Batch(arrays)
    start = time.time()
    best: Optional[HmmModel] = None
    for restart in range(config.n_restarts):
        model = _baum_welch(batch, n_symbols, config, restart)
        logger.debug(f"Restart {restart}: ll={model.train_meta['final_log_likelihood']:.4f} "
                     f"after {model.train_meta['iterations']} iterations")
        if best is None or model.train_meta["final_log_likelihood"] > best.train_meta["final_log_likelihood"]:
            best = model
    logger.info(f"Trained {config.n_states}-state HMM on {len(arrays)} sequences in "
                f"{time.time() - start:.1f}s (ll={best.train_meta['final_log_likelihood']:.2f}, "
                f"iterations={best.train_meta['iterations']})")
    return best


def _heldout_score(sequences: List[np.ndarray], train_idx: np.ndarray, test_idx: np.ndarray,
                   config: TrainConfig, n_symbols: int) -> float:
    model = train_hmm([sequences[i] for i in train_idx], config, n_symbols)
    held_out = [sequences[i] for i in test_idx]
    total = sum(log_likelihood(model, s) for s in held_out)
    events = sum(len(s) for s in held_out)
    return total / events if events else 0.0


def select_model(sequences: Sequence[Any], candidate_states: Sequence[int], k_folds: int,
                 config: TrainConfig, n_symbols: int, jobs: int = 1) -> Tuple[HmmModel, pd.DataFrame]:
    """
    Pick the number of hidden states by k-fold held-out log-likelihood per event.

    Args:
        sequences: Training symbol sequences
        candidate_states: Hidden-state counts to compare
        k_folds: Number of folds
        config: Training settings (n_states is overridden per candidate)
        n_symbols: Alphabet size M
        jobs: Parallel workers for candidate/fold training

    Returns:
        (model retrained on all sequences with the winning state count, selection table)
    """
    arrays = [_symbols(s) for s in sequences]
    candidates = sorted(set(int(n) for n in candidate_states))
    if not candidates:
        raise TrainingError("no candidate state counts given")
    if k_folds < 2:
        raise TrainingError(f"k_folds must be >= 2, got {k_folds}")
    if len(arrays) < k_folds:
        raise TrainingError(f"{len(arrays)} sequences are fewer than {k_folds} folds")

    folds = list(KFold(n_splits=k_folds, shuffle=True, random_state=config.seed).split(np.arange(len(arrays))))
    tasks = [(n, f) for n in candidates for f in range(k_folds)]
    logger.info(f"Selecting hidden states among {candidates} with {k_folds}-fold cross validation")
    scores = Parallel(n_jobs=jobs)(
        delayed(_heldout_score)(arrays, folds[f][0], folds[f][1], config.with_states(n), n_symbols)
        for n, f in tasks
    )

    per_candidate: Dict[int, List[float]] = {n: [] for n in candidates}
    for (n, _), score in zip(tasks, scores):
        per_candidate[n].append(score)
    table = pd.DataFrame({
        "n_states": candidates,
        "mean_ll_per_event": [float(np.mean(per_candidate[n])) for n in candidates],
        "std_ll_per_event": [float(np.std(per_candidate[n])) for n in candidates],
        "folds": [k_folds] * len(candidates),
    })
    winner = min(candidates, key=lambda n: (-float(np.mean(per_candidate[n])), n))
    table["selected"] = table["n_states"] == winner
    logger.info(f"Selected {winner} hidden states")

    model = train_hmm(arrays, config.with_states(winner), n_symbols)
    return model, table
