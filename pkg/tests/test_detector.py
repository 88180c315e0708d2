"""
Tests for the temporal regression detector and the static baselines.
"""

import math

import pytest
import numpy as np
import sys
import os

# Add src to path
sys.path.append(os.path.join(os.path.dirname(__file__), '..', 'src'))

from models.detector import (
    Decision, FeatureTracker, RegressorModel, StaticThresholds, build_regressor, compute_static_thresholds,
    fit_residual_variance, residual_trace, score_offline, score_online, score_static, solve_least_squares,
    split_training, temporal_features, training_residuals,
)
from models.hmm import HmmModel, prefix_log_likelihoods
from utils.errors import ModelValidationError, TrainingError
from utils.feature_engineering import ObservationSequence, transform_drive


def _sequence(symbols, times, drive_id="d"):
    return ObservationSequence(drive_id, np.asarray(symbols, dtype=np.int64), np.asarray(times, dtype=float))


@pytest.fixture
def uniform_hmm():
    return HmmModel(np.array([0.5, 0.5]), np.array([[0.5, 0.5], [0.5, 0.5]]), np.full((2, 4), 0.25))


@pytest.fixture
def random_sequences():
    rng = np.random.default_rng(4)
    return [_sequence(rng.integers(0, 4, size=20), np.cumsum(rng.uniform(0.5, 2.0, size=20)), f"d{k}")
            for k in range(10)]


class TestFeatures:
    """Test cases for temporal prefix features."""

    def test_feature_rows(self):
        """Bias, prefix index, elapsed time, gap and mean gap per prefix."""
        np.testing.assert_allclose(temporal_features([2.0, 5.0, 9.0]), [
            [1.0, 1.0, 2.0, 2.0, 2.0],
            [1.0, 2.0, 5.0, 3.0, 2.5],
            [1.0, 3.0, 9.0, 4.0, 3.0],
        ])

    def test_tracker_matches_batch(self):
        """The incremental tracker produces the batch rows."""
        tracker = FeatureTracker()
        rows = [tracker.push(t) for t in (1.0, 4.0)]
        np.testing.assert_array_equal(rows, temporal_features([1.0, 4.0]))


class TestLeastSquares:
    """Test cases for the regression solver."""

    def test_matches_reference_solution(self):
        """Well-conditioned designs give the ordinary least-squares weights."""
        rng = np.random.default_rng(0)
        X = rng.normal(size=(60, 5))
        y = rng.normal(size=60)
        np.testing.assert_allclose(solve_least_squares(X, y), np.linalg.lstsq(X, y, rcond=None)[0], atol=1e-10)

    def test_gradient_vanishes(self):
        """The residual is orthogonal to every feature column."""
        rng = np.random.default_rng(1)
        X = np.column_stack([np.ones(40), rng.uniform(0, 100, size=(40, 4))])
        y = X @ np.array([1.0, -2.0, 0.5, 0.0, 3.0]) + rng.normal(size=40)
        w = solve_least_squares(X, y)
        np.testing.assert_allclose(X.T @ (y - X @ w), 0.0, atol=1e-8 * np.abs(X.T @ y).max())

    def test_collinear_design(self):
        """Collinear columns fall back to the ridge solution, which still minimizes the residual."""
        rng = np.random.default_rng(2)
        base = rng.normal(size=(30, 2))
        X = np.column_stack([base, 2.0 * base[:, 0]])
        y = rng.normal(size=30)
        w = solve_least_squares(X, y)
        assert np.all(np.isfinite(w))
        np.testing.assert_allclose(X @ w, X @ np.linalg.lstsq(X, y, rcond=None)[0], atol=1e-6)
        np.testing.assert_allclose(X.T @ (y - X @ w), 0.0, atol=1e-6)

    def test_badly_scaled_columns(self):
        """Columns of very different magnitude still give the least-squares fit."""
        rng = np.random.default_rng(3)
        i = np.arange(1.0, 401.0)
        X = np.column_stack([np.ones_like(i), i, rng.uniform(0, 1e5, size=i.size), rng.uniform(0, 1e-3, size=i.size)])
        y = X @ np.array([0.5, -1.5, 0.002, 30.0]) + rng.normal(size=i.size)
        w = solve_least_squares(X, y)
        np.testing.assert_allclose(X @ w, X @ np.linalg.lstsq(X, y, rcond=None)[0], atol=1e-6)

    @pytest.mark.parametrize("seed", range(50))
    def test_random_designs_match_normal_equations(self, seed):
        """Random full-rank designs agree with a direct normal-equation solve."""
        rng = np.random.default_rng([11, seed])
        n, p = int(rng.integers(8, 60)), int(rng.integers(1, 6))
        X = rng.normal(size=(n, p)) * rng.uniform(0.5, 3.0, size=p)
        y = rng.normal(size=n)
        expected = np.linalg.solve(X.T @ X, X.T @ y)
        np.testing.assert_allclose(solve_least_squares(X, y), expected, atol=1e-8, rtol=1e-8)


class TestRegressor:
    """Test cases for fitting and applying the regressor."""

    def test_uniform_model_fits_exactly(self, uniform_hmm, random_sequences):
        """Under a uniform HMM the prefix log-likelihood is linear in the prefix index."""
        regressor = build_regressor(uniform_hmm, random_sequences)
        assert regressor.residual_mu == pytest.approx(0.0, abs=1e-8)
        assert regressor.residual_sigma == pytest.approx(0.0, abs=1e-8)
        assert regressor.w_hat[1] == pytest.approx(math.log(0.25), abs=1e-6)
        assert regressor.n_train_prefixes == 200

    def test_tau_from_residuals(self, uniform_hmm, random_sequences):
        """tau sits tau_sigmas standard deviations below the residual mean."""
        hmm = HmmModel(uniform_hmm.pi, uniform_hmm.A, np.array([[0.4, 0.3, 0.2, 0.1], [0.1, 0.2, 0.3, 0.4]]))
        regressor = build_regressor(hmm, random_sequences, tau_sigmas=2.0)
        assert regressor.residual_sigma > 0
        assert regressor.tau == pytest.approx(regressor.residual_mu - 2.0 * regressor.residual_sigma)
        traces = np.concatenate([residual_trace(hmm, regressor, s) for s in random_sequences])
        assert regressor.residual_mu == pytest.approx(traces.mean(), rel=1e-12)
        assert regressor.residual_sigma == pytest.approx(traces.std(), rel=1e-12)

    def test_unscaled_residuals(self, uniform_hmm, random_sequences):
        """Without prefix scaling the residual is the plain likelihood gap."""
        hmm = HmmModel(uniform_hmm.pi, uniform_hmm.A, np.array([[0.4, 0.3, 0.2, 0.1], [0.1, 0.2, 0.3, 0.4]]))
        regressor = build_regressor(hmm, random_sequences, residual_scale="none")
        assert regressor.variance == (1.0, 0.0, 0.0)
        seq = random_sequences[0]
        lls = prefix_log_likelihoods(hmm, seq.symbols)
        expected = [ll - regressor.predict(row) for ll, row in zip(lls, temporal_features(seq.times))]
        np.testing.assert_array_equal(residual_trace(hmm, regressor, seq), expected)

    def test_variance_fit_tracks_prefix_growth(self):
        """Residuals whose spread grows with the prefix index come out with a flat spread after scaling."""
        rng = np.random.default_rng(6)
        i = np.tile(np.arange(1.0, 201.0), 50)
        raw = rng.normal(size=i.size) * np.sqrt(0.5 + 0.1 * i)
        variance = fit_residual_variance(i, raw)
        regressor = RegressorModel((0.0,) * 5, 0.0, 0.0, 0.0, variance=variance)
        scaled = raw / np.array([regressor.scale(k) for k in i])
        early, late = scaled[i <= 50].std(), scaled[i > 150].std()
        assert 0.8 < late / early < 1.25
        assert raw[i > 150].std() / raw[i <= 50].std() > 2.0
        assert np.mean([regressor.scale(k) ** 2 for k in i]) == pytest.approx(1.0)

    def test_exact_fit_keeps_unit_variance(self):
        """Zero residuals leave the scale at one."""
        assert fit_residual_variance(np.arange(1.0, 11.0), np.zeros(10)) == (1.0, 0.0, 0.0)

    def test_invalid_variance(self):
        """Negative or all-zero variance coefficients are rejected."""
        for variance in ((-1.0, 0.0, 0.0), (0.0, 0.0, 0.0)):
            with pytest.raises(ModelValidationError):
                RegressorModel((0.0,) * 5, 0.0, 1.0, -3.0, variance=variance).validate()

    def test_with_tau_sigmas(self):
        """Changing the multiplier moves tau only."""
        regressor = RegressorModel((0.0,) * 5, residual_mu=-1.0, residual_sigma=2.0, tau=-7.0)
        assert regressor.with_tau_sigmas(1.0).tau == -3.0
        assert regressor.with_tau_sigmas(1.0).w_hat == regressor.w_hat

    def test_record(self):
        """Regressor records keep every field and reject bad weights."""
        regressor = RegressorModel((0.1, -1.2, 0.0, 0.3, 0.0), -0.5, 1.5, -5.0, 3.0, 12, (0.2, 0.05, 0.001))
        assert RegressorModel.from_dict(regressor.to_dict()) == regressor
        legacy = regressor.to_dict()
        del legacy["variance"]
        assert RegressorModel.from_dict(legacy).variance == (1.0, 0.0, 0.0)
        record = regressor.to_dict()
        record["w_hat"] = [1.0, 2.0]
        with pytest.raises(ModelValidationError):
            RegressorModel.from_dict(record)

    def test_empty_training(self, uniform_hmm):
        """Only empty drives is a training error."""
        with pytest.raises(TrainingError):
            build_regressor(uniform_hmm, [_sequence([], [])])


class TestScoring:
    """Test cases for offline and online scoring."""

    def test_offline_equals_last_online_residual(self, small_bundle, fleet):
        """The offline score is the final residual of the online trace."""
        for drive in fleet[30:36]:
            seq = transform_drive(drive, small_bundle.alphabet)
            offline = score_offline(small_bundle.hmm, small_bundle.regressor, seq)
            online = score_online(small_bundle.hmm, small_bundle.regressor, seq)
            assert offline.score == online.trace[-1]
            assert online.score == online.trace.min()
            assert (online.first_alert_index is None) == (online.decision is Decision.BENIGN)

    def test_training_residuals_match_traces(self, small_bundle, fleet):
        """Final residuals equal the last entry of each residual trace."""
        sequences = [transform_drive(d, small_bundle.alphabet) for d in fleet[30:33]]
        finals = training_residuals(small_bundle.hmm, small_bundle.regressor, sequences)
        assert finals == [residual_trace(small_bundle.hmm, small_bundle.regressor, s)[-1] for s in sequences]

    def test_alert_index(self, uniform_hmm, random_sequences):
        """With tau above every residual the first event alerts."""
        regressor = build_regressor(uniform_hmm, random_sequences)
        strict = RegressorModel(regressor.w_hat, 0.0, 0.0, tau=1.0)
        result = score_online(uniform_hmm, strict, random_sequences[0])
        assert result.first_alert_index == 0
        assert result.decision is Decision.ANOMALOUS

    def test_empty_drive(self, uniform_hmm):
        """Empty drives cannot be scored."""
        regressor = RegressorModel((0.0,) * 5, 0.0, 1.0, -3.0)
        with pytest.raises(ValueError):
            score_offline(uniform_hmm, regressor, _sequence([], []))


class TestStaticThresholds:
    """Test cases for the static avg/min baselines."""

    @pytest.fixture
    def single_state(self):
        b = [math.exp(-1.0), math.exp(-3.0)]
        return HmmModel(np.array([1.0]), np.array([[1.0]]), np.array([b + [1.0 - sum(b)]]))

    def test_avg_and_min(self, single_state):
        """Normalized log-likelihoods -1 and -3 give avg -2 and min -3."""
        thresholds = compute_static_thresholds(single_state, [_sequence([0], [1.0]), _sequence([1], [1.0])])
        assert thresholds.avg_norm_ll == pytest.approx(-2.0)
        assert thresholds.min_norm_ll == pytest.approx(-3.0)
        assert thresholds.threshold("min") == thresholds.min_norm_ll

    def test_score_static(self, single_state):
        """Offline uses the full drive; online alerts at the first low prefix."""
        thresholds = StaticThresholds(-2.5, -3.0)
        seq = _sequence([0, 0, 1, 1], [1.0, 2.0, 3.0, 4.0])
        offline = score_static(single_state, thresholds, seq, "avg", "offline")
        assert offline.score == pytest.approx(-2.0)
        assert offline.decision is Decision.BENIGN
        online = score_static(single_state, thresholds, seq, "avg", "online")
        assert online.trace.tolist() == pytest.approx([-1.0, -1.0, -5.0 / 3.0, -2.0])
        assert online.first_alert_index is None
        online = score_static(single_state, thresholds, _sequence([1, 0], [1.0, 2.0]), "avg", "online")
        assert online.first_alert_index == 0

    def test_record_ordering(self):
        """A min threshold above the avg threshold is rejected."""
        with pytest.raises(ModelValidationError):
            StaticThresholds.from_dict({"avg_norm_ll": -3.0, "min_norm_ll": -1.0})


class TestSplit:
    """Test cases for the p1/p2 training split."""

    def test_rounding(self, fleet):
        """Half of three drives rounds up to two."""
        split = split_training(fleet[:3], 0.5, seed=0)
        assert (len(split.p1), len(split.p2)) == (2, 1)
        assert {d.drive_id for d in split.p1 + split.p2} == {d.drive_id for d in fleet[:3]}

    def test_deterministic(self, fleet):
        """The same seed gives the same split."""
        assert split_training(fleet, 0.5, 3).p1 == split_training(fleet, 0.5, 3).p1

    def test_degenerate(self, fleet):
        """Splits with an empty part are rejected."""
        with pytest.raises(TrainingError):
            split_training(fleet[:3], 0.1)
        with pytest.raises(TrainingError):
            split_training(fleet[:1], 0.5)


if __name__ == "__main__":
    pytest.main([__file__])
