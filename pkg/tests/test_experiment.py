"""
Tests for experiment configuration and the evaluation grid.
"""

import pytest
import sys
import os

# Add src to path
sys.path.append(os.path.join(os.path.dirname(__file__), '..', 'src'))

from utils.errors import ConfigError
from utils.experiment import ExperimentConfig, load_experiment_config, load_data, run_experiment

SMALL_CONFIG = """
data:
  n_vehicles: 2
  n_train: 24
  n_test: 16
  mix: 0.5
  kinds: {out_of_order: 1.0}
  seed: 3
  noise_profile: quiet
grid:
  transformations: [event_id, discrete]
  states: [2, 3]
training:
  max_iters: 15
  n_restarts: 1
folds: 2
"""


@pytest.fixture
def config_path(tmp_path):
    path = tmp_path / "experiment.yaml"
    path.write_text(SMALL_CONFIG)
    return path


@pytest.fixture(scope="module")
def report(tmp_path_factory):
    path = tmp_path_factory.mktemp("config") / "experiment.yaml"
    path.write_text(SMALL_CONFIG)
    return run_experiment(load_experiment_config(path))


QUALITY_CONFIG = """
data:
  n_vehicles: 10
  n_train: 600
  n_test: 300
  mix: 0.5
  seed: 7
grid:
  transformations: [event_id, discrete]
  states: [15]
training:
  max_iters: 60
  n_restarts: 1
select_states: false
"""


@pytest.fixture(scope="module")
def quality(tmp_path_factory):
    path = tmp_path_factory.mktemp("quality") / "experiment.yaml"
    path.write_text(QUALITY_CONFIG)
    return run_experiment(load_experiment_config(path)).results


def _cell(results, transformation, technique, mode):
    rows = results[(results["transformation"] == transformation) & (results["technique"] == technique)
                   & (results["mode"] == mode)]
    return rows.iloc[0]


class TestDetectionQuality:
    """Detection quality of the regression threshold on a mid-sized simulated fleet."""

    @pytest.mark.parametrize("mode", ["offline", "online"])
    def test_regression_keeps_up_with_static(self, quality, mode):
        """Regression AUC is within 0.01 of the best static threshold or above it."""
        best_static = max(_cell(quality, "event_id", t, mode)["auc"] for t in ("avg", "min"))
        assert _cell(quality, "event_id", "regression", mode)["auc"] >= best_static - 0.01

    def test_absolute_auc(self, quality):
        """The best regression configuration separates benign and anomalous drives well."""
        regression = quality[quality["technique"] == "regression"]
        assert regression["auc"].max() >= 0.90

    @pytest.mark.parametrize("transformation", ["event_id", "discrete"])
    def test_online_alerts_follow_attack(self, quality, transformation):
        """Online regression alerts on anomalous drives fire at or after the attack index."""
        rate = _cell(quality, transformation, "regression", "online")["sound_alert_rate"]
        assert rate >= 0.95


class TestConfig:
    """Test cases for loading experiment files."""

    def test_defaults(self):
        """An empty config gets the default grid."""
        config = ExperimentConfig()
        assert config.grid.states == [5, 15, 20, 30]
        assert config.grid.transformations == ["event_id", "discrete"]
        assert config.train_config().n_restarts == 3

    def test_repository_config(self):
        """The shipped experiment file is valid."""
        path = os.path.join(os.path.dirname(__file__), '..', 'configs', 'experiment.yaml')
        config = load_experiment_config(path)
        assert config.data.n_train == 2000
        assert config.bucket_config().velocity_edges == (5.0, 10.0, 20.0, 50.0)

    def test_overrides(self, config_path):
        """Dotted overrides replace values; None leaves them alone."""
        config = load_experiment_config(config_path, {"data.seed": 11, "output_dir": None})
        assert config.data.seed == 11
        assert config.output_dir == "results"

    def test_unknown_key(self, tmp_path):
        """Unknown keys are configuration errors."""
        path = tmp_path / "bad.yaml"
        path.write_text("grid:\n  colour: red\n")
        with pytest.raises(ConfigError):
            load_experiment_config(path)

    def test_invalid_yaml(self, tmp_path):
        """Unparseable files are configuration errors."""
        path = tmp_path / "bad.yaml"
        path.write_text("grid: [unclosed\n")
        with pytest.raises(ConfigError):
            load_experiment_config(path)

    def test_invalid_states(self, tmp_path):
        """State counts must be positive."""
        path = tmp_path / "bad.yaml"
        path.write_text("grid:\n  states: [0]\n")
        with pytest.raises(ConfigError):
            load_experiment_config(path)


class TestLoadData:
    """Test cases for experiment data."""

    def test_simulated_split(self, config_path):
        """Training drives are benign and test drives never reuse them."""
        train, test = load_data(load_experiment_config(config_path))
        assert len(train) == 24 and len(test) == 16
        assert all(d.is_benign for d in train)
        assert sum(not d.is_benign for d in test) == 8
        assert not {d.drive_id for d in train} & {d.drive_id for d in test}


class TestRunExperiment:
    """Test cases for the evaluation grid."""

    def test_grid_rows(self, report):
        """One row per transformation, state count, technique and mode."""
        results = report.results
        assert len(results) == 2 * 2 * 3 * 2
        assert results["auc"].between(0.0, 1.0).all()
        assert results["f1"].between(0.0, 1.0).all()
        assert set(results["technique"]) == {"avg", "min", "regression"}

    def test_auc_table(self, report):
        """The AUC table adds the best static threshold per mode."""
        table = report.auc_table("event_id")
        assert list(table.columns) == [2, 3]
        assert ("online", "best_static") in table.index
        best = table.loc[("offline", "best_static")]
        assert (best >= table.loc[("offline", "avg")]).all()

    def test_selection_recorded(self, report):
        """State selection tables are kept per transformation."""
        assert set(report.selection) == {"event_id", "discrete"}
        assert report.selection["event_id"]["selected"].sum() == 1

    def test_deterministic(self, report, config_path):
        """The same config reproduces the same numbers."""
        again = run_experiment(load_experiment_config(config_path))
        assert again.results.equals(report.results)
        assert again.metadata["test_sha256"] == report.metadata["test_sha256"]

    def test_write(self, report, tmp_path):
        """Writing produces the report, pivot tables, curves and metadata."""
        out = report.write(tmp_path / "results")
        names = {p.name for p in out.iterdir()}
        assert {"report.tsv", "meta.txt", "auc_event_id.tsv", "f1_discrete_online.tsv",
                "selection_event_id.tsv"} <= names
        assert any(name.startswith("roc_event_id_2_regression_") for name in names)
        assert "train_sha256" in (out / "meta.txt").read_text()


if __name__ == "__main__":
    pytest.main([__file__])
