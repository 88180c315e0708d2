"""
Tests for the command-line pipeline.
"""

import pytest
import pandas as pd
import sys
import os

# Add src to path
sys.path.append(os.path.join(os.path.dirname(__file__), '..', 'src'))

from cli import DETECT_COLUMNS, main
from models.bundle import DetectorBundle
from utils.data_loader import read_dataset


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def benign_path(workdir):
    path = workdir / "benign.nd"
    code = main(["--quiet", "simulate", "--drives", "30", "--vehicles", "3", "--seed", "2",
                 "--noise-profile", "quiet", "--out", str(path)])
    assert code == 0
    return path


@pytest.fixture(scope="module")
def bundle_dir(workdir, benign_path):
    out = workdir / "bundles"
    code = main(["--quiet", "train", "--in", str(benign_path), "--out", str(out), "--states", "2,3",
                 "--folds", "2", "--restarts", "1", "--max-iters", "10"])
    assert code == 0
    return out


class TestUsage:
    """Test cases for argument handling and exit codes."""

    def test_missing_command(self):
        """No subcommand is a usage error."""
        assert main([]) == 1

    def test_bad_states(self):
        """State lists must hold positive integers."""
        assert main(["train", "--in", "x", "--out", "y", "--states", "0,3"]) == 1

    def test_bad_kind(self):
        """Unknown attack kinds are usage errors."""
        assert main(["inject", "--in", "x", "--out", "y", "--kinds", "teleport"]) == 1

    def test_bad_mix(self):
        """mix outside [0, 1] is a usage error."""
        assert main(["inject", "--in", "x", "--out", "y", "--mix", "1.5"]) == 1

    def test_missing_input(self, tmp_path):
        """A missing dataset is a data error."""
        assert main(["detect", "--in", str(tmp_path / "none.nd"), "--bundle", str(tmp_path),
                     "--out", str(tmp_path / "out.tsv")]) == 2

    def test_help(self):
        """--help exits cleanly."""
        assert main(["--help"]) == 0


class TestPipeline:
    """Test cases for the command chain from simulation to detection."""

    def test_simulate(self, benign_path):
        """The simulated dataset reads back as benign drives."""
        drives = read_dataset(benign_path)
        assert len(drives) == 30
        assert all(d.is_benign for d in drives)
        assert {d.vehicle_id for d in drives} <= {f"vehicle-{i:03d}" for i in range(3)}

    def test_inject(self, workdir, benign_path):
        """Injection writes a labeled test set with the requested kind."""
        out = workdir / "test.nd"
        code = main(["--quiet", "inject", "--in", str(benign_path), "--out", str(out), "--mix", "0.5",
                     "--kinds", "out_of_order", "--seed", "1"])
        assert code == 0
        test = read_dataset(out)
        assert len(test) == 30
        assert {d.label for d in test if not d.is_benign} == {"out_of_order"}
        assert sum(not d.is_benign for d in test) == 15

    def test_train(self, bundle_dir):
        """Fleet training writes one bundle and the selection table."""
        assert (bundle_dir / "fleet.json").is_file()
        selection = pd.read_csv(bundle_dir / "selection.tsv", sep="\t")
        assert sorted(selection["n_states"]) == [2, 3]
        assert selection["selected"].sum() == 1

    def test_stats(self, workdir, benign_path, capsys):
        """stats prints a per-label table and writes the per-drive summary."""
        out = workdir / "summary.tsv"
        assert main(["--quiet", "stats", "--in", str(benign_path), "--out", str(out)]) == 0
        assert "benign" in capsys.readouterr().out
        summary = pd.read_csv(out, sep="\t")
        assert len(summary) == 30
        assert list(summary.columns) == ["drive_id", "vehicle_id", "label", "n_events", "duration", "n_stories"]
        assert (summary["n_events"] > 0).all()

    def test_train_unscaled_residuals(self, workdir, benign_path):
        """--residual-scale none keeps the raw regression residual."""
        out = workdir / "unscaled"
        code = main(["--quiet", "train", "--in", str(benign_path), "--out", str(out), "--states", "2",
                     "--restarts", "1", "--max-iters", "5", "--residual-scale", "none"])
        assert code == 0
        bundle = DetectorBundle.load(out / "fleet.json")
        assert bundle.regressor.variance == (1.0, 0.0, 0.0)
        assert bundle.metadata["residual_scale"] == "none"

    def test_train_per_vehicle(self, workdir, benign_path):
        """Per-vehicle training writes a bundle per vehicle."""
        out = workdir / "per_vehicle"
        code = main(["--quiet", "train", "--in", str(benign_path), "--out", str(out), "--states", "2",
                     "--restarts", "1", "--max-iters", "5", "--per-vehicle"])
        assert code == 0
        vehicles = {d.vehicle_id for d in read_dataset(benign_path)}
        assert {p.stem for p in out.glob("*.json")} == vehicles

    def test_detect(self, workdir, benign_path, bundle_dir):
        """Detection writes one row per drive, technique and mode."""
        test_path = workdir / "detect_input.nd"
        assert main(["--quiet", "inject", "--in", str(benign_path), "--out", str(test_path),
                     "--kinds", "out_of_order", "--seed", "3"]) == 0
        out = workdir / "detect.tsv"
        code = main(["--quiet", "detect", "--in", str(test_path), "--bundle", str(bundle_dir),
                     "--technique", "all", "--out", str(out)])
        assert code == 0
        table = pd.read_csv(out, sep="\t")
        assert list(table.columns) == DETECT_COLUMNS
        assert len(table) == 30 * 3 * 2
        assert set(table["decision"]) <= {"benign", "anomalous"}
        assert table.loc[table["mode"] == "offline", "first_alert_index"].isna().all()

    def test_detect_without_bundle(self, workdir, benign_path):
        """Scoring without a bundle directory fails with a data error."""
        empty = workdir / "empty_bundles"
        empty.mkdir()
        assert main(["--quiet", "detect", "--in", str(benign_path), "--bundle", str(empty),
                     "--out", str(workdir / "none.tsv")]) == 2


class TestEvaluate:
    """Test cases for the evaluate command."""

    def test_small_grid(self, tmp_path):
        """A small config runs end to end and writes the report."""
        config = tmp_path / "experiment.yaml"
        config.write_text(
            "data:\n  n_vehicles: 2\n  n_train: 16\n  n_test: 12\n  kinds: {out_of_order: 1.0}\n"
            "  noise_profile: quiet\n"
            "grid:\n  transformations: [event_id]\n  states: [2]\n"
            "training:\n  max_iters: 10\n  n_restarts: 1\n"
            "folds: 2\n")
        out = tmp_path / "results"
        assert main(["--quiet", "evaluate", "--config", str(config), "--seed", "4", "--out", str(out)]) == 0
        report = pd.read_csv(out / "report.tsv", sep="\t")
        assert len(report) == 3 * 2
        assert "data_seed: 4" in (out / "meta.txt").read_text()

    def test_missing_config(self, tmp_path):
        """A missing config file is a data error."""
        assert main(["evaluate", "--config", str(tmp_path / "none.yaml")]) == 2


if __name__ == "__main__":
    pytest.main([__file__])
