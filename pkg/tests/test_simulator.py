"""
Tests for the fleet simulator.
"""

from collections import Counter
from dataclasses import replace

import pytest
import numpy as np
import sys
import os

# Add src to path
sys.path.append(os.path.join(os.path.dirname(__file__), '..', 'src'))

from simulation.simulator import (
    NoiseConfig, SimConfig, Trajectory, generate_drive, generate_fleet, interpolate_kinematics,
)
from utils.data_loader import dataset_digest
from utils.events import (
    CANCELLATION_STORIES, ENTRY_STORIES, EXIT_STORY, STORIES, Event, event_type, nesting_violations, validate_drive,
)


class TestGenerateFleet:
    """Test cases for fleet generation."""

    def test_same_seed_same_fleet(self, fleet):
        """The seed fully determines the dataset."""
        again = generate_fleet(SimConfig(n_vehicles=3, n_drives=40, seed=5))
        assert dataset_digest(again) == dataset_digest(fleet)

    def test_different_seed(self, fleet):
        """Another seed gives another dataset."""
        other = generate_fleet(SimConfig(n_vehicles=3, n_drives=40, seed=6))
        assert dataset_digest(other) != dataset_digest(fleet)

    def test_ids(self, fleet):
        """Drive ids are unique and vehicles rotate."""
        assert len({d.drive_id for d in fleet}) == len(fleet)
        assert {d.vehicle_id for d in fleet} == {"vehicle-000", "vehicle-001", "vehicle-002"}

    def test_drives_are_valid(self, fleet):
        """Every simulated drive is benign and satisfies all invariants."""
        for drive in fleet:
            assert drive.is_benign
            assert validate_drive(drive) == []
            assert nesting_violations(drive) == []

    def test_drive_shape(self, fleet):
        """Drives open with an entry story and close with the exit story."""
        for drive in fleet:
            first = drive.story_trace[0].name
            if first in CANCELLATION_STORIES:
                continue
            assert first in ENTRY_STORIES
            assert drive.story_trace[-1].name == EXIT_STORY
            assert drive.events[-1].name == "Logout"

    def test_quiet_profile_has_no_noise(self, quiet_fleet):
        """Without noise every event belongs to a story."""
        for drive in quiet_fleet:
            assert sum(trace.end - trace.start for trace in drive.story_trace) == len(drive)

    def test_story_weights(self):
        """Interior stories follow the configured weights."""
        config = SimConfig(n_vehicles=1, n_drives=10, seed=2, story_rate=1.0,
                           noise=NoiseConfig.profile("quiet"), story_weights={"GPS": 1.0})
        for drive in generate_fleet(config):
            interior = {t.name for t in drive.story_trace[1:-1]}
            assert interior <= {"GPS"}

    def test_cancellation(self):
        """A certain cancellation yields a single cancellation story."""
        noise = NoiseConfig(drive_cancellation=1.0)
        drive = generate_drive("vehicle-000", np.random.default_rng(0), SimConfig(noise=noise))
        assert len(drive.story_trace) == 1
        assert drive.story_trace[0].name in CANCELLATION_STORIES

    def test_failed_usb_insert(self):
        """Failed USB inserts are an insert directly followed by an extract."""
        noise = replace(NoiseConfig.profile("quiet"), usb_failure=1.0)
        config = SimConfig(n_vehicles=1, n_drives=5, seed=3, noise=noise)
        for drive in generate_fleet(config):
            if drive.story_trace[0].name in CANCELLATION_STORIES:
                continue
            names = drive.event_names
            pairs = [i for i in range(len(names) - 1) if names[i:i + 2] == ["USB Insert", "USB Extract"]]
            assert pairs
            assert nesting_violations(drive) == []
            assert validate_drive(drive) == []


class TestStoryCoverage:
    """Test cases for the story mix of a large fleet."""

    def test_every_story_appears(self):
        """A thousand default drives contain every catalog story at least once."""
        drives = generate_fleet(SimConfig(n_vehicles=10, n_drives=1000, seed=12))
        seen = Counter(trace.name for drive in drives for trace in drive.story_trace)
        assert set(STORIES) <= set(seen)
        assert seen[EXIT_STORY] == sum(1 for d in drives if d.story_trace[0].name not in CANCELLATION_STORIES)


class TestConfig:
    """Test cases for simulation settings."""

    def test_profiles(self):
        """Named profiles exist; unknown names raise."""
        assert NoiseConfig.profile("quiet").usb == 0.0
        assert NoiseConfig.profile("heavy").usb > NoiseConfig.profile("default").usb
        with pytest.raises(ValueError):
            NoiseConfig.profile("loud")

    def test_invalid_values(self):
        """Out-of-range settings raise ValueError."""
        with pytest.raises(ValueError):
            SimConfig(n_drives=0)
        with pytest.raises(ValueError):
            NoiseConfig(usb=1.5)
        with pytest.raises(ValueError):
            SimConfig(story_weights={"Teleport": 1.0})


class TestKinematics:
    """Test cases for trajectories and interpolation."""

    def test_trajectory_profile(self):
        """Standing still outside the drive, cruising in the middle."""
        trajectory = Trajectory(100.0, 700.0, cruise=60.0, ramp=60.0)
        assert trajectory.velocity(50.0) == 0.0
        assert trajectory.velocity(130.0) == pytest.approx(30.0)
        assert trajectory.velocity(400.0) == 60.0
        assert trajectory.velocity(800.0) == 0.0
        assert trajectory.distance(800.0) == pytest.approx(60.0 / 3.6 * 540.0)

    def test_interpolate_midpoint(self):
        """Halfway in time gives halfway location and velocity."""
        before = Event(event_type("GPS Access"), 10.0, (0.0, 0.0), 20.0)
        after = Event(event_type("GPS Access"), 20.0, (10.0, 4.0), 40.0)
        location, velocity = interpolate_kinematics(before, after, 15.0)
        assert location == pytest.approx((5.0, 2.0))
        assert velocity == pytest.approx(30.0)

    def test_interpolate_at_end(self):
        """Past the last event the previous kinematics carry over."""
        before = Event(event_type("GPS Access"), 10.0, (1.0, 2.0), 20.0)
        assert interpolate_kinematics(before, None, 12.0) == ((1.0, 2.0), 20.0)


if __name__ == "__main__":
    pytest.main([__file__])
