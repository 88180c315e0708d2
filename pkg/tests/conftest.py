"""
Shared fixtures: hand-built drives, a small simulated fleet and a trained bundle.
"""

import os
import sys

import numpy as np
import pytest

sys.path.append(os.path.join(os.path.dirname(__file__), '..', 'src'))

from models.bundle import train_bundle
from models.hmm import TrainConfig
from simulation.simulator import NoiseConfig, SimConfig, generate_fleet, make_attrs
from utils.events import Drive, Event, StoryTrace, event_type, story


def build_drive(stories, drive_id="drive-test", vehicle_id="vehicle-000", velocity=0.0, seed=0):
    """Benign drive made of whole stories, one event per second."""
    rng = np.random.default_rng(seed)
    events, traces = [], []
    t = 1.0
    for name in stories:
        context = {}
        start = len(events)
        for step in story(name).template:
            attrs = make_attrs(step.event, rng, step.fixed, context)
            events.append(Event(event_type(step.event), t, (t, 0.0), velocity, 1, 1, attrs))
            t += 1.0
        traces.append(StoryTrace(name, start, len(events)))
    return Drive(drive_id, vehicle_id, tuple(events), story_trace=tuple(traces))


@pytest.fixture
def make_drive():
    return build_drive


@pytest.fixture
def usb_drive():
    return build_drive(["Car Entry 1", "Info System Upgrade", "Car Exit"], drive_id="drive-usb")


@pytest.fixture(scope="session")
def fleet():
    """Forty simulated benign drives over three vehicles."""
    return generate_fleet(SimConfig(n_vehicles=3, n_drives=40, seed=5))


@pytest.fixture(scope="session")
def quiet_fleet():
    return generate_fleet(SimConfig(n_vehicles=2, n_drives=30, seed=9, noise=NoiseConfig.profile("quiet")))


@pytest.fixture(scope="session")
def small_bundle(fleet):
    """event_id bundle with three hidden states trained on the first thirty drives."""
    return train_bundle(list(fleet[:30]), vehicle_id="vehicle-000", states=[3],
                        config=TrainConfig(n_states=3, max_iters=25, n_restarts=1, seed=1))
