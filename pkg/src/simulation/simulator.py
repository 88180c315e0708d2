"""
Connected-vehicle drive simulator.

Drives are composed from story templates placed on a timeline, sampled against a
trapezoidal velocity profile, and then enriched with logically consistent noise.
"""

import logging
import math
from dataclasses import dataclass, field, fields
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed
from tqdm import tqdm

from utils.events import (
    CANCELLATION_STORIES, ENTRY_STORIES, EXIT_STORY, GPS_TARGET_IP, INTERIOR_STORIES,
    MECHANICAL_EVENTS, WEATHER_TARGET_IP, AccessType, Drive, Event, EventAttrs, FileType,
    Priority, StoryStep, StoryTrace, Vendor, event_type, required_attributes, story,
)

logger = logging.getLogger(__name__)

KNOWN_VENDORS = ("here-maps", "tomtom", "oem-connect", "mapbox")
APP_NAMES = ("weather", "navigator", "radio", "parking", "news", "podcasts")
KNOWN_DEVICES = ("phone-7f3a", "phone-19c2", "tablet-0b44")
STREAM_TARGET_IPS = ("151.101.1.57", "104.199.65.124")
STORE_TARGET_IP = "172.217.22.14"
FLOW_TARGET_IPS = (GPS_TARGET_IP, WEATHER_TARGET_IP) + STREAM_TARGET_IPS + (STORE_TARGET_IP,)
COMMON_PORTS = (80, 443, 1883, 5353, 8080, 8883)
MUSIC_NOISE_STORIES = ("Play Music", "Music From USB 1", "Music From Mobile")

MEAN_PACKETS = 20.0
SPIKE_PACKETS = 150.0


@dataclass
class NoiseConfig:
    """Per-drive probabilities of each noise kind."""
    network_usage: float = 0.4
    open_flows: float = 0.4
    bluetooth: float = 0.3
    usb: float = 0.2
    usb_failure: float = 0.1
    ports: float = 0.3
    file_access: float = 0.4
    drive_cancellation: float = 0.02
    music: float = 0.3

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"noise probability {f.name}={value} not in [0, 1]")

    @classmethod
    def profile(cls, name: str) -> "NoiseConfig":
        """
        Named noise profile.

        Args:
            name: One of "quiet", "default", "heavy"

        Returns:
            NoiseConfig for the profile
        """
        if name == "default":
            return cls()
        if name == "quiet":
            return cls(**{f.name: 0.0 for f in fields(cls)})
        if name == "heavy":
            return cls(network_usage=0.8, open_flows=0.8, bluetooth=0.6, usb=0.5, usb_failure=0.25, ports=0.6,
                       file_access=0.8, drive_cancellation=0.05, music=0.6)
        raise ValueError(f"unknown noise profile: {name!r}")


@dataclass
class SimConfig:
    """Fleet simulation parameters; the seed fully determines the output."""
    n_vehicles: int = 20
    n_drives: int = 100
    seed: int = 7
    drive_duration: Tuple[float, float] = (600.0, 2400.0)
    story_rate: float = 0.2
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    story_weights: Optional[Dict[str, float]] = None

    def __post_init__(self):
        if self.n_drives < 1:
            raise ValueError("n_drives must be >= 1")
        if self.n_vehicles < 1:
            raise ValueError("n_vehicles must be >= 1")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        low, high = self.drive_duration
        if not 0 <= low <= high:
            raise ValueError(f"invalid drive_duration {self.drive_duration}")
        if self.story_rate < 0:
            raise ValueError("story_rate must be >= 0")
        if self.story_weights is not None:
            unknown = set(self.story_weights) - set(INTERIOR_STORIES)
            if unknown:
                raise ValueError(f"story_weights names unknown stories: {sorted(unknown)}")

    def interior_probabilities(self) -> np.ndarray:
        weights = np.ones(len(INTERIOR_STORIES))
        if self.story_weights is not None:
            weights = np.array([self.story_weights.get(name, 0.0) for name in INTERIOR_STORIES])
        if weights.sum() <= 0:
            raise ValueError("story_weights must have positive mass")
        return weights / weights.sum()


class Trajectory:
    """Trapezoidal speed profile along a straight heading."""

    def __init__(self, start: float, end: float, cruise: float, ramp: float = 60.0,
                 heading: float = 0.0, origin: Tuple[float, float] = (0.0, 0.0)):
        self.start = start
        self.end = max(end, start)
        self.cruise = cruise
        self.ramp = min(ramp, (self.end - self.start) / 2.0)
        self.heading = heading
        self.origin = origin

    def velocity(self, t: float) -> float:
        """Speed in km/h at time t."""
        s, e, r = self.start, self.end, self.ramp
        if t <= s or t >= e or r <= 0:
            return 0.0
        if t < s + r:
            return self.cruise * (t - s) / r
        if t > e - r:
            return self.cruise * (e - t) / r
        return self.cruise

    def distance(self, t: float) -> float:
        """Meters travelled since the drive started moving."""
        s, e, r = self.start, self.end, self.ramp
        v = self.cruise / 3.6
        if t <= s or r <= 0:
            return 0.0
        total = v * (e - s - r)
        if t >= e:
            return total
        if t < s + r:
            return v * (t - s) ** 2 / (2 * r)
        if t > e - r:
            return total - v * (e - t) ** 2 / (2 * r)
        return v * (r / 2 + (t - s - r))

    def location(self, t: float) -> Tuple[float, float]:
        d = self.distance(t)
        return (self.origin[0] + d * math.cos(self.heading), self.origin[1] + d * math.sin(self.heading))


@dataclass
class _PendingEvent:
    name: str
    t: float
    attrs: EventAttrs
    src_packets: int
    dst_packets: int


def _packets(name: str, rng: np.random.Generator, mean: float = MEAN_PACKETS) -> Tuple[int, int]:
    if name in MECHANICAL_EVENTS:
        return 0, 0
    return int(rng.poisson(mean)), int(rng.poisson(mean))


def _pick(rng: np.random.Generator, options: Sequence[Any]) -> Any:
    return options[int(rng.integers(len(options)))]


def _attribute(name: str, event_name: str, context: Dict[str, Any], rng: np.random.Generator) -> Any:
    """Random value for an attribute the story template leaves open."""
    if name == "file_type":
        return _pick(rng, (FileType.PUBLIC, FileType.PROTECTED))
    if name == "access_type":
        return _pick(rng, (AccessType.READ, AccessType.WRITE))
    if name == "app_name":
        return context.setdefault("app_name", _pick(rng, APP_NAMES))
    if name == "path":
        if event_name == "Download App":
            return f"/downloads/{context.setdefault('app_name', _pick(rng, APP_NAMES))}.pkg"
        if event_name == "List Of New Exec On The ECU":
            return f"/opt/apps/{context.setdefault('app_name', _pick(rng, APP_NAMES))}/bin"
        if event_name in ("Change In Data File Size", "Loading Map"):
            return context.setdefault("map_path", f"/data/maps/region_{int(rng.integers(1, 40)):02d}.map")
        if event_name == "Unknown Process Started":
            return f"/tmp/.{int(rng.integers(0, 2 ** 32)):08x}"
        return "/data/misc"
    if name == "vendor":
        if event_name == "Unknown Vendor Communication":
            return Vendor(f"vendor-{int(rng.integers(0, 2 ** 16)):04x}", False)
        return Vendor(_pick(rng, KNOWN_VENDORS), True)
    if name == "device_id":
        if "device_id" not in context:
            if rng.random() < 0.8:
                context["device_id"] = _pick(rng, KNOWN_DEVICES)
            else:
                context["device_id"] = f"dev-{int(rng.integers(0, 2 ** 16)):04x}"
        return context["device_id"]
    if name == "ports":
        count = int(rng.integers(1, 5))
        chosen = rng.choice(len(COMMON_PORTS), size=count, replace=False)
        return tuple(sorted(COMMON_PORTS[int(i)] for i in chosen))
    if name == "priority":
        return _pick(rng, (Priority.LOW, Priority.MEDIUM))
    if name == "target_ip":
        return _pick(rng, FLOW_TARGET_IPS)
    raise ValueError(f"no generator for attribute {name!r}")


def make_attrs(event_name: str, rng: np.random.Generator, fixed: Optional[Dict[str, Any]] = None,
               context: Optional[Dict[str, Any]] = None) -> EventAttrs:
    """
    Attributes for an event: fixed values first, random values for the rest.

    Args:
        event_name: Catalog event name
        rng: Random generator
        fixed: Attribute values that must be used as given
        context: Values shared across the events of one story (app name, device id)

    Returns:
        EventAttrs carrying exactly the attributes the event type requires
    """
    fixed = dict(fixed or {})
    context = {} if context is None else context
    values = {}
    for name in required_attributes(event_name):
        values[name] = fixed[name] if name in fixed else _attribute(name, event_name, context, rng)
    return EventAttrs(**values)


def render_story(name: str, start: float, rng: np.random.Generator) -> List[_PendingEvent]:
    """
    Lay out one story's events on the timeline.

    Args:
        name: Story name
        start: Time of the first event
        rng: Random generator

    Returns:
        Pending events with strictly increasing times
    """
    template = story(name).template
    context: Dict[str, Any] = {}
    events = []
    t = start
    for position, step in enumerate(template):
        if position > 0:
            t += rng.uniform(30.0, 180.0) if step.deferred else rng.uniform(0.5, 5.0)
        src, dst = _packets(step.event, rng)
        events.append(_PendingEvent(step.event, t, make_attrs(step.event, rng, step.fixed, context), src, dst))
    return events


def _finalize(pending: List[_PendingEvent], trajectory: Trajectory) -> Tuple[Event, ...]:
    return tuple(
        Event(
            event_type=event_type(p.name),
            t=float(p.t),
            location=trajectory.location(p.t),
            velocity=trajectory.velocity(p.t),
            src_packets=p.src_packets,
            dst_packets=p.dst_packets,
            attrs=p.attrs,
        )
        for p in pending
    )


def _new_drive_id(rng: np.random.Generator) -> str:
    return f"drive-{int(rng.integers(0, 2 ** 48)):012x}"


def generate_drive(vehicle_id: str, rng: np.random.Generator, config: Optional[SimConfig] = None,
                   drive_id: Optional[str] = None) -> Drive:
    """
    Generate one benign drive.

    The drive opens with an entry story and closes with the exit story; interior
    stories are drawn from the catalog in between. A drawn drive cancellation
    replaces the whole drive with a cancellation story.

    Args:
        vehicle_id: Vehicle the drive belongs to
        rng: Seeded random generator
        config: Simulation parameters (defaults to SimConfig())
        drive_id: Drive identifier (random when omitted)

    Returns:
        Benign Drive
    """
    config = config or SimConfig()
    drive_id = drive_id or _new_drive_id(rng)
    t = rng.uniform(0.5, 3.0)
    origin = (float(rng.uniform(-5000, 5000)), float(rng.uniform(-5000, 5000)))

    if rng.random() < config.noise.drive_cancellation:
        name = _pick(rng, CANCELLATION_STORIES)
        pending = render_story(name, t, rng)
        parked = Trajectory(0.0, 0.0, 0.0, origin=origin)
        return Drive(drive_id, vehicle_id, _finalize(pending, parked),
                     story_trace=(StoryTrace(name, 0, len(pending)),))

    pending: List[_PendingEvent] = []
    traces: List[StoryTrace] = []

    def place(name: str, start: float) -> float:
        events = render_story(name, start, rng)
        traces.append(StoryTrace(name, len(pending), len(pending) + len(events)))
        pending.extend(events)
        return events[-1].t

    t = place(_pick(rng, ENTRY_STORIES), t)
    moving_from = t + rng.uniform(2.0, 10.0)
    duration = rng.uniform(*config.drive_duration)

    n_interior = int(rng.poisson(config.story_rate * duration / 60.0)) if config.story_rate > 0 else 0
    if n_interior:
        probabilities = config.interior_probabilities()
        mean_gap = 60.0 / config.story_rate
        for _ in range(n_interior):
            name = INTERIOR_STORIES[int(rng.choice(len(INTERIOR_STORIES), p=probabilities))]
            t = place(name, t + 1.0 + rng.exponential(mean_gap))

    stop_at = max(t + rng.uniform(5.0, 30.0), moving_from + duration)
    place(EXIT_STORY, stop_at + rng.uniform(2.0, 10.0))

    trajectory = Trajectory(moving_from, stop_at, float(rng.uniform(30.0, 90.0)),
                            heading=float(rng.uniform(0, 2 * math.pi)), origin=origin)
    drive = Drive(drive_id, vehicle_id, _finalize(pending, trajectory), story_trace=tuple(traces))
    return inject_noise(drive, config.noise, rng)


def interpolate_kinematics(before: Event, after: Optional[Event], t: float) -> Tuple[Tuple[float, float], float]:
    """
    Location and velocity for a new event placed between two existing ones.

    Args:
        before: Event preceding the insertion point
        after: Event following the insertion point (None at the end of a drive)
        t: Time of the new event

    Returns:
        (location, velocity) linearly interpolated in time
    """
    if after is None or after.t <= before.t:
        return before.location, before.velocity
    w = (t - before.t) / (after.t - before.t)
    location = (before.location[0] + w * (after.location[0] - before.location[0]),
                before.location[1] + w * (after.location[1] - before.location[1]))
    return location, before.velocity + w * (after.velocity - before.velocity)


def spread_times(low: float, high: float, count: int, rng: np.random.Generator) -> List[float]:
    """Strictly increasing times strictly inside (low, high)."""
    slots = np.arange(1, count + 1) + rng.uniform(-0.4, 0.4, size=count)
    return [float(low + (high - low) * s / (count + 1)) for s in slots]


@dataclass
class _NoiseUnit:
    """Noise events that must stay together inside one gap."""
    events: List[Tuple[str, EventAttrs, Tuple[int, int]]]
    story: Optional[str] = None


def _noise_units(config: NoiseConfig, n_gaps: int, rng: np.random.Generator) -> List[Tuple[int, _NoiseUnit]]:
    units: List[Tuple[int, _NoiseUnit]] = []

    def gap() -> int:
        return int(rng.integers(n_gaps))

    def single(name: str, attrs: EventAttrs, mean: float = MEAN_PACKETS) -> _NoiseUnit:
        return _NoiseUnit([(name, attrs, _packets(name, rng, mean))])

    if rng.random() < config.network_usage:
        for _ in range(int(rng.integers(1, 4))):
            units.append((gap(), single("Network Usage", EventAttrs(), SPIKE_PACKETS)))
    if rng.random() < config.open_flows:
        for _ in range(int(rng.integers(1, 3))):
            target = _pick(rng, (GPS_TARGET_IP, WEATHER_TARGET_IP))
            units.append((gap(), single("Open Flows", EventAttrs(target_ip=target, priority=Priority.LOW))))
    if rng.random() < config.bluetooth:
        device = f"bt-{int(rng.integers(0, 2 ** 16)):04x}"
        first, second = sorted((gap(), gap()))
        connect = single("Bluetooth Device Connected", EventAttrs(device_id=device))
        disconnect = single("Bluetooth Device Disconnected", EventAttrs(device_id=device))
        if first == second:
            units.append((first, _NoiseUnit(connect.events + disconnect.events)))
        else:
            units.append((first, connect))
            units.append((second, disconnect))
    if rng.random() < config.usb:
        if rng.random() < 0.5:
            middle = ("File Access", EventAttrs(file_type=FileType.PUBLIC, access_type=AccessType.READ))
        else:
            middle = ("Authentication Process", EventAttrs())
        names = [("USB Insert", EventAttrs()), middle, ("USB Extract", EventAttrs())]
        units.append((gap(), _NoiseUnit([(n, a, _packets(n, rng)) for n, a in names])))
    if rng.random() < config.usb_failure:
        # Rejected device: extracted again without authentication.
        names = ("USB Insert", "USB Extract")
        units.append((gap(), _NoiseUnit([(n, EventAttrs(), _packets(n, rng)) for n in names])))
    if rng.random() < config.ports:
        ports = make_attrs("Open Ports", rng).ports
        unit = single("Open Ports", EventAttrs(ports=ports))
        if len(ports) > 1 and rng.random() < 0.5:
            remaining = ports[:-1]
            unit.events.append(("Open Ports", EventAttrs(ports=remaining), _packets("Open Ports", rng)))
        units.append((gap(), unit))
    if rng.random() < config.file_access:
        for _ in range(int(rng.integers(1, 3))):
            attrs = EventAttrs(file_type=_pick(rng, (FileType.PUBLIC, FileType.PROTECTED)),
                               access_type=_pick(rng, (AccessType.READ, AccessType.WRITE)))
            units.append((gap(), single("File Access", attrs)))
    if rng.random() < config.music:
        name = _pick(rng, MUSIC_NOISE_STORIES)
        context: Dict[str, Any] = {}
        events = []
        for step in story(name).template:
            events.append((step.event, make_attrs(step.event, rng, step.fixed, context), _packets(step.event, rng)))
        units.append((gap(), _NoiseUnit(events, story=name)))
    return units


def inject_noise(drive: Drive, config: NoiseConfig, rng: np.random.Generator) -> Drive:
    """
    Interleave noise events into a benign drive.

    Noise lands only in the gaps between stories, so no story is split; paired
    events (USB insert/extract, Bluetooth connect/disconnect) keep their order.

    Args:
        drive: Benign drive with a story trace
        config: Noise probabilities
        rng: Random generator

    Returns:
        Benign drive with noise events added
    """
    traces = sorted(drive.story_trace, key=lambda trace: trace.start)
    if len(traces) < 2:
        return drive
    n_gaps = len(traces) - 1
    units = _noise_units(config, n_gaps, rng)
    if not units:
        return drive

    events = list(drive.events)
    placed: List[Tuple[float, int, Event]] = []
    new_traces: List[Tuple[str, List[float]]] = []
    for g in range(n_gaps):
        in_gap = [unit for gap_index, unit in units if gap_index == g]
        if not in_gap:
            continue
        next_start = traces[g + 1].start
        before, after = events[next_start - 1], events[next_start]
        edges = [before.t] + spread_times(before.t, after.t, len(in_gap) - 1, rng) + [after.t]
        for k, unit in enumerate(in_gap):
            times = spread_times(edges[k], edges[k + 1], len(unit.events), rng)
            for t, (name, attrs, (src, dst)) in zip(times, unit.events):
                location, velocity = interpolate_kinematics(before, after, t)
                placed.append((t, 1, Event(event_type(name), t, location, velocity, src, dst, attrs)))
            if unit.story is not None:
                new_traces.append((unit.story, times))

    merged = sorted([(e.t, 0, i, e) for i, e in enumerate(events)] +
                    [(t, 1, -1, e) for t, _, e in placed], key=lambda item: item[0])
    index_map = {}
    for new_index, (_, _, old_index, _) in enumerate(merged):
        if old_index >= 0:
            index_map[old_index] = new_index
    new_events = tuple(item[3] for item in merged)
    times_index = {item[3].t: k for k, item in enumerate(merged)}

    story_trace = [StoryTrace(trace.name, index_map[trace.start], index_map[trace.end - 1] + 1)
                   for trace in drive.story_trace]
    for name, times in new_traces:
        story_trace.append(StoryTrace(name, times_index[times[0]], times_index[times[-1]] + 1))
    story_trace.sort(key=lambda trace: trace.start)
    return Drive(drive.drive_id, drive.vehicle_id, new_events, drive.label, drive.attack_index,
                 tuple(story_trace))


def _generate_indexed(index: int, config: SimConfig) -> Drive:
    rng = np.random.default_rng([config.seed, index])
    vehicle_id = f"vehicle-{index % config.n_vehicles:03d}"
    return generate_drive(vehicle_id, rng, config, drive_id=f"drive-{index:05d}")


def generate_fleet(config: SimConfig, jobs: int = 1, progress: bool = False) -> List[Drive]:
    """
    Generate a benign fleet dataset.

    Each drive uses its own random stream derived from (seed, drive index), so
    serial and parallel runs produce identical datasets.

    Args:
        config: Simulation parameters
        jobs: Number of parallel workers
        progress: Show a progress bar

    Returns:
        List of config.n_drives benign drives
    """
    logger.info(f"Simulating {config.n_drives} drives for {config.n_vehicles} vehicles (seed={config.seed})")
    indices = tqdm(range(config.n_drives), desc="simulate", disable=not progress)
    if jobs == 1:
        drives = [_generate_indexed(i, config) for i in indices]
    else:
        drives = Parallel(n_jobs=jobs)(delayed(_generate_indexed)(i, config) for i in indices)
    cancelled = sum(1 for d in drives if d.story_trace and d.story_trace[0].name in CANCELLATION_STORIES)
    logger.info(f"Simulated {len(drives)} drives ({cancelled} cancelled, "
                f"{sum(len(d) for d in drives)} events)")
    return drives
