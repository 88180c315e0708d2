"""
Attack injection: turns benign drives into labeled anomalous drives.

Every injector leaves the events before the attack index untouched and keeps
timestamps strictly increasing.
"""

import logging
import math
from dataclasses import replace
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from utils.errors import InsufficientDrivesError, NoAnchorStoryError
from utils.events import (
    ORDER_CONSTRAINTS, AccessType, AttackKind, Drive, Event, EventAttrs, FileType, StoryTrace,
    event_type, story,
)
from simulation.simulator import MEAN_PACKETS, _packets, interpolate_kinematics, make_attrs

logger = logging.getLogger(__name__)

ATTACK_SPIKE_PACKETS = 400.0

ANCHOR_STORIES: Dict[AttackKind, Tuple[str, ...]] = {
    AttackKind.OUT_OF_ORDER: tuple(ORDER_CONSTRAINTS),
    AttackKind.USB_FIRMWARE_SWAP: ("Info System Upgrade",),
    AttackKind.UNKNOWN_VENDOR: ("Download Map",),
    AttackKind.OTA_MALICIOUS: ("OTA Update",),
    AttackKind.MALICIOUS_APP: ("Install App",),
}

NewEvent = Tuple[str, EventAttrs, Tuple[int, int]]


def anchors(drive: Drive, kind: AttackKind) -> List[StoryTrace]:
    """Story occurrences in the drive the attack can be anchored on."""
    names = ANCHOR_STORIES[AttackKind(kind)]
    return [trace for trace in drive.story_trace if trace.name in names]


def is_compatible(drive: Drive, kind: AttackKind) -> bool:
    return drive.is_benign and bool(anchors(drive, kind))


def _choose_anchor(drive: Drive, kind: AttackKind, rng: np.random.Generator) -> StoryTrace:
    candidates = anchors(drive, kind)
    if not candidates:
        raise NoAnchorStoryError(kind.value, " or ".join(ANCHOR_STORIES[kind]), drive.drive_id)
    return candidates[int(rng.integers(len(candidates)))]


def _insert_after(drive: Drive, position: int, new_events: Sequence[NewEvent]) -> Tuple[Event, ...]:
    """Events with new_events placed evenly between events[position] and the next event."""
    events = list(drive.events)
    before = events[position]
    after = events[position + 1] if position + 1 < len(events) else None
    end = after.t if after is not None else before.t + 2.0 * (len(new_events) + 1)
    inserted = []
    for j, (name, attrs, (src, dst)) in enumerate(new_events, start=1):
        t = before.t + (end - before.t) * j / (len(new_events) + 1)
        location, velocity = interpolate_kinematics(before, after, t)
        inserted.append(Event(event_type(name), t, location, velocity, src, dst, attrs))
    return tuple(events[:position + 1] + inserted + events[position + 1:])


def _shift_traces(traces: Sequence[StoryTrace], position: int, count: int) -> Tuple[StoryTrace, ...]:
    """Story trace after inserting count events right after index position."""
    shifted = []
    for trace in traces:
        if trace.start > position:
            shifted.append(StoryTrace(trace.name, trace.start + count, trace.end + count))
        elif position < trace.end - 1:
            shifted.append(StoryTrace(trace.name, trace.start, trace.end + count))
        else:
            shifted.append(trace)
    return tuple(shifted)


def _labeled(drive: Drive, kind: AttackKind, events: Tuple[Event, ...], attack_index: int,
             traces: Optional[Tuple[StoryTrace, ...]] = None) -> Drive:
    return Drive(
        drive_id=drive.drive_id,
        vehicle_id=drive.vehicle_id,
        events=events,
        label=kind.value,
        attack_index=attack_index,
        story_trace=drive.story_trace if traces is None else traces,
    )


def _inserting(drive: Drive, kind: AttackKind, position: int, new_events: Sequence[NewEvent]) -> Drive:
    events = _insert_after(drive, position, new_events)
    traces = _shift_traces(drive.story_trace, position, len(new_events))
    return _labeled(drive, kind, events, position + 1, traces)


def _new(name: str, rng: np.random.Generator, mean: float = MEAN_PACKETS, **fixed) -> NewEvent:
    return name, make_attrs(name, rng, fixed), _packets(name, rng, mean)


def out_of_order(drive: Drive, rng: np.random.Generator) -> Drive:
    """Move a story event in front of an event it must follow."""
    trace = _choose_anchor(drive, AttackKind.OUT_OF_ORDER, rng)
    constraints = ORDER_CONSTRAINTS[trace.name]
    anchor, moved = constraints[int(rng.integers(len(constraints)))]
    start = trace.start
    events = list(drive.events)
    window = events[start + anchor:start + moved + 1]
    reordered = [window[-1]] + window[:-1]
    for offset, (slot, content) in enumerate(zip(window, reordered)):
        events[start + anchor + offset] = replace(
            content, t=slot.t, location=slot.location, velocity=slot.velocity)
    return _labeled(drive, AttackKind.OUT_OF_ORDER, tuple(events), start + anchor)


def usb_firmware_swap(drive: Drive, rng: np.random.Generator) -> Drive:
    """Swap the USB stick right after authentication."""
    trace = _choose_anchor(drive, AttackKind.USB_FIRMWARE_SWAP, rng)
    authentication = trace.start + 1
    return _inserting(drive, AttackKind.USB_FIRMWARE_SWAP, authentication,
                      [_new("USB Extract", rng), _new("USB Insert", rng)])


def unknown_vendor(drive: Drive, rng: np.random.Generator) -> Drive:
    """Map download talks to an unknown vendor, then spikes traffic and spawns a process."""
    trace = _choose_anchor(drive, AttackKind.UNKNOWN_VENDOR, rng)
    position = trace.start
    original = drive.events[position]
    name = "Unknown Vendor Communication"
    spoofed = Event(event_type(name), original.t, original.location, original.velocity,
                    original.src_packets, original.dst_packets, make_attrs(name, rng))
    follow_up = [_new("Network Usage", rng, ATTACK_SPIKE_PACKETS), _new("Unknown Process Started", rng)]
    if rng.random() < 0.5:
        follow_up.reverse()
    events = list(_insert_after(drive, position, follow_up))
    events[position] = spoofed
    traces = _shift_traces(drive.story_trace, position, len(follow_up))
    return _labeled(drive, AttackKind.UNKNOWN_VENDOR, tuple(events), position, traces)


def ota_malicious(drive: Drive, rng: np.random.Generator) -> Drive:
    """Malicious OTA update installs an app and talks abnormally."""
    trace = _choose_anchor(drive, AttackKind.OTA_MALICIOUS, rng)
    finish_update = trace.start + story("OTA Update").event_names.index("Finish Firmware Update")
    return _inserting(drive, AttackKind.OTA_MALICIOUS, finish_update, [
        _new("Download App", rng),
        _new("List Of New Exec On The ECU", rng),
        _new("Abnormal NW Behavior", rng, ATTACK_SPIKE_PACKETS),
    ])


def malicious_app(drive: Drive, rng: np.random.Generator) -> Drive:
    """Freshly installed app touches root files, the OS and the network."""
    trace = _choose_anchor(drive, AttackKind.MALICIOUS_APP, rng)
    access = AccessType.WRITE if rng.random() < 0.5 else AccessType.EXECUTE
    return _inserting(drive, AttackKind.MALICIOUS_APP, trace.end - 1, [
        _new("File Access", rng, file_type=FileType.ROOT, access_type=access),
        _new("Abnormal OS Behavior", rng),
        _new("Network Usage", rng, ATTACK_SPIKE_PACKETS),
    ])


INJECTORS = {
    AttackKind.OUT_OF_ORDER: out_of_order,
    AttackKind.USB_FIRMWARE_SWAP: usb_firmware_swap,
    AttackKind.UNKNOWN_VENDOR: unknown_vendor,
    AttackKind.OTA_MALICIOUS: ota_malicious,
    AttackKind.MALICIOUS_APP: malicious_app,
}


def inject_attack(drive: Drive, kind: Union[AttackKind, str], rng: np.random.Generator) -> Drive:
    """
    Inject one attack scenario into a benign drive.

    Args:
        drive: Benign source drive
        kind: Attack scenario
        rng: Random generator

    Returns:
        Drive labeled with the attack kind, attack_index at the first changed event

    Raises:
        NoAnchorStoryError: If the drive lacks a story the attack needs
    """
    kind = AttackKind(kind)
    if not drive.is_benign:
        raise ValueError(f"drive {drive.drive_id} is already labeled {drive.label}")
    return INJECTORS[kind](drive, rng)


def apportion(total: int, weights: Mapping[AttackKind, float]) -> Dict[AttackKind, int]:
    """
    Split a count across attack kinds by largest remainder.

    Args:
        total: Number of anomalous drives
        weights: Non-negative weight per attack kind

    Returns:
        Count per attack kind summing to total
    """
    kinds = [k for k in AttackKind if weights.get(k, 0.0) > 0]
    if total and not kinds:
        raise ValueError("attack kind weights must have positive mass")
    mass = sum(weights[k] for k in kinds)
    exact = {k: total * weights[k] / mass for k in kinds}
    counts = {k: int(math.floor(exact[k])) for k in kinds}
    leftover = total - sum(counts.values())
    by_remainder = sorted(kinds, key=lambda k: (-(exact[k] - counts[k]), list(AttackKind).index(k)))
    for k in by_remainder[:leftover]:
        counts[k] += 1
    return counts


def build_test_set(benign: Sequence[Drive], mix: float, kinds: Optional[Mapping[Union[AttackKind, str], float]],
                   rng: np.random.Generator, n_drives: Optional[int] = None) -> List[Drive]:
    """
    Build a labeled test set of benign and anomalous drives.

    Every source drive is used at most once, either kept benign or turned into
    one anomalous drive.

    Args:
        benign: Pool of benign source drives
        mix: Fraction of anomalous drives in [0, 1]
        kinds: Weight per attack kind (None for uniform over all kinds)
        rng: Random generator
        n_drives: Size of the test set (defaults to the pool size)

    Returns:
        Deterministically shuffled list of drives

    Raises:
        InsufficientDrivesError: If the pool cannot supply the requested drives
    """
    if not 0.0 <= mix <= 1.0:
        raise ValueError(f"mix {mix} not in [0, 1]")
    pool = [d for d in benign if d.is_benign]
    if len(pool) < len(benign):
        logger.warning(f"Ignoring {len(benign) - len(pool)} non-benign drives in the source pool")
    n_drives = len(pool) if n_drives is None else n_drives
    if n_drives > len(pool):
        raise InsufficientDrivesError(f"requested {n_drives} drives from a pool of {len(pool)}")

    weights = {AttackKind(k): float(w) for k, w in (kinds or {k: 1.0 for k in AttackKind}).items()}
    n_anomalous = int(math.floor(mix * n_drives + 0.5))
    counts = apportion(n_anomalous, weights)

    order = [int(i) for i in rng.permutation(len(pool))]
    used = set()
    anomalous: List[Drive] = []
    by_scarcity = sorted(counts, key=lambda k: (sum(is_compatible(pool[i], k) for i in order),
                                                list(AttackKind).index(k)))
    for kind in by_scarcity:
        chosen = [i for i in order if i not in used and is_compatible(pool[i], kind)][:counts[kind]]
        if len(chosen) < counts[kind]:
            raise InsufficientDrivesError(
                f"{kind.value}: need {counts[kind]} compatible drives, found {len(chosen)}")
        for i in chosen:
            used.add(i)
            seed = int(rng.integers(0, 2 ** 63))
            attacked = inject_attack(pool[i], kind, np.random.default_rng(seed))
            anomalous.append(replace(attacked, drive_id=f"{attacked.drive_id}-{kind.value}"))

    remaining = [i for i in order if i not in used]
    n_benign = n_drives - n_anomalous
    if len(remaining) < n_benign:
        raise InsufficientDrivesError(f"need {n_benign} benign drives, {len(remaining)} left")
    test_set = [pool[i] for i in remaining[:n_benign]] + anomalous
    shuffled = [test_set[int(i)] for i in rng.permutation(len(test_set))]
    logger.info(f"Built test set: {n_benign} benign, {n_anomalous} anomalous "
                f"({', '.join(f'{k.value}={c}' for k, c in counts.items())})")
    return shuffled
