"""
Event, drive and story domain model for connected-vehicle event streams.

Event types and their attributes follow the collector's event catalog; stories
are the named event templates drives are composed of.
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Mapping, NamedTuple, Optional, Tuple
import logging

from utils.errors import UnknownEventTypeError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EventType:
    """One entry of the event catalog."""
    id: int
    name: str

    def __str__(self) -> str:
        return self.name


EVENT_NAMES: Tuple[str, ...] = (
    "Login",
    "Door Unlocked",
    "Door Opened",
    "Door Closed",
    "Fasten Seatbelt",
    "Alarm Disarming",
    "Ignition",
    "Release Seatbelt",
    "Engine Stop",
    "Door Locked",
    "Alarm Arming",
    "Logout",
    "USB Insert",
    "Authentication Process",
    "Running Exe File From USB",
    "USB Extract",
    "Running App",
    "Open Flows",
    "Download App",
    "List Of New Exec On The ECU",
    "Network Usage",
    "Abnormal CAN Behavior",
    "Abnormal NW Behavior",
    "Abnormal OS Behavior",
    "Main Router Login",
    "Start Download Firmware Updates",
    "Finish Download Firmware Updates",
    "Request Update",
    "Start Firmware Update",
    "Finish Firmware Update",
    "Main Router Logout",
    "Beacons",
    "OEM Communication",
    "File Access",
    "Change In Data File Size",
    "Map Process Started",
    "Loading Map",
    "Unknown Process Started",
    "Unknown Vendor Communication",
    "GPS Access",
    "Open Ports",
    "Bluetooth Device Connected",
    "Bluetooth Device Disconnected",
)

EVENT_TYPES: Tuple[EventType, ...] = tuple(EventType(i, name) for i, name in enumerate(EVENT_NAMES))
_BY_NAME: Dict[str, EventType] = {et.name: et for et in EVENT_TYPES}
N_EVENT_TYPES = len(EVENT_TYPES)

# Mechanical events carry no network traffic.
MECHANICAL_EVENTS = frozenset({
    "Door Unlocked", "Door Opened", "Door Closed", "Fasten Seatbelt", "Alarm Disarming",
    "Release Seatbelt", "Engine Stop", "Alarm Arming",
})


def event_type(name: str) -> EventType:
    """
    Look up an event type by catalog name.

    Args:
        name: Catalog name, e.g. "File Access"

    Returns:
        The matching EventType

    Raises:
        UnknownEventTypeError: If the name is not in the catalog
    """
    try:
        return _BY_NAME[name]
    except KeyError:
        raise UnknownEventTypeError(name) from None


class FileType(str, Enum):
    ROOT = "root"
    PROTECTED = "protected"
    PUBLIC = "public"


class AccessType(str, Enum):
    READ = "read"
    WRITE = "write"
    EXECUTE = "execute"


class Priority(str, Enum):
    LOW = "low"
    MEDIUM = "medium"
    HIGH = "high"


@dataclass(frozen=True)
class Vendor:
    name: str
    known: bool


ATTRIBUTE_NAMES: Tuple[str, ...] = (
    "file_type", "access_type", "app_name", "path", "vendor",
    "device_id", "ports", "priority", "target_ip",
)

# Typed extras per event type; every other attribute must be absent.
EVENT_ATTRIBUTES: Dict[str, Tuple[str, ...]] = {
    "Running Exe File From USB": ("file_type",),
    "Open Flows": ("target_ip", "priority"),
    "Download App": ("app_name", "path"),
    "List Of New Exec On The ECU": ("app_name", "path"),
    "OEM Communication": ("vendor",),
    "File Access": ("file_type", "access_type"),
    "Change In Data File Size": ("file_type", "path"),
    "Loading Map": ("path",),
    "Unknown Process Started": ("path",),
    "Unknown Vendor Communication": ("vendor",),
    "Open Ports": ("ports",),
    "Bluetooth Device Connected": ("device_id",),
    "Bluetooth Device Disconnected": ("device_id",),
}


def required_attributes(name: str) -> Tuple[str, ...]:
    """Attributes an event of the given type must carry."""
    event_type(name)
    return EVENT_ATTRIBUTES.get(name, ())


@dataclass(frozen=True)
class EventAttrs:
    """Optional typed extras of an event."""
    file_type: Optional[FileType] = None
    access_type: Optional[AccessType] = None
    app_name: Optional[str] = None
    path: Optional[str] = None
    vendor: Optional[Vendor] = None
    device_id: Optional[str] = None
    ports: Optional[Tuple[int, ...]] = None
    priority: Optional[Priority] = None
    target_ip: Optional[str] = None

    def present(self) -> Tuple[str, ...]:
        """Names of the attributes that are set."""
        return tuple(name for name in ATTRIBUTE_NAMES if getattr(self, name) is not None)


NO_ATTRS = EventAttrs()


@dataclass(frozen=True)
class Event:
    """A timestamped occurrence in a vehicle."""
    event_type: EventType
    t: float
    location: Tuple[float, float] = (0.0, 0.0)
    velocity: float = 0.0
    src_packets: int = 0
    dst_packets: int = 0
    attrs: EventAttrs = NO_ATTRS

    @property
    def name(self) -> str:
        return self.event_type.name


class AttackKind(str, Enum):
    """Attack scenarios injected into benign drives."""
    OUT_OF_ORDER = "out_of_order"
    USB_FIRMWARE_SWAP = "usb_firmware_swap"
    UNKNOWN_VENDOR = "unknown_vendor"
    OTA_MALICIOUS = "ota_malicious"
    MALICIOUS_APP = "malicious_app"


BENIGN = "benign"
LABELS: Tuple[str, ...] = (BENIGN,) + tuple(kind.value for kind in AttackKind)


class StoryTrace(NamedTuple):
    """Story occurrence inside a drive; events[start:end] belong to it."""
    name: str
    start: int
    end: int


@dataclass(frozen=True)
class Drive:
    """One trip's ordered event sequence."""
    drive_id: str
    vehicle_id: str
    events: Tuple[Event, ...]
    label: str = BENIGN
    attack_index: Optional[int] = None
    story_trace: Tuple[StoryTrace, ...] = ()

    def __len__(self) -> int:
        return len(self.events)

    @property
    def is_benign(self) -> bool:
        return self.label == BENIGN

    @property
    def event_names(self) -> List[str]:
        return [event.name for event in self.events]

    @property
    def times(self) -> List[float]:
        return [event.t for event in self.events]

    def stories(self, name: str) -> List[StoryTrace]:
        """Occurrences of a story in this drive."""
        return [trace for trace in self.story_trace if trace.name == name]


@dataclass(frozen=True)
class StoryStep:
    """One template position: event type plus fixed attribute values."""
    event: str
    fixed: Mapping[str, Any] = field(default_factory=dict)
    deferred: bool = False


@dataclass(frozen=True)
class Story:
    """Named template sequence of events."""
    name: str
    template: Tuple[StoryStep, ...]

    @property
    def event_names(self) -> List[str]:
        return [step.event for step in self.template]

    def __len__(self) -> int:
        return len(self.template)


def _story(name: str, *steps) -> Story:
    return Story(name, tuple(step if isinstance(step, StoryStep) else StoryStep(step) for step in steps))


_PUBLIC_READ = {"file_type": FileType.PUBLIC, "access_type": AccessType.READ}
_PUBLIC_WRITE = {"file_type": FileType.PUBLIC, "access_type": AccessType.WRITE}

GPS_TARGET_IP = "130.211.9.172"
WEATHER_TARGET_IP = "46.228.47.115"

STORIES: Dict[str, Story] = {s.name: s for s in (
    _story("Car Entry 1",
           "Door Unlocked", "Door Opened", "Door Closed", "Fasten Seatbelt",
           "Alarm Disarming", "Ignition", "Login"),
    _story("Car Entry 2",
           "Door Unlocked", "Door Opened", "Door Closed", "Login", "Fasten Seatbelt",
           "Release Seatbelt", "Door Opened", "Door Closed", "Fasten Seatbelt",
           "Alarm Disarming", "Ignition"),
    _story("Car Exit",
           "Engine Stop", "Release Seatbelt", "Door Opened", "Door Closed",
           "Door Locked", "Alarm Arming", "Logout"),
    _story("Drive Cancellation 1",
           "Door Unlocked", "Door Opened", "Door Closed", "Door Locked"),
    _story("Drive Cancellation 2",
           "Door Unlocked", "Door Opened", "Door Closed", "Alarm Disarming",
           "Door Opened", "Door Closed", "Door Locked", "Alarm Arming"),
    _story("Info System Upgrade",
           "USB Insert", "Authentication Process",
           StoryStep("Running Exe File From USB", {"file_type": FileType.PROTECTED}),
           StoryStep("File Access", {"file_type": FileType.PROTECTED, "access_type": AccessType.WRITE}),
           "USB Extract"),
    _story("OTA Update",
           "Main Router Login", "Start Download Firmware Updates", "Finish Download Firmware Updates",
           "Request Update", "Start Firmware Update", "Finish Firmware Update", "Main Router Logout"),
    _story("Play Music",
           "Running App", "Open Flows", "Network Usage"),
    _story("Install App",
           "Open Flows", "Download App", StoryStep("File Access", _PUBLIC_WRITE),
           "Running App", "List Of New Exec On The ECU"),
    _story("Download Map",
           "OEM Communication", StoryStep("File Access", _PUBLIC_WRITE),
           StoryStep("Change In Data File Size", {"file_type": FileType.PUBLIC}),
           "Map Process Started", "Loading Map"),
    _story("Music From USB 1",
           "USB Insert", StoryStep("File Access", _PUBLIC_READ),
           StoryStep("USB Extract", deferred=True)),
    _story("Music From USB 2",
           "USB Insert", "USB Extract", "USB Insert", StoryStep("File Access", _PUBLIC_READ),
           StoryStep("USB Extract", deferred=True)),
    _story("Music From USB 3",
           "USB Insert", "USB Extract", "USB Insert", StoryStep("USB Extract", deferred=True)),
    _story("Music From Mobile",
           "Bluetooth Device Connected", StoryStep("File Access", _PUBLIC_READ),
           StoryStep("Bluetooth Device Disconnected", deferred=True)),
    _story("Connected Device",
           "Bluetooth Device Connected"),
    _story("Open Flows GPS",
           StoryStep("Open Flows", {"target_ip": GPS_TARGET_IP, "priority": Priority.LOW})),
    _story("Open Flows Weather",
           StoryStep("Open Flows", {"target_ip": WEATHER_TARGET_IP, "priority": Priority.LOW})),
    _story("GPS",
           "GPS Access"),
    _story("Open Ports",
           "Open Ports"),
)}

ENTRY_STORIES: Tuple[str, ...] = ("Car Entry 1", "Car Entry 2")
EXIT_STORY = "Car Exit"
CANCELLATION_STORIES: Tuple[str, ...] = ("Drive Cancellation 1", "Drive Cancellation 2")
INTERIOR_STORIES: Tuple[str, ...] = (
    "Info System Upgrade", "OTA Update", "Play Music", "Install App", "Download Map",
    "Music From USB 1", "Music From USB 2", "Music From USB 3", "Music From Mobile",
    "Connected Device", "Open Flows GPS", "Open Flows Weather", "GPS", "Open Ports",
)

# (anchor position, moved position) pairs: moving the later step in front of the
# anchor yields an order no benign drive produces.
ORDER_CONSTRAINTS: Dict[str, Tuple[Tuple[int, int], ...]] = {
    "Car Entry 1": ((3, 5), (4, 5), (0, 1)),
    "Car Entry 2": ((8, 10), (9, 10), (0, 1)),
    "Car Exit": ((0, 2), (3, 4)),
    "Info System Upgrade": ((1, 2),),
    "OTA Update": ((1, 4), (3, 4)),
    "Install App": ((1, 3),),
    "Download Map": ((0, 4),),
}


def story(name: str) -> Story:
    """Look up a story template by name."""
    try:
        return STORIES[name]
    except KeyError:
        raise KeyError(f"unknown story: {name!r}") from None


class Violation(NamedTuple):
    """A broken drive/event invariant."""
    index: Optional[int]
    rule: str
    message: str

    def __str__(self) -> str:
        where = f"index {self.index}" if self.index is not None else "drive"
        return f"{self.rule} at {where}: {self.message}"


def validate_event(event: Event, index: Optional[int] = None) -> List[Violation]:
    """
    Check the invariants of a single event.

    Args:
        event: Event to check
        index: Position of the event inside its drive, used in violations

    Returns:
        List of violations (empty when the event is valid)
    """
    violations = []
    if not event.t >= 0:
        violations.append(Violation(index, "negative_time", f"t={event.t}"))
    if not event.velocity >= 0:
        violations.append(Violation(index, "negative_velocity", f"velocity={event.velocity}"))
    if event.src_packets < 0 or event.dst_packets < 0:
        violations.append(Violation(
            index, "negative_packets", f"src={event.src_packets} dst={event.dst_packets}"))

    required = set(EVENT_ATTRIBUTES.get(event.name, ()))
    present = set(event.attrs.present())
    for name in sorted(required - present):
        violations.append(Violation(index, "missing_attribute", f"{event.name} lacks {name}"))
    for name in sorted(present - required):
        violations.append(Violation(index, "unexpected_attribute", f"{event.name} carries {name}"))
    if event.attrs.ports is not None and any(p < 0 or p > 65535 for p in event.attrs.ports):
        violations.append(Violation(index, "invalid_attribute", f"ports out of range: {event.attrs.ports}"))
    return violations


def validate_drive(drive: Drive) -> List[Violation]:
    """
    Check every Drive and Event invariant.

    Args:
        drive: Drive to check

    Returns:
        List of violations, each naming the event index and rule; empty iff valid
    """
    violations: List[Violation] = []
    previous_t = None
    for i, event in enumerate(drive.events):
        violations.extend(validate_event(event, i))
        if previous_t is not None and not event.t > previous_t:
            violations.append(Violation(
                i, "non_monotonic_time", f"t={event.t} does not follow t={previous_t}"))
        previous_t = event.t

    if drive.label not in LABELS:
        violations.append(Violation(None, "unknown_label", f"label {drive.label!r}"))
    if drive.is_benign and drive.attack_index is not None:
        violations.append(Violation(drive.attack_index, "attack_index", "benign drive carries attack_index"))
    if not drive.is_benign:
        if drive.attack_index is None:
            violations.append(Violation(None, "attack_index", "anomalous drive lacks attack_index"))
        elif not 0 <= drive.attack_index < len(drive.events):
            violations.append(Violation(drive.attack_index, "attack_index", "attack_index out of bounds"))

    for trace in drive.story_trace:
        if trace.name not in STORIES:
            violations.append(Violation(trace.start, "story_trace", f"unknown story {trace.name!r}"))
            continue
        if not 0 <= trace.start < trace.end <= len(drive.events):
            violations.append(Violation(trace.start, "story_trace", f"{trace.name} range out of bounds"))
            continue
        if drive.is_benign:
            names = [e.name for e in drive.events[trace.start:trace.end]]
            if names != STORIES[trace.name].event_names:
                violations.append(Violation(
                    trace.start, "story_mismatch", f"events do not match {trace.name} template"))
    return violations


def nesting_violations(drive: Drive) -> List[Violation]:
    """
    Check that stateful event pairs are well nested.

    USB insert/extract, login/logout and ignition/engine stop each form a single
    slot; Bluetooth connect/disconnect pairs are tracked per device id. A slot
    left open at the end of the drive is allowed.

    Args:
        drive: Drive to check

    Returns:
        List of nesting violations
    """
    pairs = {
        "USB Insert": ("usb", True), "USB Extract": ("usb", False),
        "Login": ("login", True), "Logout": ("login", False),
        "Ignition": ("engine", True), "Engine Stop": ("engine", False),
    }
    open_slots: Dict[str, bool] = {}
    devices: Dict[str, bool] = {}
    violations = []
    for i, event in enumerate(drive.events):
        if event.name in pairs:
            slot, opening = pairs[event.name]
            if opening and open_slots.get(slot):
                violations.append(Violation(i, "nesting", f"{event.name} while {slot} already open"))
            elif not opening and not open_slots.get(slot):
                violations.append(Violation(i, "nesting", f"{event.name} without matching open"))
            open_slots[slot] = opening
        elif event.name == "Bluetooth Device Connected":
            devices[event.attrs.device_id] = True
        elif event.name == "Bluetooth Device Disconnected":
            if not devices.get(event.attrs.device_id):
                violations.append(Violation(
                    i, "nesting", f"disconnect of {event.attrs.device_id} before connect"))
            devices[event.attrs.device_id] = False
    return violations
