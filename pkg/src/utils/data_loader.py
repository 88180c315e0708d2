"""
Dataset file format and loader for simulated drive datasets.

A dataset file holds a header line followed by one drive per line; every line
is a self-describing JSON record, so files can be streamed straight into the
fleet service.
"""

import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Optional, Tuple, Union

import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from utils.errors import DatasetFormatError, UnknownEventTypeError
from utils.events import (
    AccessType, Drive, Event, EventAttrs, FileType, Priority, StoryTrace, Vendor, event_type,
)

logger = logging.getLogger(__name__)

FORMAT_NAME = "vehicle-drives"
FORMAT_VERSION = 1
HEADER = {"format": FORMAT_NAME, "version": FORMAT_VERSION}


class VendorRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str
    known: bool


class AttrsRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    file_type: Optional[FileType] = None
    access_type: Optional[AccessType] = None
    app_name: Optional[str] = None
    path: Optional[str] = None
    vendor: Optional[VendorRecord] = None
    device_id: Optional[str] = None
    ports: Optional[List[int]] = None
    priority: Optional[Priority] = None
    target_ip: Optional[str] = None


class EventRecord(BaseModel):
    """Wire/dataset form of one event."""
    model_config = ConfigDict(extra="forbid")

    type: str
    t: float
    x: float = 0.0
    y: float = 0.0
    velocity: float = 0.0
    src_packets: int = 0
    dst_packets: int = 0
    attrs: AttrsRecord = Field(default_factory=AttrsRecord)


class DriveRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    drive_id: str
    vehicle_id: str
    label: str
    attack_index: Optional[int] = None
    stories: List[Tuple[str, int, int]] = Field(default_factory=list)
    events: List[EventRecord] = Field(default_factory=list)


def event_to_record(event: Event) -> Dict[str, Any]:
    """Convert an event to its JSON-ready record."""
    attrs: Dict[str, Any] = {}
    for name in event.attrs.present():
        value = getattr(event.attrs, name)
        if isinstance(value, Vendor):
            value = {"name": value.name, "known": value.known}
        elif isinstance(value, tuple):
            value = list(value)
        elif hasattr(value, "value"):
            value = value.value
        attrs[name] = value
    return {
        "type": event.name,
        "t": float(event.t),
        "x": float(event.location[0]),
        "y": float(event.location[1]),
        "velocity": float(event.velocity),
        "src_packets": int(event.src_packets),
        "dst_packets": int(event.dst_packets),
        "attrs": attrs,
    }


def record_to_event(record: EventRecord) -> Event:
    """
    Convert a parsed event record to an Event.

    Raises:
        UnknownEventTypeError: If the record names an event outside the catalog
    """
    a = record.attrs
    attrs = EventAttrs(
        file_type=a.file_type,
        access_type=a.access_type,
        app_name=a.app_name,
        path=a.path,
        vendor=Vendor(a.vendor.name, a.vendor.known) if a.vendor is not None else None,
        device_id=a.device_id,
        ports=tuple(a.ports) if a.ports is not None else None,
        priority=a.priority,
        target_ip=a.target_ip,
    )
    return Event(
        event_type=event_type(record.type),
        t=record.t,
        location=(record.x, record.y),
        velocity=record.velocity,
        src_packets=record.src_packets,
        dst_packets=record.dst_packets,
        attrs=attrs,
    )


def drive_to_record(drive: Drive) -> Dict[str, Any]:
    """Convert a drive to its JSON-ready record."""
    return {
        "drive_id": drive.drive_id,
        "vehicle_id": drive.vehicle_id,
        "label": drive.label,
        "attack_index": drive.attack_index,
        "stories": [[trace.name, trace.start, trace.end] for trace in drive.story_trace],
        "events": [event_to_record(event) for event in drive.events],
    }


def record_to_drive(record: DriveRecord) -> Drive:
    """Convert a parsed drive record to a Drive."""
    return Drive(
        drive_id=record.drive_id,
        vehicle_id=record.vehicle_id,
        events=tuple(record_to_event(event) for event in record.events),
        label=record.label,
        attack_index=record.attack_index,
        story_trace=tuple(StoryTrace(name, start, end) for name, start, end in record.stories),
    )


def _dumps(record: Dict[str, Any]) -> str:
    return json.dumps(record, separators=(",", ":"), ensure_ascii=False)


def dumps_drive(drive: Drive) -> str:
    """Serialize one drive to a single dataset line (no newline)."""
    return _dumps(drive_to_record(drive))


def parse_drive_line(line: str, line_number: Optional[int] = None) -> Drive:
    """
    Parse one dataset line into a Drive.

    Args:
        line: JSON text of one drive record
        line_number: 1-based line number, used in error messages

    Raises:
        DatasetFormatError: Malformed record
        UnknownEventTypeError: Record names an unknown event type
    """
    try:
        record = DriveRecord.model_validate_json(line)
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(part) for part in first["loc"])
        raise DatasetFormatError(f"{where}: {first['msg']}", line_number) from None
    try:
        return record_to_drive(record)
    except UnknownEventTypeError as e:
        raise UnknownEventTypeError(e.name, line_number) from None


def write_dataset(drives: Iterable[Drive], path: Union[str, Path]) -> int:
    """
    Write drives to a dataset file.

    Args:
        drives: Drives to write
        path: Output file path

    Returns:
        Number of drives written
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(_dumps(HEADER) + "\n")
        for drive in drives:
            f.write(dumps_drive(drive) + "\n")
            count += 1
    logger.info(f"Wrote {count} drives to {path}")
    return count


def iter_dataset(path: Union[str, Path]) -> Iterator[Drive]:
    """
    Stream drives from a dataset file.

    Args:
        path: Dataset file path

    Yields:
        Drives in file order
    """
    path = Path(path)
    with open(path, "r", encoding="utf-8") as f:
        header_line = f.readline()
        if not header_line.strip():
            raise DatasetFormatError("missing dataset header", 1)
        try:
            header = json.loads(header_line)
        except json.JSONDecodeError as e:
            raise DatasetFormatError(f"invalid header: {e.msg}", 1) from None
        if not isinstance(header, dict) or header.get("format") != FORMAT_NAME:
            raise DatasetFormatError(f"not a {FORMAT_NAME} file", 1)
        if header.get("version") != FORMAT_VERSION:
            raise DatasetFormatError(f"unsupported version {header.get('version')!r}", 1)
        for line_number, line in enumerate(f, start=2):
            if not line.strip():
                continue
            yield parse_drive_line(line, line_number)


def read_dataset(path: Union[str, Path]) -> List[Drive]:
    """
    Read every drive of a dataset file.

    Args:
        path: Dataset file path

    Returns:
        List of drives in file order
    """
    try:
        drives = list(iter_dataset(path))
    except FileNotFoundError:
        logger.error(f"File not found: {path}")
        raise
    logger.info(f"Loaded {len(drives)} drives from {path}")
    return drives


def dataset_digest(drives: Iterable[Drive]) -> str:
    """SHA-256 of the dataset serialization of the drives."""
    digest = hashlib.sha256()
    digest.update((_dumps(HEADER) + "\n").encode("utf-8"))
    for drive in drives:
        digest.update((dumps_drive(drive) + "\n").encode("utf-8"))
    return digest.hexdigest()


class DataLoader:
    """Loader for drive dataset files."""

    def __init__(self, data_path: Union[str, Path] = "data/fleet.nd"):
        """
        Initialize DataLoader.

        Args:
            data_path: Path to the dataset file
        """
        self.data_path = Path(data_path)
        self.data: Optional[List[Drive]] = None

    def load_data(self) -> List[Drive]:
        """
        Load the dataset.

        Returns:
            List of drives
        """
        logger.info(f"Loading data from {self.data_path}")
        self.data = read_dataset(self.data_path)
        return self.data

    def summary(self) -> pd.DataFrame:
        """
        Per-drive summary table.

        Returns:
            DataFrame with drive_id, vehicle_id, label, n_events, duration, n_stories
        """
        if self.data is None:
            self.load_data()
        return summarize_drives(self.data)


def summarize_drives(drives: Iterable[Drive]) -> pd.DataFrame:
    """
    Build a per-drive summary table.

    Args:
        drives: Drives to summarize

    Returns:
        DataFrame with one row per drive
    """
    rows = [{
        "drive_id": drive.drive_id,
        "vehicle_id": drive.vehicle_id,
        "label": drive.label,
        "n_events": len(drive),
        "duration": drive.events[-1].t if drive.events else 0.0,
        "n_stories": len(drive.story_trace),
    } for drive in drives]
    return pd.DataFrame(rows, columns=["drive_id", "vehicle_id", "label", "n_events", "duration", "n_stories"])
