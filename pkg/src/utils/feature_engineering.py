"""
Feature engineering: turns drives into discrete observation symbols for the HMM.

Two transformations are supported. ``event_id`` maps every event to its
catalog id. ``discrete`` maps every event to a tuple of its id and bucketized
attributes (velocity, open-flow load, file access, vendor trust) and numbers
the tuples seen in training, reserving one symbol for unseen tuples.
"""

import logging
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from utils.errors import ModelValidationError, TrainingError
from utils.events import ATTRIBUTE_NAMES, N_EVENT_TYPES, Drive, Event, Vendor

logger = logging.getLogger(__name__)

FeatureKey = Tuple[Any, ...]


class TransformKind(str, Enum):
    EVENT_ID = "event_id"
    DISCRETE = "discrete"


class FlowBucket(str, Enum):
    LOW = "low"
    MEDIUM = "medium"
    HIGH = "high"


# Attributes with a dedicated slot in the discrete tuple.
_BUCKETED = ("file_type", "access_type", "vendor")


@dataclass(frozen=True)
class BucketConfig:
    """Bucket limits and the attributes the discrete transformation uses."""
    velocity_edges: Tuple[float, ...] = (5.0, 10.0, 20.0, 50.0)
    flow_low_max: int = 2
    flow_medium_max: int = 5
    use_velocity: bool = True
    use_flows: bool = True
    use_file_access: bool = True
    use_vendor: bool = True
    extras: Tuple[str, ...] = ()

    def __post_init__(self):
        edges = tuple(float(e) for e in self.velocity_edges)
        object.__setattr__(self, "velocity_edges", edges)
        object.__setattr__(self, "extras", tuple(self.extras))
        if any(e <= 0 for e in edges) or any(b <= a for a, b in zip(edges, edges[1:])):
            raise ValueError(f"velocity edges must be positive and increasing: {edges}")
        if not 0 <= self.flow_low_max < self.flow_medium_max:
            raise ValueError("flow thresholds must satisfy 0 <= low_max < medium_max")
        unknown = [name for name in self.extras if name not in ATTRIBUTE_NAMES or name in _BUCKETED]
        if unknown:
            raise ValueError(f"unsupported extra attributes: {unknown}")

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["velocity_edges"] = list(self.velocity_edges)
        data["extras"] = list(self.extras)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "BucketConfig":
        return cls(**data)


def bucketize_velocity(velocity: float, edges: Sequence[float] = BucketConfig.velocity_edges) -> int:
    """
    Velocity bucket index with left-closed intervals.

    Args:
        velocity: Speed in km/h
        edges: Upper bucket edges, default 5, 10, 20, 50

    Returns:
        Bucket index 0..len(edges)
    """
    if velocity < 0:
        raise ValueError(f"negative velocity: {velocity}")
    return int(np.searchsorted(np.asarray(edges, dtype=float), velocity, side="right"))


def bucketize_flows(open_flow_count: int, config: Optional[BucketConfig] = None) -> FlowBucket:
    """Load bucket for the number of open flows seen so far."""
    config = config or BucketConfig()
    if open_flow_count <= config.flow_low_max:
        return FlowBucket.LOW
    if open_flow_count <= config.flow_medium_max:
        return FlowBucket.MEDIUM
    return FlowBucket.HIGH


def _plain(value: Any) -> Any:
    """JSON-friendly scalar for an attribute value."""
    if value is None:
        return None
    if isinstance(value, Vendor):
        return value.name
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return value


class EventEncoder:
    """
    Maps events to feature tuples.

    Holds the per-drive open-flow counter, so one encoder serves one drive at
    a time; call ``reset`` between drives.
    """

    def __init__(self, kind: Union[TransformKind, str], buckets: Optional[BucketConfig] = None):
        self.kind = TransformKind(kind)
        self.buckets = buckets or BucketConfig()
        self.open_flows = 0

    def reset(self):
        self.open_flows = 0

    def key(self, event: Event) -> FeatureKey:
        """Feature tuple for the next event of the drive."""
        if self.kind is TransformKind.EVENT_ID:
            return (event.event_type.id,)
        b = self.buckets
        attrs = event.attrs
        velocity = bucketize_velocity(event.velocity, b.velocity_edges) if b.use_velocity else None
        flow = None
        if event.name == "Open Flows":
            self.open_flows += 1
            if b.use_flows:
                flow = bucketize_flows(self.open_flows, b).value
        file_type = _plain(attrs.file_type) if b.use_file_access else None
        access_type = _plain(attrs.access_type) if b.use_file_access else None
        vendor_known = attrs.vendor.known if b.use_vendor and attrs.vendor is not None else None
        extras = tuple(_plain(getattr(attrs, name)) for name in b.extras)
        return (event.event_type.id, velocity, flow, file_type, access_type, vendor_known) + extras


@dataclass(frozen=True, eq=False)
class Alphabet:
    """Symbol alphabet of one transformation."""
    kind: TransformKind
    buckets: BucketConfig = field(default_factory=BucketConfig)
    tuples: Tuple[FeatureKey, ...] = ()
    _index: Dict[FeatureKey, int] = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "kind", TransformKind(self.kind))
        tuples = tuple(tuple(t) for t in self.tuples)
        object.__setattr__(self, "tuples", tuples)
        index = {t: i for i, t in enumerate(tuples)}
        if len(index) != len(tuples):
            raise ModelValidationError("alphabet contains duplicate feature tuples")
        if self.kind is TransformKind.EVENT_ID and tuples:
            raise ModelValidationError("event_id alphabet takes no feature tuples")
        object.__setattr__(self, "_index", index)

    @property
    def M(self) -> int:
        if self.kind is TransformKind.EVENT_ID:
            return N_EVENT_TYPES
        return len(self.tuples) + 1

    @property
    def unknown_symbol(self) -> Optional[int]:
        return None if self.kind is TransformKind.EVENT_ID else self.M - 1

    def encoder(self) -> EventEncoder:
        return EventEncoder(self.kind, self.buckets)

    def symbol(self, key: FeatureKey) -> int:
        if self.kind is TransformKind.EVENT_ID:
            return int(key[0])
        return self._index.get(tuple(key), self.M - 1)

    def decode(self, symbol: int) -> Optional[FeatureKey]:
        """Feature tuple of a symbol; None for the unknown symbol."""
        if not 0 <= symbol < self.M:
            raise ValueError(f"symbol {symbol} outside alphabet of size {self.M}")
        if self.kind is TransformKind.EVENT_ID:
            return (symbol,)
        return None if symbol == self.M - 1 else self.tuples[symbol]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": self.kind.value,
            "M": self.M,
            "buckets": self.buckets.to_dict(),
            "tuples": [list(t) for t in self.tuples],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Alphabet":
        try:
            alphabet = cls(
                kind=TransformKind(data["kind"]),
                buckets=BucketConfig.from_dict(data.get("buckets", {})),
                tuples=tuple(tuple(t) for t in data.get("tuples", [])),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ModelValidationError(f"invalid alphabet: {e}") from None
        if "M" in data and int(data["M"]) != alphabet.M:
            raise ModelValidationError(f"alphabet size {data['M']} does not match {alphabet.M} symbols")
        return alphabet


@dataclass(frozen=True, eq=False)
class ObservationSequence:
    """Symbols of one drive with the event times the detector features need."""
    drive_id: str
    symbols: np.ndarray
    times: np.ndarray

    def __len__(self) -> int:
        return len(self.symbols)


def build_alphabet(kind: Union[TransformKind, str], bucket_config: Optional[BucketConfig] = None,
                   drives: Iterable[Drive] = ()) -> Alphabet:
    """
    Build the symbol alphabet of a transformation.

    Args:
        kind: Transformation kind
        bucket_config: Bucket limits (discrete kind)
        drives: Training drives whose feature tuples define the discrete alphabet

    Returns:
        Alphabet (43 symbols for event_id; observed tuples plus unknown for discrete)

    Raises:
        TrainingError: If the discrete kind gets no training drives
    """
    kind = TransformKind(kind)
    buckets = bucket_config or BucketConfig()
    if kind is TransformKind.EVENT_ID:
        return Alphabet(kind, buckets)

    encoder = EventEncoder(kind, buckets)
    seen: Dict[FeatureKey, None] = {}
    n_drives = 0
    for drive in drives:
        n_drives += 1
        encoder.reset()
        for event in drive.events:
            seen.setdefault(encoder.key(event), None)
    if n_drives == 0:
        raise TrainingError("discrete alphabet needs at least one training drive")
    alphabet = Alphabet(kind, buckets, tuple(seen))
    logger.info(f"Built discrete alphabet with {alphabet.M} symbols from {n_drives} drives")
    return alphabet


def transform_drive(drive: Drive, alphabet: Alphabet) -> ObservationSequence:
    """
    Transform a drive into its observation sequence.

    Args:
        drive: Drive to transform
        alphabet: Alphabet of the transformation

    Returns:
        ObservationSequence with one symbol per event
    """
    encoder = alphabet.encoder()
    symbols = [alphabet.symbol(encoder.key(event)) for event in drive.events]
    return ObservationSequence(
        drive_id=drive.drive_id,
        symbols=np.asarray(symbols, dtype=np.int64),
        times=np.asarray(drive.times, dtype=float),
    )


def transform_drives(drives: Iterable[Drive], alphabet: Alphabet) -> List[ObservationSequence]:
    return [transform_drive(drive, alphabet) for drive in drives]


def unseen_mass(sequences: Iterable[ObservationSequence]) -> float:
    """
    Good-Turing estimate of the chance that the next event carries a tuple not seen so far.

    The share of training events whose symbol occurs exactly once.
    """
    symbols = [seq.symbols for seq in sequences if len(seq)]
    if not symbols:
        raise TrainingError("unseen mass needs at least one non-empty drive")
    counts = np.bincount(np.concatenate(symbols))
    return float((counts == 1).sum()) / float(counts.sum())
