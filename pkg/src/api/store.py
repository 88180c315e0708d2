"""
Persistent storage for the fleet service: detector bundles per vehicle and raised alerts.
"""

import logging
import sqlite3
import threading
from abc import ABC, abstractmethod
from contextlib import closing, contextmanager
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Union
from urllib.parse import quote, unquote

from models.bundle import DetectorBundle

logger = logging.getLogger(__name__)


class ModelStore(ABC):
    """Bundle storage keyed by vehicle id."""

    @abstractmethod
    def get(self, vehicle_id: str) -> Optional[DetectorBundle]:
        ...

    @abstractmethod
    def put(self, vehicle_id: str, bundle: DetectorBundle):
        ...

    @abstractmethod
    def vehicles(self) -> List[str]:
        ...


class FileModelStore(ModelStore):
    """One JSON bundle file per vehicle in a directory, cached in memory."""

    def __init__(self, directory: Union[str, Path]):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self._cache: Dict[str, DetectorBundle] = {}
        self._lock = threading.Lock()

    def _path(self, vehicle_id: str) -> Path:
        return self.directory / f"{quote(vehicle_id, safe='')}.json"

    def get(self, vehicle_id: str) -> Optional[DetectorBundle]:
        with self._lock:
            bundle = self._cache.get(vehicle_id)
            if bundle is None:
                path = self._path(vehicle_id)
                if not path.exists():
                    return None
                bundle = DetectorBundle.load(path)
                self._cache[vehicle_id] = bundle
            return bundle

    def put(self, vehicle_id: str, bundle: DetectorBundle):
        with self._lock:
            bundle.save(self._path(vehicle_id))
            self._cache[vehicle_id] = bundle
        logger.info(f"Registered model for vehicle {vehicle_id}")

    def vehicles(self) -> List[str]:
        return sorted(unquote(p.stem) for p in self.directory.glob("*.json"))


@dataclass(frozen=True)
class Alert:
    """An online detection alert."""
    vehicle_id: str
    drive_id: str
    event_index: int
    event_t: float
    residual: float
    tau: float
    technique: str
    raised_at: str
    alert_id: Optional[int] = None

    def to_dict(self) -> Dict:
        return asdict(self)


class AlertStore:
    """Alerts in a SQLite table; ids increase in raise order."""

    def __init__(self, db_path: Union[str, Path]):
        self.db_path = Path(db_path)
        self.db_path.parent.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        with self._connect() as conn:
            conn.execute("""
                CREATE TABLE IF NOT EXISTS alerts (
                    alert_id INTEGER PRIMARY KEY AUTOINCREMENT,
                    vehicle_id TEXT NOT NULL,
                    drive_id TEXT NOT NULL,
                    event_index INTEGER NOT NULL,
                    event_t REAL NOT NULL,
                    residual REAL NOT NULL,
                    tau REAL NOT NULL,
                    technique TEXT NOT NULL,
                    raised_at TEXT NOT NULL
                )
            """)
            conn.execute("CREATE INDEX IF NOT EXISTS idx_alerts_vehicle ON alerts(vehicle_id)")

    @contextmanager
    def _connect(self) -> Iterator[sqlite3.Connection]:
        """Connection that commits on success and is always closed."""
        with closing(sqlite3.connect(self.db_path)) as conn, conn:
            yield conn

    def append(self, alert: Alert) -> Alert:
        """Persist an alert; returns it with its assigned id once committed."""
        with self._lock, self._connect() as conn:
            cursor = conn.execute(
                "INSERT INTO alerts (vehicle_id, drive_id, event_index, event_t, residual, tau, technique, raised_at) "
                "VALUES (?, ?, ?, ?, ?, ?, ?, ?)",
                (alert.vehicle_id, alert.drive_id, alert.event_index, alert.event_t, alert.residual,
                 alert.tau, alert.technique, alert.raised_at))
            alert_id = cursor.lastrowid
        logger.warning(f"Alert {alert_id}: vehicle {alert.vehicle_id} drive {alert.drive_id} "
                       f"event {alert.event_index} residual={alert.residual:.4f} < tau={alert.tau:.4f}")
        return Alert(**{**alert.to_dict(), "alert_id": alert_id})

    def since(self, alert_id: int = 0, limit: Optional[int] = None) -> List[Alert]:
        """Alerts with ids greater than alert_id, in raise order."""
        query = ("SELECT vehicle_id, drive_id, event_index, event_t, residual, tau, technique, raised_at, alert_id "
                 "FROM alerts WHERE alert_id > ? ORDER BY alert_id")
        params: tuple = (alert_id,)
        if limit is not None:
            query += " LIMIT ?"
            params += (limit,)
        with self._connect() as conn:
            rows = conn.execute(query, params).fetchall()
        return [Alert(*row) for row in rows]


def open_stores(directory: Union[str, Path]):
    """Model and alert stores under one service directory."""
    directory = Path(directory)
    return FileModelStore(directory / "models"), AlertStore(directory / "alerts.db")
