"""
HTTP client for the fleet service and dataset replay.
"""

import logging
import time
from dataclasses import dataclass
from typing import Any, Dict, Iterable, List, Optional

import requests
from tqdm import tqdm

from models.bundle import DetectorBundle
from utils.data_loader import event_to_record
from utils.errors import PipelineError
from utils.events import Drive

logger = logging.getLogger(__name__)


class FleetServiceError(PipelineError):
    """The fleet service answered with an error status."""

    def __init__(self, status_code: int, detail: Any):
        self.status_code = status_code
        self.detail = detail
        super().__init__(f"fleet service returned {status_code}: {detail}")


class FleetClient:
    """Thin wrapper over the fleet service endpoints."""

    def __init__(self, base_url: str = "http://127.0.0.1:8000", timeout: float = 10.0, session: Any = None):
        """
        Initialize client.

        Args:
            base_url: Service base URL
            timeout: Request timeout in seconds
            session: requests-compatible session (a new requests.Session by default)
        """
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self.session = session or requests.Session()

    def _call(self, method: str, path: str, **kwargs) -> Any:
        response = self.session.request(method, f"{self.base_url}{path}", timeout=self.timeout, **kwargs)
        if response.status_code >= 400:
            try:
                detail = response.json().get("detail")
            except ValueError:
                detail = response.text
            raise FleetServiceError(response.status_code, detail)
        return response.json()

    def health(self) -> Dict[str, Any]:
        return self._call("GET", "/health")

    def register_model(self, vehicle_id: str, bundle: DetectorBundle) -> Dict[str, Any]:
        return self._call("POST", f"/vehicles/{vehicle_id}/model", json=bundle.to_dict())

    def ingest(self, vehicle_id: str, records: List[Dict[str, Any]]) -> List[Dict[str, Any]]:
        """Send a batch of event records; returns one result per record."""
        return self._call("POST", f"/vehicles/{vehicle_id}/events", json=records)["results"]

    def alerts(self, since: int = 0, limit: Optional[int] = None) -> List[Dict[str, Any]]:
        params = {"since": since}
        if limit is not None:
            params["limit"] = limit
        return self._call("GET", "/alerts", params=params)["alerts"]


def drive_records(drive: Drive) -> List[Dict[str, Any]]:
    """Wire records of a drive, each tagged with the drive id."""
    return [{**event_to_record(event), "drive_id": drive.drive_id} for event in drive.events]


@dataclass
class ReplaySummary:
    n_drives: int = 0
    n_events: int = 0
    n_alerts: int = 0
    n_errors: int = 0
    seconds: float = 0.0

    @property
    def events_per_second(self) -> float:
        return self.n_events / self.seconds if self.seconds > 0 else 0.0


def replay_drives(client: FleetClient, drives: Iterable[Drive], batch_size: int = 500,
                  progress: bool = False) -> ReplaySummary:
    """
    Stream drives into the service in dataset order.

    Args:
        client: Fleet service client
        drives: Drives to replay
        batch_size: Records per request
        progress: Show a progress bar

    Returns:
        ReplaySummary with counts and wall time
    """
    summary = ReplaySummary()
    start = time.perf_counter()
    for drive in tqdm(drives, desc="replay", disable=not progress):
        records = drive_records(drive)
        for offset in range(0, len(records), batch_size):
            for result in client.ingest(drive.vehicle_id, records[offset:offset + batch_size]):
                summary.n_events += 1
                if result["status"] == "alert":
                    summary.n_alerts += 1
                elif result["status"] == "error":
                    summary.n_errors += 1
                    logger.warning(f"Drive {drive.drive_id}: {result['error']}")
        summary.n_drives += 1
    summary.seconds = time.perf_counter() - start
    logger.info(f"Replayed {summary.n_drives} drives ({summary.n_events} events, {summary.n_alerts} alerts) "
                f"at {summary.events_per_second:.0f} events/s")
    return summary
