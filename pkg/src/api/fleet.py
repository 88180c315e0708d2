"""
Fleet ingestion: per-vehicle drive sessions scored online against registered detector bundles.

A session opens with the first record that carries a new drive_id, or at a
Login when the stream carries no drive ids, and keeps the bundle that was
registered at that moment. Records for one vehicle are
processed one at a time under that vehicle's lock; different vehicles run
in parallel.
"""

import logging
import threading
from collections import deque
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Any, Deque, Dict, List, Optional

from pydantic import BaseModel

from api.store import Alert, AlertStore, ModelStore
from models.bundle import FLEET_BUNDLE, DetectorBundle
from models.detector import Decision, OnlineScorer
from utils.data_loader import EventRecord, record_to_event
from utils.errors import ModelValidationError, SessionError, UnregisteredVehicleError
from utils.feature_engineering import EventEncoder

logger = logging.getLogger(__name__)

TECHNIQUE = "regression"
# Finished drive ids remembered per vehicle for rejecting late records.
FINISHED_MEMORY = 64


class IngestRecord(EventRecord):
    """Event record on the wire, optionally tagged with its drive."""
    drive_id: Optional[str] = None


class OfflineDecision(BaseModel):
    score: float
    decision: Decision
    n_events: int
    first_alert_index: Optional[int] = None


class IngestResult(BaseModel):
    status: str
    vehicle_id: str
    drive_id: Optional[str] = None
    event_index: Optional[int] = None
    log_likelihood: Optional[float] = None
    residual: Optional[float] = None
    tau: Optional[float] = None
    alert: Optional[Dict[str, Any]] = None
    offline: Optional[OfflineDecision] = None
    error: Optional[str] = None


@dataclass
class VehicleSession:
    """Scoring state of one vehicle's current drive."""
    vehicle_id: str
    drive_id: str
    bundle: DetectorBundle
    scorer: OnlineScorer
    encoder: EventEncoder
    started_at: Optional[float] = None
    last_t: Optional[float] = None
    logged_in: bool = False
    last_residual: Optional[float] = None
    first_alert_index: Optional[int] = None

    @classmethod
    def open(cls, vehicle_id: str, drive_id: str, bundle: DetectorBundle) -> "VehicleSession":
        return cls(vehicle_id, drive_id, bundle, OnlineScorer(bundle.hmm, bundle.regressor), bundle.alphabet.encoder())

    @property
    def n_events(self) -> int:
        return self.scorer.n

    def offline_decision(self) -> OfflineDecision:
        score = self.last_residual if self.last_residual is not None else 0.0
        decision = Decision.ANOMALOUS if self.last_residual is not None and score < self.bundle.regressor.tau \
            else Decision.BENIGN
        return OfflineDecision(score=score, decision=decision, n_events=self.n_events,
                               first_alert_index=self.first_alert_index)


@dataclass
class _VehicleState:
    lock: threading.Lock = field(default_factory=threading.Lock)
    session: Optional[VehicleSession] = None
    finished: Deque[str] = field(default_factory=lambda: deque(maxlen=FINISHED_MEMORY))
    n_logins: int = 0


class FleetService:
    """Registers bundles, ingests event records and raises alerts."""

    def __init__(self, models: ModelStore, alerts: AlertStore):
        self.models = models
        self.alerts = alerts
        self._vehicles: Dict[str, _VehicleState] = {}
        self._registry_lock = threading.Lock()

    def _state(self, vehicle_id: str) -> _VehicleState:
        with self._registry_lock:
            state = self._vehicles.get(vehicle_id)
            if state is None:
                state = self._vehicles[vehicle_id] = _VehicleState()
            return state

    def register_model(self, vehicle_id: str, bundle: DetectorBundle) -> Dict[str, Any]:
        """
        Store a validated bundle for a vehicle.

        Drives already in progress finish on the bundle they started with.

        Raises:
            ModelValidationError: If the bundle is inconsistent or belongs to another vehicle
        """
        if bundle.vehicle_id not in (vehicle_id, FLEET_BUNDLE):
            raise ModelValidationError(f"bundle belongs to {bundle.vehicle_id}, not {vehicle_id}")
        bundle.validate()
        self.models.put(vehicle_id, bundle)
        return {
            "vehicle_id": vehicle_id,
            "registered": True,
            "transform": bundle.alphabet.kind.value,
            "n_states": bundle.hmm.N,
            "n_symbols": bundle.hmm.M,
            "tau": bundle.regressor.tau,
        }

    def session(self, vehicle_id: str) -> Optional[VehicleSession]:
        return self._state(vehicle_id).session

    def _finish(self, state: _VehicleState) -> OfflineDecision:
        session = state.session
        state.session = None
        state.finished.append(session.drive_id)
        decision = session.offline_decision()
        logger.info(f"Drive {session.drive_id} of {session.vehicle_id} finished after {session.n_events} events: "
                    f"{decision.decision.value} (score={decision.score:.4f})")
        return decision

    def ingest_event(self, vehicle_id: str, record: IngestRecord) -> IngestResult:
        """
        Score one event of a vehicle's stream.

        Args:
            vehicle_id: Vehicle the event comes from
            record: Event record; a new drive_id opens a new session, and so does a
                Login without a drive_id

        Returns:
            IngestResult with status "ok", "alert" or "finalized"

        Raises:
            UnregisteredVehicleError: If no bundle is registered for the vehicle
            SessionError: If no session is open or the timestamp is not increasing
            UnknownEventTypeError: If the event type is not in the catalog
        """
        state = self._state(vehicle_id)
        with state.lock:
            bundle = self.models.get(vehicle_id)
            if bundle is None:
                raise UnregisteredVehicleError(vehicle_id)
            event = record_to_event(record)

            session = state.session
            if record.drive_id is not None and (session is None or session.drive_id != record.drive_id):
                if record.drive_id in state.finished:
                    raise SessionError(f"no active session: drive {record.drive_id} already finished")
                if session is not None:
                    logger.info(f"Drive {record.drive_id} started before {session.drive_id} logged out")
                    self._finish(state)
                session = VehicleSession.open(vehicle_id, record.drive_id, bundle)
                state.session = session
            elif record.drive_id is None and event.name == "Login":
                if session is not None:
                    logger.info(f"Login on {vehicle_id} while {session.drive_id} is open")
                    self._finish(state)
                state.n_logins += 1
                session = VehicleSession.open(vehicle_id, f"{vehicle_id}-login-{state.n_logins}", bundle)
                state.session = session
            elif session is None:
                raise SessionError(f"no active session for vehicle {vehicle_id}")

            if session.last_t is not None and event.t <= session.last_t:
                raise SessionError(f"out-of-order event: t={event.t} after t={session.last_t}")

            symbol = session.bundle.alphabet.symbol(session.encoder.key(event))
            residual = session.scorer.push(symbol, event.t)
            index = session.n_events - 1
            if session.started_at is None:
                session.started_at = event.t
            session.last_t = event.t
            session.last_residual = residual
            tau = session.bundle.regressor.tau

            result = IngestResult(status="ok", vehicle_id=vehicle_id, drive_id=session.drive_id, event_index=index,
                                  log_likelihood=session.scorer.log_likelihood, residual=residual, tau=tau)
            if residual < tau and session.first_alert_index is None:
                session.first_alert_index = index
                alert = self.alerts.append(Alert(
                    vehicle_id=vehicle_id, drive_id=session.drive_id, event_index=index, event_t=event.t,
                    residual=residual, tau=tau, technique=TECHNIQUE,
                    raised_at=datetime.now(timezone.utc).isoformat()))
                result.status = "alert"
                result.alert = alert.to_dict()

            if event.name == "Login":
                session.logged_in = True
            elif event.name == "Logout":
                result.offline = self._finish(state)
                if result.status == "ok":
                    result.status = "finalized"
            return result

    def ingest_batch(self, vehicle_id: str, records: List[IngestRecord]) -> List[IngestResult]:
        """
        Ingest records in order; a rejected record is reported and the rest continue.

        Raises:
            UnregisteredVehicleError: If no bundle is registered for the vehicle
        """
        if self.models.get(vehicle_id) is None:
            raise UnregisteredVehicleError(vehicle_id)
        results = []
        for record in records:
            try:
                results.append(self.ingest_event(vehicle_id, record))
            except (SessionError, LookupError) as e:
                results.append(IngestResult(status="error", vehicle_id=vehicle_id,
                                            drive_id=record.drive_id, error=str(e)))
        return results

    def drain_alerts(self, since: int = 0, limit: Optional[int] = None) -> List[Alert]:
        """Persisted alerts with ids above since, in raise order."""
        return self.alerts.since(since, limit)
