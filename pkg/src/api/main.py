"""
FastAPI application for the fleet detection service.
"""

import logging
import os
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from dotenv import load_dotenv
from fastapi import Body, FastAPI, HTTPException, Query
from pydantic import ValidationError

from api.fleet import FleetService, IngestRecord
from api.store import open_stores
from models.bundle import DetectorBundle
from utils.errors import ModelValidationError, SessionError, UnknownEventTypeError, UnregisteredVehicleError

logger = logging.getLogger(__name__)

VERSION = "1.0.0"


@dataclass(frozen=True)
class Settings:
    host: str = "127.0.0.1"
    port: int = 8000
    store_dir: str = "fleetd_store"
    log_level: str = "INFO"

    @classmethod
    def from_env(cls) -> "Settings":
        """Settings from FLEETD_* environment variables (a .env file is read first)."""
        load_dotenv()
        defaults = cls()
        return cls(
            host=os.getenv("FLEETD_HOST", defaults.host),
            port=int(os.getenv("FLEETD_PORT", str(defaults.port))),
            store_dir=os.getenv("FLEETD_STORE_DIR", defaults.store_dir),
            log_level=os.getenv("FLEETD_LOG_LEVEL", defaults.log_level).upper(),
        )


def _parse_records(payload: Any) -> List[IngestRecord]:
    items = payload if isinstance(payload, list) else [payload]
    try:
        return [IngestRecord.model_validate(item) for item in items]
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(part) for part in first["loc"])
        raise HTTPException(status_code=422, detail=f"malformed event record: {where}: {first['msg']}")


def create_app(store_dir: Union[str, Path, None] = None) -> FastAPI:
    """
    Build the service app over a store directory.

    Args:
        store_dir: Directory holding models/ and alerts.db (FLEETD_STORE_DIR by default)
    """
    store_dir = Path(store_dir or Settings.from_env().store_dir)
    models, alerts = open_stores(store_dir)
    service = FleetService(models, alerts)

    app = FastAPI(
        title="Vehicle Fleet Detection Service",
        description="Online HMM anomaly detection over connected-vehicle event streams",
        version=VERSION,
    )
    app.state.service = service

    @app.get("/")
    async def root():
        """Service info"""
        return {
            "message": "Vehicle Fleet Detection Service",
            "status": "healthy",
            "endpoints": {
                "api_docs": "/docs",
                "health_check": "/health",
                "register_model": "POST /vehicles/{vehicle_id}/model",
                "ingest_events": "POST /vehicles/{vehicle_id}/events",
                "alerts": "GET /alerts?since=<alert_id>",
                "vehicles": "GET /vehicles",
            },
        }

    @app.get("/health")
    async def health_check():
        """Health check endpoint"""
        return {
            "status": "healthy",
            "timestamp": datetime.now().isoformat(),
            "vehicles_registered": len(models.vehicles()),
            "store_dir": str(store_dir),
            "version": VERSION,
        }

    @app.get("/vehicles")
    async def list_vehicles():
        """List vehicles with a registered model"""
        vehicles = models.vehicles()
        return {"vehicles": vehicles, "total_vehicles": len(vehicles)}

    # Sync handlers run in the FastAPI thread pool.
    @app.post("/vehicles/{vehicle_id}/model")
    def register_model(vehicle_id: str, payload: Dict[str, Any] = Body(...)):
        """Register or replace a vehicle's detector bundle"""
        try:
            bundle = DetectorBundle.from_dict(payload)
            return service.register_model(vehicle_id, bundle)
        except ModelValidationError as e:
            raise HTTPException(status_code=422, detail=f"invalid bundle: {e}")

    @app.post("/vehicles/{vehicle_id}/events")
    def ingest_events(vehicle_id: str, payload: Any = Body(...)):
        """Ingest one event record or a batch of records"""
        records = _parse_records(payload)
        try:
            if isinstance(payload, list):
                results = service.ingest_batch(vehicle_id, records)
                return {"results": [r.model_dump(mode="json") for r in results]}
            return service.ingest_event(vehicle_id, records[0]).model_dump(mode="json")
        except UnregisteredVehicleError as e:
            raise HTTPException(status_code=404, detail=str(e))
        except SessionError as e:
            raise HTTPException(status_code=409, detail=str(e))
        except UnknownEventTypeError as e:
            raise HTTPException(status_code=422, detail=str(e))

    @app.get("/alerts")
    def get_alerts(since: int = Query(0, ge=0), limit: Optional[int] = Query(None, ge=1)):
        """Alerts raised after the given alert id"""
        alerts = service.drain_alerts(since, limit)
        return {
            "alerts": [a.to_dict() for a in alerts],
            "next_since": alerts[-1].alert_id if alerts else since,
        }

    logger.info(f"Fleet service ready (store: {store_dir})")
    return app


if __name__ == "__main__":
    import uvicorn

    settings = Settings.from_env()
    logging.basicConfig(level=settings.log_level,
                        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
    uvicorn.run(create_app(settings.store_dir), host=settings.host, port=settings.port)
