#!/usr/bin/env python3
"""
Example script demonstrating how to use the fleet detection service.

Start the service first:
    python run_pipeline.py serve
"""

import sys
from pathlib import Path

import numpy as np
import requests

sys.path.append(str(Path(__file__).parent / "src"))

from api.client import FleetClient, FleetServiceError, drive_records
from models.bundle import train_bundle
from models.hmm import TrainConfig
from simulation.attacks import inject_attack, is_compatible
from simulation.simulator import SimConfig, generate_fleet
from utils.events import AttackKind

API_BASE_URL = "http://localhost:8000"
VEHICLE_ID = "vehicle-000"


def check_api_health(client: FleetClient) -> bool:
    """Check if the service is running."""
    try:
        health = client.health()
        print(f"✅ Service is healthy ({health['vehicles_registered']} vehicles registered)")
        return True
    except requests.exceptions.ConnectionError:
        print(f"❌ Cannot connect to the service at {API_BASE_URL}")
        return False


def stream_drive(client: FleetClient, drive) -> None:
    """Send a drive one event at a time and print what the service answers."""
    print(f"\nStreaming {drive.drive_id} ({drive.label}, {len(drive)} events)")
    for record in drive_records(drive):
        result = client.ingest(drive.vehicle_id, [record])[0]
        if result["status"] == "alert":
            print(f"   🚨 alert at event {result['event_index']}: "
                  f"residual {result['residual']:.3f} < tau {result['tau']:.3f}")
        elif result["status"] == "finalized":
            offline = result["offline"]
            print(f"   drive finished: {offline['decision']} (score {offline['score']:.3f})")
        elif result["status"] == "error":
            print(f"   ❌ rejected: {result['error']}")


def main():
    """Main function to demonstrate service usage."""
    print("🚗 Vehicle Fleet Detection Service Demo")
    print("=" * 50)

    client = FleetClient(API_BASE_URL)
    if not check_api_health(client):
        print("\n💡 To start the service, run:")
        print("   python run_pipeline.py serve")
        return

    print("\nTraining a small bundle on simulated drives...")
    drives = generate_fleet(SimConfig(n_vehicles=1, n_drives=60, seed=11))
    bundle = train_bundle(drives[:50], vehicle_id=VEHICLE_ID, config=TrainConfig(n_states=5, n_restarts=1))
    print(f"   {client.register_model(VEHICLE_ID, bundle)}")

    held_out = drives[50:]
    stream_drive(client, held_out[0])

    rng = np.random.default_rng(3)
    attack = next(((d, kind) for d in held_out[1:] for kind in AttackKind if is_compatible(d, kind)), None)
    if attack:
        stream_drive(client, inject_attack(*attack, rng))

    try:
        alerts = client.alerts(since=0)
        print(f"\n📋 {len(alerts)} alerts stored in total")
    except FleetServiceError as e:
        print(f"❌ Could not read alerts: {e}")

    print("\n💡 Service endpoints:")
    print("   GET  /health                       - Health check")
    print("   GET  /vehicles                     - Registered vehicles")
    print("   POST /vehicles/{vehicle_id}/model  - Register a detector bundle")
    print("   POST /vehicles/{vehicle_id}/events - Ingest event records")
    print("   GET  /alerts?since=<alert_id>      - Alerts raised so far")


if __name__ == "__main__":
    main()
