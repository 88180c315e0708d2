#!/usr/bin/env python3
"""
Vehicle HMM anomaly detection pipeline.

Usage:
    python run_pipeline.py simulate --drives 2000 --out data/train.jsonl
    python run_pipeline.py inject --in data/pool.jsonl --out data/test.jsonl --mix 0.5
    python run_pipeline.py train --in data/train.jsonl --transform event_id --out models/
    python run_pipeline.py detect --in data/test.jsonl --bundle models/ --out results/detect.tsv
    python run_pipeline.py evaluate --config configs/experiment.yaml
    python run_pipeline.py serve
    python run_pipeline.py replay --in data/test.jsonl --bundle models/
"""

import sys
from pathlib import Path

# Add src to path
sys.path.append(str(Path(__file__).parent / "src"))

from cli import main

if __name__ == "__main__":
    sys.exit(main())
