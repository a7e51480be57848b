#!/usr/bin/env python3
"""
Driving perception pipeline script.

Usage:
    python run_pipeline.py gen-synth --n 20 --seed 0 --out data/synthetic
    python run_pipeline.py train --config schema/examples/toy_config.json
    python run_pipeline.py train --config schema/examples/toy_config.json --ablation vanilla_mtl
    python run_pipeline.py eval --weights runs/toy/best.pt --da-threshold 0.45 --ll-threshold 0.9
    python run_pipeline.py sweep-thresholds --weights runs/toy/best.pt
    python run_pipeline.py grad-analyze --config schema/examples/toy_config.json --steps 200 --compare
    python run_pipeline.py dilate-labels --in data/lane_2px --out data/lane_8px
    python run_pipeline.py infer --weights runs/toy/best.pt --image frame.jpg --out-dir inference
"""

import os
import sys

# Add project root to path for imports
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from driving_perception.cli import main


if __name__ == "__main__":
    sys.exit(main())
