import os

import torch

ROOT_DIR = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))

CONFIG_SCHEMA_PATH = os.environ.get(
    "PERCEPTION_CONFIG_SCHEMA", os.path.join(ROOT_DIR, "schema", "config_schema.json")
)

# Empty means: pick cuda when available
PERCEPTION_DEVICE = os.environ.get("PERCEPTION_DEVICE", "")

PERCEPTION_OUTPUT_DIR = os.environ.get("PERCEPTION_OUTPUT_DIR", "runs")

# Checkpoint and config served by the REST service
PERCEPTION_WEIGHTS = os.environ.get("PERCEPTION_WEIGHTS", "")
PERCEPTION_CONFIG = os.environ.get("PERCEPTION_CONFIG", "")

PERCEPTION_LOG_LEVEL = os.environ.get("PERCEPTION_LOG_LEVEL", "INFO")

PERCEPTION_SLOW_TESTS = os.environ.get("PERCEPTION_SLOW_TESTS", "0") == "1"

LOG_FORMAT = '%(asctime)s [%(levelname)s] %(name)s: %(message)s'


def resolve_device(requested=None):
    device = requested or PERCEPTION_DEVICE
    if not device:
        device = "cuda" if torch.cuda.is_available() else "cpu"
    return torch.device(device)
