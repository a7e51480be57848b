# coding: utf-8

# flake8: noqa
# import models into model package
from driving_perception.models.checkpoint_info import CheckpointInfo
from driving_perception.models.detection_record import DetectionRecord
from driving_perception.models.lane_metrics_record import LaneMetricsRecord
from driving_perception.models.metrics_record import MetricsRecord
