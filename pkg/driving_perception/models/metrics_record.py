# coding: utf-8

from driving_perception.models.base_model_ import Model
from driving_perception import util

METRIC_FIELDS = ('recall', 'map50', 'miou', 'lane_iou', 'lane_acc', 'fps')
# fps is a speed, not an accuracy, and stays out of the fitness mean
ACCURACY_FIELDS = ('recall', 'map50', 'miou', 'lane_iou', 'lane_acc')


class MetricsRecord(Model):
    """Evaluation result of one checkpoint; metrics of disabled tasks are None."""

    def __init__(self, recall: float = None, map50: float = None, miou: float = None, lane_iou: float = None,
                 lane_acc: float = None, fps: float = None):
        self.swagger_types = {name: float for name in METRIC_FIELDS}
        self.attribute_map = {name: name for name in METRIC_FIELDS}
        self._recall = recall
        self._map50 = map50
        self._miou = miou
        self._lane_iou = lane_iou
        self._lane_acc = lane_acc
        self._fps = fps

    @classmethod
    def from_dict(cls, dikt) -> 'MetricsRecord':
        return util.deserialize_model(dikt, cls)

    @property
    def recall(self) -> float:
        return self._recall

    @recall.setter
    def recall(self, recall: float):
        self._recall = recall

    @property
    def map50(self) -> float:
        return self._map50

    @map50.setter
    def map50(self, map50: float):
        self._map50 = map50

    @property
    def miou(self) -> float:
        return self._miou

    @miou.setter
    def miou(self, miou: float):
        self._miou = miou

    @property
    def lane_iou(self) -> float:
        return self._lane_iou

    @lane_iou.setter
    def lane_iou(self, lane_iou: float):
        self._lane_iou = lane_iou

    @property
    def lane_acc(self) -> float:
        return self._lane_acc

    @lane_acc.setter
    def lane_acc(self, lane_acc: float):
        self._lane_acc = lane_acc

    @property
    def fps(self) -> float:
        return self._fps

    @fps.setter
    def fps(self, fps: float):
        if fps is not None and fps < 0:
            raise ValueError("Invalid value for `fps`, must be >= 0")
        self._fps = fps

    def fitness(self):
        """Mean of the available accuracy metrics."""
        values = [getattr(self, name) for name in ACCURACY_FIELDS if getattr(self, name) is not None]
        return sum(values) / len(values) if values else 0.0

    def table(self):
        lines = [f"{'metric':<10}{'value':>10}"]
        for name in METRIC_FIELDS:
            value = getattr(self, name)
            lines.append(f"{name:<10}{'-' if value is None else format(value, '.4f'):>10}")
        return '\n'.join(lines)
