# coding: utf-8

from driving_perception.models.base_model_ import Model
from driving_perception import util


class LaneMetricsRecord(Model):
    """Lane IoU and LineAccuracy of one confusion matrix, with definedness flags."""

    def __init__(self, iou: float = None, line_accuracy: float = None, iou_defined: bool = None,
                 accuracy_defined: bool = None):
        self.swagger_types = {
            'iou': float,
            'line_accuracy': float,
            'iou_defined': bool,
            'accuracy_defined': bool
        }

        self.attribute_map = {
            'iou': 'iou',
            'line_accuracy': 'line_accuracy',
            'iou_defined': 'iou_defined',
            'accuracy_defined': 'accuracy_defined'
        }
        self._iou = iou
        self._line_accuracy = line_accuracy
        self._iou_defined = iou_defined
        self._accuracy_defined = accuracy_defined

    @classmethod
    def from_dict(cls, dikt) -> 'LaneMetricsRecord':
        return util.deserialize_model(dikt, cls)

    @classmethod
    def from_scores(cls, scores) -> 'LaneMetricsRecord':
        return cls(iou=scores.iou, line_accuracy=scores.line_accuracy, iou_defined=scores.iou_defined,
                   accuracy_defined=scores.accuracy_defined)

    @property
    def iou(self) -> float:
        return self._iou

    @iou.setter
    def iou(self, iou: float):
        self._iou = iou

    @property
    def line_accuracy(self) -> float:
        return self._line_accuracy

    @line_accuracy.setter
    def line_accuracy(self, line_accuracy: float):
        self._line_accuracy = line_accuracy

    @property
    def iou_defined(self) -> bool:
        return self._iou_defined

    @iou_defined.setter
    def iou_defined(self, iou_defined: bool):
        self._iou_defined = iou_defined

    @property
    def accuracy_defined(self) -> bool:
        return self._accuracy_defined

    @accuracy_defined.setter
    def accuracy_defined(self, accuracy_defined: bool):
        self._accuracy_defined = accuracy_defined
