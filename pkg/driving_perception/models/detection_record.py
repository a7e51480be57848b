# coding: utf-8

from typing import List

from driving_perception.models.base_model_ import Model
from driving_perception import util


class DetectionRecord(Model):
    """One detected object: normalized cxcywh box, class id and confidence."""

    def __init__(self, image_id: str = None, class_id: int = None, bbox: List[float] = None, score: float = None):
        self.swagger_types = {
            'image_id': str,
            'class_id': int,
            'bbox': List[float],
            'score': float
        }

        self.attribute_map = {
            'image_id': 'image_id',
            'class_id': 'class',
            'bbox': 'bbox',
            'score': 'score'
        }
        self._image_id = image_id
        self._class_id = class_id
        self._bbox = bbox
        self._score = score

    @classmethod
    def from_dict(cls, dikt) -> 'DetectionRecord':
        return util.deserialize_model(dikt, cls)

    @property
    def image_id(self) -> str:
        return self._image_id

    @image_id.setter
    def image_id(self, image_id: str):
        self._image_id = image_id

    @property
    def class_id(self) -> int:
        return self._class_id

    @class_id.setter
    def class_id(self, class_id: int):
        self._class_id = class_id

    @property
    def bbox(self) -> List[float]:
        return self._bbox

    @bbox.setter
    def bbox(self, bbox: List[float]):
        if bbox is not None and len(bbox) != 4:
            raise ValueError("Invalid value for `bbox`, must hold 4 numbers")
        self._bbox = bbox

    @property
    def score(self) -> float:
        return self._score

    @score.setter
    def score(self, score: float):
        self._score = score
