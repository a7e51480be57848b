# coding: utf-8

from datetime import datetime

from driving_perception.models.base_model_ import Model
from driving_perception import util


class CheckpointInfo(Model):
    def __init__(self, epoch: int = None, step: int = None, saved_at: datetime = None, fitness: float = None,
                 config_hash: str = None):
        self.swagger_types = {
            'epoch': int,
            'step': int,
            'saved_at': datetime,
            'fitness': float,
            'config_hash': str
        }

        self.attribute_map = {
            'epoch': 'epoch',
            'step': 'step',
            'saved_at': 'saved_at',
            'fitness': 'fitness',
            'config_hash': 'config_hash'
        }
        self._epoch = epoch
        self._step = step
        self._saved_at = saved_at
        self._fitness = fitness
        self._config_hash = config_hash

    @classmethod
    def from_dict(cls, dikt) -> 'CheckpointInfo':
        return util.deserialize_model(dikt, cls)

    @property
    def epoch(self) -> int:
        return self._epoch

    @epoch.setter
    def epoch(self, epoch: int):
        self._epoch = epoch

    @property
    def step(self) -> int:
        return self._step

    @step.setter
    def step(self, step: int):
        self._step = step

    @property
    def saved_at(self) -> datetime:
        return self._saved_at

    @saved_at.setter
    def saved_at(self, saved_at: datetime):
        self._saved_at = saved_at

    @property
    def fitness(self) -> float:
        return self._fitness

    @fitness.setter
    def fitness(self, fitness: float):
        self._fitness = fitness

    @property
    def config_hash(self) -> str:
        return self._config_hash

    @config_hash.setter
    def config_hash(self, config_hash: str):
        self._config_hash = config_hash
