import logging
import os
import random
from datetime import datetime, timezone

import numpy as np
import torch

from driving_perception.config import PERCEPTION_LOG_LEVEL, LOG_FORMAT
from driving_perception.exceptions import ConfigError, InvalidInputError
from driving_perception.helper.ConfigHelper import ConfigHelper
from driving_perception.models.checkpoint_info import CheckpointInfo
from driving_perception.network.model import PerceptionNet

logging.basicConfig(
    level=PERCEPTION_LOG_LEVEL,
    format=LOG_FORMAT
)


def capture_rng_state():
    return {'python': random.getstate(), 'numpy': np.random.get_state(), 'torch': torch.get_rng_state(),
            'cuda': torch.cuda.get_rng_state_all() if torch.cuda.is_available() else None}


def restore_rng_state(state):
    random.setstate(state['python'])
    np.random.set_state(state['numpy'])
    torch.set_rng_state(state['torch'])
    if state.get('cuda') is not None and torch.cuda.is_available():
        torch.cuda.set_rng_state_all(state['cuda'])


class CheckpointHelper:
    """
    One archive per checkpoint: model parameters keyed by module path, the
    config snapshot, optimizer/scheduler/RNG state and a CheckpointInfo.
    """
    logger = logging.getLogger('CheckpointHelper')

    def __init__(self, directory):
        self.directory = directory

    def path(self, name):
        return os.path.join(self.directory, name)

    def save(self, name, model, config, epoch=0, step=0, fitness=None, optimizer=None, scheduler=None,
             extra=None):
        os.makedirs(self.directory, exist_ok=True)
        info = CheckpointInfo(epoch=epoch, step=step, saved_at=datetime.now(timezone.utc), fitness=fitness,
                              config_hash=config.config_hash())
        archive = {
            'model': model.state_dict(),
            'config': config.to_dict(),
            'info': info.to_dict(),
            'optimizer': optimizer.state_dict() if optimizer is not None else None,
            'scheduler': scheduler.state_dict() if scheduler is not None else None,
            'rng': capture_rng_state(),
            'extra': extra or {},
        }
        path = self.path(name)
        torch.save(archive, path)
        self.logger.info('Saved checkpoint %s (epoch %s, step %s)', path, epoch, step)
        return path


def read_checkpoint(path, map_location='cpu'):
    if not os.path.isfile(path):
        raise InvalidInputError(f"checkpoint {path} does not exist")
    archive = torch.load(path, map_location=map_location, weights_only=False)
    if 'model' not in archive or 'config' not in archive:
        raise ConfigError(f"{path} is not a perception checkpoint")
    archive['info'] = CheckpointInfo.from_dict(archive.get('info') or {})
    return archive


def load_model(path, device='cpu', config=None):
    """
    Rebuild the network of a checkpoint.

    :param config: PipelineConfig overriding the stored snapshot
    :return: (model, PipelineConfig, CheckpointInfo)
    """
    archive = read_checkpoint(path, map_location=device)
    config = config or ConfigHelper().from_dict(archive['config'])
    model = PerceptionNet(config.model)
    model.load_state_dict(archive['model'])
    model.to(device).eval()
    return model, config, archive['info']
