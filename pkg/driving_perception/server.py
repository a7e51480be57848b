import logging
import os

import connexion
from flask import current_app

from driving_perception.config import PERCEPTION_CONFIG, PERCEPTION_WEIGHTS, resolve_device
from driving_perception.helper.CheckpointHelper import load_model
from driving_perception.helper.ConfigHelper import load_config
from driving_perception.helper.Predictor import Predictor
from driving_perception.network.model import PerceptionNet

logger = logging.getLogger(__name__)

SWAGGER_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'swagger')


def build_predictor(weights=None, config_path=None, device=None):
    """Model from a checkpoint, or freshly initialised from a config when no weights are given."""
    device = resolve_device(device)
    weights = weights or PERCEPTION_WEIGHTS
    config_path = config_path or PERCEPTION_CONFIG or None
    if weights:
        model, config, info = load_model(weights, device)
        logger.info('Serving checkpoint %s', weights)
    else:
        config = load_config(config_path)
        model, info = PerceptionNet(config.model), None
        logger.warning('No checkpoint given, serving an untrained model')
    return Predictor(model, config, device), info


def create_app(weights=None, config_path=None, device=None):
    app = connexion.App(__name__, specification_dir=SWAGGER_DIR)
    app.add_api('swagger.yaml', arguments={'title': 'DrivingPerception'}, pythonic_params=True)
    predictor, info = build_predictor(weights, config_path, device)
    with app.app.app_context():
        current_app.predictor = predictor
        current_app.checkpoint_info = info
    return app
