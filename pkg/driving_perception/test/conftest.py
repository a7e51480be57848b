import json

import pytest
import torch

from driving_perception.helper.ConfigHelper import ConfigHelper
from driving_perception.helper.SyntheticSceneGenerator import SyntheticSceneGenerator
from driving_perception.network.config import ModelConfig

TINY_MODEL = {
    'input_size': [64, 64],
    'channel_width': 32,
    'backbone_widths': [8, 16, 32, 32],
    'backbone_depths': [1, 1, 1, 1],
    'attention_heads': 4,
    'gca_reduction': 4,
    'seg_channels': 16,
    'num_queries': 10,
    'decoder_layers': 2,
    'decoder_heads': 4,
}


def tiny_config_dict(tmp_dir=None, **sections):
    data = {
        'model': dict(TINY_MODEL),
        'loss': {'dn_groups': 2},
        'train': {'epochs': 1, 'batch_size': 2, 'warmup_epochs': 0.5, 'seed': 0},
        'data': {'train_size': 4, 'val_size': 2},
        'eval': {'fps_frames': 2, 'fps_warmup': 0},
    }
    if tmp_dir is not None:
        data['output_dir'] = str(tmp_dir)
    for name, values in sections.items():
        data.setdefault(name, {}).update(values)
    return data


@pytest.fixture(scope="module")
def tiny_model_config():
    return ModelConfig.from_dict(dict(TINY_MODEL))


@pytest.fixture(scope="module")
def tiny_samples():
    return SyntheticSceneGenerator((64, 64), seed=3).generate(4)


@pytest.fixture(autouse=True)
def fixed_seed():
    torch.manual_seed(0)


@pytest.fixture
def config_factory(tmp_path):
    """Builds a tiny PipelineConfig writing into ``tmp_path``; keyword sections update the defaults."""
    def build(**sections):
        return ConfigHelper().from_dict(tiny_config_dict(tmp_path, **sections))
    return build


@pytest.fixture(scope="module")
def tiny_config_file(tmp_path_factory):
    root = tmp_path_factory.mktemp('config')
    path = root / 'tiny_config.json'
    path.write_text(json.dumps(tiny_config_dict(root / 'runs')))
    return str(path)
