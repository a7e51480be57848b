import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
from torch.utils.data import Dataset

from driving_perception.config import PERCEPTION_LOG_LEVEL, LOG_FORMAT
from driving_perception.exceptions import EmptyDatasetError, InvalidInputError

logging.basicConfig(
    level=PERCEPTION_LOG_LEVEL,
    format=LOG_FORMAT
)


@dataclass
class Sample:
    """
    One annotated frame at model resolution. Masks are {0, 1} uint8 [H, W];
    ``lane`` holds the dilated (8 px) labels used for training and
    evaluation, ``lane_raw`` the original thin labels when known.
    """
    name: str
    image: np.ndarray            # [H, W, 3] uint8 RGB
    labels: np.ndarray           # [M] int64
    boxes: np.ndarray            # [M, 4] float32 normalized cxcywh
    drivable: np.ndarray
    lane: np.ndarray
    lane_raw: Optional[np.ndarray] = None

    def validate(self):
        h, w = self.image.shape[:2]
        for name in ('drivable', 'lane', 'lane_raw'):
            mask = getattr(self, name)
            if mask is not None and mask.shape != (h, w):
                raise InvalidInputError(f"{self.name}: {name} mask {mask.shape} does not match image {(h, w)}")
        if len(self.boxes) and (np.any(self.boxes < 0) or np.any(self.boxes > 1)):
            raise InvalidInputError(f"{self.name}: boxes outside [0, 1]")
        return self


def image_to_tensor(image):
    """[H, W, 3] uint8 RGB -> [3, H, W] float in [0, 1]."""
    return torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1).float().div_(255.0)


def mask_to_tensor(mask):
    return torch.from_numpy(np.ascontiguousarray(mask)).float().unsqueeze(0)


class PerceptionDataset(Dataset):
    def __init__(self, samples):
        self.samples = list(samples)
        if not self.samples:
            raise EmptyDatasetError("dataset has no samples")

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, idx):
        sample = self.samples[idx]
        item = {
            'name': sample.name,
            'image': image_to_tensor(sample.image),
            'detections': {'labels': torch.as_tensor(sample.labels, dtype=torch.long),
                           'boxes': torch.as_tensor(sample.boxes, dtype=torch.float32).reshape(-1, 4)},
            'drivable': mask_to_tensor(sample.drivable),
            'lane': mask_to_tensor(sample.lane),
        }
        if sample.lane_raw is not None:
            item['lane_raw'] = mask_to_tensor(sample.lane_raw)
        return item


def collate_samples(items):
    batch = {
        'names': [item['name'] for item in items],
        'images': torch.stack([item['image'] for item in items]),
        'detections': [item['detections'] for item in items],
        'drivable': torch.stack([item['drivable'] for item in items]),
        'lane': torch.stack([item['lane'] for item in items]),
    }
    if all('lane_raw' in item for item in items):
        batch['lane_raw'] = torch.stack([item['lane_raw'] for item in items])
    return batch


def batch_to_device(batch, device):
    moved = dict(batch)
    for key in ('images', 'drivable', 'lane', 'lane_raw'):
        if key in moved:
            moved[key] = moved[key].to(device)
    moved['detections'] = [{k: v.to(device) for k, v in t.items()} for t in batch['detections']]
    return moved
