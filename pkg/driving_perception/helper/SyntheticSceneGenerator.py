import json
import logging
import os

import cv2
import numpy as np
from tqdm import tqdm

from driving_perception.config import PERCEPTION_LOG_LEVEL, LOG_FORMAT
from driving_perception.exceptions import InvalidInputError
from driving_perception.helper.DatasetHelper import Sample
from driving_perception.helper.LaneLabelHelper import dilate_mask, write_mask

logging.basicConfig(
    level=PERCEPTION_LOG_LEVEL,
    format=LOG_FORMAT
)

LANE_THICKNESS = 2
MAX_VEHICLES = 3


def draw_lane(mask, bottom_x, top_x, top_y, bottom_y):
    """2 px wide lane from (bottom_x, bottom_y) to (top_x, top_y), drawn row by row."""
    h, w = mask.shape
    for y in range(top_y, bottom_y + 1):
        t = (y - top_y) / max(bottom_y - top_y, 1)
        x = int(round(top_x + t * (bottom_x - top_x)))
        x = min(max(x, 0), w - LANE_THICKNESS)
        mask[y, x:x + LANE_THICKNESS] = 1
    return mask


class SyntheticSceneGenerator:
    """
    Procedural road scenes: a trapezoidal drivable region, thin lane lines
    and box-shaped vehicles. Sample i of a run only depends on (seed, i).
    """
    logger = logging.getLogger('SyntheticSceneGenerator')

    def __init__(self, size=(320, 320), seed=0):
        self.height, self.width = size
        if self.height < 32 or self.width < 32:
            raise InvalidInputError(f"synthetic scenes need at least 32x32 pixels, got {size}")
        self.seed = seed

    def generate_sample(self, index):
        rng = np.random.default_rng([self.seed, index])
        h, w = self.height, self.width

        image = np.zeros((h, w, 3), dtype=np.uint8)
        horizon = int(h * rng.uniform(0.35, 0.5))
        image[:horizon] = np.array([135, 180, 230]) + rng.integers(-15, 16, 3)
        image[horizon:] = np.array([70, 120, 60]) + rng.integers(-15, 16, 3)

        top_half = w * rng.uniform(0.05, 0.12)
        bottom_half = w * rng.uniform(0.35, 0.5)
        center_top = w / 2 + rng.uniform(-0.1, 0.1) * w
        center_bottom = w / 2 + rng.uniform(-0.1, 0.1) * w
        road = np.array([[center_bottom - bottom_half, h - 1], [center_top - top_half, horizon],
                         [center_top + top_half, horizon], [center_bottom + bottom_half, h - 1]])
        road = np.round(road).clip(0, [w - 1, h - 1]).astype(np.int32)

        drivable = np.zeros((h, w), dtype=np.uint8)
        cv2.fillPoly(drivable, [road], 1)
        gray = int(rng.integers(80, 120))
        image[drivable > 0] = (gray, gray, gray)

        lane_raw = np.zeros((h, w), dtype=np.uint8)
        for side in (-1, 1):
            offset = rng.uniform(0.55, 0.8)
            draw_lane(lane_raw, int(center_bottom + side * offset * bottom_half),
                      int(center_top + side * offset * top_half), horizon, h - 1)
        image[lane_raw > 0] = (240, 240, 240)

        boxes, labels = [], []
        for _ in range(int(rng.integers(0, MAX_VEHICLES + 1))):
            y2 = int(rng.uniform(horizon + 0.2 * (h - horizon), h - 1))
            depth = (y2 - horizon) / (h - horizon)
            bw = max(int(w * rng.uniform(0.08, 0.16) * (0.4 + depth)), 4)
            bh = max(int(bw * rng.uniform(0.6, 0.9)), 4)
            cx = rng.uniform(center_top + (center_bottom - center_top) * depth - 0.5 * bottom_half * depth,
                             center_top + (center_bottom - center_top) * depth + 0.5 * bottom_half * depth)
            x1 = int(np.clip(cx - bw / 2, 0, w - bw))
            y1 = int(np.clip(y2 - bh, horizon, h - bh))
            color = tuple(int(c) for c in rng.integers(20, 255, 3))
            cv2.rectangle(image, (x1, y1), (x1 + bw - 1, y1 + bh - 1), color, thickness=-1)
            drivable[y1:y1 + bh, x1:x1 + bw] = 0
            boxes.append([(x1 + bw / 2) / w, (y1 + bh / 2) / h, bw / w, bh / h])
            labels.append(0)

        noise = rng.integers(-6, 7, image.shape)
        image = np.clip(image.astype(np.int16) + noise, 0, 255).astype(np.uint8)

        return Sample(name=f"synth_{self.seed}_{index:05d}", image=image,
                      labels=np.asarray(labels, dtype=np.int64),
                      boxes=np.asarray(boxes, dtype=np.float32).reshape(-1, 4).clip(0.0, 1.0),
                      drivable=drivable, lane=dilate_mask(lane_raw), lane_raw=lane_raw).validate()

    def generate(self, n):
        if n < 1:
            raise InvalidInputError(f"sample count must be >= 1, got {n}")
        return [self.generate_sample(i) for i in tqdm(range(n), desc='synthetic scenes', disable=n < 50)]

    def write_bdd_directory(self, samples, out_dir):
        """
        Store samples in the BDD100K layout: ``images/``, ``drivable/`` and
        ``lane/`` (thin labels, 0/255 PNG) plus ``det_annotations.json``.
        """
        for sub in ('images', 'drivable', 'lane'):
            os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
        frames = []
        for sample in samples:
            h, w = sample.image.shape[:2]
            cv2.imwrite(os.path.join(out_dir, 'images', f"{sample.name}.png"),
                        cv2.cvtColor(sample.image, cv2.COLOR_RGB2BGR))
            write_mask(os.path.join(out_dir, 'drivable', f"{sample.name}.png"), sample.drivable)
            lane = sample.lane_raw if sample.lane_raw is not None else sample.lane
            write_mask(os.path.join(out_dir, 'lane', f"{sample.name}.png"), lane)
            objects = []
            for cx, cy, bw, bh in sample.boxes:
                objects.append({'category': 'car',
                                'box2d': {'x1': float((cx - bw / 2) * w), 'y1': float((cy - bh / 2) * h),
                                          'x2': float((cx + bw / 2) * w), 'y2': float((cy + bh / 2) * h)}})
            frames.append({'name': f"{sample.name}.png", 'labels': objects})
        with open(os.path.join(out_dir, 'det_annotations.json'), 'w') as f:
            json.dump(frames, f, indent=1)
        self.logger.info('Wrote %s synthetic scenes to %s', len(samples), out_dir)
        return out_dir


def generate_synthetic_dataset(n, size=(320, 320), seed=0):
    return SyntheticSceneGenerator(size, seed).generate(n)
