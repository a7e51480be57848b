import json
import logging
import os
import re
from dataclasses import dataclass, field
from typing import List

import cv2
import numpy as np

from driving_perception.config import PERCEPTION_LOG_LEVEL, LOG_FORMAT
from driving_perception.exceptions import AnnotationFormatError, ImageReadError, InvalidInputError
from driving_perception.helper.DatasetHelper import Sample
from driving_perception.helper.LaneLabelHelper import dilate_mask, read_mask

logging.basicConfig(
    level=PERCEPTION_LOG_LEVEL,
    format=LOG_FORMAT
)

# BDD100K categories merged into the single 'vehicle' class
VEHICLE_CATEGORIES = {'car', 'bus', 'truck', 'train'}
VEHICLE_CLASS = 0

_SEPARATORS = re.compile(r'[\s,]*')


def _array_lines(text):
    """Line on which each element of a top-level JSON array starts."""
    decoder = json.JSONDecoder()
    pos = text.index('[') + 1
    lines = []
    while True:
        pos = _SEPARATORS.match(text, pos).end()
        if text[pos] == ']':
            return lines
        lines.append(text.count('\n', 0, pos) + 1)
        _, pos = decoder.raw_decode(text, pos)


@dataclass
class LoadReport:
    loaded: int = 0
    missing_mask: List[str] = field(default_factory=list)
    unreadable: List[str] = field(default_factory=list)
    ignored_objects: int = 0

    @property
    def skipped(self):
        return len(self.missing_mask) + len(self.unreadable)

    def to_dict(self):
        return {'loaded': self.loaded, 'skipped': self.skipped, 'missing_mask': self.missing_mask,
                'unreadable': self.unreadable, 'ignored_objects': self.ignored_objects}


def read_image(path):
    image = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if image is None:
        raise ImageReadError(f"cannot read image {path}")
    return cv2.cvtColor(image, cv2.COLOR_BGR2RGB)


def resize_image(image, size):
    h, w = size
    if image.shape[:2] == (h, w):
        return image
    return cv2.resize(image, (w, h), interpolation=cv2.INTER_LINEAR)


def resize_mask(mask, size):
    h, w = size
    if mask.shape == (h, w):
        return mask
    return cv2.resize(mask, (w, h), interpolation=cv2.INTER_NEAREST)


class BDDLoader:
    """
    Reads a BDD100K-style subset: images, a detection annotation file
    (``.json`` list of frames or ``.jsonl`` one frame per line) and per-image
    0/255 drivable and lane PNGs named after the image stem.
    """
    logger = logging.getLogger('BDDLoader')

    def __init__(self, input_size=(320, 320), dilate_lanes=True, keep_raw_lanes=True):
        self.input_size = tuple(input_size)
        self.dilate_lanes = dilate_lanes
        self.keep_raw_lanes = keep_raw_lanes
        self.report = LoadReport()

    def read_annotations(self, path):
        """:return: dict image name -> list of BDD label dicts"""
        if not os.path.isfile(path):
            raise InvalidInputError(f"annotation file {path} does not exist")
        frames = []
        with open(path, encoding='utf-8') as f:
            if path.endswith('.jsonl'):
                for lineno, line in enumerate(f, start=1):
                    if not line.strip():
                        continue
                    try:
                        frames.append((lineno, json.loads(line)))
                    except json.JSONDecodeError as e:
                        raise AnnotationFormatError(f"invalid JSON in {path}: {e.msg}", line=lineno)
            else:
                text = f.read()
                try:
                    records = json.loads(text)
                except json.JSONDecodeError as e:
                    raise AnnotationFormatError(f"invalid JSON in {path}: {e.msg}", line=e.lineno)
                if isinstance(records, dict):
                    records = records.get('frames', [records])
                if not isinstance(records, list):
                    raise AnnotationFormatError(f"{path} must hold a list of frames", line=1)
                positions = _array_lines(text) if text.lstrip().startswith('[') else [None] * len(records)
                frames = list(zip(positions, records))

        annotations = {}
        for index, (lineno, frame) in enumerate(frames):
            if not isinstance(frame, dict) or 'name' not in frame:
                raise AnnotationFormatError(f"frame without 'name' in {path}", line=lineno, frame=index)
            labels = frame.get('labels') or []
            if not isinstance(labels, list):
                raise AnnotationFormatError(f"'labels' of {frame['name']} is not a list", line=lineno, frame=index)
            for label in labels:
                box = label.get('box2d') if isinstance(label, dict) else None
                if box is not None and not all(k in box for k in ('x1', 'y1', 'x2', 'y2')):
                    raise AnnotationFormatError(f"incomplete box2d in {frame['name']}", line=lineno, frame=index)
            annotations[frame['name']] = labels
        return annotations

    def vehicle_boxes(self, labels, width, height):
        """BDD labels -> (class ids [M], normalized cxcywh [M, 4])."""
        boxes = []
        for label in labels:
            box = label.get('box2d')
            if label.get('category') not in VEHICLE_CATEGORIES or box is None:
                self.report.ignored_objects += 1
                continue
            x1, x2 = sorted((float(box['x1']), float(box['x2'])))
            y1, y2 = sorted((float(box['y1']), float(box['y2'])))
            x1, x2 = np.clip([x1, x2], 0, width) / width
            y1, y2 = np.clip([y1, y2], 0, height) / height
            if x2 <= x1 or y2 <= y1:
                self.report.ignored_objects += 1
                continue
            boxes.append([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1])
        boxes = np.asarray(boxes, dtype=np.float32).reshape(-1, 4)
        return np.full(len(boxes), VEHICLE_CLASS, dtype=np.int64), boxes

    def load_sample(self, image_path, labels, da_path, ll_path):
        image = read_image(image_path)
        height, width = image.shape[:2]
        drivable = read_mask(da_path)
        lane_raw = read_mask(ll_path)
        if drivable.shape != (height, width) or lane_raw.shape != (height, width):
            raise InvalidInputError(f"mask size does not match image {image_path}")
        # dilate at source resolution, then resample
        lane = dilate_mask(lane_raw) if self.dilate_lanes else lane_raw
        class_ids, boxes = self.vehicle_boxes(labels, width, height)
        return Sample(name=os.path.splitext(os.path.basename(image_path))[0],
                      image=resize_image(image, self.input_size), labels=class_ids, boxes=boxes,
                      drivable=resize_mask(drivable, self.input_size), lane=resize_mask(lane, self.input_size),
                      lane_raw=resize_mask(lane_raw, self.input_size) if self.keep_raw_lanes else None).validate()

    def load(self, image_dir, det_annotations, da_mask_dir, ll_mask_dir):
        self.report = LoadReport()
        annotations = self.read_annotations(det_annotations)
        if not os.path.isdir(image_dir):
            raise InvalidInputError(f"image directory {image_dir} does not exist")
        samples = []
        for name in sorted(os.listdir(image_dir)):
            if not name.lower().endswith(('.jpg', '.jpeg', '.png')):
                continue
            stem = os.path.splitext(name)[0]
            da_path = os.path.join(da_mask_dir, f"{stem}.png")
            ll_path = os.path.join(ll_mask_dir, f"{stem}.png")
            if not (os.path.isfile(da_path) and os.path.isfile(ll_path)):
                self.logger.warning('Skipping %s: missing drivable or lane mask', name)
                self.report.missing_mask.append(name)
                continue
            try:
                samples.append(self.load_sample(os.path.join(image_dir, name), annotations.get(name, []),
                                                da_path, ll_path))
            except ImageReadError as e:
                self.logger.warning('Skipping %s: %s', name, e)
                self.report.unreadable.append(name)
        self.report.loaded = len(samples)
        self.logger.info('Loaded %s samples from %s (%s skipped)', len(samples), image_dir, self.report.skipped)
        return samples

    def load_directory(self, root):
        """Subset written in the synthetic/BDD layout under ``root``."""
        return self.load(os.path.join(root, 'images'), os.path.join(root, 'det_annotations.json'),
                         os.path.join(root, 'drivable'), os.path.join(root, 'lane'))


def load_bdd_subset(image_dir, det_annotations, da_mask_dir, ll_mask_dir, input_size=(320, 320)):
    return BDDLoader(input_size).load(image_dir, det_annotations, da_mask_dir, ll_mask_dir)
