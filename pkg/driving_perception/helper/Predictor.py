import json
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List

import cv2
import numpy as np
import torch

from driving_perception.config import PERCEPTION_LOG_LEVEL, LOG_FORMAT
from driving_perception.encoder import JSONEncoder
from driving_perception.helper.BDDLoader import read_image, resize_image
from driving_perception.helper.CheckpointHelper import load_model
from driving_perception.helper.DatasetHelper import image_to_tensor
from driving_perception.helper.LaneLabelHelper import write_mask
from driving_perception.models.detection_record import DetectionRecord
from driving_perception.network.box_ops import box_cxcywh_to_xyxy
from driving_perception.network.seg_decoder import DEFAULT_THRESHOLDS, predict_masks

logging.basicConfig(
    level=PERCEPTION_LOG_LEVEL,
    format=LOG_FORMAT
)

DRIVABLE_COLOR = (0, 200, 0)
LANE_COLOR = (230, 0, 0)
BOX_COLOR = (255, 200, 0)


@dataclass
class Prediction:
    """Post-processed output for one image; boxes are normalized cxcywh."""
    boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 4), dtype=np.float32))
    scores: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.float32))
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    masks: Dict[str, np.ndarray] = field(default_factory=dict)
    probs: Dict[str, np.ndarray] = field(default_factory=dict)

    def records(self, image_id, min_score=0.0) -> List[DetectionRecord]:
        order = np.argsort(-self.scores, kind='stable')
        return [DetectionRecord(image_id=image_id, class_id=int(self.labels[i]),
                                bbox=[float(v) for v in self.boxes[i]], score=float(self.scores[i]))
                for i in order if self.scores[i] >= min_score]


def postprocess(outputs, thresholds=DEFAULT_THRESHOLDS):
    """Model output dict -> list of Prediction, one per image."""
    seg = outputs.get('segmentation') or {}
    masks = predict_masks(seg, thresholds) if seg else None
    det = outputs.get('detection')
    batch = det.boxes.shape[0] if det is not None else next(iter(seg.values())).shape[0]

    predictions = []
    for b in range(batch):
        pred = Prediction()
        if det is not None:
            scores, labels = det.scores[b].max(dim=-1)
            pred.boxes = det.boxes[b].detach().float().cpu().numpy()
            pred.scores = scores.detach().float().cpu().numpy()
            pred.labels = labels.cpu().numpy()
        if masks is not None:
            for task in ('drivable', 'lane'):
                prob = getattr(masks, f"{task}_prob")
                if prob is not None:
                    pred.probs[task] = prob[b].detach().float().cpu().numpy()
                    pred.masks[task] = getattr(masks, f"{task}_mask")[b].cpu().numpy()
        predictions.append(pred)
    return predictions


def render_overlay(image, prediction: Prediction, min_score=0.5):
    """RGB uint8 image with drivable area, lanes and boxes drawn in."""
    overlay = image.copy()
    h, w = overlay.shape[:2]
    if 'drivable' in prediction.masks:
        region = prediction.masks['drivable'] > 0
        overlay[region] = (0.5 * overlay[region] + 0.5 * np.array(DRIVABLE_COLOR)).astype(np.uint8)
    if 'lane' in prediction.masks:
        overlay[prediction.masks['lane'] > 0] = LANE_COLOR
    if len(prediction.boxes):
        xyxy = box_cxcywh_to_xyxy(torch.as_tensor(prediction.boxes)).numpy() * [w, h, w, h]
        for box, score in zip(xyxy, prediction.scores):
            if score < min_score:
                continue
            x1, y1, x2, y2 = [int(round(v)) for v in box]
            cv2.rectangle(overlay, (x1, y1), (x2, y2), BOX_COLOR, 2)
            cv2.putText(overlay, f"{score:.2f}", (x1, max(y1 - 3, 10)), cv2.FONT_HERSHEY_SIMPLEX, 0.4,
                        BOX_COLOR, 1, cv2.LINE_AA)
    return overlay


class Predictor:
    logger = logging.getLogger('Predictor')

    def __init__(self, model, config, device='cpu'):
        self.model = model.to(device).eval()
        self.config = config
        self.device = device

    @property
    def input_size(self):
        return tuple(self.config.model.input_size)

    @torch.no_grad()
    def predict(self, images, thresholds=None):
        """:param images: [B, 3, H, W] float tensor in [0, 1]"""
        thresholds = thresholds or self.config.eval.thresholds
        return postprocess(self.model(images.to(self.device)), thresholds)

    def predict_image(self, image):
        """:param image: RGB uint8 array of any size; resized to the model input"""
        resized = resize_image(image, self.input_size)
        return resized, self.predict(image_to_tensor(resized).unsqueeze(0))[0]

    def infer(self, image_path, out_dir, min_score=0.25):
        """
        Writes ``<stem>_detections.jsonl``, ``<stem>_drivable.png``,
        ``<stem>_lane.png`` and ``<stem>_overlay.png`` into ``out_dir``.
        Masks of disabled tasks are not written.
        """
        image = read_image(image_path)
        resized, prediction = self.predict_image(image)
        stem = os.path.splitext(os.path.basename(image_path))[0]
        os.makedirs(out_dir, exist_ok=True)

        paths = {'detections': os.path.join(out_dir, f"{stem}_detections.jsonl")}
        with open(paths['detections'], 'w', encoding='utf-8') as f:
            for record in prediction.records(stem, min_score):
                f.write(json.dumps(record, cls=JSONEncoder) + '\n')
        for task, mask in prediction.masks.items():
            paths[task] = os.path.join(out_dir, f"{stem}_{task}.png")
            write_mask(paths[task], mask)
        paths['overlay'] = os.path.join(out_dir, f"{stem}_overlay.png")
        cv2.imwrite(paths['overlay'], cv2.cvtColor(render_overlay(resized, prediction), cv2.COLOR_RGB2BGR))
        self.logger.info('Wrote inference outputs for %s to %s', image_path, out_dir)
        return paths


def infer(checkpoint, image_path, out_dir, device='cpu', min_score=0.25):
    model, config, _ = load_model(checkpoint, device)
    return Predictor(model, config, device).infer(image_path, out_dir, min_score)
