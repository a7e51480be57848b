import csv
import logging
import os
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
from torch.utils.data import DataLoader

from driving_perception.config import PERCEPTION_LOG_LEVEL, LOG_FORMAT
from driving_perception.exceptions import EmptyDatasetError
from driving_perception.helper.CheckpointHelper import load_model
from driving_perception.helper.DatasetHelper import PerceptionDataset, collate_samples
from driving_perception.helper.MetricsHelper import ConfusionCounts, confusion_counts, detection_metrics, \
    fairness_report, lane_metrics, measure_fps, region_miou
from driving_perception.helper.Predictor import postprocess
from driving_perception.models.metrics_record import MetricsRecord
from driving_perception.network.box_ops import box_cxcywh_to_xyxy
from driving_perception.network.seg_decoder import threshold_masks

logging.basicConfig(
    level=PERCEPTION_LOG_LEVEL,
    format=LOG_FORMAT
)

SWEEP_COLUMNS = ('threshold', 'miou', 'lane_iou', 'lane_acc', 'lane_pixels')


@dataclass
class EvaluationResult:
    metrics: MetricsRecord
    fairness: Optional[dict] = None
    images: int = 0
    extras: dict = field(default_factory=dict)

    def to_dict(self):
        result = {'metrics': self.metrics.to_dict(), 'images': self.images}
        if self.fairness is not None:
            result['fairness'] = self.fairness
        result.update(self.extras)
        return result


def _xyxy(boxes):
    return box_cxcywh_to_xyxy(torch.as_tensor(np.asarray(boxes, dtype=np.float32)).reshape(-1, 4)).numpy()


def write_sweep_csv(rows, path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.DictWriter(f, fieldnames=SWEEP_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k) for k in SWEEP_COLUMNS})
    return path


class Evaluator:
    logger = logging.getLogger('Evaluator')

    def __init__(self, config, device='cpu', batch_size=None):
        self.config = config
        self.device = device
        self.batch_size = batch_size or config.train.batch_size

    def batches(self, samples):
        dataset = samples if isinstance(samples, PerceptionDataset) else PerceptionDataset(samples)
        return DataLoader(dataset, batch_size=self.batch_size, shuffle=False, collate_fn=collate_samples)

    @torch.no_grad()
    def default_predict(self, model, batch, thresholds):
        return postprocess(model(batch['images'].to(self.device)), thresholds)

    @torch.no_grad()
    def evaluate(self, model, samples, predict_fn=None, measure_speed=True, thresholds=None):
        """
        :param predict_fn: callable(batch) -> list of Prediction; defaults to the model
        :raises EmptyDatasetError: on an empty sample set
        """
        if samples is None or len(samples) == 0:
            raise EmptyDatasetError("evaluation over an empty dataset")
        model_cfg = self.config.model
        eval_cfg = self.config.eval
        thresholds = thresholds or eval_cfg.thresholds
        if model is not None:
            model.eval()
        predict_fn = predict_fn or (lambda batch: self.default_predict(model, batch, thresholds))

        det_preds, det_gts = [], []
        da_counts = []
        lane_counts = ConfusionCounts()
        lane_preds, lane_raw = [], []
        images = 0
        for batch in self.batches(samples):
            predictions = predict_fn(batch)
            for b, pred in enumerate(predictions):
                images += 1
                if model_cfg.has_detection:
                    target = batch['detections'][b]
                    keep = pred.scores >= eval_cfg.score_floor
                    det_preds.append({'boxes': _xyxy(pred.boxes[keep]), 'scores': pred.scores[keep],
                                      'labels': pred.labels[keep]})
                    det_gts.append({'boxes': _xyxy(target['boxes'].numpy()), 'labels': target['labels'].numpy()})
                if 'drivable' in pred.masks:
                    da_counts.append(confusion_counts(pred.masks['drivable'], batch['drivable'][b, 0].numpy()))
                if 'lane' in pred.masks:
                    lane_counts = lane_counts + confusion_counts(pred.masks['lane'], batch['lane'][b, 0].numpy())
                    if 'lane_raw' in batch:
                        lane_preds.append(pred.masks['lane'])
                        lane_raw.append(batch['lane_raw'][b, 0].numpy())

        metrics = MetricsRecord()
        if model_cfg.has_detection:
            try:
                metrics.map50, metrics.recall = detection_metrics(det_preds, det_gts, eval_cfg.iou_threshold,
                                                                  eval_cfg.score_floor)
            except EmptyDatasetError as e:
                self.logger.warning('Detection metrics skipped: %s', e)
        if da_counts:
            metrics.miou = region_miou(da_counts)
        if 'lane' in model_cfg.seg_tasks and lane_counts.total:
            scores = lane_metrics(lane_counts)
            metrics.lane_iou, metrics.lane_acc = scores.as_tuple()

        fairness = fairness_report(lane_preds, lane_raw) if lane_preds else None
        if measure_speed and model is not None:
            metrics.fps = self.measure_throughput(model, samples)
        self.logger.info('Evaluated %s images: %s', images, metrics.to_dict())
        return EvaluationResult(metrics=metrics, fairness=fairness, images=images)

    @torch.no_grad()
    def measure_throughput(self, model, samples, frames=None, warmup=None, clock=time.perf_counter):
        """
        Single-stream frames per second at batch size 1; warm-up frames are
        not timed. ``clock`` is injectable for tests.
        """
        frames = frames or self.config.eval.fps_frames
        warmup = self.config.eval.fps_warmup if warmup is None else warmup
        dataset = samples if isinstance(samples, PerceptionDataset) else PerceptionDataset(samples)
        model.eval()
        sync = torch.cuda.synchronize if str(self.device).startswith('cuda') else (lambda: None)

        def frame(i):
            model(dataset[i % len(dataset)]['image'].unsqueeze(0).to(self.device))

        for i in range(warmup):
            frame(i)
        sync()
        start = clock()
        for i in range(frames):
            frame(i)
        sync()
        return measure_fps(frames, clock() - start)

    @torch.no_grad()
    def sweep_thresholds(self, model, samples, grid=None):
        """
        Segmentation metrics with one confidence threshold applied to both
        tasks, for every threshold of ``grid``.
        """
        grid = tuple(grid or self.config.eval.sweep_grid)
        if samples is None or len(samples) == 0:
            raise EmptyDatasetError("threshold sweep over an empty dataset")
        model.eval()
        da_counts = {t: [] for t in grid}
        lane_counts = {t: ConfusionCounts() for t in grid}
        lane_pixels = {t: 0 for t in grid}
        for batch in self.batches(samples):
            seg = model(batch['images'].to(self.device))['segmentation']
            probs = {task: torch.sigmoid(logits[:, 0]).cpu() for task, logits in seg.items()}
            for t in grid:
                for b in range(batch['images'].shape[0]):
                    if 'drivable' in probs:
                        mask = threshold_masks(probs['drivable'][b], t).numpy()
                        da_counts[t].append(confusion_counts(mask, batch['drivable'][b, 0].numpy()))
                    if 'lane' in probs:
                        mask = threshold_masks(probs['lane'][b], t).numpy()
                        lane_pixels[t] += int(mask.sum())
                        lane_counts[t] = lane_counts[t] + confusion_counts(mask, batch['lane'][b, 0].numpy())

        rows = []
        for t in grid:
            row = {'threshold': t, 'miou': region_miou(da_counts[t]) if da_counts[t] else None}
            if lane_counts[t].total:
                row['lane_iou'], row['lane_acc'] = lane_metrics(lane_counts[t]).as_tuple()
                row['lane_pixels'] = lane_pixels[t]
            rows.append(row)
        return rows


def evaluate(config, checkpoint, samples, device='cpu', predict_fn=None):
    model, _, _ = load_model(checkpoint, device, config)
    return Evaluator(config, device).evaluate(model, samples, predict_fn=predict_fn)


def sweep_thresholds(config, checkpoint, samples, grid=None, device='cpu'):
    model, _, _ = load_model(checkpoint, device, config)
    return Evaluator(config, device).sweep_thresholds(model, samples, grid)
