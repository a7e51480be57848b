import logging
from dataclasses import dataclass, asdict

import numpy as np
import torch

from driving_perception.config import PERCEPTION_LOG_LEVEL, LOG_FORMAT
from driving_perception.exceptions import EmptyDatasetError, InvalidInputError
from driving_perception.helper.LaneLabelHelper import as_binary, dilate_mask
from driving_perception.network.box_ops import box_iou

logging.basicConfig(
    level=PERCEPTION_LOG_LEVEL,
    format=LOG_FORMAT
)

logger = logging.getLogger('MetricsHelper')

RECALL_SCORE_FLOOR = 0.001


@dataclass
class ConfusionCounts:
    tn: int = 0
    fp: int = 0
    fn: int = 0
    tp: int = 0

    @property
    def total(self):
        return self.tn + self.fp + self.fn + self.tp

    def __add__(self, other):
        return ConfusionCounts(self.tn + other.tn, self.fp + other.fp, self.fn + other.fn, self.tp + other.tp)

    def to_dict(self):
        return asdict(self)


@dataclass
class LaneScores:
    """IoU and LineAccuracy; an undefined value is reported as 0.0 with its flag cleared."""
    iou: float
    line_accuracy: float
    iou_defined: bool = True
    accuracy_defined: bool = True

    def as_tuple(self):
        return self.iou, self.line_accuracy


def confusion_counts(pred, gt):
    pred, gt = as_binary(pred), as_binary(gt)
    if pred.shape != gt.shape:
        raise InvalidInputError(f"prediction {pred.shape} and ground truth {gt.shape} differ in size")
    pred, gt = pred.astype(bool), gt.astype(bool)
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return ConfusionCounts(tn=int(pred.size) - tp - fp - fn, fp=fp, fn=fn, tp=tp)


def lane_metrics(counts: ConfusionCounts):
    iou_den = counts.tp + counts.fn + counts.fp
    acc_den = counts.tp + counts.fn
    return LaneScores(iou=counts.tp / iou_den if iou_den else 0.0,
                      line_accuracy=counts.tp / acc_den if acc_den else 0.0,
                      iou_defined=iou_den > 0, accuracy_defined=acc_den > 0)


def region_miou(per_image_counts):
    """
    Dataset mIoU over foreground and background. Intersections and unions
    are summed over all images per class; a class whose union is empty over
    the whole dataset is skipped.
    """
    per_image_counts = list(per_image_counts)
    if not per_image_counts:
        raise EmptyDatasetError("mIoU over an empty dataset")
    total = sum(per_image_counts, ConfusionCounts())
    classes = [(total.tp, total.tp + total.fp + total.fn), (total.tn, total.tn + total.fp + total.fn)]
    ious = [inter / union for inter, union in classes if union > 0]
    if not ious:
        raise EmptyDatasetError("mIoU over masks without any pixels")
    return float(np.mean(ious))


def average_precision(recall, precision):
    """All-points interpolated area under the PR curve."""
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([1.0], precision, [0.0]))
    mpre = np.flip(np.maximum.accumulate(np.flip(mpre)))
    i = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[i + 1] - mrec[i]) * mpre[i + 1]))


def _as_boxes(boxes):
    return torch.as_tensor(np.asarray(boxes, dtype=np.float64).reshape(-1, 4))


def detection_metrics(predictions, ground_truths, iou_thresh=0.5, score_floor=RECALL_SCORE_FLOOR):
    """
    Greedy score-ordered matching; AP and recall per class, averaged over
    the classes that have ground truth.

    :param predictions: per image, dict with 'boxes' [K, 4] xyxy, 'scores' [K], optional 'labels' [K]
    :param ground_truths: per image, dict with 'boxes' [M, 4] xyxy, optional 'labels' [M]
    :return: (map50, recall)
    :raises EmptyDatasetError: when there is no ground truth at all
    """
    if len(predictions) != len(ground_truths):
        raise InvalidInputError(f"{len(predictions)} prediction sets for {len(ground_truths)} images")

    gt_by_class = {}
    for img, gt in enumerate(ground_truths):
        boxes = _as_boxes(gt['boxes'])
        labels = np.asarray(gt.get('labels', np.zeros(len(boxes))), dtype=np.int64).reshape(-1)
        for cls in np.unique(labels):
            gt_by_class.setdefault(int(cls), {})[img] = boxes[torch.as_tensor(labels == cls)]
    num_gt = {cls: sum(len(b) for b in per_img.values()) for cls, per_img in gt_by_class.items()}
    if sum(num_gt.values()) == 0:
        raise EmptyDatasetError("no ground-truth boxes in the dataset")

    aps, recalls = [], []
    for cls, gt_images in gt_by_class.items():
        entries = []
        for img, pred in enumerate(predictions):
            boxes = _as_boxes(pred['boxes'])
            scores = np.asarray(pred['scores'], dtype=np.float64).reshape(-1)
            labels = np.asarray(pred.get('labels', np.zeros(len(scores))), dtype=np.int64).reshape(-1)
            for k in np.flatnonzero(labels == cls):
                entries.append((scores[k], img, boxes[k]))
        # stable on ties: earlier images and detections first
        entries.sort(key=lambda e: -e[0])

        matched = {img: np.zeros(len(b), dtype=bool) for img, b in gt_images.items()}
        tp = np.zeros(len(entries))
        for n, (score, img, box) in enumerate(entries):
            gt_boxes = gt_images.get(img)
            if gt_boxes is None or len(gt_boxes) == 0:
                continue
            ious = box_iou(box[None], gt_boxes)[0].numpy()
            ious[matched[img]] = -1.0
            best = int(np.argmax(ious))
            if ious[best] >= iou_thresh:
                matched[img][best] = True
                tp[n] = 1

        if entries:
            tp_cum = np.cumsum(tp)
            fp_cum = np.cumsum(1 - tp)
            aps.append(average_precision(tp_cum / num_gt[cls], tp_cum / (tp_cum + fp_cum)))
        else:
            aps.append(0.0)
        floor_tp = sum(t for t, e in zip(tp, entries) if e[0] >= score_floor)
        recalls.append(floor_tp / num_gt[cls])
    return float(np.mean(aps)), float(np.mean(recalls))


def measure_fps(frame_count, elapsed):
    if elapsed <= 0:
        raise InvalidInputError(f"elapsed time must be positive, got {elapsed}")
    if frame_count < 1:
        raise InvalidInputError(f"frame count must be >= 1, got {frame_count}")
    return frame_count / elapsed


def fairness_report(pred_masks, raw_gt_masks):
    """
    Lane metrics of the same predictions against the raw (2 px) labels and
    against their dilated (8 px) version, plus the FP:TP ratio on the raw side.
    """
    raw = ConfusionCounts()
    dilated = ConfusionCounts()
    pairs = 0
    for pred, gt in zip(pred_masks, raw_gt_masks):
        raw = raw + confusion_counts(pred, gt)
        dilated = dilated + confusion_counts(pred, dilate_mask(gt))
        pairs += 1
    if pairs == 0:
        raise EmptyDatasetError("fairness report over no mask pairs")
    raw_scores, dilated_scores = lane_metrics(raw), lane_metrics(dilated)
    report = {
        'pairs': pairs,
        'raw': {'counts': raw.to_dict(), 'iou': raw_scores.iou, 'line_accuracy': raw_scores.line_accuracy},
        'dilated': {'counts': dilated.to_dict(), 'iou': dilated_scores.iou,
                    'line_accuracy': dilated_scores.line_accuracy},
        'fp_per_tp': raw.fp / raw.tp if raw.tp else None,
    }
    logger.info('Lane IoU raw %.4f vs dilated %.4f, ACC raw %.4f vs dilated %.4f', raw_scores.iou,
                dilated_scores.iou, raw_scores.line_accuracy, dilated_scores.line_accuracy)
    return report
