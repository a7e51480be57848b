"""
Box conversions and (generalized) IoU for normalized boxes.

Degenerate boxes are allowed: a zero-area box behaves like a point, so its
IoU with anything is 0 instead of 0/0.
"""
import torch
from torchvision.ops import box_convert


def box_cxcywh_to_xyxy(boxes):
    return box_convert(boxes, in_fmt='cxcywh', out_fmt='xyxy')


def box_xyxy_to_cxcywh(boxes):
    return box_convert(boxes, in_fmt='xyxy', out_fmt='cxcywh')


def _area(boxes):
    return (boxes[..., 2] - boxes[..., 0]).clamp(min=0) * (boxes[..., 3] - boxes[..., 1]).clamp(min=0)


def _safe_div(num, den):
    zero = torch.zeros_like(num)
    return torch.where(den > 0, num / torch.where(den > 0, den, torch.ones_like(den)), zero)


def _iou_giou(boxes1, boxes2):
    # boxes1/boxes2 broadcast against each other
    area1 = _area(boxes1)
    area2 = _area(boxes2)

    lt = torch.max(boxes1[..., :2], boxes2[..., :2])
    rb = torch.min(boxes1[..., 2:], boxes2[..., 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area1 + area2 - inter
    iou = _safe_div(inter, union)

    lt_c = torch.min(boxes1[..., :2], boxes2[..., :2])
    rb_c = torch.max(boxes1[..., 2:], boxes2[..., 2:])
    wh_c = (rb_c - lt_c).clamp(min=0)
    area_c = wh_c[..., 0] * wh_c[..., 1]
    giou = iou - _safe_div(area_c - union, area_c)
    return iou, giou


def box_iou(boxes1, boxes2):
    """Pairwise IoU matrix [N, M] for xyxy boxes."""
    iou, _ = _iou_giou(boxes1[:, None, :], boxes2[None, :, :])
    return iou


def generalized_box_iou(boxes1, boxes2):
    """Pairwise GIoU matrix [N, M] for xyxy boxes."""
    _, giou = _iou_giou(boxes1[:, None, :], boxes2[None, :, :])
    return giou


def paired_iou(boxes1, boxes2):
    iou, _ = _iou_giou(boxes1, boxes2)
    return iou


def giou(box_a, box_b):
    """
    Generalized IoU of aligned xyxy boxes (any matching leading shape).

    :param box_a: tensor [..., 4]
    :param box_b: tensor [..., 4]
    :return: tensor [...] in [-1, 1]
    """
    _, value = _iou_giou(box_a, box_b)
    return value
