import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from driving_perception.exceptions import ConfigError, InvalidInputError
from driving_perception.network.config import SegDecoderConfig, SEG_TASKS
from driving_perception.network.encoder_backbone import ConvNormLayer, FeaturePyramid

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = (0.45, 0.9)


class ScaleWeights(nn.Module):
    """Learnable task x scale logits; rows are softmax-normalised when read."""

    def __init__(self, tasks=SEG_TASKS, num_scales=3):
        super().__init__()
        self.tasks = tuple(tasks)
        self.logits = nn.Parameter(torch.zeros(len(self.tasks), num_scales))

    @classmethod
    def from_weights(cls, weights):
        """
        :param weights: dict task -> sequence of positive per-scale weights
        """
        tasks = tuple(weights)
        module = cls(tasks, num_scales=len(next(iter(weights.values()))))
        with torch.no_grad():
            for i, task in enumerate(tasks):
                module.logits[i] = torch.log(torch.as_tensor(weights[task], dtype=module.logits.dtype))
        return module

    @property
    def weights(self):
        return torch.softmax(self.logits, dim=1)

    def task_index(self, task):
        if task not in self.tasks:
            raise InvalidInputError(f"unknown segmentation task '{task}', expected one of {self.tasks}")
        return self.tasks.index(task)

    def row(self, task):
        return self.weights[self.task_index(task)]

    def is_normalized(self, tol=1e-6):
        w = self.weights.detach()
        return bool(torch.all((w.sum(dim=1) - 1).abs() <= tol) and torch.all(w > 0))


def threshold_masks(prob, threshold):
    return (prob >= threshold).to(torch.uint8)


def validate_thresholds(thresholds):
    for t in thresholds:
        if not 0.0 < float(t) < 1.0:
            raise ConfigError(f"threshold {t} must lie in (0, 1)")
    return tuple(float(t) for t in thresholds)


@dataclass
class SegMasks:
    """Per-task probability maps [B, H, W] and their binary masks."""
    thresholds: Tuple[float, float]
    drivable_prob: Optional[torch.Tensor] = None
    lane_prob: Optional[torch.Tensor] = None
    drivable_mask: Optional[torch.Tensor] = None
    lane_mask: Optional[torch.Tensor] = None


def predict_masks(logits, thresholds=DEFAULT_THRESHOLDS):
    """
    :param logits: dict task -> [B, 1, H, W] logits
    :param thresholds: (t_da, t_ll)
    :return: SegMasks
    """
    t_da, t_ll = validate_thresholds(thresholds)
    masks = SegMasks(thresholds=(t_da, t_ll))
    if 'drivable' in logits:
        masks.drivable_prob = torch.sigmoid(logits['drivable'][:, 0])
        masks.drivable_mask = threshold_masks(masks.drivable_prob, t_da)
    if 'lane' in logits:
        masks.lane_prob = torch.sigmoid(logits['lane'][:, 0])
        masks.lane_mask = threshold_masks(masks.lane_prob, t_ll)
    return masks


class UpsampleStage(nn.Module):
    def __init__(self, ch_in, ch_out):
        super().__init__()
        self.deconv = nn.ConvTranspose2d(ch_in, ch_out, kernel_size=4, stride=2, padding=1, bias=False)
        self.norm = nn.BatchNorm2d(ch_out)
        self.act = nn.SiLU()

    def forward(self, x):
        return self.act(self.norm(self.deconv(x)))


class RefineHead(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.block = ConvNormLayer(channels, channels, 3, 1, act='silu')
        self.out = nn.Conv2d(channels, 1, 1)

    def forward(self, x):
        return self.out(self.block(x))


class SegmentationDecoder(nn.Module):
    """
    One decoder for all segmentation tasks: per-scale 1x1 projection,
    bilinear alignment to stride 8, task-weighted scale sum, a shared 8x
    transposed-conv trunk and a refinement head per task.
    """

    def __init__(self, cfg: SegDecoderConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.proj_channels
        self.proj = nn.ModuleList([nn.Conv2d(cfg.in_channels, c, 1) for _ in range(3)])
        self.scale_weights = ScaleWeights(cfg.tasks)
        widths = [c, c // 2, max(c // 4, 8), max(c // 4, 8)]
        self.trunk = nn.Sequential(*[UpsampleStage(widths[i], widths[i + 1]) for i in range(3)])
        self.heads = nn.ModuleDict({task: RefineHead(widths[-1]) for task in cfg.tasks})

    @property
    def tasks(self):
        return self.cfg.tasks

    def project_align_stack(self, pyramid: FeaturePyramid):
        feats = pyramid.as_list()
        size = feats[0].shape[-2:]
        aligned = []
        for proj, feat in zip(self.proj, feats):
            x = proj(feat)
            if x.shape[-2:] != size:
                x = F.interpolate(x, size=size, mode='bilinear', align_corners=False)
            aligned.append(x)
        return torch.stack(aligned, dim=1)

    def fuse_scales(self, stacked, task):
        w = self.scale_weights.row(task).to(stacked.dtype)
        return (w.view(1, -1, 1, 1, 1) * stacked).sum(dim=1)

    def upsample_refine(self, fused, task):
        if task not in self.heads:
            raise InvalidInputError(f"no refinement head for task '{task}'")
        return self.heads[task](self.trunk(fused))

    def forward(self, pyramid: FeaturePyramid):
        stacked = self.project_align_stack(pyramid)
        return {task: self.upsample_refine(self.fuse_scales(stacked, task), task) for task in self.tasks}

    @torch.no_grad()
    def predict_masks(self, pyramid: FeaturePyramid, thresholds=DEFAULT_THRESHOLDS):
        return predict_masks(self.forward(pyramid), thresholds)
