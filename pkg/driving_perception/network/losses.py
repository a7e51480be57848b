"""
Training objective.

Detection: Hungarian-matched set loss on the final decoder layer plus the
same loss on every earlier layer (each re-matched), a denoising branch with a
static query-to-GT assignment, and a loss on the query-selection proposals.
Segmentation: focal + BCE for the drivable area, focal + Tversky for lanes.
The total is the plain sum of the per-task terms.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Set

import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment
from torchvision.ops import sigmoid_focal_loss

from driving_perception.exceptions import InfeasibleMatchError, InvalidInputError, TrainingAbortError
from driving_perception.network.box_ops import box_cxcywh_to_xyxy, box_xyxy_to_cxcywh, generalized_box_iou, \
    giou, paired_iou
from driving_perception.network.config import LossConfig, LossWeights, ModelConfig

logger = logging.getLogger(__name__)


@dataclass
class MatchResult:
    """GT index -> prediction index, plus the predictions left unmatched."""
    assignment: Dict[int, int]
    unmatched: Set[int]
    total_cost: float = 0.0

    @property
    def num_matched(self):
        return len(self.assignment)

    def index_tensors(self, device=None):
        gt = sorted(self.assignment)
        pred = [self.assignment[j] for j in gt]
        return (torch.as_tensor(pred, dtype=torch.long, device=device),
                torch.as_tensor(gt, dtype=torch.long, device=device))


@dataclass
class StaticAssignment:
    """Fixed (prediction, GT) pairs; a GT may be paired with several predictions."""
    pred: List[int]
    gt: List[int]
    unmatched: Set[int]

    @property
    def num_matched(self):
        return len(self.pred)

    def index_tensors(self, device=None):
        return (torch.as_tensor(self.pred, dtype=torch.long, device=device),
                torch.as_tensor(self.gt, dtype=torch.long, device=device))


def hungarian_match(cost_matrix):
    """
    Minimum-cost injective assignment of GTs (columns) to predictions (rows).

    :param cost_matrix: array-like [N, M]
    :raises InfeasibleMatchError: when M > N
    """
    cost = torch.as_tensor(cost_matrix).detach().cpu()
    n, m = cost.shape
    if m > n:
        raise InfeasibleMatchError(f"{m} ground-truth objects cannot be matched to {n} predictions")
    if m == 0:
        return MatchResult(assignment={}, unmatched=set(range(n)))
    rows, cols = linear_sum_assignment(cost.numpy())
    assignment = {int(j): int(i) for i, j in zip(rows, cols)}
    total = float(cost[rows, cols].sum())
    return MatchResult(assignment=assignment, unmatched=set(range(n)) - set(assignment.values()),
                       total_cost=total)


def matching_cost(pred_logits, pred_boxes, gt_labels, gt_boxes, weights: LossWeights):
    """[N, M] cost: alpha * (-class prob) + beta * L1 + gamma * (1 - GIoU)."""
    prob = pred_logits.sigmoid()
    cost_class = -prob[:, gt_labels]
    cost_bbox = torch.cdist(pred_boxes, gt_boxes, p=1)
    cost_giou = 1 - generalized_box_iou(box_cxcywh_to_xyxy(pred_boxes), box_cxcywh_to_xyxy(gt_boxes))
    return weights.alpha * cost_class + weights.beta * cost_bbox + weights.gamma * cost_giou


class HungarianMatcher(nn.Module):
    def __init__(self, weights: LossWeights):
        super().__init__()
        self.weights = weights

    @torch.no_grad()
    def forward(self, pred_logits, pred_boxes, targets):
        """
        :param pred_logits: [B, N, C_cls]
        :param pred_boxes: [B, N, 4] cxcywh
        :param targets: list of dicts with 'labels' [M_b] and 'boxes' [M_b, 4]
        :return: list of MatchResult, one per image
        """
        results = []
        for b, target in enumerate(targets):
            n = pred_logits.shape[1]
            if len(target['labels']) == 0:
                results.append(MatchResult(assignment={}, unmatched=set(range(n))))
                continue
            cost = matching_cost(pred_logits[b].float(), pred_boxes[b].float(), target['labels'],
                                 target['boxes'].float(), self.weights)
            results.append(hungarian_match(cost))
        return results


def core_loss(pred_boxes, pred_logits, targets, matches, loss_cfg: LossConfig):
    """
    Set loss for one decoder output.

    Matched classification and box terms are normalized by the number of
    matched GTs M, the unmatched background term by N - M (0 when N = M).

    :return: dict with 'cls_match', 'bbox_l1', 'bbox_giou', 'cls_unmatch', weighted
    """
    w = loss_cfg.weights
    device = pred_logits.device
    num_classes = pred_logits.shape[-1]
    zero = pred_logits.sum() * 0.0

    src_logits, src_boxes, tgt_boxes, tgt_labels = [], [], [], []
    unmatched_logits = []
    for b, (target, match) in enumerate(zip(targets, matches)):
        pred_idx, gt_idx = match.index_tensors(device)
        src_logits.append(pred_logits[b, pred_idx])
        src_boxes.append(pred_boxes[b, pred_idx])
        tgt_boxes.append(target['boxes'][gt_idx].to(pred_boxes.dtype))
        tgt_labels.append(target['labels'][gt_idx])
        if match.unmatched:
            unmatched_logits.append(pred_logits[b, sorted(match.unmatched)])

    num_matched = sum(m.num_matched for m in matches)
    losses = {}
    if num_matched > 0:
        src_logits = torch.cat(src_logits)
        src_boxes = torch.cat(src_boxes)
        tgt_boxes = torch.cat(tgt_boxes)
        tgt_labels = torch.cat(tgt_labels)

        src_xyxy, tgt_xyxy = box_cxcywh_to_xyxy(src_boxes), box_cxcywh_to_xyxy(tgt_boxes)
        iou = paired_iou(src_xyxy, tgt_xyxy).detach()
        onehot = F.one_hot(tgt_labels, num_classes).to(src_logits.dtype)
        target_score = onehot * iou.unsqueeze(-1)
        pred_score = src_logits.sigmoid().detach()
        weight = loss_cfg.vfl_alpha * pred_score.pow(loss_cfg.vfl_gamma) * (1 - onehot) + target_score
        cls = F.binary_cross_entropy_with_logits(src_logits, target_score, weight=weight, reduction='none')

        losses['cls_match'] = w.alpha * cls.sum() / num_matched
        losses['bbox_l1'] = w.beta * (src_boxes - tgt_boxes).abs().sum() / num_matched
        losses['bbox_giou'] = w.gamma * (1 - giou(src_xyxy, tgt_xyxy)).sum() / num_matched
    else:
        losses['cls_match'] = zero
        losses['bbox_l1'] = zero
        losses['bbox_giou'] = zero

    if unmatched_logits:
        unmatched_logits = torch.cat(unmatched_logits)
        bg = F.binary_cross_entropy_with_logits(unmatched_logits, torch.zeros_like(unmatched_logits),
                                                reduction='sum')
        losses['cls_unmatch'] = w.alpha * bg / unmatched_logits.shape[0]
    else:
        losses['cls_unmatch'] = zero
    return losses


def detection_loss(per_layer, targets, loss_cfg: LossConfig, matcher=None, indices=None, return_components=False):
    """
    Final-layer set loss plus the auxiliary loss over the first L-1 layers.

    :param per_layer: list of (boxes [B,N,4], logits [B,N,C]) for layers 1..L
    :param indices: fixed matches for every layer; re-matched per layer when None
    """
    matcher = matcher or HungarianMatcher(loss_cfg.weights)

    def layer_loss(boxes, logits):
        matches = indices if indices is not None else matcher(logits, boxes, targets)
        return sum(core_loss(boxes, logits, targets, matches, loss_cfg).values())

    final_boxes, final_logits = per_layer[-1]
    core = layer_loss(final_boxes, final_logits)
    aux_terms = [layer_loss(b, l) for b, l in per_layer[:-1]]
    aux = sum(aux_terms) if aux_terms else core * 0.0
    if return_components:
        return {'core': core, 'aux': aux, 'aux_layers': len(aux_terms)}
    return core + aux


@dataclass
class DenoisingGroup:
    """
    K = G * M noisy GT copies per image, laid out group-major: slot
    g * M + j holds the copy of GT j in group g. Even groups are positive
    (supervised against their source GT), odd groups negative.
    """
    labels: torch.Tensor       # [B, K] long; num_classes marks empty slots
    boxes: torch.Tensor        # [B, K, 4] normalized cxcywh
    positive: torch.Tensor     # [K] bool
    group_of: torch.Tensor     # [K] long, source GT index of each slot
    valid: torch.Tensor        # [B, K] bool, slot refers to an existing GT
    attn_mask: Optional[torch.Tensor]  # [K + N, K + N] bool, True = blocked
    num_groups: int = 0
    num_gt: int = 0

    @property
    def size(self):
        return self.num_groups * self.num_gt


def _empty_group(batch_size, device):
    return DenoisingGroup(labels=torch.zeros(batch_size, 0, dtype=torch.long, device=device),
                          boxes=torch.zeros(batch_size, 0, 4, device=device),
                          positive=torch.zeros(0, dtype=torch.bool, device=device),
                          group_of=torch.zeros(0, dtype=torch.long, device=device),
                          valid=torch.zeros(batch_size, 0, dtype=torch.bool, device=device),
                          attn_mask=None)


def denoising_attn_mask(num_groups, num_gt, num_queries, device=None):
    num_dn = num_groups * num_gt
    total = num_dn + num_queries
    mask = torch.zeros(total, total, dtype=torch.bool, device=device)
    # matching queries cannot see the denoising part
    mask[num_dn:, :num_dn] = True
    for g in range(num_groups):
        start, end = g * num_gt, (g + 1) * num_gt
        mask[start:end, :start] = True
        mask[start:end, end:num_dn] = True
    return mask


def build_denoising_group(targets, num_groups, num_queries, num_classes, box_noise_scale=1.0,
                          label_flip_prob=0.5, generator=None, device=None):
    """
    :param targets: list of dicts with 'labels' [M_b] and 'boxes' [M_b, 4] cxcywh
    :param generator: torch.Generator driving all noise draws
    """
    batch_size = len(targets)
    device = device or (targets[0]['boxes'].device if targets else 'cpu')
    num_gt = max((len(t['labels']) for t in targets), default=0)
    if num_gt == 0 or num_groups == 0:
        return _empty_group(batch_size, device)

    k = num_groups * num_gt
    labels = torch.full((batch_size, k), num_classes, dtype=torch.long)
    boxes = torch.zeros(batch_size, k, 4)
    valid = torch.zeros(batch_size, k, dtype=torch.bool)
    positive = torch.tensor([(slot // num_gt) % 2 == 0 for slot in range(k)], dtype=torch.bool)
    group_of = torch.arange(k) % num_gt

    def uniform(*shape, low=-1.0, high=1.0):
        return torch.rand(*shape, generator=generator) * (high - low) + low

    for b, target in enumerate(targets):
        m_b = len(target['labels'])
        if m_b == 0:
            continue
        gt_boxes = target['boxes'].detach().float().cpu()
        gt_labels = target['labels'].detach().cpu()
        for g in range(num_groups):
            slots = slice(g * num_gt, g * num_gt + m_b)
            wh = gt_boxes[:, 2:]
            size_jitter = uniform(m_b, 2) * 0.5 * box_noise_scale
            if g % 2 == 0:
                center_jitter = uniform(m_b, 2) * 0.5 * box_noise_scale
                noisy_labels = gt_labels.clone()
            else:
                sign = torch.where(uniform(m_b, 2) >= 0, 1.0, -1.0)
                center_jitter = sign * uniform(m_b, 2, low=0.5, high=1.0) * box_noise_scale
                noisy_labels = gt_labels.clone()
                flip = torch.rand(m_b, generator=generator) < label_flip_prob
                random_labels = torch.randint(0, num_classes, (m_b,), generator=generator)
                noisy_labels = torch.where(flip, random_labels, noisy_labels)
            if box_noise_scale > 0:
                cxcy = gt_boxes[:, :2] + center_jitter * wh
                new_wh = wh * (1 + size_jitter)
                xyxy = box_cxcywh_to_xyxy(torch.cat([cxcy, new_wh], dim=-1)).clamp(0.0, 1.0)
                noisy = box_xyxy_to_cxcywh(xyxy)
                noisy[:, 2:] = noisy[:, 2:].clamp(min=1e-3)
            else:
                noisy = gt_boxes.clone()
            boxes[b, slots] = noisy
            labels[b, slots] = noisy_labels
            valid[b, slots] = True

    return DenoisingGroup(labels=labels.to(device), boxes=boxes.to(device), positive=positive.to(device),
                          group_of=group_of.to(device), valid=valid.to(device),
                          attn_mask=denoising_attn_mask(num_groups, num_gt, num_queries, device),
                          num_groups=num_groups, num_gt=num_gt)


def denoising_matches(group: DenoisingGroup, targets):
    """
    Static assignment: slot g * M + j of every positive group g is paired
    with GT j; all other slots (negative groups, empty padding) are unmatched.
    """
    matches = []
    for target in targets:
        m_b = len(target['labels'])
        pred, gt = [], []
        for g in range(0, group.num_groups, 2):
            pred.extend(g * group.num_gt + j for j in range(m_b))
            gt.extend(range(m_b))
        matches.append(StaticAssignment(pred=pred, gt=gt, unmatched=set(range(group.size)) - set(pred)))
    return matches


def denoising_loss(dn_per_layer, group: DenoisingGroup, targets, loss_cfg: LossConfig):
    """
    Set loss on every decoder layer's denoising outputs with matching
    replaced by the static slot -> GT assignment.
    """
    if not dn_per_layer or group.size == 0:
        return torch.zeros(())
    matches = denoising_matches(group, targets)
    return sum(sum(core_loss(boxes, logits, targets, matches, loss_cfg).values())
               for boxes, logits in dn_per_layer)


def focal_loss(logits, target, gamma_f=2.0, alpha_f=0.25):
    """Mean over pixels of -alpha_t (1 - p_t)^gamma log p_t, computed from logits."""
    return sigmoid_focal_loss(logits, target.to(logits.dtype), alpha=alpha_f, gamma=gamma_f, reduction='mean')


def bce_loss(logits, target):
    return F.binary_cross_entropy_with_logits(logits, target.to(logits.dtype))


def tversky_loss(prob, target, alpha_tv=0.3, beta_tv=0.7, smooth=1.0):
    """
    1 - (TP + s) / (TP + alpha FP + beta FN + s) with soft counts over all
    pixels of the batch.
    """
    target = target.to(prob.dtype)
    tp = (prob * target).sum()
    fp = (prob * (1 - target)).sum()
    fn = ((1 - prob) * target).sum()
    den = tp + alpha_tv * fp + beta_tv * fn + smooth
    if float(den) == 0.0:
        return tp * 0.0
    return 1 - (tp + smooth) / den


def _check_pair(logits, gt, name):
    if logits.shape != gt.shape:
        raise InvalidInputError(f"{name} logits {tuple(logits.shape)} and target {tuple(gt.shape)} differ")


def segmentation_losses(da_logits, da_gt, ll_logits, ll_gt, loss_cfg: LossConfig):
    """
    :return: (L_segda, L_segll); a term is None when its task is absent
    """
    w = loss_cfg.weights
    l_segda = l_segll = None
    if da_logits is not None:
        _check_pair(da_logits, da_gt, 'drivable')
        l_segda = w.lambda_fl * focal_loss(da_logits, da_gt, loss_cfg.focal_gamma, loss_cfg.focal_alpha) + \
            w.lambda_bce * bce_loss(da_logits, da_gt)
    if ll_logits is not None:
        _check_pair(ll_logits, ll_gt, 'lane')
        l_segll = w.lambda_fl * focal_loss(ll_logits, ll_gt, loss_cfg.focal_gamma, loss_cfg.focal_alpha) + \
            w.lambda_tv * tversky_loss(torch.sigmoid(ll_logits), ll_gt, loss_cfg.tversky_alpha,
                                       loss_cfg.tversky_beta, loss_cfg.tversky_smooth)
    return l_segda, l_segll


def total_loss(det=None, segda=None, segll=None):
    """
    Plain sum of the enabled task losses.

    :raises TrainingAbortError: naming the first non-finite component
    """
    total = None
    for name, value in (('detection', det), ('drivable', segda), ('lane', segll)):
        if value is None:
            continue
        value = torch.as_tensor(value)
        if not bool(torch.isfinite(value).all()):
            raise TrainingAbortError(name)
        total = value if total is None else total + value
    if total is None:
        return torch.zeros(())
    return total


@dataclass
class LossBreakdown:
    tasks: Dict[str, torch.Tensor] = field(default_factory=dict)
    details: Dict[str, float] = field(default_factory=dict)

    def total(self):
        return total_loss(self.tasks.get('detection'), self.tasks.get('drivable'), self.tasks.get('lane'))


class MultiTaskCriterion(nn.Module):
    """Per-task losses for the enabled tasks of a model configuration."""

    def __init__(self, model_cfg: ModelConfig, loss_cfg: LossConfig):
        super().__init__()
        self.model_cfg = model_cfg
        self.loss_cfg = loss_cfg
        self.matcher = HungarianMatcher(loss_cfg.weights)

    def detection_terms(self, det_out, targets, dn_group=None):
        components = detection_loss(det_out.per_layer, targets, self.loss_cfg, self.matcher,
                                    return_components=True)
        enc_boxes, enc_logits = det_out.enc
        enc = detection_loss([(enc_boxes, enc_logits)], targets, self.loss_cfg, self.matcher)
        dn = torch.zeros((), device=enc.device)
        if dn_group is not None and dn_group.size > 0:
            dn = denoising_loss(det_out.dn_per_layer, dn_group, targets, self.loss_cfg).to(enc.device)
        return {'core': components['core'], 'aux': components['aux'], 'enc': enc, 'dn': dn}

    def forward(self, outputs, batch, dn_group=None):
        """
        :param outputs: model output dict ('detection': DetectionSet, 'segmentation': dict task -> logits)
        :param batch: dict with 'detections' (list of target dicts), 'drivable', 'lane' [B,1,H,W]
        """
        breakdown = LossBreakdown()
        if self.model_cfg.has_detection:
            terms = self.detection_terms(outputs['detection'], batch['detections'], dn_group)
            breakdown.tasks['detection'] = sum(terms.values())
            breakdown.details.update({f"det_{k}": float(v.detach()) for k, v in terms.items()})

        seg = outputs.get('segmentation') or {}
        l_segda, l_segll = segmentation_losses(seg.get('drivable'), batch.get('drivable'),
                                               seg.get('lane'), batch.get('lane'), self.loss_cfg)
        if l_segda is not None:
            breakdown.tasks['drivable'] = l_segda
        if l_segll is not None:
            breakdown.tasks['lane'] = l_segll
        for name, value in breakdown.tasks.items():
            breakdown.details[name] = float(value.detach())
        return breakdown
