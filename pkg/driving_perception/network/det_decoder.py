"""
Query-based detection decoder.

The detection-branch pyramid is flattened into one token sequence, a scoring
head picks the top-N tokens as initial queries (with anchor-derived reference
boxes), and L decoder layers refine class logits and normalized cxcywh boxes.
No NMS is applied anywhere; every layer's output is kept for the auxiliary
loss.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn import init

from driving_perception.exceptions import ConfigError
from driving_perception.network.config import DetDecoderConfig
from driving_perception.network.encoder_backbone import ConvNormLayer, FeaturePyramid, get_activation

logger = logging.getLogger(__name__)


def inverse_sigmoid(x, eps=1e-5):
    x = x.clamp(min=0., max=1.)
    return torch.log(x.clamp(min=eps) / (1 - x).clamp(min=eps))


def bias_init_with_prob(prior_prob=0.01):
    return float(-math.log((1 - prior_prob) / prior_prob))


@dataclass
class QuerySelection:
    indices: torch.Tensor  # [B, N] token indices
    scores: torch.Tensor   # [B, N] max class logit of each selected token


@dataclass
class DetectionSet:
    boxes: torch.Tensor          # [B, N, 4] normalized cxcywh
    class_logits: torch.Tensor   # [B, N, C_cls]
    per_layer: List[Tuple[torch.Tensor, torch.Tensor]]
    selection: Optional[QuerySelection] = None
    init_boxes: Optional[torch.Tensor] = None
    enc: Optional[Tuple[torch.Tensor, torch.Tensor]] = None
    dn_per_layer: Optional[List[Tuple[torch.Tensor, torch.Tensor]]] = None
    spatial_shapes: List[Tuple[int, int]] = field(default_factory=list)

    @property
    def scores(self):
        return torch.sigmoid(self.class_logits)


def flatten_concat(feats):
    """
    [B, C, h_k, w_k] maps -> ([B, T, C] tokens, [(h_k, w_k)]), row-major per
    level, finest level first.
    """
    tokens, spatial_shapes = [], []
    for feat in feats:
        _, _, h, w = feat.shape
        tokens.append(feat.flatten(2).permute(0, 2, 1))
        spatial_shapes.append((h, w))
    return torch.cat(tokens, dim=1), spatial_shapes


def unflatten_tokens(tokens, spatial_shapes):
    b, _, c = tokens.shape
    chunks = tokens.split([h * w for h, w in spatial_shapes], dim=1)
    return [chunk.permute(0, 2, 1).reshape(b, c, h, w) for chunk, (h, w) in zip(chunks, spatial_shapes)]


def select_topk(scores, k):
    """
    Top-k token indices per row of ``scores`` [B, T]; ties go to the lower index.

    :raises ConfigError: when k exceeds the token count
    """
    if k > scores.shape[-1]:
        raise ConfigError(f"cannot select {k} queries from {scores.shape[-1]} tokens")
    values, indices = torch.sort(scores, dim=-1, descending=True, stable=True)
    return QuerySelection(indices=indices[..., :k], scores=values[..., :k])


def generate_anchors(spatial_shapes, grid_size=0.05, eps=1e-2, dtype=torch.float32, device='cpu'):
    """Logit-space anchors [1, T, 4] and a validity mask [1, T, 1]."""
    anchors = []
    for lvl, (h, w) in enumerate(spatial_shapes):
        grid_y, grid_x = torch.meshgrid(torch.arange(h), torch.arange(w), indexing='ij')
        grid_xy = torch.stack([grid_x, grid_y], dim=-1).to(dtype)
        grid_xy = (grid_xy.unsqueeze(0) + 0.5) / torch.tensor([w, h], dtype=dtype)
        wh = torch.ones_like(grid_xy) * grid_size * (2.0 ** lvl)
        anchors.append(torch.cat([grid_xy, wh], dim=-1).reshape(-1, h * w, 4))
    anchors = torch.cat(anchors, dim=1).to(device)
    valid_mask = ((anchors > eps) * (anchors < 1 - eps)).all(-1, keepdim=True)
    anchors = anchors.clamp(min=eps, max=1 - eps)
    return torch.log(anchors / (1 - anchors)), valid_mask


class MLP(nn.Module):
    def __init__(self, input_dim, hidden_dim, output_dim, num_layers, act='relu'):
        super().__init__()
        self.num_layers = num_layers
        h = [hidden_dim] * (num_layers - 1)
        self.layers = nn.ModuleList(nn.Linear(n, k) for n, k in zip([input_dim] + h, h + [output_dim]))
        self.act = get_activation(act)

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = self.act(layer(x)) if i < self.num_layers - 1 else layer(x)
        return x


def deformable_attention_core_func(value, value_spatial_shapes, sampling_locations, attention_weights):
    """
    :param value: [bs, value_length, n_head, c]
    :param value_spatial_shapes: [(h, w)] per level
    :param sampling_locations: [bs, query_length, n_head, n_levels, n_points, 2] in [0, 1]
    :param attention_weights: [bs, query_length, n_head, n_levels, n_points]
    :return: [bs, query_length, n_head * c]
    """
    bs, _, n_head, c = value.shape
    _, len_q, _, n_levels, n_points, _ = sampling_locations.shape

    value_list = value.split([h * w for h, w in value_spatial_shapes], dim=1)
    sampling_grids = 2 * sampling_locations - 1
    sampling_value_list = []
    for level, (h, w) in enumerate(value_spatial_shapes):
        value_l = value_list[level].flatten(2).permute(0, 2, 1).reshape(bs * n_head, c, h, w)
        grid_l = sampling_grids[:, :, :, level].permute(0, 2, 1, 3, 4).flatten(0, 1)
        sampling_value_list.append(
            F.grid_sample(value_l, grid_l, mode='bilinear', padding_mode='zeros', align_corners=False))

    attention_weights = attention_weights.permute(0, 2, 1, 3, 4).reshape(bs * n_head, 1, len_q, n_levels * n_points)
    output = (torch.stack(sampling_value_list, dim=-2).flatten(-2) * attention_weights).sum(-1)
    return output.reshape(bs, n_head * c, len_q).permute(0, 2, 1)


class MSDeformableAttention(nn.Module):
    def __init__(self, embed_dim=256, num_heads=8, num_levels=3, num_points=4):
        super().__init__()
        self.embed_dim = embed_dim
        self.num_heads = num_heads
        self.num_levels = num_levels
        self.num_points = num_points
        self.head_dim = embed_dim // num_heads
        total_points = num_heads * num_levels * num_points

        self.sampling_offsets = nn.Linear(embed_dim, total_points * 2)
        self.attention_weights = nn.Linear(embed_dim, total_points)
        self.value_proj = nn.Linear(embed_dim, embed_dim)
        self.output_proj = nn.Linear(embed_dim, embed_dim)
        self._reset_parameters()

    def _reset_parameters(self):
        init.constant_(self.sampling_offsets.weight, 0)
        thetas = torch.arange(self.num_heads, dtype=torch.float32) * (2.0 * math.pi / self.num_heads)
        grid_init = torch.stack([thetas.cos(), thetas.sin()], -1)
        grid_init = grid_init / grid_init.abs().max(-1, keepdim=True).values
        grid_init = grid_init.reshape(self.num_heads, 1, 1, 2).tile([1, self.num_levels, self.num_points, 1])
        scaling = torch.arange(1, self.num_points + 1, dtype=torch.float32).reshape(1, 1, -1, 1)
        grid_init *= scaling
        with torch.no_grad():
            self.sampling_offsets.bias.copy_(grid_init.flatten())

        init.constant_(self.attention_weights.weight, 0)
        init.constant_(self.attention_weights.bias, 0)
        init.xavier_uniform_(self.value_proj.weight)
        init.constant_(self.value_proj.bias, 0)
        init.xavier_uniform_(self.output_proj.weight)
        init.constant_(self.output_proj.bias, 0)

    def forward(self, query, reference_points, value, value_spatial_shapes):
        """
        :param query: [bs, query_length, C]
        :param reference_points: [bs, query_length, 1, 4] normalized cxcywh
        :param value: [bs, value_length, C]
        """
        bs, len_q = query.shape[:2]
        len_v = value.shape[1]

        value = self.value_proj(value).reshape(bs, len_v, self.num_heads, self.head_dim)
        sampling_offsets = self.sampling_offsets(query).reshape(
            bs, len_q, self.num_heads, self.num_levels, self.num_points, 2)
        attention_weights = self.attention_weights(query).reshape(
            bs, len_q, self.num_heads, self.num_levels * self.num_points)
        attention_weights = F.softmax(attention_weights, dim=-1).reshape(
            bs, len_q, self.num_heads, self.num_levels, self.num_points)

        # offsets are scaled by the reference box half-size
        sampling_locations = reference_points[:, :, None, :, None, :2] + \
            sampling_offsets / self.num_points * reference_points[:, :, None, :, None, 2:] * 0.5
        output = deformable_attention_core_func(value, value_spatial_shapes, sampling_locations, attention_weights)
        return self.output_proj(output)


class TransformerDecoderLayer(nn.Module):
    def __init__(self, d_model=256, n_head=8, dim_feedforward=1024, dropout=0., n_levels=3, n_points=4):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(d_model, n_head, dropout=dropout, batch_first=True)
        self.dropout1 = nn.Dropout(dropout)
        self.norm1 = nn.LayerNorm(d_model)

        self.cross_attn = MSDeformableAttention(d_model, n_head, n_levels, n_points)
        self.dropout2 = nn.Dropout(dropout)
        self.norm2 = nn.LayerNorm(d_model)

        self.linear1 = nn.Linear(d_model, dim_feedforward)
        self.activation = nn.ReLU()
        self.dropout3 = nn.Dropout(dropout)
        self.linear2 = nn.Linear(dim_feedforward, d_model)
        self.dropout4 = nn.Dropout(dropout)
        self.norm3 = nn.LayerNorm(d_model)

    @staticmethod
    def with_pos_embed(tensor, pos):
        return tensor if pos is None else tensor + pos

    def forward(self, tgt, reference_points, memory, memory_spatial_shapes, attn_mask=None, query_pos_embed=None):
        q = k = self.with_pos_embed(tgt, query_pos_embed)
        tgt2, _ = self.self_attn(q, k, value=tgt, attn_mask=attn_mask, need_weights=False)
        tgt = self.norm1(tgt + self.dropout1(tgt2))

        tgt2 = self.cross_attn(self.with_pos_embed(tgt, query_pos_embed), reference_points, memory,
                               memory_spatial_shapes)
        tgt = self.norm2(tgt + self.dropout2(tgt2))

        tgt2 = self.linear2(self.dropout3(self.activation(self.linear1(tgt))))
        return self.norm3(tgt + self.dropout4(tgt2))


class DetectionDecoder(nn.Module):
    def __init__(self, cfg: DetDecoderConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.hidden_dim
        self.num_queries = cfg.num_queries
        self.num_classes = cfg.num_classes

        self.input_proj = nn.ModuleList([ConvNormLayer(c, c, 1, 1) for _ in range(cfg.num_levels)])
        self.level_embed = nn.Embedding(cfg.num_levels, c)

        self.enc_output = nn.Sequential(nn.Linear(c, c), nn.LayerNorm(c))
        self.enc_score_head = nn.Linear(c, cfg.num_classes)
        self.enc_bbox_head = MLP(c, c, 4, 3)

        # the extra row is the padding label of empty denoising slots
        self.denoising_class_embed = nn.Embedding(cfg.num_classes + 1, c, padding_idx=cfg.num_classes)
        self.query_pos_head = MLP(4, 2 * c, c, 2)

        self.layers = nn.ModuleList([
            TransformerDecoderLayer(c, cfg.num_heads, c * cfg.ffn_ratio, cfg.dropout, cfg.num_levels, cfg.num_points)
            for _ in range(cfg.num_layers)])
        self.dec_score_head = nn.ModuleList([nn.Linear(c, cfg.num_classes) for _ in range(cfg.num_layers)])
        self.dec_bbox_head = nn.ModuleList([MLP(c, c, 4, 3) for _ in range(cfg.num_layers)])
        self._reset_parameters()

    def _reset_parameters(self):
        bias = bias_init_with_prob(0.01)
        init.constant_(self.enc_score_head.bias, bias)
        init.constant_(self.enc_bbox_head.layers[-1].weight, 0)
        init.constant_(self.enc_bbox_head.layers[-1].bias, 0)
        for cls_, reg_ in zip(self.dec_score_head, self.dec_bbox_head):
            init.constant_(cls_.bias, bias)
            init.constant_(reg_.layers[-1].weight, 0)
            init.constant_(reg_.layers[-1].bias, 0)
        init.xavier_uniform_(self.enc_output[0].weight)
        init.xavier_uniform_(self.query_pos_head.layers[0].weight)
        init.xavier_uniform_(self.query_pos_head.layers[1].weight)

    def flatten_concat(self, pyramid: FeaturePyramid):
        feats = [proj(f) for proj, f in zip(self.input_proj, pyramid.as_list())]
        memory, spatial_shapes = flatten_concat(feats)
        level_ids = torch.cat([torch.full((h * w,), i, dtype=torch.long, device=memory.device)
                               for i, (h, w) in enumerate(spatial_shapes)])
        return memory + self.level_embed(level_ids)[None], spatial_shapes

    def select_queries(self, memory, spatial_shapes, num_queries=None):
        """
        Score every token and keep the top ``num_queries`` as initial queries.

        :return: (selection, content [B,N,C], reference logits [B,N,4],
                  encoder boxes [B,N,4], encoder logits [B,N,C_cls])
        """
        num_queries = num_queries or self.num_queries
        anchors, valid_mask = generate_anchors(spatial_shapes, dtype=memory.dtype, device=memory.device)
        memory = valid_mask.to(memory.dtype) * memory

        output_memory = self.enc_output(memory)
        enc_outputs_logits = self.enc_score_head(output_memory)
        selection = select_topk(enc_outputs_logits.max(-1).values, num_queries)

        gather = selection.indices.unsqueeze(-1)
        topk_memory = output_memory.gather(1, gather.expand(-1, -1, output_memory.shape[-1]))
        topk_logits = enc_outputs_logits.gather(1, gather.expand(-1, -1, enc_outputs_logits.shape[-1]))
        topk_anchors = anchors.expand(memory.shape[0], -1, -1).gather(1, gather.expand(-1, -1, 4))

        topk_bbox_unact = self.enc_bbox_head(topk_memory) + topk_anchors
        enc_boxes = torch.sigmoid(topk_bbox_unact)
        return selection, topk_memory.detach(), topk_bbox_unact.detach(), enc_boxes, topk_logits

    def decode_layers(self, target, ref_points_unact, memory, spatial_shapes, attn_mask=None):
        output = target
        ref_points = torch.sigmoid(ref_points_unact)
        per_layer = []
        for i, layer in enumerate(self.layers):
            query_pos_embed = self.query_pos_head(ref_points)
            output = layer(output, ref_points.unsqueeze(2), memory, spatial_shapes, attn_mask, query_pos_embed)
            boxes = torch.sigmoid(self.dec_bbox_head[i](output) + inverse_sigmoid(ref_points))
            per_layer.append((boxes, self.dec_score_head[i](output)))
            ref_points = boxes.detach()
        return per_layer

    def forward(self, pyramid: FeaturePyramid, dn_group=None):
        memory, spatial_shapes = self.flatten_concat(pyramid)
        selection, content, ref_unact, enc_boxes, enc_logits = self.select_queries(memory, spatial_shapes)
        init_boxes = torch.sigmoid(ref_unact)

        num_dn = 0
        attn_mask = None
        if dn_group is not None and dn_group.size > 0:
            num_dn = dn_group.size
            content = torch.cat([self.denoising_class_embed(dn_group.labels).to(content.dtype), content], dim=1)
            ref_unact = torch.cat([inverse_sigmoid(dn_group.boxes.to(ref_unact.dtype)), ref_unact], dim=1)
            attn_mask = dn_group.attn_mask.to(memory.device)

        per_layer = self.decode_layers(content, ref_unact, memory, spatial_shapes, attn_mask)

        dn_per_layer = None
        if num_dn:
            dn_per_layer = [(b[:, :num_dn], l[:, :num_dn]) for b, l in per_layer]
            per_layer = [(b[:, num_dn:], l[:, num_dn:]) for b, l in per_layer]

        boxes, logits = per_layer[-1]
        return DetectionSet(boxes=boxes, class_logits=logits, per_layer=per_layer, selection=selection,
                            init_boxes=init_boxes, enc=(enc_boxes, enc_logits), dn_per_layer=dn_per_layer,
                            spatial_shapes=spatial_shapes)
