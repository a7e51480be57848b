"""
Shared trunk: a small strided-convolution backbone producing S3/S4/S5, an
intra-scale self-attention layer on S5 (AIFI) and a convolutional
top-down/bottom-up cross-scale fusion (CCFM).
"""
import logging
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from driving_perception.exceptions import InputShapeError
from driving_perception.network.config import EncoderConfig

logger = logging.getLogger(__name__)


def get_activation(act):
    if act is None:
        return nn.Identity()
    if act == 'silu':
        return nn.SiLU()
    if act == 'relu':
        return nn.ReLU()
    if act == 'gelu':
        return nn.GELU()
    raise ValueError(f"unsupported activation {act}")


@dataclass
class FeaturePyramid:
    """Three maps at strides 8/16/32 sharing one channel width, each [B, C, h, w]."""
    s3: torch.Tensor
    s4: torch.Tensor
    s5: torch.Tensor

    def as_list(self):
        return [self.s3, self.s4, self.s5]

    @property
    def channels(self):
        return self.s3.shape[1]

    def validate(self):
        feats = self.as_list()
        if len({f.shape[1] for f in feats}) != 1:
            raise InputShapeError(f"pyramid widths differ: {[tuple(f.shape) for f in feats]}")
        for fine, coarse in zip(feats[:-1], feats[1:]):
            if fine.shape[-2] != 2 * coarse.shape[-2] or fine.shape[-1] != 2 * coarse.shape[-1]:
                raise InputShapeError(f"pyramid levels do not halve: {[tuple(f.shape) for f in feats]}")
        return self


class ConvNormLayer(nn.Module):
    def __init__(self, ch_in, ch_out, kernel_size, stride, g=1, padding=None, bias=False, act=None):
        super().__init__()
        padding = (kernel_size - 1) // 2 if padding is None else padding
        self.conv = nn.Conv2d(ch_in, ch_out, kernel_size, stride, groups=g, padding=padding, bias=bias)
        self.norm = nn.BatchNorm2d(ch_out)
        self.act = get_activation(act)

    def forward(self, x):
        return self.act(self.norm(self.conv(x)))


class ResidualBlock(nn.Module):
    def __init__(self, channels, act='silu'):
        super().__init__()
        self.conv1 = ConvNormLayer(channels, channels, 3, 1, act=act)
        self.conv2 = ConvNormLayer(channels, channels, 3, 1, act=act)

    def forward(self, x):
        return x + self.conv2(self.conv1(x))


def check_image_shape(images, cfg: EncoderConfig):
    if images.dim() == 3:
        images = images.unsqueeze(0)
    if images.dim() != 4 or images.shape[1] != 3:
        raise InputShapeError(f"expected [B, 3, H, W] images, got {tuple(images.shape)}")
    if tuple(images.shape[-2:]) != tuple(cfg.input_size):
        raise InputShapeError(
            f"image size {tuple(images.shape[-2:])} does not match configured input_size {tuple(cfg.input_size)}")
    return images


class Backbone(nn.Module):
    """
    Stem (stride 2) followed by four stride-2 stages; the last three stages
    (strides 8, 16, 32) are projected to ``channel_width`` by 1x1 convs.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        widths = cfg.backbone_widths
        stem_width = max(widths[0] // 2, 8)
        self.stem = ConvNormLayer(3, stem_width, 3, 2, act='silu')

        stages = []
        ch_in = stem_width
        for width, depth in zip(widths, cfg.backbone_depths):
            layers = [ConvNormLayer(ch_in, width, 3, 2, act='silu')]
            layers.extend(ResidualBlock(width) for _ in range(depth))
            stages.append(nn.Sequential(*layers))
            ch_in = width
        self.stages = nn.ModuleList(stages)
        self.input_proj = nn.ModuleList(
            [ConvNormLayer(w, cfg.channel_width, 1, 1) for w in widths[1:]])

    def forward(self, images):
        images = check_image_shape(images, self.cfg)
        x = self.stem(images)
        outs = []
        for i, stage in enumerate(self.stages):
            x = stage(x)
            if i >= 1:
                outs.append(x)
        return FeaturePyramid(*[proj(f) for proj, f in zip(self.input_proj, outs)])


def extract_pyramid(backbone: Backbone, image, cfg: EncoderConfig = None):
    """
    Run the backbone on one image [3, H, W] or a batch [B, 3, H, W].

    :raises InputShapeError: when the image does not match ``cfg.input_size``
    """
    if cfg is not None:
        check_image_shape(image, cfg)
    return backbone(image).validate()


def build_2d_sincos_position_embedding(w, h, embed_dim=256, temperature=10000.):
    """Returns [1, h*w, embed_dim] in row-major token order."""
    if embed_dim % 4 != 0:
        raise InputShapeError('embed_dim must be divisible by 4 for 2D sin-cos position embedding')
    grid_h, grid_w = torch.meshgrid(torch.arange(int(h), dtype=torch.float32),
                                    torch.arange(int(w), dtype=torch.float32), indexing='ij')
    pos_dim = embed_dim // 4
    omega = torch.arange(pos_dim, dtype=torch.float32) / pos_dim
    omega = 1. / (temperature ** omega)

    out_w = grid_w.flatten()[..., None] @ omega[None]
    out_h = grid_h.flatten()[..., None] @ omega[None]
    return torch.cat([out_w.sin(), out_w.cos(), out_h.sin(), out_h.cos()], dim=1)[None, :, :]


class TransformerEncoderLayer(nn.Module):
    """Pre-norm self-attention + FFN, both as residual branches."""

    def __init__(self, d_model, nhead, dim_feedforward=1024, dropout=0.0, activation='gelu'):
        super().__init__()
        self.self_attn = nn.MultiheadAttention(d_model, nhead, dropout, batch_first=True)

        self.linear1 = nn.Linear(d_model, dim_feedforward)
        self.dropout = nn.Dropout(dropout)
        self.linear2 = nn.Linear(dim_feedforward, d_model)

        self.norm1 = nn.LayerNorm(d_model)
        self.norm2 = nn.LayerNorm(d_model)
        self.dropout1 = nn.Dropout(dropout)
        self.dropout2 = nn.Dropout(dropout)
        self.activation = get_activation(activation)

    @staticmethod
    def with_pos_embed(tensor, pos_embed):
        return tensor if pos_embed is None else tensor + pos_embed

    def forward(self, src, src_mask=None, pos_embed=None):
        residual = src
        src = self.norm1(src)
        q = k = self.with_pos_embed(src, pos_embed)
        src, _ = self.self_attn(q, k, value=src, attn_mask=src_mask, need_weights=False)
        src = residual + self.dropout1(src)

        residual = src
        src = self.norm2(src)
        src = self.linear2(self.dropout(self.activation(self.linear1(src))))
        return residual + self.dropout2(src)


class AIFI(nn.Module):
    def __init__(self, cfg: EncoderConfig, pe_temperature=10000.):
        super().__init__()
        self.pe_temperature = pe_temperature
        self.layers = nn.ModuleList([
            TransformerEncoderLayer(cfg.channel_width, cfg.attention_heads,
                                    cfg.channel_width * cfg.ffn_ratio, cfg.dropout)
            for _ in range(cfg.attention_layers)])

    def forward(self, s5):
        b, c, h, w = s5.shape
        src = s5.flatten(2).permute(0, 2, 1)
        pos_embed = build_2d_sincos_position_embedding(w, h, c, self.pe_temperature).to(src)
        for layer in self.layers:
            src = layer(src, pos_embed=pos_embed)
        return src.permute(0, 2, 1).reshape(b, c, h, w).contiguous()


class FusionBlock(nn.Module):
    """Fuses a channel-concatenated pair (2C) back to C channels."""

    def __init__(self, channels, act='silu'):
        super().__init__()
        self.proj = ConvNormLayer(2 * channels, channels, 1, 1)
        self.refine = ConvNormLayer(channels, channels, 3, 1, act=act)

    def forward(self, x):
        y = self.proj(x)
        return y + self.refine(y)


class CCFM(nn.Module):
    def __init__(self, channels, act='silu'):
        super().__init__()
        self.lateral_convs = nn.ModuleList([ConvNormLayer(channels, channels, 1, 1) for _ in range(2)])
        self.fpn_blocks = nn.ModuleList([FusionBlock(channels, act) for _ in range(2)])
        self.downsample_convs = nn.ModuleList([ConvNormLayer(channels, channels, 3, 2, act=act) for _ in range(2)])
        self.pan_blocks = nn.ModuleList([FusionBlock(channels, act) for _ in range(2)])

    def forward(self, pyramid: FeaturePyramid):
        feats = pyramid.as_list()
        levels = len(feats)

        # top-down
        inner_outs = [feats[-1]]
        for idx in range(levels - 1, 0, -1):
            feat_high = self.lateral_convs[levels - 1 - idx](inner_outs[0])
            inner_outs[0] = feat_high
            upsample = F.interpolate(feat_high, scale_factor=2., mode='nearest')
            inner_out = self.fpn_blocks[levels - 1 - idx](torch.cat([upsample, feats[idx - 1]], dim=1))
            inner_outs.insert(0, inner_out)

        # bottom-up
        outs = [inner_outs[0]]
        for idx in range(levels - 1):
            downsample = self.downsample_convs[idx](outs[-1])
            outs.append(self.pan_blocks[idx](torch.cat([downsample, inner_outs[idx + 1]], dim=1)))
        return FeaturePyramid(*outs)


class HybridEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.aifi = AIFI(cfg)
        self.ccfm = CCFM(cfg.channel_width)

    def aifi_forward(self, s5):
        return self.aifi(s5)

    def ccfm_fuse(self, pyramid: FeaturePyramid):
        return self.ccfm(pyramid)

    def forward(self, pyramid: FeaturePyramid):
        pyramid = FeaturePyramid(pyramid.s3, pyramid.s4, self.aifi(pyramid.s5))
        return self.ccfm(pyramid)
