"""
Gate control with adapter.

An adapter derives a task-specific map from the shared features; a clipped
gate mixes channel attention (CA) and spatial attention (SA) through a
per-channel fusion gate (FG), and the output interpolates between the two
streams:

    gate = clip(FG * CA + (1 - FG) * SA, lo, hi)
    out  = shared + gate * (task - shared)
"""
import torch
import torch.nn as nn

from driving_perception.exceptions import ConfigError, InvalidInputError
from driving_perception.network.config import GcaConfig
from driving_perception.network.encoder_backbone import ConvNormLayer


class Adapter(nn.Module):
    """1x1 reduction, then depthwise 3x3 + pointwise expansion back to C."""

    def __init__(self, cfg: GcaConfig):
        super().__init__()
        hidden = cfg.hidden_channels
        self.channels = cfg.channels
        self.reduce = ConvNormLayer(cfg.channels, hidden, 1, 1, act='silu')
        self.depthwise = nn.Conv2d(hidden, hidden, 3, 1, padding=1, groups=hidden, bias=False)
        self.pointwise = nn.Conv2d(hidden, cfg.channels, 1, 1, bias=False)
        self.norm = nn.BatchNorm2d(cfg.channels)
        self.act = nn.SiLU()

    def forward(self, shared):
        if shared.shape[1] != self.channels:
            raise ConfigError(f"adapter expects {self.channels} channels, got {shared.shape[1]}")
        x = self.reduce(shared)
        return self.act(self.norm(self.pointwise(self.depthwise(x))))


class ChannelAttention(nn.Module):
    def __init__(self, in_channels, hidden, out_channels):
        super().__init__()
        self.avg_pool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Sequential(
            nn.Conv2d(in_channels, hidden, 1, bias=False),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, out_channels, 1, bias=False),
            nn.Sigmoid())

    def forward(self, x):
        return self.fc(self.avg_pool(x))


class SpatialAttention(nn.Module):
    def __init__(self, kernel_size=7):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2, bias=False)
        self.sigmoid = nn.Sigmoid()

    def forward(self, x):
        avg_out = torch.mean(x, dim=1, keepdim=True)
        max_out, _ = torch.max(x, dim=1, keepdim=True)
        return self.sigmoid(self.conv(torch.cat([avg_out, max_out], dim=1)))


class FusionGate(nn.Module):
    """1x1 conv 2C -> C on the pooled concatenated stream, [B, C, 1, 1]."""

    def __init__(self, in_channels, out_channels):
        super().__init__()
        self.avg_pool = nn.AdaptiveAvgPool2d(1)
        self.conv = nn.Conv2d(in_channels, out_channels, 1)
        self.sigmoid = nn.Sigmoid()

    def forward(self, x):
        return self.sigmoid(self.conv(self.avg_pool(x)))


def combine_gates(fg, ca, sa, gate_clip=(0.05, 0.95)):
    lo, hi = gate_clip
    return torch.clamp(fg * ca + (1.0 - fg) * sa, min=lo, max=hi)


def interpolate(shared, task, gate):
    return shared + gate * (task - shared)


class GCA(nn.Module):
    def __init__(self, cfg: GcaConfig):
        super().__init__()
        self.cfg = cfg
        c, hidden = cfg.channels, cfg.hidden_channels
        self.adapter = Adapter(cfg)
        self.channel_attention = ChannelAttention(2 * c, hidden, c)
        self.spatial_attention = SpatialAttention(7)
        self.fusion_gate = FusionGate(2 * c, c)

    def adapter_forward(self, shared):
        return self.adapter(shared)

    def compute_gate(self, shared, task):
        if shared.shape != task.shape:
            raise InvalidInputError(f"shared {tuple(shared.shape)} and task {tuple(task.shape)} differ")
        x = torch.cat([shared, task], dim=1)
        gate = combine_gates(self.fusion_gate(x), self.channel_attention(x),
                             self.spatial_attention(x), self.cfg.gate_clip)
        return gate.expand_as(shared)

    def forward(self, shared):
        task = self.adapter(shared)
        gate = self.compute_gate(shared, task)
        return interpolate(shared, task, gate)

    gca_fuse = forward
