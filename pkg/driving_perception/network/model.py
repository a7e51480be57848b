"""
Full multi-task network: shared backbone + hybrid encoder, one GCA per scale
and task branch, then the detection decoder and the segmentation decoder.
Decoders and GCAs are only built for enabled tasks.
"""
import logging

import torch.nn as nn

from driving_perception.network.config import ModelConfig
from driving_perception.network.det_decoder import DetectionDecoder
from driving_perception.network.encoder_backbone import Backbone, FeaturePyramid, HybridEncoder
from driving_perception.network.gca import GCA
from driving_perception.network.seg_decoder import SegmentationDecoder

logger = logging.getLogger(__name__)

SHARED_PREFIXES = ('backbone.', 'encoder.')
GCA_PREFIXES = ('gca_det.', 'gca_seg.')


class PerceptionNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.backbone = Backbone(cfg.encoder)
        self.encoder = HybridEncoder(cfg.encoder)

        self.gca_det = None
        self.gca_seg = None
        if cfg.use_gca and cfg.has_detection:
            self.gca_det = nn.ModuleList([GCA(cfg.gca) for _ in range(3)])
        if cfg.use_gca and cfg.seg_tasks:
            self.gca_seg = nn.ModuleList([GCA(cfg.gca) for _ in range(3)])

        self.det_decoder = DetectionDecoder(cfg.det) if cfg.has_detection else None
        self.seg_decoder = SegmentationDecoder(cfg.seg) if cfg.seg_tasks else None

    @staticmethod
    def _branch(gcas, pyramid: FeaturePyramid):
        if gcas is None:
            return pyramid
        return FeaturePyramid(*[gca(f) for gca, f in zip(gcas, pyramid.as_list())])

    def shared_features(self, images):
        return self.encoder(self.backbone(images))

    def forward(self, images, dn_group=None):
        """
        :param images: [B, 3, H, W]
        :return: dict with 'detection' (DetectionSet or None) and
                 'segmentation' (task -> [B, 1, H, W] logits)
        """
        shared = self.shared_features(images)
        outputs = {'detection': None, 'segmentation': {}}
        if self.det_decoder is not None:
            outputs['detection'] = self.det_decoder(self._branch(self.gca_det, shared), dn_group)
        if self.seg_decoder is not None:
            outputs['segmentation'] = self.seg_decoder(self._branch(self.gca_seg, shared))
        return outputs

    def shared_parameters(self):
        """Backbone then encoder parameters, in registration order."""
        return [(name, p) for name, p in self.named_parameters() if name.startswith(SHARED_PREFIXES)]

    def gca_parameter_names(self):
        return {name for name, _ in self.named_parameters() if name.startswith(GCA_PREFIXES)}

    def parameter_counts(self):
        counts = {'total': 0}
        for name, p in self.named_parameters():
            group = name.split('.', 1)[0]
            counts[group] = counts.get(group, 0) + p.numel()
            counts['total'] += p.numel()
        return counts
