import math

import pytest
import torch
import torch.nn as nn

from driving_perception.exceptions import ConfigError, InputShapeError
from driving_perception.network.config import EncoderConfig
from driving_perception.network.encoder_backbone import AIFI, CCFM, Backbone, FeaturePyramid, HybridEncoder, \
    build_2d_sincos_position_embedding, extract_pyramid


@pytest.fixture(scope="module")
def encoder_cfg(tiny_model_config):
    return tiny_model_config.encoder


@pytest.fixture(scope="module")
def backbone(encoder_cfg):
    return Backbone(encoder_cfg).eval()


def test_pyramid_shapes(backbone):
    pyramid = backbone(torch.randn(2, 3, 64, 64))
    assert tuple(pyramid.s3.shape) == (2, 32, 8, 8)
    assert tuple(pyramid.s4.shape) == (2, 32, 4, 4)
    assert tuple(pyramid.s5.shape) == (2, 32, 2, 2)
    assert pyramid.channels == 32


def test_single_image_is_batched(backbone, encoder_cfg):
    pyramid = extract_pyramid(backbone, torch.randn(3, 64, 64), encoder_cfg)
    assert pyramid.s3.shape[0] == 1


def test_wrong_image_size_rejected(backbone, encoder_cfg):
    with pytest.raises(InputShapeError):
        extract_pyramid(backbone, torch.randn(1, 3, 48, 64), encoder_cfg)
    with pytest.raises(InputShapeError):
        backbone(torch.randn(1, 1, 64, 64))


def test_input_size_must_be_multiple_of_32():
    with pytest.raises(ConfigError):
        EncoderConfig(input_size=(100, 64))


def test_pyramid_validate_detects_bad_levels():
    bad = FeaturePyramid(torch.zeros(1, 8, 8, 8), torch.zeros(1, 8, 3, 3), torch.zeros(1, 8, 2, 2))
    with pytest.raises(InputShapeError):
        bad.validate()


def test_sincos_embedding_layout():
    emb = build_2d_sincos_position_embedding(w=3, h=2, embed_dim=8)
    assert tuple(emb.shape) == (1, 6, 8)
    # token 5 is row 1, column 2; the first frequency is 1
    assert emb[0, 5, 0].item() == pytest.approx(math.sin(2.0), abs=1e-6)
    assert emb[0, 5, 2].item() == pytest.approx(math.cos(2.0), abs=1e-6)
    assert emb[0, 5, 4].item() == pytest.approx(math.sin(1.0), abs=1e-6)
    assert emb[0, 5, 6].item() == pytest.approx(math.cos(1.0), abs=1e-6)


def test_sincos_embedding_needs_width_divisible_by_four():
    with pytest.raises(InputShapeError):
        build_2d_sincos_position_embedding(2, 2, embed_dim=6)


def test_aifi_with_zero_residual_branches_is_identity(encoder_cfg):
    aifi = AIFI(encoder_cfg).eval()
    with torch.no_grad():
        for layer in aifi.layers:
            for module in (layer.self_attn.out_proj, layer.linear2):
                nn.init.zeros_(module.weight)
                nn.init.zeros_(module.bias)
    s5 = torch.randn(2, 32, 2, 2)
    assert torch.allclose(aifi(s5), s5, atol=1e-6)


def test_aifi_keeps_shape(encoder_cfg):
    s5 = torch.randn(1, 32, 2, 2)
    assert AIFI(encoder_cfg)(s5).shape == s5.shape


def test_ccfm_pass_through_weights():
    c = 8
    ccfm = CCFM(c).eval()
    eye = torch.eye(c).view(c, c, 1, 1)
    with torch.no_grad():
        for lateral in ccfm.lateral_convs:
            lateral.conv.weight.copy_(eye)
        for block in list(ccfm.fpn_blocks) + list(ccfm.pan_blocks):
            # keep the second (same-level) half of the concatenation
            block.proj.conv.weight.zero_()
            block.proj.conv.weight[:, c:].copy_(eye)
            block.refine.norm.weight.zero_()
            block.refine.norm.bias.zero_()
    pyramid = FeaturePyramid(torch.randn(1, c, 8, 8), torch.randn(1, c, 4, 4), torch.randn(1, c, 2, 2))
    out = ccfm(pyramid)
    for fused, original in zip(out.as_list(), pyramid.as_list()):
        assert torch.allclose(fused, original, atol=1e-3)


def test_hybrid_encoder_output_and_gradients(encoder_cfg):
    backbone = Backbone(encoder_cfg)
    encoder = HybridEncoder(encoder_cfg)
    images = torch.randn(2, 3, 64, 64)
    out = encoder(backbone(images)).validate()
    assert [tuple(f.shape) for f in out.as_list()] == [(2, 32, 8, 8), (2, 32, 4, 4), (2, 32, 2, 2)]
    sum(f.sum() for f in out.as_list()).backward()
    assert backbone.stem.conv.weight.grad is not None
    assert torch.isfinite(backbone.stem.conv.weight.grad).all()
