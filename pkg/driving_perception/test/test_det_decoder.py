import pytest
import torch

from driving_perception.exceptions import ConfigError
from driving_perception.network.config import DetDecoderConfig
from driving_perception.network.det_decoder import DetectionDecoder, MSDeformableAttention, flatten_concat, \
    generate_anchors, inverse_sigmoid, select_topk, unflatten_tokens
from driving_perception.network.encoder_backbone import FeaturePyramid
from driving_perception.network.losses import build_denoising_group


def make_pyramid(batch=2, channels=32):
    return FeaturePyramid(torch.randn(batch, channels, 8, 8), torch.randn(batch, channels, 4, 4),
                          torch.randn(batch, channels, 2, 2))


@pytest.fixture(scope="module")
def det_cfg():
    return DetDecoderConfig(hidden_dim=32, num_queries=10, num_layers=2, num_heads=4)


@pytest.fixture(scope="module")
def decoder(det_cfg):
    return DetectionDecoder(det_cfg).eval()


def test_output_shapes(decoder):
    with torch.no_grad():
        out = decoder(make_pyramid())
    assert tuple(out.boxes.shape) == (2, 10, 4)
    assert tuple(out.class_logits.shape) == (2, 10, 1)
    assert len(out.per_layer) == 2
    assert out.spatial_shapes == [(8, 8), (4, 4), (2, 2)]
    assert torch.all((out.boxes >= 0) & (out.boxes <= 1))
    assert torch.all((out.scores >= 0) & (out.scores <= 1))
    assert out.dn_per_layer is None


def test_selected_queries_are_distinct_tokens(decoder):
    with torch.no_grad():
        out = decoder(make_pyramid())
    indices = out.selection.indices
    assert tuple(indices.shape) == (2, 10)
    for row in indices:
        assert len(set(row.tolist())) == 10
        assert int(row.max()) < 84


def test_first_layer_starts_from_reference_boxes(decoder):
    # box heads are zero-initialised, so layer 1 returns its reference boxes
    with torch.no_grad():
        out = decoder(make_pyramid())
    assert torch.allclose(out.per_layer[0][0], out.init_boxes, atol=1e-5)


def test_select_topk_ties_prefer_lower_index():
    scores = torch.tensor([[1.0, 3.0, 3.0, 2.0]])
    assert select_topk(scores, 2).indices.tolist() == [[1, 2]]
    assert select_topk(scores, 3).indices.tolist() == [[1, 2, 3]]
    with pytest.raises(ConfigError):
        select_topk(scores, 5)


def test_too_many_queries_for_the_tokens():
    decoder = DetectionDecoder(DetDecoderConfig(hidden_dim=32, num_queries=100, num_layers=1, num_heads=4))
    with pytest.raises(ConfigError):
        decoder(make_pyramid())


def test_flatten_roundtrip_keeps_row_major_order():
    feats = [torch.arange(2 * 4 * 4, dtype=torch.float32).reshape(1, 2, 4, 4),
             torch.arange(2 * 2 * 2, dtype=torch.float32).reshape(1, 2, 2, 2)]
    tokens, shapes = flatten_concat(feats)
    assert tuple(tokens.shape) == (1, 20, 2)
    assert shapes == [(4, 4), (2, 2)]
    # token 5 of the first level is row 1, column 1
    assert tokens[0, 5].tolist() == [5.0, 21.0]
    for restored, original in zip(unflatten_tokens(tokens, shapes), feats):
        assert torch.equal(restored, original)


def test_anchor_layout():
    anchors, valid = generate_anchors([(8, 8), (4, 4), (2, 2)])
    assert tuple(anchors.shape) == (1, 84, 4)
    assert tuple(valid.shape) == (1, 84, 1)
    assert torch.isfinite(anchors).all()
    centers = torch.sigmoid(anchors[0, :64, :2])
    assert torch.allclose(centers[0], torch.tensor([1 / 16, 1 / 16]), atol=1e-5)


def test_inverse_sigmoid():
    x = torch.tensor([0.1, 0.5, 0.9])
    assert torch.allclose(torch.sigmoid(inverse_sigmoid(x)), x, atol=1e-6)
    assert torch.isfinite(inverse_sigmoid(torch.tensor([0.0, 1.0]))).all()


def test_deformable_attention_shape():
    attn = MSDeformableAttention(embed_dim=32, num_heads=4, num_levels=3, num_points=4)
    query = torch.randn(2, 5, 32)
    reference = torch.rand(2, 5, 1, 4)
    value, shapes = flatten_concat(make_pyramid().as_list())
    assert tuple(attn(query, reference, value, shapes).shape) == (2, 5, 32)


def test_denoising_queries_do_not_change_matching_outputs(decoder, det_cfg):
    targets = [{'labels': torch.tensor([0, 0]), 'boxes': torch.tensor([[0.3, 0.4, 0.2, 0.2], [0.6, 0.6, 0.1, 0.3]])},
               {'labels': torch.tensor([0]), 'boxes': torch.tensor([[0.5, 0.5, 0.3, 0.3]])}]
    group = build_denoising_group(targets, num_groups=4, num_queries=det_cfg.num_queries, num_classes=1,
                                  generator=torch.Generator().manual_seed(0))
    pyramid = make_pyramid()
    with torch.no_grad():
        plain = decoder(pyramid)
        noisy = decoder(pyramid, group)
    assert len(noisy.dn_per_layer) == 2
    assert tuple(noisy.dn_per_layer[0][0].shape) == (2, 8, 4)
    assert tuple(noisy.boxes.shape) == (2, 10, 4)
    for (b0, l0), (b1, l1) in zip(plain.per_layer, noisy.per_layer):
        assert torch.allclose(b0, b1, atol=1e-5)
        assert torch.allclose(l0, l1, atol=1e-5)
