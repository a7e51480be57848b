import pytest
import torch
import torch.nn as nn
from torch.autograd import gradcheck
from torch.func import functional_call

from driving_perception.exceptions import ConfigError, InvalidInputError
from driving_perception.network.config import GcaConfig, ModelConfig
from driving_perception.network.gca import GCA, combine_gates, interpolate
from driving_perception.network.model import PerceptionNet


@pytest.fixture(scope="module")
def gca():
    return GCA(GcaConfig(channels=16, reduction_ratio=4)).eval()


def test_gate_stays_inside_clip_bounds(gca):
    shared = torch.randn(1000, 16, 4, 4) * 5
    task = torch.randn(1000, 16, 4, 4) * 5
    with torch.no_grad():
        gate = gca.compute_gate(shared, task)
    assert gate.shape == shared.shape
    assert gate.min().item() >= 0.05
    assert gate.max().item() <= 0.95


def test_combine_gates_clips_extremes():
    ones = torch.ones(1, 2, 1, 1)
    zeros = torch.zeros(1, 2, 1, 1)
    assert torch.all(combine_gates(ones, ones, zeros) == 0.95)
    assert torch.all(combine_gates(zeros, ones, zeros) == 0.05)
    # fg = 0.5 mixes both attentions evenly
    half = combine_gates(0.5 * ones, 0.8 * ones, 0.4 * ones)
    assert torch.allclose(half, torch.full_like(half, 0.6))


def test_interpolate_is_identity_when_streams_agree():
    shared = torch.randn(2, 4, 3, 3)
    gate = torch.rand(2, 4, 3, 3)
    assert torch.allclose(interpolate(shared, shared, gate), shared)


def test_forward_is_identity_for_identity_adapter():
    module = GCA(GcaConfig(channels=16, reduction_ratio=4)).eval()
    module.adapter = nn.Identity()
    shared = torch.randn(2, 16, 4, 4)
    with torch.no_grad():
        assert torch.allclose(module(shared), shared, atol=1e-6)


def test_output_lies_between_the_two_streams(gca):
    shared = torch.randn(4, 16, 4, 4)
    with torch.no_grad():
        task = gca.adapter_forward(shared)
        out = gca.gca_fuse(shared)
    lo = torch.minimum(shared, task)
    hi = torch.maximum(shared, task)
    assert torch.all(out >= lo - 1e-6)
    assert torch.all(out <= hi + 1e-6)


def test_shape_mismatch_rejected(gca):
    with pytest.raises(InvalidInputError):
        gca.compute_gate(torch.zeros(1, 16, 4, 4), torch.zeros(1, 16, 2, 2))


def test_adapter_channel_mismatch_rejected(gca):
    with pytest.raises(ConfigError):
        gca(torch.zeros(1, 8, 4, 4))


def test_invalid_gca_config():
    with pytest.raises(ConfigError):
        GcaConfig(channels=16, reduction_ratio=3)
    with pytest.raises(ConfigError):
        GcaConfig(channels=16, reduction_ratio=4, gate_clip=(0.5, 0.4))


def test_gca_is_small_next_to_the_shared_trunk():
    counts = PerceptionNet(ModelConfig()).parameter_counts()
    gca_params = counts['gca_det'] + counts['gca_seg']
    assert gca_params < 0.1 * (counts['backbone'] + counts['encoder'])


def test_fusion_gate_is_one_conv_from_both_streams():
    gate = GCA(GcaConfig(channels=16, reduction_ratio=4)).fusion_gate
    assert gate.conv.in_channels == 32 and gate.conv.out_channels == 16
    assert gate.conv.kernel_size == (1, 1)
    out = gate(torch.randn(3, 32, 5, 5))
    assert out.shape == (3, 16, 1, 1)
    assert torch.all((out > 0) & (out < 1))


def test_adapter_parameter_gradients_match_finite_differences():
    adapter = GCA(GcaConfig(channels=8, reduction_ratio=4)).adapter.double().eval()
    names, params = zip(*[(n, p.detach().clone().requires_grad_(True)) for n, p in adapter.named_parameters()])
    shared = torch.randn(1, 8, 4, 4, dtype=torch.float64)

    def forward(*values):
        return functional_call(adapter, dict(zip(names, values)), (shared,))

    assert gradcheck(forward, params)
