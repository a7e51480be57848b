import os

import numpy as np
import pytest
import torch
import torch.nn as nn

from driving_perception.exceptions import InvalidInputError
from driving_perception.helper.DatasetHelper import PerceptionDataset, collate_samples
from driving_perception.helper.GradientAnalyzer import GradientAnalyzer, build_histogram, pairwise_cosine, \
    record_task_gradients, task_gradients
from driving_perception.network.config import LossConfig
from driving_perception.network.losses import MultiTaskCriterion
from driving_perception.network.model import PerceptionNet


def test_opposite_losses_give_opposite_gradients():
    theta = nn.Parameter(torch.tensor([0.7, -0.2]))
    records = task_gradients({'a': (2 * theta).sum(), 'b': (-2 * theta).sum(), 'c': (2 * theta).sum()}, [theta])
    assert records['a'].vector.tolist() == [2.0, 2.0]
    assert pairwise_cosine(records['a'].vector, records['b'].vector) == pytest.approx(-1.0)
    assert torch.equal(records['a'].vector, records['c'].vector)


def test_capture_leaves_parameters_untouched():
    theta = nn.Parameter(torch.tensor([1.0, 2.0]))
    other = nn.Parameter(torch.tensor([3.0]))
    before = theta.detach().clone()
    records = task_gradients({'a': (theta ** 2).sum()}, [theta, other])
    assert theta.grad is None
    assert torch.equal(theta.detach(), before)
    # an unused parameter contributes zeros
    assert records['a'].vector.tolist() == [2.0, 4.0, 0.0]


def test_non_finite_gradient_is_flagged():
    theta = nn.Parameter(torch.tensor([0.0]))
    records = task_gradients({'a': torch.sqrt(theta).sum()}, [theta])
    assert not records['a'].valid


def test_pairwise_cosine():
    assert pairwise_cosine([1.0, 0.0], [0.0, 3.0]) == pytest.approx(0.0)
    assert pairwise_cosine([1.0, 1.0], [2.0, 2.0]) == pytest.approx(1.0)
    a, b = torch.randn(50), torch.randn(50)
    assert pairwise_cosine(a, b) == pytest.approx(pairwise_cosine(b, a))
    assert pairwise_cosine([0.0, 0.0], [1.0, 2.0]) is None
    with pytest.raises(InvalidInputError):
        pairwise_cosine([1.0], [1.0, 2.0])


def test_histogram_boundaries():
    hist = build_histogram([-1.0, 0.0, 1.0], bins=2)
    assert hist.counts.tolist() == [1, 2]
    assert hist.bin_edges.tolist() == [-1.0, 0.0, 1.0]
    assert hist.rows() == [(-1.0, 0.0, 1), (0.0, 1.0, 2)]


def test_histogram_inner_edges_go_to_upper_bin():
    edges = build_histogram([0.0]).bin_edges
    for k in range(1, 50):
        hist = build_histogram([edges[k]])
        assert int(np.argmax(hist.counts)) == k
        assert hist.rows()[k][0] == edges[k]
    assert build_histogram([1.0]).counts[-1] == 1
    assert build_histogram([-1.0]).counts[0] == 1
    quarters = build_histogram([-0.5, 0.0, 0.5], bins=4)
    assert quarters.counts.tolist() == [0, 1, 1, 1]


def test_histogram_statistics():
    positive = build_histogram([0.5] * 10)
    assert positive.fraction_negative == 0.0
    assert len(positive.bin_edges) == 51
    assert positive.counts.sum() == 10
    mixed = build_histogram([-0.5, 0.5])
    assert mixed.mean == 0.0
    assert mixed.fraction_negative == 0.5
    with pytest.raises(InvalidInputError):
        build_histogram([])
    with pytest.raises(InvalidInputError):
        build_histogram([1.5])


def test_record_task_gradients_on_shared_trunk(tiny_model_config, tiny_samples):
    model = PerceptionNet(tiny_model_config)
    dataset = PerceptionDataset(tiny_samples)
    batch = collate_samples([dataset[0], dataset[1]])
    records = record_task_gradients(model, MultiTaskCriterion(tiny_model_config, LossConfig()), batch)
    expected = sum(p.numel() for _, p in model.shared_parameters())
    assert set(records) == {'detection', 'drivable', 'lane'}
    for record in records.values():
        assert record.vector.numel() == expected
        assert record.valid
    assert all(p.grad is None for p in model.parameters())


def test_short_run_writes_histograms(tmp_path, tiny_samples, config_factory):
    config = config_factory()
    result = GradientAnalyzer().run(config, steps=2, out_dir=str(tmp_path), train_samples=tiny_samples,
                                    device='cpu')
    assert set(result.histograms) == {('detection', 'drivable'), ('detection', 'lane'), ('drivable', 'lane')}
    for hist in result.histograms.values():
        assert hist.counts.sum() + result.skipped >= 1
        assert hist.counts.sum() <= 2
    assert os.path.isfile(tmp_path / 'grad_cos_gca_detection_lane.csv')
    assert os.path.isfile(tmp_path / 'grad_cos_gca.png')
    summary = result.summary()
    assert 0.0 <= summary['fraction_negative'] <= 1.0
    assert summary['recorded_steps'] == min(int(h.counts.sum()) for h in result.histograms.values())
    rows = np.genfromtxt(tmp_path / 'grad_cos_gca_drivable_lane.csv', delimiter=',', skip_header=1)
    assert rows.shape == (50, 3)
