import json
import math
import os
import shutil
from dataclasses import replace

import cv2
import numpy as np
import pytest
import torch

from driving_perception import cli
from driving_perception.config import ROOT_DIR
from driving_perception.exceptions import AnnotationFormatError, ConfigError, EmptyDatasetError, \
    TrainingAbortError
from driving_perception.helper.BDDLoader import BDDLoader, load_bdd_subset, resize_mask
from driving_perception.helper.CheckpointHelper import load_model, read_checkpoint
from driving_perception.helper.ConfigHelper import ABLATIONS, DEFAULT_SWEEP_GRID, ConfigHelper, apply_ablation, \
    load_config
from driving_perception.helper.DatasetHelper import PerceptionDataset, collate_samples
from driving_perception.helper.Evaluator import Evaluator, evaluate, sweep_thresholds, write_sweep_csv
from driving_perception.helper.LaneLabelHelper import dilate_mask, read_mask, write_mask
from driving_perception.helper.Predictor import Prediction, Predictor
from driving_perception.helper.SyntheticSceneGenerator import SyntheticSceneGenerator, generate_synthetic_dataset
from driving_perception.helper.Trainer import Trainer, build_optimizer, cosine_lambda, train
from driving_perception.network.model import PerceptionNet
from driving_perception.network.seg_decoder import ScaleWeights

EXAMPLES_DIR = os.path.join(ROOT_DIR, 'schema', 'examples')


def with_vehicle(sample):
    return replace(sample, labels=np.array([0], dtype=np.int64),
                   boxes=np.array([[0.5, 0.7, 0.25, 0.2]], dtype=np.float32))


@pytest.fixture(scope="module")
def bdd_dir(tmp_path_factory, tiny_samples):
    root = tmp_path_factory.mktemp('bdd')
    generator = SyntheticSceneGenerator((64, 64), seed=3)
    generator.write_bdd_directory(tiny_samples, str(root))
    return root


# synthetic data

def test_synthetic_scenes_are_reproducible():
    a = SyntheticSceneGenerator((64, 64), seed=5).generate(3)
    b = SyntheticSceneGenerator((64, 64), seed=5).generate(3)
    for x, y in zip(a, b):
        assert x.name == y.name
        assert np.array_equal(x.image, y.image)
        assert np.array_equal(x.boxes, y.boxes)
        assert np.array_equal(x.lane, y.lane)
    other = SyntheticSceneGenerator((64, 64), seed=6).generate_sample(0)
    assert not np.array_equal(a[0].image, other.image)


def test_synthetic_scene_content(tiny_samples):
    for sample in tiny_samples:
        assert sample.image.shape == (64, 64, 3)
        assert sample.image.dtype == np.uint8
        assert sample.lane_raw.any()
        assert np.all(sample.lane >= sample.lane_raw)
        assert np.array_equal(sample.lane, dilate_mask(sample.lane_raw))
        assert sample.drivable.any()
        assert len(sample.labels) == len(sample.boxes) <= 3
        assert np.all((sample.boxes >= 0) & (sample.boxes <= 1))


def test_generate_synthetic_dataset(tiny_samples):
    samples = generate_synthetic_dataset(4, size=(64, 64), seed=3)
    assert [s.name for s in samples] == [s.name for s in tiny_samples]
    assert all(np.array_equal(a.image, b.image) for a, b in zip(samples, tiny_samples))


# BDD loading

def test_bdd_directory_roundtrip(bdd_dir, tiny_samples):
    loader = BDDLoader((64, 64))
    loaded = loader.load_directory(str(bdd_dir))
    assert loader.report.loaded == len(tiny_samples)
    assert loader.report.skipped == 0
    by_name = {s.name: s for s in loaded}
    for sample in tiny_samples:
        restored = by_name[sample.name]
        assert np.array_equal(restored.image, sample.image)
        assert np.array_equal(restored.drivable, sample.drivable)
        assert np.array_equal(restored.lane_raw, sample.lane_raw)
        assert np.array_equal(restored.lane, sample.lane)
        assert np.allclose(restored.boxes, sample.boxes, atol=1e-5)
        assert np.all(restored.labels == 0)


def test_load_bdd_subset(bdd_dir, tiny_samples):
    samples = load_bdd_subset(str(bdd_dir / 'images'), str(bdd_dir / 'det_annotations.json'),
                              str(bdd_dir / 'drivable'), str(bdd_dir / 'lane'), input_size=(64, 64))
    assert sorted(s.name for s in samples) == sorted(s.name for s in tiny_samples)


def test_bdd_categories_and_missing_masks(tmp_path, tiny_samples):
    SyntheticSceneGenerator((64, 64)).write_bdd_directory(tiny_samples[:2], str(tmp_path))
    frames = [{'name': f"{tiny_samples[0].name}.png", 'labels': [
        {'category': 'truck', 'box2d': {'x1': 4, 'y1': 8, 'x2': 20, 'y2': 24}},
        {'category': 'person', 'box2d': {'x1': 30, 'y1': 30, 'x2': 34, 'y2': 40}},
        {'category': 'lane', 'poly2d': []}]}]
    with open(tmp_path / 'det_annotations.json', 'w') as f:
        json.dump(frames, f)
    os.remove(tmp_path / 'lane' / f"{tiny_samples[1].name}.png")

    loader = BDDLoader((64, 64))
    samples = loader.load_directory(str(tmp_path))
    assert [s.name for s in samples] == [tiny_samples[0].name]
    assert loader.report.missing_mask == [f"{tiny_samples[1].name}.png"]
    assert loader.report.ignored_objects == 2
    assert samples[0].labels.tolist() == [0]
    assert np.allclose(samples[0].boxes[0], [12 / 64, 16 / 64, 16 / 64, 16 / 64])


def test_malformed_annotation_line(tmp_path):
    path = tmp_path / 'labels.jsonl'
    path.write_text('{"name": "a.jpg", "labels": []}\n{"name": "b.jpg", "labels": [\n')
    with pytest.raises(AnnotationFormatError) as info:
        BDDLoader().read_annotations(str(path))
    assert info.value.line == 2
    assert '(line 2)' in str(info.value)


def test_malformed_frame_in_json_array_reports_its_line(tmp_path):
    path = tmp_path / 'det_annotations.json'
    path.write_text('[\n  {"name": "a.jpg", "labels": []},\n  {"name": "b.jpg", "labels": []},\n'
                    '  {"labels": []}\n]\n')
    with pytest.raises(AnnotationFormatError) as info:
        BDDLoader().read_annotations(str(path))
    assert info.value.line == 4
    assert info.value.frame == 2

    path.write_text('[{"name": "a.jpg", "labels": {"category": "car"}}]')
    with pytest.raises(AnnotationFormatError) as info:
        BDDLoader().read_annotations(str(path))
    assert info.value.line == 1

    path.write_text('{"frames": [{"name": "a.jpg"}, {"name": "b.jpg", "labels": 3}]}')
    with pytest.raises(AnnotationFormatError) as info:
        BDDLoader().read_annotations(str(path))
    assert info.value.frame == 1
    assert '(frame 1)' in str(info.value)


def test_lanes_are_dilated_before_resizing(tmp_path):
    image = np.full((72, 128, 3), 90, dtype=np.uint8)
    lane = np.zeros((72, 128), dtype=np.uint8)
    lane[30:32, :] = 1
    drivable = np.zeros((72, 128), dtype=np.uint8)
    drivable[40:] = 1
    cv2.imwrite(str(tmp_path / 'frame.png'), image)
    write_mask(str(tmp_path / 'da.png'), drivable)
    write_mask(str(tmp_path / 'll.png'), lane)
    sample = BDDLoader((64, 64)).load_sample(str(tmp_path / 'frame.png'), [], str(tmp_path / 'da.png'),
                                             str(tmp_path / 'll.png'))
    assert sample.image.shape == (64, 64, 3)
    assert set(np.unique(sample.lane)) <= {0, 1}
    assert np.array_equal(sample.lane, resize_mask(dilate_mask(lane), (64, 64)))
    assert sample.lane.sum() > sample.lane_raw.sum()


# configuration

def test_default_and_example_configs_validate():
    helper = ConfigHelper()
    config = helper.from_dict({})
    assert config.model.num_queries == 60
    assert config.eval.thresholds == (0.45, 0.9)
    assert len(DEFAULT_SWEEP_GRID) == 12
    assert DEFAULT_SWEEP_GRID[0] == 0.4 and DEFAULT_SWEEP_GRID[-1] == 0.95
    toy = helper.load(os.path.join(EXAMPLES_DIR, 'toy_config.json'))
    assert toy.model.input_size == (320, 320)
    full = helper.load(os.path.join(EXAMPLES_DIR, 'full_config.json'))
    assert full.model.input_size == (640, 640)
    assert full.data.source == 'bdd'


def test_invalid_configs_are_rejected(tmp_path):
    helper = ConfigHelper()
    for bad in ({'model': {'unknown_key': 1}}, {'eval': {'ll_threshold': 1.5}}, {'train': {'epochs': -1}},
                {'model': {'tasks': []}}, {'extra': {}}):
        with pytest.raises(ConfigError):
            helper.from_dict(bad)
    with pytest.raises(ConfigError):
        helper.from_dict({'model': {'channel_width': 30}})
    with pytest.raises(ConfigError):
        helper.load(str(tmp_path / 'missing.json'))
    broken = tmp_path / 'broken.json'
    broken.write_text('{"model": ')
    with pytest.raises(ConfigError):
        helper.load(str(broken))


def test_overrides_and_hash(tmp_path):
    path = tmp_path / 'run.json'
    path.write_text(json.dumps({'train': {'epochs': 3}}))
    config = load_config(str(path), overrides={'train': {'batch_size': 8}}, ablation='lane_only')
    assert config.train.epochs == 3
    assert config.train.batch_size == 8
    assert config.model.tasks == ('lane',)
    assert config.config_hash() == load_config(str(path), {'train': {'batch_size': 8}}, 'lane_only').config_hash()
    assert config.config_hash() != load_config(str(path)).config_hash()
    with pytest.raises(ConfigError):
        apply_ablation(config, 'everything')


def test_ablations_only_differ_by_gca_parameters(config_factory):
    config = config_factory()
    vanilla = PerceptionNet(apply_ablation(config, 'vanilla_mtl').model)
    gated = PerceptionNet(apply_ablation(config, 'mtl_gca').model)
    vanilla_names = {n for n, _ in vanilla.named_parameters()}
    gated_names = {n for n, _ in gated.named_parameters()}
    assert vanilla_names < gated_names
    assert gated_names - vanilla_names == gated.gca_parameter_names()
    assert not vanilla.gca_parameter_names()


def test_ablation_presets_build_the_right_heads(config_factory):
    config = config_factory()
    for name, preset in ABLATIONS.items():
        model = PerceptionNet(apply_ablation(config, name).model)
        assert (model.det_decoder is not None) == ('detection' in preset['tasks'])
        seg = model.seg_decoder.tasks if model.seg_decoder is not None else ()
        assert set(seg) == set(preset['tasks']) - {'detection'}


# training

def test_cosine_schedule():
    lf = cosine_lambda(10, 0.01)
    assert lf(0) == pytest.approx(1.0)
    assert lf(10) == pytest.approx(0.01)
    assert lf(5) == pytest.approx(0.505)
    values = [lf(e) for e in range(11)]
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_optimizer_groups(tiny_model_config):
    model = PerceptionNet(tiny_model_config)
    optimizer = build_optimizer(model, lr=0.01, momentum=0.9, weight_decay=5e-4)
    biases, decayed, plain = (set(map(id, g['params'])) for g in optimizer.param_groups)
    assert id(model.seg_decoder.scale_weights.logits) in plain
    assert id(model.backbone.stem.norm.weight) in plain
    assert id(model.backbone.stem.conv.weight) in decayed
    assert id(model.det_decoder.enc_score_head.bias) in biases
    assert optimizer.param_groups[1]['weight_decay'] == 5e-4
    assert optimizer.param_groups[2]['weight_decay'] == 0.0
    assert optimizer.param_groups[0]['nesterov']
    assert sum(len(g['params']) for g in optimizer.param_groups) == len(list(model.parameters()))
    assert isinstance(model.seg_decoder.scale_weights, ScaleWeights)


def test_warmup_ramp(config_factory, tiny_samples):
    config = config_factory(train={'warmup_epochs': 1.0})
    trainer = Trainer(config, device='cpu', train_samples=tiny_samples, run_validation=False,
                      save_checkpoints=False)
    assert trainer.warmup_steps == 2
    trainer.warmup(0)
    lrs = [g['lr'] for g in trainer.optimizer.param_groups]
    assert lrs == [pytest.approx(0.1), 0.0, 0.0]
    assert trainer.optimizer.param_groups[1]['momentum'] == pytest.approx(0.8)
    trainer.step = 2
    trainer.warmup(0)
    assert [g['lr'] for g in trainer.optimizer.param_groups] == [pytest.approx(0.01)] * 3
    assert trainer.optimizer.param_groups[0]['momentum'] == pytest.approx(0.9)


def test_zero_epochs_writes_initial_checkpoint(config_factory, tiny_samples, tmp_path):
    config = config_factory(train={'epochs': 0})
    result = Trainer(config, device='cpu', train_samples=tiny_samples, val_samples=tiny_samples[:2]).train()
    assert os.path.isfile(result.last_checkpoint)
    assert os.path.getsize(result.log_path) == 0
    assert result.step == 0


def test_one_epoch_training(config_factory, tiny_samples, tmp_path):
    config = config_factory()
    trainer = Trainer(config, device='cpu', train_samples=tiny_samples, val_samples=tiny_samples[:2])
    result = trainer.train()
    assert result.step == 2
    assert len(result.step_losses) == 2
    assert all(math.isfinite(v) for v in result.step_losses)
    with open(result.log_path) as f:
        lines = [json.loads(line) for line in f]
    assert len(lines) == 1
    assert {'total', 'drivable', 'lane', 'detection'} <= set(lines[0]['losses'])
    assert 'metrics' in lines[0]
    assert os.path.isfile(tmp_path / 'best.pt')
    assert os.path.isfile(tmp_path / 'last.pt')
    assert trainer.model.seg_decoder.scale_weights.is_normalized()

    model, stored, info = load_model(result.last_checkpoint)
    assert stored.to_dict() == config.to_dict()
    assert info.epoch == 1
    assert info.step == 2
    assert info.config_hash == config.config_hash()
    images = torch.rand(1, 3, 64, 64)
    trainer.model.eval()
    with torch.no_grad():
        expected = trainer.model(images)['segmentation']['lane']
        restored = model(images)['segmentation']['lane']
    assert torch.allclose(expected, restored, atol=1e-6)


def test_resume_reproduces_the_next_epoch(config_factory, tiny_samples, tmp_path):
    config = config_factory(train={'epochs': 2})
    first = Trainer(config, device='cpu', train_samples=tiny_samples, run_validation=False,
                    output_dir=str(tmp_path / 'a'))
    first.train(stop_after=1)
    resume_from = str(tmp_path / 'epoch1.pt')
    shutil.copy(tmp_path / 'a' / 'last.pt', resume_from)
    continued = first.train().step_losses

    second = Trainer(config, device='cpu', train_samples=tiny_samples, run_validation=False,
                     output_dir=str(tmp_path / 'b'))
    second.resume(resume_from)
    assert second.epoch == 1
    resumed = second.train().step_losses
    assert resumed == pytest.approx(continued, rel=1e-5)


def test_non_finite_loss_aborts(config_factory, tiny_samples):
    trainer = Trainer(config_factory(), device='cpu', train_samples=tiny_samples, run_validation=False,
                      save_checkpoints=False)
    with torch.no_grad():
        trainer.model.seg_decoder.heads['lane'].out.bias.fill_(float('nan'))
    batch = collate_samples([PerceptionDataset(tiny_samples)[i] for i in range(2)])
    with pytest.raises(TrainingAbortError) as info:
        trainer.train_step(batch)
    assert info.value.component == 'lane'


def test_checkpoint_info_roundtrip(config_factory, tiny_samples):
    trainer = Trainer(config_factory(), device='cpu', train_samples=tiny_samples, run_validation=False)
    path = trainer.save('manual.pt', fitness=0.5)
    info = read_checkpoint(path)['info']
    assert info.fitness == 0.5
    assert info.saved_at.tzinfo is not None


# evaluation

def oracle(batch):
    predictions = []
    for b, target in enumerate(batch['detections']):
        predictions.append(Prediction(
            boxes=target['boxes'].numpy(), scores=np.ones(len(target['boxes']), dtype=np.float32),
            labels=target['labels'].numpy(),
            masks={'drivable': batch['drivable'][b, 0].numpy().astype(np.uint8),
                   'lane': batch['lane'][b, 0].numpy().astype(np.uint8)}))
    return predictions


def test_oracle_predictions_score_perfectly(config_factory, tiny_samples):
    samples = [with_vehicle(s) for s in tiny_samples]
    result = Evaluator(config_factory()).evaluate(None, samples, predict_fn=oracle, measure_speed=False)
    metrics = result.metrics
    assert result.images == 4
    assert metrics.map50 == 1.0
    assert metrics.recall == 1.0
    assert metrics.miou == 1.0
    assert metrics.lane_iou == 1.0
    assert metrics.lane_acc == 1.0
    assert metrics.fps is None
    assert result.fairness['raw']['line_accuracy'] == 1.0
    assert result.fairness['fp_per_tp'] > 0


def test_evaluation_is_deterministic(config_factory, tiny_model_config, tiny_samples):
    model = PerceptionNet(tiny_model_config)
    evaluator = Evaluator(config_factory())
    first = evaluator.evaluate(model, tiny_samples, measure_speed=False).metrics.to_dict()
    second = evaluator.evaluate(model, tiny_samples, measure_speed=False).metrics.to_dict()
    assert first == second
    assert set(first) == {'recall', 'map50', 'miou', 'lane_iou', 'lane_acc', 'fps'}
    with pytest.raises(EmptyDatasetError):
        evaluator.evaluate(model, [])


def test_throughput_with_a_fake_clock(config_factory, tiny_model_config, tiny_samples):
    ticks = iter([10.0, 12.0])
    fps = Evaluator(config_factory()).measure_throughput(PerceptionNet(tiny_model_config), tiny_samples,
                                                         frames=100, warmup=0, clock=lambda: next(ticks))
    assert fps == 50.0


def test_threshold_sweep(config_factory, tiny_model_config, tiny_samples, tmp_path):
    rows = Evaluator(config_factory()).sweep_thresholds(PerceptionNet(tiny_model_config), tiny_samples)
    assert [row['threshold'] for row in rows] == list(DEFAULT_SWEEP_GRID)
    pixels = [row['lane_pixels'] for row in rows]
    assert all(a >= b for a, b in zip(pixels, pixels[1:]))
    assert all(0.0 <= row['miou'] <= 1.0 for row in rows)
    path = write_sweep_csv(rows, str(tmp_path / 'sweep.csv'))
    with open(path) as f:
        assert f.readline().strip() == 'threshold,miou,lane_iou,lane_acc,lane_pixels'
        assert len(f.readlines()) == 12


def test_checkpoint_wrappers(config_factory, tiny_samples):
    config = config_factory(train={'epochs': 0})
    result = train(config, device='cpu', train_samples=tiny_samples, run_validation=False)
    assert os.path.isfile(result.last_checkpoint)

    scores = evaluate(config, result.last_checkpoint, tiny_samples).metrics.to_dict()
    model, _, _ = load_model(result.last_checkpoint, 'cpu', config)
    direct = Evaluator(config).evaluate(model, tiny_samples, measure_speed=False).metrics.to_dict()
    assert {k: v for k, v in scores.items() if k != 'fps'} == {k: v for k, v in direct.items() if k != 'fps'}

    rows = sweep_thresholds(config, result.last_checkpoint, tiny_samples, grid=(0.5, 0.9))
    assert [row['threshold'] for row in rows] == [0.5, 0.9]


# inference and command line

def test_infer_writes_outputs(config_factory, tiny_model_config, tmp_path):
    image = SyntheticSceneGenerator((96, 128), seed=1).generate_sample(0).image
    image_path = str(tmp_path / 'scene.png')
    cv2.imwrite(image_path, cv2.cvtColor(image, cv2.COLOR_RGB2BGR))
    predictor = Predictor(PerceptionNet(tiny_model_config), config_factory())
    paths = predictor.infer(image_path, str(tmp_path / 'out'), min_score=0.0)
    assert set(paths) == {'detections', 'drivable', 'lane', 'overlay'}
    for task in ('drivable', 'lane'):
        assert read_mask(paths[task]).shape == (64, 64)
    assert cv2.imread(paths['overlay']).shape == (64, 64, 3)
    with open(paths['detections']) as f:
        records = [json.loads(line) for line in f]
    assert len(records) == tiny_model_config.num_queries
    assert set(records[0]) == {'image_id', 'class', 'bbox', 'score'}
    scores = [r['score'] for r in records]
    assert scores == sorted(scores, reverse=True)


def test_cli_infer_from_checkpoint(config_factory, tiny_samples, tmp_path):
    config = config_factory(train={'epochs': 0})
    weights = Trainer(config, device='cpu', train_samples=tiny_samples, val_samples=tiny_samples[:2]).train()
    image_path = str(tmp_path / 'frame.png')
    cv2.imwrite(image_path, cv2.cvtColor(tiny_samples[0].image, cv2.COLOR_RGB2BGR))
    out = str(tmp_path / 'inference')
    assert cli.main(['--device', 'cpu', 'infer', '--weights', weights.last_checkpoint, '--image', image_path,
                     '--out-dir', out]) == 0
    assert sorted(os.listdir(out)) == ['frame_detections.jsonl', 'frame_drivable.png', 'frame_lane.png',
                                       'frame_overlay.png']


def test_cli_dataset_commands(tmp_path):
    out = str(tmp_path / 'synth')
    assert cli.main(['gen-synth', '--n', '2', '--size', '64', '--out', out]) == 0
    assert len(os.listdir(os.path.join(out, 'images'))) == 2
    wide = str(tmp_path / 'wide')
    assert cli.main(['dilate-labels', '--in', os.path.join(out, 'lane'), '--out', wide]) == 0
    for name in os.listdir(wide):
        thin = read_mask(os.path.join(out, 'lane', name))
        assert np.array_equal(read_mask(os.path.join(wide, name)), dilate_mask(thin))


def test_cli_reports_errors(tmp_path):
    assert cli.main(['dilate-labels', '--in', str(tmp_path / 'missing'), '--out', str(tmp_path / 'x')]) == 1
    assert cli.main(['train', '--config', str(tmp_path / 'missing.json')]) == 1
