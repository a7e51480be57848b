import json
import logging
import math
import os
import random
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import torch
import torch.nn as nn
from torch.optim.lr_scheduler import LambdaLR
from torch.utils.data import DataLoader
from tqdm import tqdm

from driving_perception.config import PERCEPTION_LOG_LEVEL, LOG_FORMAT, resolve_device
from driving_perception.encoder import JSONEncoder
from driving_perception.exceptions import TrainingAbortError
from driving_perception.helper.BDDLoader import BDDLoader
from driving_perception.helper.CheckpointHelper import CheckpointHelper, read_checkpoint, restore_rng_state
from driving_perception.helper.DatasetHelper import PerceptionDataset, batch_to_device, collate_samples
from driving_perception.helper.Evaluator import Evaluator
from driving_perception.helper.SyntheticSceneGenerator import SyntheticSceneGenerator
from driving_perception.network.losses import MultiTaskCriterion, build_denoising_group
from driving_perception.network.model import PerceptionNet
from driving_perception.network.seg_decoder import ScaleWeights

logging.basicConfig(
    level=PERCEPTION_LOG_LEVEL,
    format=LOG_FORMAT
)

NORM_LAYERS = tuple(v for k, v in nn.__dict__.items() if 'Norm' in k and isinstance(v, type))
NO_DECAY_MODULES = NORM_LAYERS + (ScaleWeights, nn.Embedding)


def set_seed(seed):
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)


def load_samples(config, split='train'):
    data = config.data
    size = tuple(config.model.input_size)
    if data.source == 'synthetic':
        n = data.train_size if split == 'train' else data.val_size
        seed = data.seed if split == 'train' else data.seed + 1000
        return SyntheticSceneGenerator(size, seed).generate(n)
    root = data.train_dir if split == 'train' else (data.val_dir or data.train_dir)
    return BDDLoader(size).load_directory(root)


def cosine_lambda(epochs, lrf):
    """LR factor: 1 at epoch 0, falling along a half cosine to ``lrf`` at ``epochs``."""
    return lambda x: ((1 - math.cos(x * math.pi / max(epochs, 1))) / 2) * (lrf - 1) + 1


def build_optimizer(model, lr, momentum, weight_decay):
    """
    SGD with three groups: biases (0), decayed weights (1), and norm /
    embedding / scale-weight parameters without decay (2).
    """
    groups = [], [], []
    for module_name, module in model.named_modules():
        for param_name, param in module.named_parameters(recurse=False):
            fullname = f"{module_name}.{param_name}" if module_name else param_name
            if 'bias' in fullname:
                groups[0].append(param)
            elif isinstance(module, NO_DECAY_MODULES):
                groups[2].append(param)
            else:
                groups[1].append(param)
    optimizer = torch.optim.SGD(groups[0], lr=lr, momentum=momentum, nesterov=True)
    optimizer.add_param_group({'params': groups[1], 'weight_decay': weight_decay})
    optimizer.add_param_group({'params': groups[2], 'weight_decay': 0.0})
    return optimizer


@dataclass
class TrainResult:
    last_checkpoint: Optional[str] = None
    best_checkpoint: Optional[str] = None
    log_path: Optional[str] = None
    history: List[dict] = field(default_factory=list)
    step_losses: List[float] = field(default_factory=list)
    step: int = 0
    best_fitness: Optional[float] = None


class Trainer:
    """
    Warmup then cosine decay, per-epoch validation, best/last checkpoints
    and a JSON-lines metrics log in ``output_dir``.
    """
    logger = logging.getLogger('Trainer')

    def __init__(self, config, device=None, train_samples=None, val_samples=None, output_dir=None,
                 step_callback=None, gradient_hook=None, save_checkpoints=True, run_validation=True):
        self.config = config
        self.device = resolve_device(device)
        self.output_dir = output_dir or config.output_dir
        self.step_callback = step_callback
        self.gradient_hook = gradient_hook
        self.save_checkpoints = save_checkpoints
        self.run_validation = run_validation

        set_seed(config.train.seed)
        self.train_samples = train_samples if train_samples is not None else load_samples(config, 'train')
        self.val_samples = val_samples
        if self.val_samples is None and run_validation:
            self.val_samples = load_samples(config, 'val')
        self.dataset = PerceptionDataset(self.train_samples)

        self.model = PerceptionNet(config.model).to(self.device)
        self.criterion = MultiTaskCriterion(config.model, config.loss)
        train_cfg = config.train
        self.optimizer = build_optimizer(self.model, train_cfg.lr, train_cfg.momentum, train_cfg.weight_decay)
        self.scheduler = LambdaLR(self.optimizer, lr_lambda=cosine_lambda(train_cfg.epochs, train_cfg.lrf))
        self.checkpoints = CheckpointHelper(self.output_dir)
        self.evaluator = Evaluator(config, self.device)

        self.epoch = 0
        self.step = 0
        self.best_fitness = None

    @property
    def batches_per_epoch(self):
        return math.ceil(len(self.dataset) / self.config.train.batch_size)

    @property
    def warmup_steps(self):
        return round(self.config.train.warmup_epochs * self.batches_per_epoch)

    def loader(self, epoch):
        generator = torch.Generator().manual_seed(self.config.train.seed + epoch)
        return DataLoader(self.dataset, batch_size=self.config.train.batch_size, shuffle=True,
                          collate_fn=collate_samples, generator=generator,
                          num_workers=self.config.train.num_workers)

    def warmup(self, epoch):
        """Linear ramp of lr (bias group from ``warmup_bias_lr`` down, others from 0) and momentum."""
        train_cfg = self.config.train
        nw = self.warmup_steps
        if nw == 0 or self.step > nw:
            return
        lf = self.scheduler.lr_lambdas[0]
        for j, group in enumerate(self.optimizer.param_groups):
            group['lr'] = float(np.interp(self.step, [0, nw], [train_cfg.warmup_bias_lr if j == 0 else 0.0,
                                                               group['initial_lr'] * lf(epoch)]))
            group['momentum'] = float(np.interp(self.step, [0, nw], [train_cfg.warmup_momentum,
                                                                     train_cfg.momentum]))

    def denoising_group(self, batch):
        loss_cfg = self.config.loss
        if not self.config.model.has_detection or loss_cfg.dn_groups == 0:
            return None
        generator = torch.Generator().manual_seed(self.config.train.seed * 100003 + self.step)
        return build_denoising_group(batch['detections'], loss_cfg.dn_groups, self.config.model.num_queries,
                                     self.config.model.num_classes, loss_cfg.dn_box_noise, loss_cfg.dn_label_flip,
                                     generator=generator, device=self.device)

    def train_step(self, batch):
        self.model.train()
        batch = batch_to_device(batch, self.device)
        dn_group = self.denoising_group(batch)
        outputs = self.model(batch['images'], dn_group)
        breakdown = self.criterion(outputs, batch, dn_group)
        try:
            loss = breakdown.total()
        except TrainingAbortError as e:
            self.logger.error('Aborting at step %s: %s; components %s', self.step, e, breakdown.details)
            raise
        if self.gradient_hook is not None:
            self.gradient_hook(self.step, breakdown, self.model)

        self.optimizer.zero_grad()
        loss.backward()
        if self.config.train.clip_max_norm > 0:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.config.train.clip_max_norm)
        self.optimizer.step()

        scale_weights = getattr(self.model.seg_decoder, 'scale_weights', None)
        if scale_weights is not None and not scale_weights.is_normalized():
            self.logger.warning('Scale weights lost normalisation at step %s', self.step)
        if self.step_callback is not None:
            self.step_callback(self, breakdown)
        self.step += 1
        return float(loss.detach()), breakdown

    def validate(self):
        if not self.run_validation or not self.val_samples:
            return None
        return self.evaluator.evaluate(self.model, self.val_samples, measure_speed=False)

    def save(self, name, fitness=None):
        if not self.save_checkpoints:
            return None
        return self.checkpoints.save(name, self.model, self.config, epoch=self.epoch, step=self.step,
                                     fitness=fitness, optimizer=self.optimizer, scheduler=self.scheduler,
                                     extra={'best_fitness': self.best_fitness})

    def resume(self, path):
        archive = read_checkpoint(path, map_location=self.device)
        self.model.load_state_dict(archive['model'])
        if archive.get('optimizer'):
            self.optimizer.load_state_dict(archive['optimizer'])
        if archive.get('scheduler'):
            self.scheduler.load_state_dict(archive['scheduler'])
        if archive.get('rng'):
            restore_rng_state(archive['rng'])
        self.epoch = archive['info'].epoch or 0
        self.step = archive['info'].step or 0
        self.best_fitness = (archive.get('extra') or {}).get('best_fitness')
        self.logger.info('Resumed from %s at epoch %s, step %s', path, self.epoch, self.step)
        return self

    def train(self, stop_after=None):
        """
        Train until ``config.train.epochs`` (or ``max_steps``) is reached.

        :param stop_after: run at most this many epochs in this call
        """
        train_cfg = self.config.train
        os.makedirs(self.output_dir, exist_ok=True)
        log_path = os.path.join(self.output_dir, 'metrics_log.jsonl')
        result = TrainResult(log_path=log_path)
        mode = 'a' if self.step > 0 else 'w'
        with open(log_path, mode, encoding='utf-8'):
            pass

        if train_cfg.epochs == 0:
            result.last_checkpoint = self.save('last.pt')
            result.step = self.step
            return result

        last_epoch = train_cfg.epochs if stop_after is None else min(train_cfg.epochs, self.epoch + stop_after)
        finished = False
        while self.epoch < last_epoch and not finished:
            epoch = self.epoch
            sums = {}
            count = 0
            bar = tqdm(self.loader(epoch), desc=f"epoch {epoch + 1}/{train_cfg.epochs}", leave=False)
            for batch in bar:
                if train_cfg.max_steps is not None and self.step >= train_cfg.max_steps:
                    finished = True
                    break
                self.warmup(epoch)
                loss, breakdown = self.train_step(batch)
                result.step_losses.append(loss)
                for name, value in breakdown.details.items():
                    sums[name] = sums.get(name, 0.0) + value
                sums['total'] = sums.get('total', 0.0) + loss
                count += 1
                bar.set_postfix(loss=f"{loss:.4f}")
            self.scheduler.step()
            self.epoch += 1

            record = {'epoch': self.epoch, 'step': self.step,
                      'lr': [g['lr'] for g in self.optimizer.param_groups],
                      'losses': {k: v / max(count, 1) for k, v in sums.items()}}
            evaluation = None
            if self.epoch % train_cfg.eval_interval == 0 or self.epoch == last_epoch or finished:
                evaluation = self.validate()
            fitness = None
            if evaluation is not None:
                record['metrics'] = evaluation.metrics.to_dict()
                fitness = evaluation.metrics.fitness()
                if self.best_fitness is None or fitness > self.best_fitness:
                    self.best_fitness = fitness
                    result.best_checkpoint = self.save('best.pt', fitness)
            result.last_checkpoint = self.save('last.pt', fitness)
            result.history.append(record)
            with open(log_path, 'a', encoding='utf-8') as f:
                f.write(json.dumps(record, cls=JSONEncoder) + '\n')
            self.logger.info('Epoch %s/%s: loss %.4f %s', self.epoch, train_cfg.epochs,
                             record['losses'].get('total', float('nan')), record.get('metrics', ''))

        result.step = self.step
        result.best_fitness = self.best_fitness
        return result


def train(config, **kwargs):
    return Trainer(config, **kwargs).train()
