import csv
import itertools
import logging
import math
import os
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np
import torch

from driving_perception.config import PERCEPTION_LOG_LEVEL, LOG_FORMAT
from driving_perception.exceptions import InvalidInputError
from driving_perception.helper.ConfigHelper import apply_ablation
from driving_perception.helper.Trainer import Trainer, load_samples

logging.basicConfig(
    level=PERCEPTION_LOG_LEVEL,
    format=LOG_FORMAT
)

DEFAULT_BINS = 50


@dataclass
class GradRecord:
    step: int
    task: str
    vector: torch.Tensor
    valid: bool = True


@dataclass
class SimilarityHistogram:
    pair: Tuple[str, str]
    bin_edges: np.ndarray
    counts: np.ndarray
    mean: float
    fraction_negative: float

    def rows(self):
        return [(float(lo), float(hi), int(c)) for lo, hi, c in zip(self.bin_edges[:-1], self.bin_edges[1:],
                                                                     self.counts)]


def task_gradients(task_losses, params, step=0):
    """
    Gradient of every task loss w.r.t. ``params`` (fixed order), flattened.
    Uses autograd.grad, so no ``.grad`` buffer is touched.
    """
    params = list(params)
    records = {}
    for task, loss in task_losses.items():
        grads = torch.autograd.grad(loss, params, retain_graph=True, allow_unused=True)
        vector = torch.cat([(torch.zeros_like(p) if g is None else g).reshape(-1).detach()
                            for g, p in zip(grads, params)])
        valid = bool(torch.isfinite(vector).all())
        if not valid:
            logging.getLogger('GradientAnalyzer').warning('Non-finite %s gradient at step %s excluded', task, step)
        records[task] = GradRecord(step=step, task=task, vector=vector, valid=valid)
    return records


def record_task_gradients(model, criterion, batch, step=0, dn_group=None):
    """One forward pass, then per-task gradients over the shared trunk parameters."""
    outputs = model(batch['images'], dn_group)
    breakdown = criterion(outputs, batch, dn_group)
    return task_gradients(breakdown.tasks, [p for _, p in model.shared_parameters()], step)


def pairwise_cosine(g_i, g_j):
    """:return: cosine similarity in [-1, 1], or None when either vector has zero norm"""
    g_i, g_j = torch.as_tensor(g_i).double().reshape(-1), torch.as_tensor(g_j).double().reshape(-1)
    if g_i.numel() != g_j.numel():
        raise InvalidInputError(f"gradient lengths differ: {g_i.numel()} vs {g_j.numel()}")
    norm = g_i.norm() * g_j.norm()
    if float(norm) == 0.0:
        return None
    return float(torch.clamp(torch.dot(g_i, g_j) / norm, -1.0, 1.0))


def build_histogram(samples, bins=DEFAULT_BINS, pair=('', '')):
    """Equal-width bins over [-1, 1]; a value on a bin boundary goes to the upper bin."""
    samples = np.asarray(list(samples), dtype=np.float64)
    if samples.size == 0:
        raise InvalidInputError(f"no similarity samples for pair {pair}")
    if np.any(samples < -1) or np.any(samples > 1):
        raise InvalidInputError("cosine similarities must lie in [-1, 1]")
    edges = np.linspace(-1.0, 1.0, bins + 1)
    index = np.clip(np.searchsorted(edges, samples, side='right') - 1, 0, bins - 1)
    counts = np.bincount(index, minlength=bins)
    return SimilarityHistogram(pair=tuple(pair), bin_edges=edges, counts=counts, mean=float(samples.mean()),
                               fraction_negative=float(np.mean(samples < 0)))


@dataclass
class GradAnalysisResult:
    label: str
    histograms: Dict[Tuple[str, str], SimilarityHistogram] = field(default_factory=dict)
    skipped: int = 0
    files: List[str] = field(default_factory=list)

    @property
    def fraction_negative(self):
        counts = [(h.fraction_negative, int(h.counts.sum())) for h in self.histograms.values()]
        total = sum(n for _, n in counts)
        return sum(f * n for f, n in counts) / total if total else 0.0

    @property
    def recorded_steps(self):
        """Steps that produced a similarity for every task pair."""
        return min((int(h.counts.sum()) for h in self.histograms.values()), default=0)

    def summary(self):
        return {'label': self.label, 'fraction_negative': self.fraction_negative, 'skipped': self.skipped,
                'recorded_steps': self.recorded_steps,
                'pairs': {f"{a}-{b}": {'mean': h.mean, 'fraction_negative': h.fraction_negative,
                                       'samples': int(h.counts.sum())}
                          for (a, b), h in self.histograms.items()}}


class GradientAnalyzer:
    """
    Records per-task gradients on the shared trunk during a short training
    run and reports pairwise cosine-similarity histograms.
    """
    logger = logging.getLogger('GradientAnalyzer')

    def __init__(self, bins=DEFAULT_BINS):
        self.bins = bins
        self.samples = {}
        self.skipped = 0

    def reset(self):
        self.samples = {}
        self.skipped = 0

    def hook(self, step, breakdown, model):
        tasks = [t for t in ('detection', 'drivable', 'lane') if t in breakdown.tasks]
        if len(tasks) < 2:
            return
        records = task_gradients({t: breakdown.tasks[t] for t in tasks},
                                 [p for _, p in model.shared_parameters()], step)
        for a, b in itertools.combinations(tasks, 2):
            if not (records[a].valid and records[b].valid):
                self.skipped += 1
                continue
            cos = pairwise_cosine(records[a].vector, records[b].vector)
            if cos is None:
                self.logger.warning('Zero-norm gradient for %s/%s at step %s skipped', a, b, step)
                self.skipped += 1
                continue
            self.samples.setdefault((a, b), []).append(cos)

    def run(self, config, steps, out_dir=None, label=None, train_samples=None, device=None):
        """
        Train ``steps`` steps from scratch and record gradient similarities
        at every step. Writes one CSV per task pair and a PNG when ``out_dir`` is set.
        """
        self.reset()
        label = label or ('gca' if config.model.use_gca else 'vanilla')
        train_samples = train_samples if train_samples is not None else load_samples(config, 'train')
        batches = math.ceil(len(train_samples) / config.train.batch_size)
        train_cfg = replace(config.train, epochs=max(1, math.ceil(steps / batches)), max_steps=steps)
        trainer = Trainer(replace(config, train=train_cfg), device=device, train_samples=train_samples,
                          output_dir=out_dir or config.output_dir, gradient_hook=self.hook,
                          save_checkpoints=False, run_validation=False)
        trainer.train()

        result = GradAnalysisResult(label=label, skipped=self.skipped)
        for pair, values in self.samples.items():
            result.histograms[pair] = build_histogram(values, self.bins, pair)
        if out_dir:
            result.files = self.write(result, out_dir)
        self.logger.info('Gradient analysis (%s): %s', label, result.summary())
        return result

    def write(self, result: GradAnalysisResult, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        files = []
        for (a, b), hist in result.histograms.items():
            path = os.path.join(out_dir, f"grad_cos_{result.label}_{a}_{b}.csv")
            with open(path, 'w', newline='', encoding='utf-8') as f:
                writer = csv.writer(f)
                writer.writerow(['bin_lo', 'bin_hi', 'count'])
                writer.writerows(hist.rows())
            files.append(path)
        files.append(plot_histograms({result.label: result},
                                     os.path.join(out_dir, f"grad_cos_{result.label}.png")))
        return files

    def compare_gca_effect(self, config, steps, seeds, out_dir=None, device=None):
        """
        Fraction of negative similarities with and without GCA for every seed.
        A seed where GCA does not lower the fraction is logged, not raised.
        """
        per_seed = []
        last = {}
        for seed in seeds:
            seeded = replace(config, train=replace(config.train, seed=seed), data=replace(config.data, seed=seed))
            samples = load_samples(seeded, 'train')
            row = {'seed': seed}
            for name, key in (('vanilla_mtl', 'without_gca'), ('mtl_gca', 'with_gca')):
                sub_dir = os.path.join(out_dir, f"seed_{seed}") if out_dir else None
                last[key] = self.run(apply_ablation(seeded, name), steps, sub_dir, label=key,
                                     train_samples=samples, device=device)
                row[key] = last[key].fraction_negative
                row['recorded_steps'] = min(row.get('recorded_steps', steps), last[key].recorded_steps)
            if row['with_gca'] > row['without_gca']:
                self.logger.warning('Seed %s: GCA raised the negative fraction (%.4f > %.4f)', seed,
                                    row['with_gca'], row['without_gca'])
            per_seed.append(row)

        summary = {'steps': steps, 'per_seed': per_seed,
                   'mean_without_gca': float(np.mean([r['without_gca'] for r in per_seed])),
                   'mean_with_gca': float(np.mean([r['with_gca'] for r in per_seed]))}
        summary['gca_reduces_conflict'] = summary['mean_with_gca'] <= summary['mean_without_gca']
        if out_dir and last:
            summary['plot'] = plot_histograms(last, os.path.join(out_dir, 'grad_cos_comparison.png'))
        return summary


def plot_histograms(results: Dict[str, GradAnalysisResult], path, title: Optional[str] = None):
    pairs = sorted({pair for r in results.values() for pair in r.histograms})
    fig, axes = plt.subplots(1, max(len(pairs), 1), figsize=(5 * max(len(pairs), 1), 4), squeeze=False)
    for ax, pair in zip(axes[0], pairs):
        for label, result in results.items():
            hist = result.histograms.get(pair)
            if hist is None:
                continue
            ax.stairs(hist.counts, hist.bin_edges, label=f"{label} (neg {hist.fraction_negative:.2f})",
                      fill=len(results) == 1, alpha=0.7)
        ax.axvline(0.0, color='gray', linewidth=0.8, linestyle='--')
        ax.set_title(f"{pair[0]} / {pair[1]}")
        ax.set_xlabel('cosine similarity')
        ax.set_ylabel('steps')
        ax.legend(fontsize=8)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
