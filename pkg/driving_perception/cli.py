"""
Command-line surface.

    train             train a model from a JSON config (optionally an ablation preset)
    eval              metrics of a checkpoint on the validation split
    sweep-thresholds  segmentation metrics over a grid of confidence thresholds
    grad-analyze      task-gradient cosine-similarity histograms
    dilate-labels     widen thin lane label PNGs with the 7x7 elliptical element
    infer             detections, masks and an overlay for one image
    gen-synth         write a synthetic BDD-format dataset
    serve             start the REST service
"""
import argparse
import json
import logging
import os
import sys
from dataclasses import replace

from driving_perception.config import PERCEPTION_WEIGHTS, resolve_device
from driving_perception.encoder import JSONEncoder, dump_json
from driving_perception.exceptions import PerceptionError
from driving_perception.helper.BDDLoader import BDDLoader
from driving_perception.helper.CheckpointHelper import load_model
from driving_perception.helper.ConfigHelper import ABLATIONS, apply_ablation, load_config
from driving_perception.helper.Evaluator import Evaluator, write_sweep_csv
from driving_perception.helper.GradientAnalyzer import GradientAnalyzer
from driving_perception.helper.LaneLabelHelper import LaneLabelHelper
from driving_perception.helper.Predictor import infer
from driving_perception.helper.SyntheticSceneGenerator import SyntheticSceneGenerator
from driving_perception.helper.Trainer import Trainer, load_samples
from driving_perception.server import create_app

logger = logging.getLogger(__name__)


def _parse_grid(text):
    return tuple(float(v) for v in text.split(',')) if text else None


def _eval_config(args, stored):
    """Stored checkpoint config, or --config, with the checkpoint's model and CLI thresholds."""
    config = load_config(args.config) if args.config else stored
    config = replace(config, model=stored.model)
    overrides = {}
    if getattr(args, 'da_threshold', None) is not None:
        overrides['da_threshold'] = args.da_threshold
    if getattr(args, 'll_threshold', None) is not None:
        overrides['ll_threshold'] = args.ll_threshold
    return replace(config, eval=replace(config.eval, **overrides)) if overrides else config


def _eval_samples(args, config):
    if getattr(args, 'data_dir', None):
        return BDDLoader(config.model.input_size).load_directory(args.data_dir)
    return load_samples(config, 'val')


def cmd_train(args):
    config = load_config(args.config, ablation=args.ablation)
    if args.output_dir:
        config = replace(config, output_dir=args.output_dir)
    if args.epochs is not None:
        config = replace(config, train=replace(config.train, epochs=args.epochs))
    trainer = Trainer(config, device=args.device)
    if args.resume:
        trainer.resume(args.resume)
    result = trainer.train()
    summary = {'last': result.last_checkpoint, 'best': result.best_checkpoint, 'log': result.log_path,
               'steps': result.step, 'best_fitness': result.best_fitness}
    print(json.dumps(summary, indent=2))
    return summary


def cmd_eval(args):
    device = resolve_device(args.device)
    model, stored, _ = load_model(args.weights or PERCEPTION_WEIGHTS, device)
    config = _eval_config(args, stored)
    result = Evaluator(config, device).evaluate(model, _eval_samples(args, config))
    print(result.metrics.table())
    out = args.out or os.path.join(config.output_dir, 'metrics.json')
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    dump_json(result.to_dict(), out)
    print(f"\nMetrics saved to: {out}")
    return result


def cmd_sweep(args):
    device = resolve_device(args.device)
    model, stored, _ = load_model(args.weights or PERCEPTION_WEIGHTS, device)
    config = _eval_config(args, stored)
    rows = Evaluator(config, device).sweep_thresholds(model, _eval_samples(args, config), _parse_grid(args.grid))
    out = args.out or os.path.join(config.output_dir, 'threshold_sweep.csv')
    write_sweep_csv(rows, out)
    for row in rows:
        print(json.dumps(row, cls=JSONEncoder))
    print(f"\nSweep saved to: {out}")
    return rows


def cmd_grad_analyze(args):
    config = load_config(args.config)
    out_dir = args.out_dir or os.path.join(config.output_dir, 'grad_analysis')
    analyzer = GradientAnalyzer(bins=args.bins)
    if args.compare:
        seeds = [int(s) for s in args.seeds.split(',')]
        summary = analyzer.compare_gca_effect(config, args.steps, seeds, out_dir, device=args.device)
    else:
        preset = 'mtl_gca' if args.gca == 'on' else 'vanilla_mtl'
        summary = analyzer.run(apply_ablation(config, preset), args.steps, out_dir, device=args.device).summary()
    dump_json(summary, os.path.join(out_dir, 'summary.json'))
    print(json.dumps(summary, indent=2, cls=JSONEncoder))
    return summary


def cmd_dilate(args):
    written = LaneLabelHelper().dilate_directory(args.in_dir, args.out_dir)
    print(f"Dilated {written} masks into {args.out_dir}")
    return written


def cmd_infer(args):
    device = resolve_device(args.device)
    paths = infer(args.weights or PERCEPTION_WEIGHTS, args.image, args.out_dir, device, min_score=args.min_score)
    print(json.dumps(paths, indent=2))
    return paths


def cmd_gen_synth(args):
    generator = SyntheticSceneGenerator((args.size, args.size), args.seed)
    generator.write_bdd_directory(generator.generate(args.n), args.out)
    print(f"Wrote {args.n} scenes to {args.out}")
    return args.out


def cmd_serve(args):
    app = create_app(args.weights, args.config, args.device)
    print(f"Starting Driving Perception Server on port {args.port}...")
    app.run(host=args.host, port=args.port)


def build_parser():
    parser = argparse.ArgumentParser(prog='driving-perception',
                                     description='Multi-task driving perception: train, evaluate, analyse, serve.')
    parser.add_argument('--device', default=None, help='torch device (default: cuda when available)')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('train', help='train a model')
    p.add_argument('--config', default=None, help='JSON run configuration')
    p.add_argument('--ablation', choices=sorted(ABLATIONS), default=None)
    p.add_argument('--resume', default=None, help='checkpoint to resume from')
    p.add_argument('--epochs', type=int, default=None)
    p.add_argument('--output-dir', default=None)
    p.set_defaults(func=cmd_train)

    for name, func, help_text in (('eval', cmd_eval, 'evaluate a checkpoint'),
                                  ('sweep-thresholds', cmd_sweep, 'segmentation threshold sweep')):
        p = sub.add_parser(name, help=help_text)
        p.add_argument('--config', default=None)
        p.add_argument('--weights', default=None)
        p.add_argument('--data-dir', default=None, help='BDD-format directory (default: configured val split)')
        p.add_argument('--da-threshold', type=float, default=None)
        p.add_argument('--ll-threshold', type=float, default=None)
        p.add_argument('--out', default=None)
        if name == 'sweep-thresholds':
            p.add_argument('--grid', default=None, help='comma-separated thresholds (default 0.40..0.95)')
        p.set_defaults(func=func)

    p = sub.add_parser('grad-analyze', help='task gradient cosine-similarity histograms')
    p.add_argument('--config', default=None)
    p.add_argument('--steps', type=int, default=200)
    p.add_argument('--gca', choices=('on', 'off'), default='on')
    p.add_argument('--compare', action='store_true', help='run with and without GCA over several seeds')
    p.add_argument('--seeds', default='0,1,2')
    p.add_argument('--bins', type=int, default=50)
    p.add_argument('--out-dir', default=None)
    p.set_defaults(func=cmd_grad_analyze)

    p = sub.add_parser('dilate-labels', help='dilate lane label PNGs')
    p.add_argument('--in', dest='in_dir', required=True)
    p.add_argument('--out', dest='out_dir', required=True)
    p.set_defaults(func=cmd_dilate)

    p = sub.add_parser('infer', help='run a checkpoint on one image')
    p.add_argument('--weights', default=None)
    p.add_argument('--image', required=True)
    p.add_argument('--out-dir', default='inference')
    p.add_argument('--min-score', type=float, default=0.25)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser('gen-synth', help='write a synthetic BDD-format dataset')
    p.add_argument('--n', type=int, default=20)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--size', type=int, default=320)
    p.add_argument('--out', default='data/synthetic')
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser('serve', help='start the REST service')
    p.add_argument('--weights', default=None)
    p.add_argument('--config', default=None)
    p.add_argument('--host', default='0.0.0.0')
    p.add_argument('--port', type=int, default=8080)
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except PerceptionError as e:
        logger.error(e)
        print(f"Error: {e}")
        return 1
    return 0


if __name__ == '__main__':
    sys.exit(main())
