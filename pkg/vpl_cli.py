#!/usr/bin/env python3
"""
View-prior reconstruction command line.

Subcommands: make-dataset, train, eval, render, gradcheck, report.
Every subcommand writes a run_manifest.json next to its outputs.
"""

import argparse
import logging
import os
import sys
from typing import Dict, List, Optional

from utils import VplError, ValidationError, load_config, print_system_info, setup_logging

logger = logging.getLogger(__name__)

EXIT_GRADCHECK_FAILED = 1
MANIFEST_NAME = 'run_manifest.json'


def _output_dir(path: str) -> str:
    return os.path.dirname(os.path.abspath(path))


def _write_manifest(command: str, directory: str, resolved: Dict, seed: Optional[int],
                    args: argparse.Namespace, outputs: Dict[str, str]) -> str:
    from run_storage import RunManifest

    arguments = {k: v for k, v in vars(args).items() if k != 'handler'}
    path = os.path.join(directory, MANIFEST_NAME)
    RunManifest.for_command(command, resolved, seed, arguments, outputs).write(path)
    logger.info(f"📝 Run manifest: {path}")
    return path


def cmd_make_dataset(args: argparse.Namespace) -> int:
    from dataset import synth_primitives

    classes = [c.strip() for c in args.classes.split(',') if c.strip()]
    resolved = {'seed': args.seed, 'objects': args.objects, 'views': args.views, 'classes': classes,
                'size': args.size, 'test_fraction': args.test_fraction}
    os.makedirs(args.out, exist_ok=True)
    _write_manifest('make-dataset', args.out, resolved, args.seed, args,
                    {'manifest': os.path.join(args.out, 'manifest.json')})
    dataset = synth_primitives(args.seed, args.objects, args.views, classes, args.size, args.out,
                               test_fraction=args.test_fraction)
    print(f"✅ Dataset ready: {dataset.n_objects} objects, {dataset.n_views} views each -> {args.out}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    from dataset import load_dataset
    from trainer import TrainConfig, checkpoint_name, resolve_config, run_training

    if args.config is None and args.preset is None:
        raise ValidationError("train needs --config or --preset")
    raw = load_config(args.config) if args.config else {}
    if args.seed is not None:
        raw.setdefault('training', {})
        if not isinstance(raw['training'], dict):
            raise ValidationError("Section 'training' must be a mapping")
        raw['training']['seed'] = args.seed
    resolved = resolve_config(raw, args.preset)
    setup_logging(args.log_level or resolved['logging'].get('level') or 'INFO', resolved['logging'].get('file'))
    config = TrainConfig.from_dict(resolved)

    out_dir = args.out or config.output_dir
    os.makedirs(out_dir, exist_ok=True)
    dataset = load_dataset(args.dataset or config.dataset_root)
    final = os.path.join(out_dir, checkpoint_name(config.total_iterations(dataset.n_views)))
    _write_manifest('train', out_dir, resolved, config.seed, args,
                    {'log': os.path.join(out_dir, 'log.csv'), 'final_checkpoint': final})
    path = run_training(config, dataset, out_dir, resume=args.resume)
    print(f"✅ Final checkpoint: {path}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    from dataset import load_dataset
    from mesh_core import save_obj, save_textures
    from metrics import evaluate_model
    from run_storage import write_eval_csv
    from trainer import load_reconstructor

    reconstructor, config = load_reconstructor(args.checkpoint)
    dataset = load_dataset(args.dataset)
    if dataset.image_size != config.image_size:
        raise ValidationError(f"Checkpoint expects {config.image_size} px views, dataset has {dataset.image_size}")

    out_dir = _output_dir(args.out)
    mesh_dir = os.path.join(out_dir, 'meshes')
    outputs = {'table': args.out}
    if args.export_meshes:
        outputs['meshes'] = mesh_dir
    _write_manifest('eval', out_dir, {'checkpoint': os.path.abspath(args.checkpoint), 'config': config.to_dict()},
                    args.seed, args, outputs)

    def export(obj, view_index, mesh):
        stem = os.path.join(mesh_dir, f"{obj.object_id}_v{view_index}")
        save_obj(mesh, stem + '.obj')
        if mesh.textures is not None:
            save_textures(mesh, stem + '_tex')

    rows = evaluate_model(lambda sample: reconstructor.predict(sample.image, name=sample.object_id), dataset,
                          split=args.split, resolution=args.resolution, n_points=args.points, seed=args.seed,
                          per_sample_mean=args.per_sample_mean, fov=config.fov,
                          on_prediction=export if args.export_meshes else None)
    write_eval_csv(args.out, rows)
    print(f"✅ Evaluation table: {args.out} (mean IoU {rows[-1].iou:.4f}, silhouette IoU {rows[-1].sil_iou:.4f} "
          f"over {rows[-1].count} views)")
    return 0


def cmd_render(args: argparse.Namespace) -> int:
    from mesh_core import Viewpoint, load_obj
    from renderer import Camera, rasterize, save_alpha_png, save_color_png

    mesh = load_obj(args.mesh)
    camera = Camera(Viewpoint(args.azimuth, args.elevation, args.distance), fov=args.fov, image_size=args.size)
    outputs = {'color': args.out}
    if args.alpha_out:
        outputs['alpha'] = args.alpha_out
    _write_manifest('render', _output_dir(args.out), {'mesh': os.path.abspath(args.mesh)}, None, args, outputs)
    out = rasterize(mesh, camera)
    save_color_png(out, args.out)
    if args.alpha_out:
        save_alpha_png(out, args.alpha_out)
    print(f"✅ Rendered {mesh.name} ({len(mesh.faces)} faces, {int((out.face_id >= 0).sum())} covered px) "
          f"-> {args.out}")
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    from gradcheck import failed_checks, run_gradcheck, write_report

    if args.out:
        _write_manifest('gradcheck', _output_dir(args.out), {'scope': args.scope, 'trials': args.trials},
                        args.seed, args, {'report': args.out})
    results = run_gradcheck(args.scope, args.seed, trials=args.trials)
    if args.out:
        write_report(results, args.out)
    failed = failed_checks(results)
    if failed:
        print(f"❌ {len(failed)} of {len(results)} checks failed: {', '.join(failed)}")
        return EXIT_GRADCHECK_FAILED
    print(f"✅ All {len(results)} {args.scope} checks passed")
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    from report import build_report, parse_eval_argument

    evals = [parse_eval_argument(value) for value in args.eval]
    _write_manifest('report', args.out, {'log': args.log, 'evals': evals}, None, args,
                    {'summary': os.path.join(args.out, 'summary.txt')})
    result = build_report(args.log, evals, args.out)
    print(result.summary)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description='View-prior single-view mesh reconstruction')
    parser.add_argument('--log-level', default=None, help='Logging level (default INFO)')
    parser.add_argument('--system-info', action='store_true', help='Print platform and library versions first')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('make-dataset', help='Synthesize a primitive-shape dataset')
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--objects', type=int, default=200)
    p.add_argument('--views', type=int, default=20)
    p.add_argument('--classes', default='box,ellipsoid,cylinder,cone,L-shape')
    p.add_argument('--size', type=int, default=64)
    p.add_argument('--test-fraction', type=float, default=0.2)
    p.add_argument('--out', required=True)
    p.set_defaults(handler=cmd_make_dataset)

    p = sub.add_parser('train', help='Train a reconstructor')
    p.add_argument('--config', default=None, help='YAML or JSON training config')
    p.add_argument('--preset', default=None, help='Hyperparameter preset name')
    p.add_argument('--resume', default=None, help='Checkpoint to resume from')
    p.add_argument('--out', default=None, help='Output directory (default output.dir)')
    p.add_argument('--dataset', default=None, help='Dataset directory (default dataset.root)')
    p.add_argument('--seed', type=int, default=None, help='Overrides training.seed')
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser('eval', help='Score a checkpoint on a dataset split')
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--dataset', required=True)
    p.add_argument('--split', default='test', choices=['train', 'test'])
    p.add_argument('--resolution', type=int, default=32)
    p.add_argument('--points', type=int, default=512)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--per-sample-mean', action='store_true')
    p.add_argument('--export-meshes', action='store_true')
    p.add_argument('--out', required=True)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser('render', help='Render an OBJ mesh from one viewpoint')
    p.add_argument('--mesh', required=True)
    p.add_argument('--azimuth', type=float, default=0.0)
    p.add_argument('--elevation', type=float, default=0.0)
    p.add_argument('--distance', type=float, default=4.0)
    p.add_argument('--size', type=int, default=64)
    p.add_argument('--fov', type=float, default=40.0)
    p.add_argument('--out', required=True)
    p.add_argument('--alpha-out', default=None)
    p.set_defaults(handler=cmd_render)

    p = sub.add_parser('gradcheck', help='Run the gradient check suites')
    p.add_argument('--scope', default='all', help='renderer, losses, nn or all')
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--trials', type=int, default=100)
    p.add_argument('--out', default=None, help='Per-check CSV report')
    p.set_defaults(handler=cmd_gradcheck)

    p = sub.add_parser('report', help='Plot training curves and compare eval tables')
    p.add_argument('--log', default=None)
    p.add_argument('--eval', action='append', default=[], help='name=eval.csv (repeatable)')
    p.add_argument('--out', required=True)
    p.set_defaults(handler=cmd_report)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    setup_logging(args.log_level or 'INFO')
    if args.system_info:
        print_system_info()
    try:
        return args.handler(args)
    except VplError as e:
        logger.error(f"❌ {args.command} failed: {e}")
        return e.exit_code
    except KeyboardInterrupt:
        logger.warning("⚠️ Interrupted")
        return 130


if __name__ == "__main__":
    sys.exit(main())
