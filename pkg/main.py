#!/usr/bin/env python3
"""
LiDAR-assisted intrinsic image decomposition - command line.

Every subcommand prints a JSON summary on stdout; logs go to stderr and the
log file. Exit codes: 0 success, 1 invalid input or usage, 2 runtime failure.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from typing import Any, Dict, List, Optional

import numpy as np

from annotation_handler import (load_annotations, sample_annotation_pairs, save_annotations,
                                simulate_judgements)
from dataset_handler import check_dataset_url, read_image, read_lidar, write_image, write_png
from densify import densify
from evaluation import balanced_subsample, evaluate
from experiment_runner import METHODS, ExperimentConfig, run_experiment
from iid_errors import IIDError, ValidationError
from imagecore import GammaConfig
from pipeline_config import (PipelineConfig, build_annotation_config, build_densify_params, build_solver_config,
                             build_synth_config, load_config_file)
from report_formatter import ReportFormatter
from solver import decompose
from synth_scene import save_scenes, scene_fingerprint, scene_id, synth_scene

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_FAILED = 2


class CliParser(argparse.ArgumentParser):
    """ArgumentParser that exits with EXIT_INVALID on usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_INVALID)


def _as_list(value: Any) -> List:
    return list(value) if isinstance(value, (list, tuple)) else [value]


def _choose(cli_value, options: Dict[str, Any], key: str, default):
    """CLI flag > config file > environment/default."""
    if cli_value is not None:
        return cli_value
    return options.get(key, default)


def _emit(summary: Dict) -> int:
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def _out_dir(args) -> str:
    out = args.out or '.'
    os.makedirs(out, exist_ok=True)
    return out


def _gamma(options) -> GammaConfig:
    return GammaConfig(float(options.get('gamma', PipelineConfig.GAMMA)))


def _seed(args) -> int:
    return PipelineConfig.DEFAULT_SEED if args.seed is None else args.seed


def cmd_synth(args, options) -> int:
    out = _out_dir(args)
    synth_cfg = build_synth_config(options)
    annotation_cfg = build_annotation_config(options)
    delta = float(_choose(args.delta, options, 'delta', PipelineConfig.DELTA))
    size = int(_choose(args.size, options, 'size', 128))
    count = int(_choose(args.scenes, options, 'scenes', 1))
    base_seed = _seed(args)

    scenes, judged, summary = [], [], []
    for seed in range(base_seed, base_seed + count):
        scene = synth_scene(seed, size, size, synth_cfg)
        points, pairs = sample_annotation_pairs(scene.image, seed, annotation_cfg)
        judged.append(simulate_judgements(scene.albedo, pairs, points, delta, scene_id(seed)))
        scenes.append(scene)
        summary.append({"id": scene_id(seed), "seed": seed, "fingerprint": scene_fingerprint(scene),
                        "pairs": len(pairs)})
    manifest = save_scenes(scenes, out, _gamma(options), annotations=judged)
    return _emit({"command": "synth", "manifest": manifest, "scenes": summary})


def _load_inputs(args, options):
    gamma = _gamma(options)
    image = read_image(args.image, gamma)
    lidar = read_lidar(args.lidar, image.shape, args.lidar_mask, args.divisor)
    return gamma, image, lidar


def cmd_densify(args, options) -> int:
    out = _out_dir(args)
    _, image, lidar = _load_inputs(args, options)
    result = densify(image, lidar, build_densify_params(options))
    dense_path = os.path.join(out, 'dense_intensity.png')
    write_png(dense_path, result.dense.data, 16)
    return _emit({"command": "densify", "dense": dense_path, "observed": lidar.observed_count,
                  "iterations": result.iterations, "residual": result.residual})


def cmd_decompose(args, options) -> int:
    out = _out_dir(args)
    gamma, image, lidar = _load_inputs(args, options)
    solver_cfg = build_solver_config(options)
    if args.no_densify:
        intensity, mask = lidar.values, lidar.mask
    else:
        intensity = densify(image, lidar, build_densify_params(options)).dense
        mask = np.ones(image.shape, dtype=bool)
    result = decompose(image, intensity, mask, solver_cfg)

    albedo_path = os.path.join(out, 'albedo.png')
    shade_path = os.path.join(out, 'shade.png')
    write_image(albedo_path, result.albedo, gamma)
    write_image(shade_path, result.shade, gamma)
    metrics = {
        "command": "decompose",
        "albedo": albedo_path,
        "shade": shade_path,
        "objective": result.objective,
        "iterations": result.iterations,
        "reconstruction_error": result.reconstruction_error(image),
        "scale_bias": vars(result.scale_bias),
    }
    with open(os.path.join(out, 'metrics.json'), 'w', encoding='utf-8', newline='\n') as f:
        json.dump(metrics, f, indent=2, sort_keys=True)
        f.write('\n')
    return _emit(metrics)


def cmd_annotate(args, options) -> int:
    out = _out_dir(args)
    gamma = _gamma(options)
    cfg = build_annotation_config(options)
    if args.mode:
        cfg = replace(cfg, mode=args.mode)
    image = read_image(args.image, gamma)
    points, pairs = sample_annotation_pairs(image, _seed(args), cfg)
    summary = {"command": "annotate", "points": len(points), "pairs": len(pairs), "mode": cfg.mode}
    if args.albedo:
        delta = float(_choose(args.delta, options, 'delta', PipelineConfig.DELTA))
        labelled = simulate_judgements(read_image(args.albedo, gamma), pairs, points, delta)
        path = os.path.join(out, 'pairs.jsonl')
        save_annotations(path, labelled)
        summary.update(annotations=path)
    else:
        path = os.path.join(out, 'pairs.json')
        with open(path, 'w', encoding='utf-8', newline='\n') as f:
            json.dump({"points": [list(p) for p in points], "pairs": [list(p) for p in pairs]}, f, indent=2)
        summary.update(unlabelled=path)
    return _emit(summary)


def cmd_evaluate(args, options) -> int:
    gamma = _gamma(options)
    delta = float(_choose(args.delta, options, 'delta', PipelineConfig.DELTA))
    albedo = read_image(args.pred, gamma)
    annotations = load_annotations(args.ann, width=albedo.width, height=albedo.height)
    if args.balanced:
        annotations = balanced_subsample(annotations, _seed(args))
    report = evaluate(annotations, albedo, delta, method=args.method or "", dataset=args.ann)
    return _emit({"command": "evaluate", "whdr": report.whdr, "precision": report.precision,
                  "recall": report.recall, "f_score": report.f_score, "counts": report.counts,
                  "whdr_equal": report.whdr_equal, "whdr_unequal": report.whdr_unequal, "delta": delta})


def cmd_report(args, options) -> int:
    run_dir = args.run_dir or args.out or '.'
    path = os.path.join(run_dir, 'report.json')
    if not os.path.exists(path):
        raise ValidationError(f"no report.json in {run_dir}")
    with open(path, 'r', encoding='utf-8') as f:
        payload = json.load(f)
    formatter = ReportFormatter(payload.get("runs", []))
    table_path = os.path.join(run_dir, 'report.txt')
    with open(table_path, 'w', encoding='utf-8', newline='\n') as f:
        f.write(formatter.format_table())
    print(formatter.format_table(), file=sys.stderr)
    return _emit({"command": "report", "table": table_path, "rows": formatter.aggregate()})


def cmd_run(args, options) -> int:
    out = _out_dir(args)
    base_seed = _seed(args)
    scenes = _choose(args.scenes, options, 'scenes', None)
    if scenes is not None:
        seeds = list(range(base_seed, base_seed + int(scenes)))
    else:
        seeds = [int(s) for s in _as_list(options.get('seeds', base_seed))]
    manifest = args.manifest or PipelineConfig.DATASET_MANIFEST or None
    cfg = ExperimentConfig(
        out_dir=out,
        manifest=manifest,
        methods=tuple(_as_list(_choose(args.methods and args.methods.split(','), options, 'methods', METHODS))),
        densities=tuple(float(d) for d in _as_list(_choose(
            args.densities and [float(d) for d in args.densities.split(',')], options, 'densities',
            (1.0, 0.5, 0.1, 0.01)))),
        delta=float(_choose(args.delta, options, 'delta', PipelineConfig.DELTA)),
        seeds=tuple(seeds),
        jobs=int(_choose(args.jobs, options, 'jobs', PipelineConfig.JOBS)),
        balanced=bool(options.get('balanced', True)),
        size=int(_choose(args.size, options, 'size', 128)),
        retinex_threshold=float(options.get('retinex_threshold', 0.1)),
        color_threshold=float(options.get('color_threshold', 0.02)),
        gamma=_gamma(options),
        solver=build_solver_config(options),
        densify=build_densify_params(options),
        synth=build_synth_config(options),
        annotation=build_annotation_config(options),
    )
    result = run_experiment(cfg)
    _emit({"command": "run", "report": result.report_path, "table": result.table_path,
           "rows": result.rows, "failures": result.failures})
    return EXIT_OK if result.ok else EXIT_FAILED


def cmd_check_dataset(args, options) -> int:
    available = check_dataset_url(args.url)
    return _emit({"command": "check-dataset", "available": available})


def build_parser() -> CliParser:
    common = CliParser(add_help=False)
    common.add_argument('--seed', type=int, help='RNG seed (default IID_DEFAULT_SEED)')
    common.add_argument('--config', help='key=value configuration file')
    common.add_argument('--out', help='output directory')
    common.add_argument('--log-level', help='override IID_LOG_LEVEL')

    parser = CliParser(
        prog='main.py',
        description='LiDAR-assisted intrinsic image decomposition',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  python main.py synth --seed 42 --size 128 --out data/
  python main.py decompose --image i.png --lidar l.csv --out o/
  python main.py evaluate --pred o/albedo.png --ann pairs.jsonl --delta 0.1
  python main.py run --scenes 10 --methods ours,retinex --out results/
        """,
    )
    sub = parser.add_subparsers(dest='command', metavar='command')
    sub.required = True

    p = sub.add_parser('synth', parents=[common], help='generate synthetic scenes and a manifest')
    p.add_argument('--size', type=int, help='scene width and height (default 128)')
    p.add_argument('--scenes', type=int, help='number of scenes, seeds seed..seed+n-1')
    p.add_argument('--delta', type=float, help='ratio threshold of the simulated annotator')
    p.set_defaults(handler=cmd_synth)

    for name, handler, help_text in (('densify', cmd_densify, 'densify sparse LiDAR intensity'),
                                     ('decompose', cmd_decompose, 'decompose an image into albedo and shade')):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument('--image', required=True, help='sRGB PNG')
        p.add_argument('--lidar', required=True, help='intensity PNG or u,v,intensity CSV')
        p.add_argument('--lidar-mask', help='mask PNG for a PNG intensity map')
        p.add_argument('--divisor', type=float, default=1.0, help='raw intensity divisor')
        if name == 'decompose':
            p.add_argument('--no-densify', action='store_true', help='use the raw sparse intensity')
        p.set_defaults(handler=handler)

    p = sub.add_parser('annotate', parents=[common], help='sample annotation pairs')
    p.add_argument('--image', required=True, help='sRGB PNG')
    p.add_argument('--albedo', help='ground-truth albedo PNG for simulated judgements')
    p.add_argument('--mode', choices=['sparse', 'dense'])
    p.add_argument('--delta', type=float)
    p.set_defaults(handler=cmd_annotate)

    p = sub.add_parser('evaluate', parents=[common], help='score a predicted albedo')
    p.add_argument('--pred', required=True, help='predicted albedo PNG')
    p.add_argument('--ann', required=True, help='annotation JSON lines')
    p.add_argument('--delta', type=float)
    p.add_argument('--balanced', action='store_true', help='balanced resampling of the classes')
    p.add_argument('--method', help='method name for the report')
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser('report', parents=[common], help='render the aggregate table of a run')
    p.add_argument('--run-dir', help='directory holding report.json (default --out)')
    p.set_defaults(handler=cmd_report)

    p = sub.add_parser('run', parents=[common], help='run the comparison / ablation experiment')
    p.add_argument('--manifest', help='manifest JSON (default: synthetic scenes)')
    p.add_argument('--methods', help=f"comma list from {','.join(METHODS)}")
    p.add_argument('--densities', help='comma list of LiDAR densities in (0, 1]')
    p.add_argument('--scenes', type=int, help='synthetic scenes / seeds to run')
    p.add_argument('--size', type=int)
    p.add_argument('--delta', type=float)
    p.add_argument('--jobs', type=int, help='parallel tasks (default IID_JOBS)')
    p.set_defaults(handler=cmd_run)

    p = sub.add_parser('check-dataset', parents=[common], help='check the dataset URL answers')
    p.add_argument('--url', help='default IID_DATASET_URL')
    p.set_defaults(handler=cmd_check_dataset)
    return parser


def cli(argv: Optional[List[str]] = None) -> int:
    """Parse argv, run the subcommand and map errors to exit codes."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    PipelineConfig.configure_logging(args.log_level)
    try:
        options = load_config_file(args.config)
        return args.handler(args, options)
    except ValidationError as e:
        logger.error(f"[CLI] {args.command}: {e}")
        return EXIT_INVALID
    except IIDError as e:
        logger.error(f"[CLI] {args.command} failed: {e}")
        return EXIT_FAILED
    except Exception as e:
        logger.exception(f"[CLI] {args.command} failed unexpectedly: {e}")
        return EXIT_FAILED


def main():
    sys.exit(cli())


if __name__ == "__main__":
    main()
