"""Command-line entry point: ``sceneflow {run,eval,diag,synth,ablate}``.

Exit codes: 0 success, 1 a scene failed, 2 invalid configuration or arguments.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import synth
from .evaluation import CSV_HEADER, MetricsReport, diagnostics, evaluate_pair
from .io import find_scenes, load_scene, read_flow, save_scene
from .pipeline import VARIANTS, ConfigError, PipelineConfig, map_scenes, run_pipeline

log = logging.getLogger("sceneflow")

EXIT_OK, EXIT_SCENE_FAILED, EXIT_CONFIG = 0, 1, 2


def _load_config(args):
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    changes = {}
    if getattr(args, "input", None):
        changes["input_dir"] = str(args.input)
    if getattr(args, "output", None):
        changes["output_dir"] = str(args.output)
    if args.workers is not None:
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        changes["workers"] = args.workers
    if getattr(args, "dump_intermediate", False):
        changes["dump_intermediate"] = True
    cfg = cfg.replace(**changes)
    if args.seed is not None:
        cfg = cfg.seeded(args.seed)
    return cfg


def _write_json(path, obj):
    text = json.dumps(obj, indent=2, allow_nan=False)
    if path is None:
        print(text)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text + "\n")


def _report_dict(report):
    return json.loads(report.to_json()) if report is not None else None


def cmd_run(args):
    cfg = _load_config(args)
    if cfg.input_dir is None:
        raise ConfigError("an input directory is required (--input or input_dir)")
    results, errors, report = run_pipeline(cfg)
    done = sum(r is not None for r in results)
    log.info("%d/%d scenes processed", done, len(results))
    if report is not None and cfg.output_dir is None:
        print(report.to_json(indent=2))
    return EXIT_SCENE_FAILED if errors else EXIT_OK


def cmd_eval(args):
    scenes = find_scenes(args.input)
    reports, rows, failed = [], [CSV_HEADER], False
    for path in scenes:
        pair = load_scene(path)
        pred_path = Path(args.pred) / pair.name / "flow.bin"
        try:
            report = evaluate_pair(pair, read_flow(pred_path, len(pair.cloud_t)))
        except (OSError, ValueError) as exc:
            log.error("scene %s: %s", pair.name, exc)
            failed = True
            continue
        reports.append(report)
        rows.append(report.csv_row(pair.name))
    merged = MetricsReport.merge(reports)
    _write_json(args.report, _report_dict(merged))
    if args.csv:
        Path(args.csv).write_text("\n".join(rows) + "\n")
    return EXIT_SCENE_FAILED if failed else EXIT_OK


def cmd_diag(args):
    queries = [tuple(q) for q in args.query] if args.query else [(90000, 8192)]
    pairs = [load_scene(p) for p in find_scenes(args.input)] if args.input else []
    _write_json(args.report, diagnostics(pairs, queries=queries))
    return EXIT_OK


def cmd_synth(args):
    if args.preset not in synth.PRESETS and args.preset != "ratio_sweep":
        raise ConfigError(f"unknown preset {args.preset!r}")
    out = Path(args.output)
    for k in range(args.count):
        seed = args.seed + k
        overrides = {"mode": args.mode, "density_scale": args.density_scale}
        if args.preset == "ratio_sweep":
            spec = synth.ratio_sweep_scene(args.ratio, seed=seed, **overrides)
        else:
            spec = synth.PRESETS[args.preset](seed, **overrides)
        pair = synth.generate(spec)
        save_scene(out / f"{args.preset}-{seed:04d}", pair)
    log.info("wrote %d scene pairs to %s", args.count, out)
    return EXIT_OK


def cmd_ablate(args):
    cfg = _load_config(args)
    if cfg.input_dir is None:
        raise ConfigError("an input directory is required (--input or input_dir)")
    outcomes = map_scenes("ablate", find_scenes(cfg.input_dir), cfg)
    errors = [e for _, e in outcomes if e is not None]
    for e in errors:
        log.error("scene failed: %s", e)
    table = {}
    for name in VARIANTS:
        merged = MetricsReport.merge(r[name].metrics for r, _ in outcomes
                                     if r is not None and r[name].metrics is not None)
        table[name] = _report_dict(merged)
        log.info("%-8s dyn-FG EPE %.4f  avg3 %.4f", name, merged.epe("dyn_fg"), merged.avg3)
    _write_json(Path(cfg.output_dir) / "ablation.json" if cfg.output_dir else None, table)
    return EXIT_SCENE_FAILED if errors else EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="sceneflow",
                                     description="Learning-free LiDAR scene flow.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def pipeline_args(p):
        p.add_argument("--config", type=Path, help="JSON pipeline configuration")
        p.add_argument("--input", type=Path, help="scene directory or a directory of scenes")
        p.add_argument("--output", type=Path, help="output directory")
        p.add_argument("--workers", type=int, help="parallel worker processes")
        p.add_argument("--seed", type=int, help="global seed")
        p.add_argument("--dump-intermediate", action="store_true",
                       help="also write ground masks, backbone flow and clusters")

    p = sub.add_parser("run", help="run the pipeline on scene pairs")
    pipeline_args(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", help="backbone / +motion / full comparison")
    pipeline_args(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("eval", help="score predicted flow against track labels")
    p.add_argument("--input", type=Path, required=True, help="scene directories")
    p.add_argument("--pred", type=Path, required=True,
                   help="directory holding <scene>/flow.bin predictions")
    p.add_argument("--report", type=Path, help="JSON report path (default: stdout)")
    p.add_argument("--csv", type=Path, help="per-scene CSV path")
    p.set_defaults(func=cmd_eval, workers=None, seed=None, config=None)

    p = sub.add_parser("diag", help="dataset diagnostics")
    p.add_argument("--input", type=Path, help="scene directories with GT")
    p.add_argument("--query", type=int, nargs=2, action="append", metavar=("TOTAL", "SAMPLED"),
                   help="expected-correspondence query (repeatable)")
    p.add_argument("--report", type=Path, help="JSON report path (default: stdout)")
    p.set_defaults(func=cmd_diag, workers=None, seed=None, config=None)

    p = sub.add_parser("synth", help="generate synthetic scene pairs")
    p.add_argument("--preset", default="flat",
                   help=f"one of {sorted(synth.PRESETS) + ['ratio_sweep']}")
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", type=Path, required=True)
    p.add_argument("--mode", choices=("independent", "correlated"), default="independent")
    p.add_argument("--density-scale", type=float, default=1.0)
    p.add_argument("--ratio", type=float, default=0.1, help="dynamic ratio for ratio_sweep")
    p.set_defaults(func=cmd_synth, workers=None, config=None)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("invalid configuration: %s", exc)
        return EXIT_CONFIG
    except synth.SceneSpecError as exc:
        log.error("invalid scene specification: %s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
