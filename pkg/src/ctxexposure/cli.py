"""Command-line entry point (``ctxexposure``).

Exit codes: 0 success, 2 invalid input or configuration, 3 computation
failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import yaml

from .errors import ComputeError, ConfigError, CtxExposureError, ValidationError
from .pipeline import PipelineConfig, config_inputs, main_stage_error, parse_levels, run_pipeline, validate_inputs

EXIT_OK, EXIT_VALIDATION, EXIT_COMPUTE = 0, 2, 3

ANALYSES = ("risk", "cluster", "coverage", "overlap", "design", "ttest", "maps")


def _load_config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig.from_dict({}, base_dir=Path.cwd())
    if args.seed is not None:
        cfg.seed = args.seed
    if args.threads is not None:
        cfg.threads = args.threads
    if args.percent:
        cfg.units = "percent"
    return cfg


def _cwd_path(p):
    return None if p is None else str(Path(p).resolve())


def _set_inputs(cfg: PipelineConfig, **paths):
    for k, v in paths.items():
        if v is not None:
            setattr(cfg.inputs, k, _cwd_path(v))


def _set_grid(cfg: PipelineConfig, path):
    if path is None:
        return
    with open(path, encoding="utf-8") as fh:
        doc = yaml.safe_load(fh) or {}
    if "grid" in doc:
        doc = doc["grid"]
    cfg.grid = type(cfg.grid).from_dict(doc, "grid config")


def _run_stage(cfg: PipelineConfig, args, stages):
    if getattr(args, "out_dir", None):
        cfg.output_dir = _cwd_path(args.out_dir)
    cfg.validate()
    manifest = run_pipeline(cfg, stages)
    for st in manifest["stages"]:
        print(f"{st['name']}: {st['rows']} rows, {st['warnings']} warning(s), {st['wall_seconds']:.2f} s")
    return EXIT_OK


# ------------------------------------------------------------------
# subcommands
# ------------------------------------------------------------------


def cmd_synth(args):
    from .grid import Projection, load_regions
    from .scenario import ScenarioConfig, write_cohort, write_scenario, write_trajectories
    from .synth import SynthConfig, gen_cohort, gen_trajectories

    doc = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            doc = yaml.safe_load(fh) or {}
    if args.kind == "scenario":
        if args.seed is not None:
            doc["seed"] = args.seed
        groups = write_scenario(args.out_dir, ScenarioConfig.from_dict(doc))
        print(f"scenario written to {args.out_dir} ({len(groups)} GPS participants)")
        return EXIT_OK
    cfg = SynthConfig.from_dict(doc)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    proj = Projection(cfg.origin_lon, cfg.origin_lat)
    if args.kind == "cohort":
        records, rates, truth = gen_cohort(cfg)
        write_cohort(args.out_dir, records, dict(rates.items()), truth, proj)
        print(f"{len(records)} surveillance records written to {args.out_dir}")
    else:
        region = load_regions(args.regions, proj) if args.regions else None
        fixes, paths = gen_trajectories(cfg, region)
        write_trajectories(args.out_dir, fixes, paths, proj)
        print(f"{len(fixes)} trajectories written to {args.out_dir}")
    return EXIT_OK


def cmd_impute(args):
    cfg = _load_config(args)
    _set_inputs(cfg, tests=args.tests, rates=args.rates)
    if args.replicates is not None:
        cfg.imputation.replicates = args.replicates
    if args.schedule:
        cfg.imputation.schedule = args.schedule
    return _run_stage(cfg, args, ["impute"])


def cmd_prevalence(args):
    cfg = _load_config(args)
    _set_grid(cfg, args.grid_config)
    _set_inputs(cfg, homesteads=args.homesteads, residents=args.residents, status_dir=args.status,
                regions=args.regions)
    if args.period is not None:
        cfg.prevalence.period = args.period
    return _run_stage(cfg, args, ["prevalence"])


def cmd_activity(args):
    cfg = _load_config(args)
    _set_grid(cfg, args.grid_config)
    _set_inputs(cfg, fixes=args.fixes, regions=args.regions)
    if args.gap_min is not None:
        cfg.activity.gap_min = args.gap_min
    if args.gammas is not None:
        cfg.activity.gammas = args.gammas
    return _run_stage(cfg, args, ["activity"])


def cmd_exposure(args):
    cfg = _load_config(args)
    _set_grid(cfg, args.grid_config)
    _set_inputs(cfg, activity_dir=args.activity_dir, prevalence=args.prevalence,
                district_prevalence=args.district_prevalence, regions=args.regions)
    if args.period is not None:
        cfg.prevalence.period = args.period
    return _run_stage(cfg, args, ["exposure"])


def cmd_analyze(args):
    cfg = _load_config(args)
    _set_grid(cfg, args.grid_config)
    _set_inputs(cfg, exposure=args.exposure, deviation=args.deviation, activity_dir=args.activity_dir,
                participants=args.participants)
    cfg.analysis.tasks = tuple(args.analyses)
    return _run_stage(cfg, args, ["analyze"])


def cmd_run(args):
    cfg = _load_config(args)
    if args.stages:
        cfg.stages = tuple(args.stages.split(","))
    return _run_stage(cfg, args, None)


def cmd_validate(args):
    cfg = _load_config(args)
    paths = {k: v for k, v in config_inputs(cfg).items() if v is not None}
    for spec in args.files or []:
        kind, _, path = spec.partition("=")
        if not path:
            raise ConfigError(f"expected KIND=PATH, got {spec!r}")
        paths[kind] = path
    if not paths:
        raise ConfigError("nothing to validate: pass --config with inputs or KIND=PATH arguments")
    report = validate_inputs(paths, percent=cfg.units == "percent", projection=cfg.grid.build()[0])
    n = sum(len(v) for v in report.values())
    if args.json:
        print(json.dumps({k: [str(f) for f in v] for k, v in report.items()}, indent=2))
    else:
        for path, findings in report.items():
            print(f"{path}: {'ok' if not findings else f'{len(findings)} finding(s)'}")
            for f in findings:
                print(f"  {f}")
    return EXIT_OK if n == 0 else EXIT_VALIDATION


# ------------------------------------------------------------------
# parser
# ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="pipeline configuration (YAML)")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--threads", type=int, help="worker threads (outputs do not depend on it)")
    common.add_argument("--percent", action="store_true", help="prevalence/exposure values in percent")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="ctxexposure", description="Contextual HIV exposure from GPS data.",
                                parents=[common])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate synthetic inputs")
    s.add_argument("kind", choices=("cohort", "trajectories", "scenario"))
    s.add_argument("--out-dir", required=True)
    s.add_argument("--regions", help="GeoJSON study area for trajectory anchors")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("impute", parents=[common], help="impute yearly HIV status")
    s.add_argument("--tests")
    s.add_argument("--rates")
    s.add_argument("--replicates", type=int)
    s.add_argument("--schedule", choices=("backward", "alternate"))
    s.add_argument("--out-dir")
    s.set_defaults(func=cmd_impute)

    s = sub.add_parser("prevalence", parents=[common], help="kernel prevalence field")
    s.add_argument("--grid-config")
    s.add_argument("--homesteads")
    s.add_argument("--residents")
    s.add_argument("--status", help="directory of status_<r>.csv files")
    s.add_argument("--regions")
    s.add_argument("--period", type=int)
    s.add_argument("--out-dir")
    s.set_defaults(func=cmd_prevalence)

    s = sub.add_parser("activity", parents=[common], help="activity distributions and spaces")
    s.add_argument("--fixes")
    s.add_argument("--grid-config")
    s.add_argument("--regions")
    s.add_argument("--gap-min", type=float)
    s.add_argument("--gammas")
    s.add_argument("--out-dir")
    s.set_defaults(func=cmd_activity)

    s = sub.add_parser("exposure", parents=[common], help="exposure measures")
    s.add_argument("--activity-dir")
    s.add_argument("--prevalence", help="prevalence_<period>.csv")
    s.add_argument("--district-prevalence")
    s.add_argument("--regions")
    s.add_argument("--grid-config")
    s.add_argument("--period", type=int)
    s.add_argument("--out-dir")
    s.set_defaults(func=cmd_exposure)

    s = sub.add_parser("analyze", parents=[common], help="cohort analyses")
    s.add_argument("analyses", nargs="+", choices=ANALYSES)
    s.add_argument("--exposure")
    s.add_argument("--deviation")
    s.add_argument("--activity-dir")
    s.add_argument("--participants")
    s.add_argument("--grid-config")
    s.add_argument("--out-dir")
    s.set_defaults(func=cmd_analyze)

    s = sub.add_parser("run", parents=[common], help="run the configured pipeline")
    s.add_argument("--stages", help="comma-separated subset of stages")
    s.add_argument("--out-dir")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("validate", parents=[common], help="check input files without computing")
    s.add_argument("files", nargs="*", metavar="KIND=PATH")
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_validate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if getattr(args, "gammas", None):
            parse_levels(args.gammas)
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {main_stage_error(exc)}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ComputeError, CtxExposureError) as exc:
        print(f"error: {main_stage_error(exc)}", file=sys.stderr)
        return EXIT_COMPUTE
    except (FileNotFoundError, yaml.YAMLError) as exc:
        print(f"error: {main_stage_error(exc)}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
