"""Command-line front end.

Exit codes: 0 success, 2 configuration or input problems, 3 backend
failures, 4 numerical divergence.  Argparse itself exits with 2 on bad
flags, which lands in the same bucket.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from promptreg import pipeline, volio
from promptreg.gateway import BackendError


def _config_overrides(args) -> dict:
    over = {}
    if getattr(args, "fixed_image", None) is not None:
        over["fixed_image"] = args.fixed_image
    if getattr(args, "moving_image", None) is not None:
        over["moving_image"] = args.moving_image
    if getattr(args, "scene", None) is not None:
        over["scene"] = args.scene
    if getattr(args, "prompts", None) is not None:
        over["prompts"] = [p for p in args.prompts.split(",") if p]
    if getattr(args, "mode", None) is not None:
        over["mode"] = args.mode
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    return over


def _load_config(args) -> pipeline.PipelineConfig:
    if args.config is not None:
        path = Path(args.config)
        try:
            data = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise pipeline.ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise pipeline.ConfigError(f"config {path} is not a JSON object")
        base_dir = path.parent
    else:
        data = {}
        base_dir = Path.cwd()
    overrides = _config_overrides(args)
    if "scene" in overrides:
        data.pop("fixed_image", None)
        data.pop("moving_image", None)
    data.update(overrides)
    if getattr(args, "tau", None) is not None:
        data.setdefault("matching", {})["tau"] = args.tau
    ddf_flag = getattr(args, "ddf", None)
    if ddf_flag is not None:
        data.setdefault("ddf", {})["enabled"] = ddf_flag
    return pipeline.PipelineConfig.from_json(data, base_dir=base_dir)


def _add_config_flags(sub, require_images: bool = True) -> None:
    sub.add_argument("--config", help="JSON configuration file")
    sub.add_argument("--out", required=True, help="output directory")
    if require_images:
        sub.add_argument("--fixed-image", dest="fixed_image",
                         help="fixed image container header")
        sub.add_argument("--moving-image", dest="moving_image",
                         help="moving image container header")
        sub.add_argument("--scene", help="generated scene directory")
    sub.add_argument("--prompts", help="comma-separated prompt list")
    sub.add_argument("--mode", choices=("slices", "volume"))
    sub.add_argument("--tau", type=float, help="similarity acceptance threshold")
    sub.add_argument("--seed", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="promptreg",
        description="Prompted-region matching and registration pipeline",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    run = subs.add_parser("run", help="execute every configured stage")
    _add_config_flags(run)
    ddf_group = run.add_mutually_exclusive_group()
    ddf_group.add_argument("--ddf", dest="ddf", action="store_true",
                           default=None, help="enable field estimation")
    ddf_group.add_argument("--no-ddf", dest="ddf", action="store_false",
                           default=None, help="disable field estimation")

    match = subs.add_parser("match", help="filter and pair stored regions")
    _add_config_flags(match)
    match.add_argument("--rois", required=True,
                       help="directory with fix/ and mov/ region stores")

    register = subs.add_parser("register",
                               help="estimate a field from stored pairs")
    _add_config_flags(register)
    register.add_argument("--rois", required=True)
    register.add_argument("--pairs", required=True,
                          help="correspondence.json from the match stage")

    evaluate = subs.add_parser("evaluate", help="score a finished run")
    _add_config_flags(evaluate)
    evaluate.add_argument("--artifacts", required=True,
                          help="run directory to score")

    report = subs.add_parser("prompt-report",
                             help="aggregate detection counts over cases")
    _add_config_flags(report, require_images=False)
    report.add_argument("--cases", required=True,
                        help="JSON case list ({\"cases\": [...]})")

    fixture = subs.add_parser("fixture", help="paint a synthetic scene")
    fixture.add_argument("--spec", required=True,
                         help="JSON scene description")
    fixture.add_argument("--seed", type=int, default=0)
    fixture.add_argument("--out", required=True)
    return parser


def _dispatch(args) -> int:
    if args.command == "fixture":
        path = Path(args.spec)
        try:
            spec = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise pipeline.ConfigError(
                f"cannot read scene spec {path}: {exc}"
            ) from exc
        pipeline.cmd_fixture(spec, seed=args.seed, out_dir=args.out)
        return pipeline.EXIT_OK

    if args.command == "prompt-report":
        data = {}
        base_dir = Path.cwd()
        if args.config is not None:
            cfg_path = Path(args.config)
            try:
                data = json.loads(cfg_path.read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise pipeline.ConfigError(
                    f"cannot read config {cfg_path}: {exc}"
                ) from exc
            base_dir = cfg_path.parent
        # the case list supplies images; the shared config only needs the
        # prompting and matching knobs, so stub the image slots
        data.setdefault("fixed_image", "unused")
        data.setdefault("moving_image", "unused")
        data.update(_config_overrides(args))
        if getattr(args, "tau", None) is not None:
            data.setdefault("matching", {})["tau"] = args.tau
        config = pipeline.PipelineConfig.from_json(data, base_dir=base_dir)
        cases = pipeline.load_case_list(args.cases)
        pipeline.cmd_prompt_report(config, cases, args.out)
        return pipeline.EXIT_OK

    config = _load_config(args)
    if args.command == "run":
        pipeline.cmd_run(config, args.out)
    elif args.command == "match":
        pipeline.cmd_match(config, args.rois, args.out)
    elif args.command == "register":
        pipeline.cmd_register(config, args.rois, args.pairs, args.out)
    elif args.command == "evaluate":
        pipeline.cmd_evaluate(config, args.artifacts, args.out)
    else:  # pragma: no cover - argparse enforces the choices
        raise pipeline.ConfigError(f"unknown command {args.command!r}")
    return pipeline.EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _dispatch(args)
    except pipeline.DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return pipeline.EXIT_DIVERGED
    except BackendError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return pipeline.EXIT_BACKEND
    except (pipeline.ConfigError, volio.FormatError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return pipeline.EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
