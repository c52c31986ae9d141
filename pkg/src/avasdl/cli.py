"""Command line entry point: ``avasdl <subcommand> [options]``.

Exit codes: 0 success, 2 configuration error, 3 data error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .ingest import IngestError, ingest_corpus
from .metrics import MetricsReport, curve_to_csv, pr_curve_svg
from .pipeline import (DATA_ERRORS, STAGES, ConfigError, load_run_config, run_pipeline,
                       score_predictions)
from .rig import TOLERANCE_PX, GeometryError, load_rig

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 2, 3


def _global(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="run config (INI)")
    p.add_argument("--seed", type=int, help="override the run seed")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="avasdl", description="Audio-visual active speaker detection and localization")
    sub = parser.add_subparsers(dest="command", required=True)
    for stage in STAGES:
        if stage == "plot":
            continue
        _global(sub.add_parser(stage, help=f"run the {stage} stage"))
    run = sub.add_parser("run", help="run several stages in order")
    _global(run)
    run.add_argument("--stages", default=",".join(STAGES), help="comma separated subset of " + ",".join(STAGES))

    score = sub.add_parser("score", help="score a predictions file against labels")
    _global(score)
    score.add_argument("predictions", type=Path)
    score.add_argument("labels", type=Path)
    score.add_argument("--tolerance-px", type=float, default=TOLERANCE_PX)
    score.add_argument("--thresholds", type=int, default=101)
    score.add_argument("--camera", type=int, default=5, help="camera whose intrinsics convert px to degrees")
    score.add_argument("--rig", default="default")
    score.add_argument("--name", default="model")

    plot = sub.add_parser("plot", help="PR curve (SVG + CSV) from one or more metrics reports")
    _global(plot)
    plot.add_argument("reports", nargs="*", type=Path,
                      help="report.json files; default: the evaluate stage output of --config/--out")

    ing = sub.add_parser("ingest", help="convert a recorded corpus into the package layout")
    _global(ing)
    ing.add_argument("root", type=Path)
    ing.add_argument("--image-width", type=int, default=2448)
    return parser


def _score(args) -> int:
    out = args.out
    try:
        camera = load_rig(args.rig).camera(args.camera)
    except (GeometryError, OSError, KeyError, IndexError) as exc:
        raise ConfigError(f"rig/camera: {exc}") from exc
    report = score_predictions(args.predictions, args.labels, args.tolerance_px, args.thresholds, camera, args.name)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(report.to_json())
    return EXIT_OK


def _plot(args) -> int:
    if not args.reports:
        cfg = load_run_config(args.config, args.out, args.seed)
        run_pipeline(cfg, ["plot"])
        return EXIT_OK
    out = args.out or Path(".")
    out.mkdir(parents=True, exist_ok=True)
    curves = {}
    for path in args.reports:
        report = MetricsReport.from_json(path.read_text())
        name = path.parent.name or path.stem
        while name in curves:
            name += "'"
        curves[name] = report.pr_curve
    (out / "pr_curve.svg").write_text(pr_curve_svg(curves))
    if len(curves) == 1:
        (out / "pr_curve.csv").write_text(curve_to_csv(next(iter(curves.values()))))
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "score":
            return _score(args)
        if args.command == "plot":
            return _plot(args)
        if args.command == "ingest":
            manifest = ingest_corpus(args.root, args.out or Path("ingested"), args.image_width)
            print(manifest)
            return EXIT_OK
        cfg = load_run_config(args.config, args.out, args.seed)
        stages = args.stages.split(",") if args.command == "run" else [args.command]
        for stage, ran in run_pipeline(cfg, [s.strip() for s in stages if s.strip()]).items():
            print(f"{stage}: {'done' if ran else 'up to date'}")
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (*DATA_ERRORS, IngestError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
