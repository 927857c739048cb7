"""Command-line entry point: ``screamloc {run,simulate,train,evaluate}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import detector as det
from .errors import ScreamlocError
from .localizer import Geometry
from .pipeline import EXIT_CONFIG, ConfigError, evaluate_detector, load_config, run, train_detector
from .simulator import load_scene, simulate, write_recording


def _cmd_run(args) -> int:
    config = load_config(args.config)
    result = run(config, inputs=args.inputs, scene_path=args.scene, force_localize=args.force_localize,
                 out_dir=args.out)
    print(f"{len(result.windows)} window(s), {len(result.alerts)} alert(s) -> {result.out_dir}")
    return result.exit_code


def _cmd_simulate(args) -> int:
    try:
        scene = load_scene(args.scene)
    except (OSError, KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"cannot load scene {args.scene}: {exc}") from exc
    rec, truth = simulate(scene)
    out = Path(args.out)
    paths = write_recording(rec, truth, out)
    (out / "geometry.json").write_text(json.dumps(Geometry(scene.array, scene.c).to_json(), indent=2) + "\n")
    print(f"wrote {len(paths)} channel(s) to {out}")
    return 0


def _cmd_train(args) -> int:
    model = train_detector(args.data, args.seconds, args.epochs, args.lr)
    det.save_model(model, args.out)
    print(f"model ({model.dim} features) -> {args.out}")
    return 0


def _cmd_evaluate(args) -> int:
    model = det.load_model(args.model) if args.model else None
    report = evaluate_detector(args.data, args.out, args.seconds, args.epochs, args.lr, model=model)
    print(json.dumps(report.to_json(), indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="screamloc", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="detect and localize over windowed multichannel audio")
    p.add_argument("--config", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--inputs", nargs="+", help="one mono WAV per microphone")
    src.add_argument("--scene", help="scene JSON to simulate and process")
    p.add_argument("--force-localize", action="store_true", help="localize every window regardless of detection")
    p.add_argument("--out", help="output directory (overrides config)")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("simulate", help="render a scene to mic_<id>.wav files and truth.json")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_simulate)

    for name, helptext in (("train", "train the logistic detector"), ("evaluate", "score the detector on the holdout split")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--data", required=True, help="directory with scream/ and non_scream/ WAVs")
        p.add_argument("--seconds", type=float, default=10.0, help="clip length after padding/truncation")
        p.add_argument("--epochs", type=int, default=500)
        p.add_argument("--lr", type=float, default=0.1)
        if name == "train":
            p.add_argument("--out", required=True, help="model JSON path")
            p.set_defaults(func=_cmd_train)
        else:
            p.add_argument("--model", help="trained model JSON; trains on the 80%% split when omitted")
            p.add_argument("--out", help="metrics JSON path")
            p.set_defaults(func=_cmd_evaluate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ScreamlocError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return getattr(exc, "exit_code", EXIT_CONFIG)
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
