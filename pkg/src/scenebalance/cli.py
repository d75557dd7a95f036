"""Command-line entry point.

Success prints one JSON line with the written artifacts to stdout. Failure
prints one JSON line ``{"status": "error", "kind": ..., "message": ...}`` to
stderr and exits nonzero (2 usage, 3 missing artifact, 1 anything else).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from . import pipeline as pl
from .checkpoint import CheckpointError, load_model
from .config import ConfigError, RunConfig
from .evaluation import detections_csv, load_detections
from .manifest import ManifestError, atomic_write_text
from .synth import synth_detections, synth_fixture

EXIT_USAGE, EXIT_MISSING, EXIT_FAILURE = 2, 3, 1


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _emit_error(kind: str, message: str) -> None:
    sys.stderr.write(json.dumps({"status": "error", "kind": kind, "message": " ".join(str(message).split())}) + "\n")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="INI run configuration")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")
    common.add_argument("--log-level", default="WARNING")

    parser = _Parser(prog="scenebalance", description="Scene-balanced SAR ship dataset toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic two-scene fixture")
    p.add_argument("--out", type=Path)
    p.add_argument("--n-offshore", type=int)
    p.add_argument("--n-inshore", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--holdout", action="store_true", default=None)
    p.add_argument("--detections-out", type=Path, help="also write stand-in detections here")

    p = sub.add_parser("train-gan", parents=[common], help="train the GAN on the training split")
    p.add_argument("--dataset", type=Path)
    p.add_argument("--out", type=Path)
    p.add_argument("--losses", type=Path)

    p = sub.add_parser("extract-features", parents=[common], help="discriminator scene features to CSV")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--dataset", type=Path)
    p.add_argument("--out", type=Path)
    p.add_argument("--split", choices=("train", "test", "all"), default="train")

    p = sub.add_parser("cluster", parents=[common], help="binary k-means plus validity report")
    p.add_argument("--features", type=Path)
    p.add_argument("--out-dir", type=Path)

    p = sub.add_parser("balance", parents=[common], help="augment the minority scene to parity")
    p.add_argument("--dataset", type=Path)
    p.add_argument("--assignments", type=Path)
    p.add_argument("--out-dir", type=Path)

    p = sub.add_parser("eval", parents=[common], help="score detections per scene")
    p.add_argument("--dataset", type=Path)
    p.add_argument("--detections", type=Path)
    p.add_argument("--out-dir", type=Path)
    p.add_argument("--split", choices=("train", "test", "all"))

    sub.add_parser("pipeline", parents=[common], help="run every stage on one config")
    return parser


def _dataset(args, cfg: RunConfig) -> Path:
    path = args.dataset or cfg.dataset
    if path is None:
        raise UsageError("no dataset given (--dataset or [run] dataset)")
    return path


def run(args, cfg: RunConfig) -> dict:
    art = Path(cfg.artifact_dir)
    cmd = args.command
    if cmd == "synth":
        s = cfg.synth
        out = args.out or art / "dataset"
        manifest = synth_fixture(
            args.n_offshore if args.n_offshore is not None else s.n_offshore,
            args.n_inshore if args.n_inshore is not None else s.n_inshore,
            args.size if args.size is not None else s.size,
            args.seed if args.seed is not None else s.seed,
            out,
            s.holdout if args.holdout is None else args.holdout,
        )
        result = {"dataset": str(out), "images": len(manifest.images), "boxes": len(manifest.boxes)}
        if args.detections_out:
            seed = args.seed if args.seed is not None else s.seed
            atomic_write_text(args.detections_out, detections_csv(synth_detections(manifest, seed)))
            result["detections"] = str(args.detections_out)
        return result
    if cmd == "train-gan":
        manifest = pl.load_manifest(_dataset(args, cfg))
        ckpt = args.out or art / "gan.sbck"
        losses = args.losses or art / "losses.csv"
        _, history = pl.stage_train(manifest, cfg.gan, ckpt, losses)
        return {"checkpoint": str(ckpt), "losses": str(losses), "steps": len(history)}
    if cmd == "extract-features":
        ckpt = pl.require(args.checkpoint or art / "gan.sbck", "checkpoint")
        model = load_model(ckpt)
        manifest = pl.load_manifest(_dataset(args, cfg))
        out = args.out or art / "features.csv"
        fm = pl.stage_features(model, manifest, out, None if args.split == "all" else args.split)
        return {"features": str(out), "rows": fm.rows.shape[0], "dim": fm.rows.shape[1]}
    if cmd == "cluster":
        fm = pl.read_features(args.features or art / "features.csv")
        out_dir = args.out_dir or art / "cluster"
        outcome = pl.stage_cluster(fm, cfg.cluster, out_dir)
        return {
            "assignments": str(out_dir / "assignments.csv"),
            "validity": str(out_dir / "validity.txt"),
            "sizes": outcome.result.sizes().tolist(),
        }
    if cmd == "balance":
        manifest = pl.load_manifest(_dataset(args, cfg))
        scenes = pl.read_assignments(args.assignments or art / "cluster" / "assignments.csv")
        out_dir = args.out_dir or art / "balanced"
        balanced, plan = pl.stage_balance(manifest, scenes, cfg.policy, out_dir)
        counts = balanced.scene_counts("train")
        return {"manifest": str(out_dir), "plan": str(out_dir / "plan.csv"), "inshore": counts["inshore"], "offshore": counts["offshore"]}
    if cmd == "eval":
        manifest = pl.load_manifest(_dataset(args, cfg))
        dets_path = args.detections or cfg.detections
        if dets_path is None:
            raise UsageError("no detections given (--detections or [run] detections)")
        detections = load_detections(pl.require(dets_path, "detections CSV"))
        ev = cfg.eval if args.split is None else type(cfg.eval)(cfg.eval.iou_threshold, cfg.eval.score_threshold, args.split)
        out_dir = args.out_dir or art / "eval"
        report = pl.stage_eval(manifest, detections, ev, out_dir)
        return {"report": str(out_dir / "report.txt"), "map": report["inshore+offshore"].map}
    if cmd == "pipeline":
        return {k: str(v) for k, v in pl.run_pipeline(cfg).items()}
    raise UsageError(f"unknown command {cmd!r}")


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        _emit_error("usage", exc)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.load(args.config, args.overrides)
        cfg.ensure_artifact_dir()
        result = run(args, cfg)
    except UsageError as exc:
        _emit_error("usage", exc)
        return EXIT_USAGE
    except ConfigError as exc:
        _emit_error("config", exc)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        _emit_error("missing-artifact", exc)
        return EXIT_MISSING
    except (ManifestError, CheckpointError) as exc:
        _emit_error("invalid-artifact", exc)
        return EXIT_FAILURE
    except Exception as exc:  # noqa: BLE001 - one-line report for any failure
        _emit_error(type(exc).__name__, exc)
        return EXIT_FAILURE
    sys.stdout.write(json.dumps({"status": "ok", "command": args.command, **result}, sort_keys=True) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
