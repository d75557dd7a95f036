"""Stage functions shared by the CLI subcommands and the chained ``pipeline`` run.

Every stage reads and writes plain files so each intermediate artifact can be
fed to the matching standalone subcommand.
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import cluster as cl
from .augment import AugmentationPolicy, BalancePlan, apply_balance, check_parity, plan_balance
from .checkpoint import load_model, save_model
from .config import ClusterConfig, EvalConfig, RunConfig
from .evaluation import GROUP_FILES, GROUPS, EvalReport, detections_csv, evaluate, load_detections
from .gan import GanConfig, GanModel, TrainHistory, extract_features, train
from .manifest import (
    DatasetManifest,
    ManifestError,
    atomic_write_text,
    csv_text,
    load_image_stack,
    read_csv,
    to_training_range,
)
from .synth import synth_detections, synth_fixture

log = logging.getLogger(__name__)

ASSIGNMENTS_HEADER = ["image_id", "cluster", "scene"]


class MissingArtifact(FileNotFoundError):
    pass


def require(path, what: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(f"missing {what}: {path}")
    return path


def load_manifest(directory) -> DatasetManifest:
    directory = require(directory, "dataset directory")
    require(directory / "images.csv", "manifest images.csv")
    require(directory / "boxes.csv", "manifest boxes.csv")
    return DatasetManifest.load(directory)


def rebase(manifest: DatasetManifest, new_root) -> DatasetManifest:
    """Same records with image paths re-expressed relative to ``new_root``."""
    new_root = Path(new_root)
    out = manifest.copy()
    for rec in out.images:
        rec.path = Path(os.path.relpath(manifest.root / rec.path, new_root)).as_posix()
    out.root = new_root
    return out


# --- step 1: adversarial training and features -------------------------------------


def training_images(manifest: DatasetManifest, config: GanConfig, split: Optional[str] = "train"):
    records = manifest.select(split)
    if not records:
        raise ManifestError(f"no images in split {split!r}")
    stack = load_image_stack(manifest, records, config.image_size, config.image_channels)
    return records, to_training_range(stack)


def history_csv(history: TrainHistory) -> str:
    return csv_text(["step", "d_loss", "g_loss"], ([r.step, repr(r.d_loss), repr(r.g_loss)] for r in history.records))


def stage_train(manifest: DatasetManifest, config: GanConfig, checkpoint, losses) -> Tuple[GanModel, TrainHistory]:
    _, images = training_images(manifest, config)
    log.info("training GAN on %d images for %d epochs", len(images), config.epochs)
    model, history = train(images, config)
    save_model(model, checkpoint)
    atomic_write_text(losses, history_csv(history))
    return model, history


def features_csv(features: cl.FeatureMatrix) -> str:
    header = ["image_id"] + [f"f{i}" for i in range(features.rows.shape[1])]
    return csv_text(header, ([iid] + [repr(float(v)) for v in row] for iid, row in zip(features.image_ids, features.rows)))


def read_features(path) -> cl.FeatureMatrix:
    rows = read_csv(require(path, "feature CSV"), ["image_id"])
    if not rows:
        raise ValueError(f"{path}: no feature rows")
    keys = [k for k in rows[0] if k != "image_id"]
    return cl.FeatureMatrix(np.array([[float(r[k]) for k in keys] for r in rows]), [r["image_id"] for r in rows])


def stage_features(model: GanModel, manifest: DatasetManifest, out, split: Optional[str] = "train") -> cl.FeatureMatrix:
    records, images = training_images(manifest, model.config, split)
    fm = cl.FeatureMatrix(extract_features(model, images).astype(np.float64), [r.image_id for r in records])
    atomic_write_text(out, features_csv(fm))
    return fm


# --- step 2: binary clustering ------------------------------------------------


@dataclass
class ClusterOutcome:
    result: cl.ClusterResult
    scenes: Dict[str, str]
    report: cl.ValidityReport


def stage_cluster(features: cl.FeatureMatrix, config: ClusterConfig, out_dir) -> ClusterOutcome:
    out_dir = Path(out_dir)
    result = cl.kmeans(
        features, 2, seed=config.seed, max_iter=config.max_iter, tol=config.tol, restarts=config.restarts, normalize=config.normalize
    )
    labels = cl.label_scenes(result)
    x = cl.standardize(features.rows) if config.normalize else features.rows
    report = cl.validity_report(x, result.assignments)
    atomic_write_text(
        out_dir / "assignments.csv",
        csv_text(ASSIGNMENTS_HEADER, zip(features.image_ids, result.assignments.tolist(), labels)),
    )
    atomic_write_text(out_dir / "validity.txt", report.to_text())
    return ClusterOutcome(result, dict(zip(features.image_ids, labels)), report)


def read_assignments(path) -> Dict[str, str]:
    return {r["image_id"]: r["scene"] for r in read_csv(require(path, "assignments CSV"), ASSIGNMENTS_HEADER)}


def scene_accuracy(manifest: DatasetManifest, scenes: Dict[str, str]) -> Optional[float]:
    """Agreement with reference labels when every clustered image has one."""
    by_id = manifest.by_id()
    refs = [by_id[i].reference_scene for i in scenes if i in by_id]
    if len(refs) != len(scenes) or not all(r in (cl.INSHORE, cl.OFFSHORE) for r in refs):
        return None
    return cl.external_accuracy(list(scenes.values()), refs)


# --- step 3: rebalancing ------------------------------------------------------


def label_manifest(manifest: DatasetManifest, scenes: Dict[str, str]) -> DatasetManifest:
    out = manifest.copy()
    known = out.by_id()
    missing = [i for i in scenes if i not in known]
    if missing:
        raise ManifestError(f"assignments reference unknown image(s) {missing[:5]}")
    for image_id, scene in scenes.items():
        known[image_id].scene = scene
    return out


def stage_balance(
    manifest: DatasetManifest, scenes: Dict[str, str], policy: AugmentationPolicy, out_dir
) -> Tuple[DatasetManifest, BalancePlan]:
    out_dir = Path(out_dir)
    labeled = rebase(label_manifest(manifest, scenes), out_dir)
    train_recs = [r for r in labeled.images if r.split == "train" and r.image_id in scenes]
    minority = [r.image_id for r in train_recs if r.scene == cl.INSHORE]
    n_major = sum(r.scene == cl.OFFSHORE for r in train_recs)
    plan = plan_balance((n_major, len(minority)), minority, policy, cl.INSHORE)
    balanced = apply_balance(labeled, plan, policy)
    check_parity(balanced, plan.n_sources)
    balanced.save(out_dir)
    atomic_write_text(out_dir / "plan.csv", plan.to_csv_text())
    return balanced, plan


# --- evaluation ---------------------------------------------------------------


def stage_eval(manifest: DatasetManifest, detections, config: EvalConfig, out_dir) -> EvalReport:
    out_dir = Path(out_dir)
    split = None if config.split == "all" else config.split
    report = evaluate(manifest, detections, config.iou_threshold, split, config.score_threshold)
    atomic_write_text(out_dir / "report.txt", report.to_text())
    atomic_write_text(out_dir / "metrics.csv", report.metrics_csv())
    for g in GROUPS:
        atomic_write_text(out_dir / GROUP_FILES[g], report.curve_csv(g))
    return report


# --- chained run --------------------------------------------------------------


def run_pipeline(config: RunConfig) -> Dict[str, Path]:
    """Synthesize (if needed) -> train -> features -> cluster -> balance -> eval."""
    root = config.ensure_artifact_dir()
    paths = {
        "checkpoint": root / "gan.sbck",
        "losses": root / "losses.csv",
        "features": root / "features.csv",
        "cluster": root / "cluster",
        "balanced": root / "balanced",
        "eval": root / "eval",
    }
    atomic_write_text(root / "config.ini", config.to_ini())
    if config.dataset is None:
        s = config.synth
        paths["dataset"] = root / "dataset"
        manifest = synth_fixture(s.n_offshore, s.n_inshore, s.size, s.seed, paths["dataset"], s.holdout)
    else:
        paths["dataset"] = Path(config.dataset)
        manifest = load_manifest(config.dataset)
    model, _ = stage_train(manifest, config.gan, paths["checkpoint"], paths["losses"])
    features = stage_features(model, manifest, paths["features"])
    outcome = stage_cluster(features, config.cluster, paths["cluster"])
    accuracy = scene_accuracy(manifest, outcome.scenes)
    if accuracy is not None:
        atomic_write_text(paths["cluster"] / "scene_accuracy.txt", f"external_accuracy = {accuracy!r}\n")
    stage_balance(manifest, outcome.scenes, config.policy, paths["balanced"])
    if config.detections is not None:
        detections = load_detections(require(config.detections, "detections CSV"))
    elif config.dataset is None:
        detections = synth_detections(manifest, config.synth.seed)
        paths["detections"] = root / "detections.csv"
        atomic_write_text(paths["detections"], detections_csv(detections))
    else:
        detections = None
    if detections is not None:
        stage_eval(label_manifest(manifest, outcome.scenes), detections, config.eval, paths["eval"])
    return paths
