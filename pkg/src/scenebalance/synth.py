"""Desk-scale synthetic SAR-like fixtures with open-sea and coastal scenes."""
from __future__ import annotations

from pathlib import Path
from typing import List, Tuple

import numpy as np

from .evaluation import Detection
from .manifest import BoxRecord, DatasetManifest, ImageRecord, from_unit, write_pixels

SEA_RANGE = (0.05, 0.2)
LAND_RANGE = (0.55, 0.75)
SHIP_LEVEL = 1.0
# any pixel at or above this is ship; sea and land never reach it
BRIGHT_THRESHOLD = 0.9


def _overlaps(box, others, gap=1) -> bool:
    x1, y1, x2, y2 = box
    return any(x1 < b[2] + gap and b[0] < x2 + gap and y1 < b[3] + gap and b[1] < y2 + gap for b in others)


def _ship_shape(rng) -> Tuple[int, int]:
    long_, short = int(rng.integers(2, 5)), int(rng.integers(1, 3))
    return (long_, short) if rng.random() < 0.5 else (short, long_)


def _place_ships(rng, size, count, allowed, land_box=None, near=None) -> List[Tuple[int, int, int, int]]:
    """Rejection-sample ``count`` non-touching ships inside ``allowed`` = (x1, y1, x2, y2)."""
    ships: List[Tuple[int, int, int, int]] = []
    ax1, ay1, ax2, ay2 = allowed
    for _ in range(200):
        if len(ships) == count:
            break
        w, h = _ship_shape(rng)
        if ax2 - ax1 < w or ay2 - ay1 < h:
            continue
        x = int(rng.integers(ax1, ax2 - w + 1))
        y = int(rng.integers(ay1, ay2 - h + 1))
        box = (x, y, x + w, y + h)
        if land_box is not None and _overlaps(box, [land_box]):
            continue
        if near is not None and not near(box):
            continue
        if not _overlaps(box, ships):
            ships.append(box)
    return ships


def _render(rng, size, inshore):
    img = rng.uniform(*SEA_RANGE, size=(size, size))
    land = None
    near = None
    margin = 1
    if inshore:
        extent = int(round(size * rng.uniform(0.3, 0.5)))
        side = int(rng.integers(4))
        # land box in (x1, y1, x2, y2) pixel-edge coordinates
        land = [(0, 0, extent, size), (size - extent, 0, size, size), (0, 0, size, extent), (0, size - extent, size, size)][side]
        x1, y1, x2, y2 = land
        img[y1:y2, x1:x2] = rng.uniform(*LAND_RANGE, size=(y2 - y1, x2 - x1))
        reach = max(3, size // 5)

        def near(box, side=side, extent=extent):
            # distance from the coastline to the nearest ship edge
            gap = [box[0] - extent, (size - extent) - box[2], box[1] - extent, (size - extent) - box[3]][side]
            return 1 <= gap <= reach

    ships = _place_ships(rng, size, int(rng.integers(1, 4)), (margin, margin, size - margin, size - margin), land, near)
    for x1, y1, x2, y2 in ships:
        img[y1:y2, x1:x2] = SHIP_LEVEL
    return img, ships


def synth_fixture(
    n_offshore: int, n_inshore: int, size: int, seed: int, out_dir, holdout: bool = False
) -> DatasetManifest:
    """Write ``n_offshore + n_inshore`` PNGs plus images.csv / boxes.csv to ``out_dir``.

    Offshore images are dark speckled sea with one to three bright ships.
    Inshore images add a bright land band on one side with ships close to
    the coastline. The true scene goes to ``reference_scene``; ``scene`` is
    left ``unknown`` for the pipeline to fill in. With ``holdout``, ids ending
    in 1 or 9 form the test split.
    """
    if n_offshore < 1 or n_inshore < 1:
        raise ValueError("synth_fixture needs at least one image of each scene")
    if size < 8:
        raise ValueError("synth_fixture needs size >= 8")
    out_dir = Path(out_dir)
    master = np.random.default_rng(seed)
    scenes = np.array(["offshore"] * n_offshore + ["inshore"] * n_inshore)[master.permutation(n_offshore + n_inshore)]
    images, boxes = [], []
    for idx, scene in enumerate(scenes):
        rng = np.random.default_rng([seed, idx])
        img, ships = _render(rng, size, scene == "inshore")
        image_id = f"img{idx:04d}"
        rel = f"images/{image_id}.png"
        write_pixels(out_dir / rel, from_unit(img))
        split = "test" if holdout and image_id[-1] in "19" else "train"
        images.append(ImageRecord(image_id, rel, size, size, split, "unknown", reference_scene=str(scene)))
        boxes.extend(BoxRecord(image_id, *map(float, s)) for s in ships)
    manifest = DatasetManifest(images, boxes, out_dir)
    manifest.validate()
    manifest.save(out_dir)
    return manifest


def synth_detections(
    manifest: DatasetManifest, seed: int, split=None, miss_rate: float = 0.15, false_rate: float = 0.3
) -> List[Detection]:
    """Stand-in detector output: jittered true boxes plus scattered false alarms."""
    rng = np.random.default_rng(seed)
    by_image = manifest.boxes_by_image()
    out = []
    for rec in manifest.select(split):
        for b in by_image[rec.image_id]:
            if rng.random() < miss_rate:
                continue
            jitter = rng.normal(0, 0.1, size=4)
            x1, y1, x2, y2 = np.array(b.as_tuple()) + jitter
            x1, y1 = max(0.0, x1), max(0.0, y1)
            x2, y2 = min(float(rec.width), max(x2, x1 + 0.5)), min(float(rec.height), max(y2, y1 + 0.5))
            out.append(Detection(rec.image_id, (x1, y1, x2, y2), float(rng.uniform(0.4, 1.0))))
        for _ in range(int(rng.poisson(false_rate))):
            w = float(rng.uniform(1, 4))
            x, y = rng.uniform(0, rec.width - w), rng.uniform(0, rec.height - w)
            out.append(Detection(rec.image_id, (x, y, x + w, y + w), float(rng.uniform(0.0, 0.7))))
    return out
