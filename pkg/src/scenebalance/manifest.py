"""Dataset manifest (images.csv + boxes.csv) and image file I/O."""
from __future__ import annotations

import csv
import io
import os
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional

import numpy as np
from PIL import Image, UnidentifiedImageError

SCENES = ("inshore", "offshore", "unknown")
SPLITS = ("train", "test")
ORIGINAL = "original"

IMAGES_HEADER = ["image_id", "path", "width", "height", "split", "scene", "source_id", "op", "reference_scene"]
BOXES_HEADER = ["image_id", "x1", "y1", "x2", "y2"]


class ManifestError(ValueError):
    pass


@dataclass
class ImageRecord:
    image_id: str
    path: str
    width: int
    height: int
    split: str = "train"
    scene: str = "unknown"
    source_id: str = ""
    op: str = ORIGINAL
    # human reference label; only ever used for external accuracy and eval grouping
    reference_scene: str = ""

    @property
    def is_original(self) -> bool:
        return self.op == ORIGINAL


@dataclass
class BoxRecord:
    image_id: str
    x1: float
    y1: float
    x2: float
    y2: float

    def as_tuple(self):
        return (self.x1, self.y1, self.x2, self.y2)


def fmt_number(v) -> str:
    v = float(v)
    return str(int(v)) if v.is_integer() and abs(v) < 2**53 else repr(v)


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def csv_text(header: List[str], rows: Iterable[Iterable]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow(row)
    return buf.getvalue()


def read_csv(path, header: List[str]) -> List[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [h for h in header if h not in (reader.fieldnames or [])]
        if missing:
            raise ManifestError(f"{path}: missing columns {missing}")
        return list(reader)


@dataclass
class DatasetManifest:
    images: List[ImageRecord] = field(default_factory=list)
    boxes: List[BoxRecord] = field(default_factory=list)
    # directory that image paths are relative to
    root: Path = Path(".")

    def __post_init__(self):
        self.root = Path(self.root)

    def copy(self) -> "DatasetManifest":
        return DatasetManifest([replace(r) for r in self.images], [replace(b) for b in self.boxes], self.root)

    def by_id(self) -> Dict[str, ImageRecord]:
        return {r.image_id: r for r in self.images}

    def boxes_by_image(self) -> Dict[str, List[BoxRecord]]:
        out: Dict[str, List[BoxRecord]] = {r.image_id: [] for r in self.images}
        for b in self.boxes:
            out.setdefault(b.image_id, []).append(b)
        return out

    def image_path(self, record: ImageRecord) -> Path:
        return self.root / record.path

    def select(self, split: Optional[str] = None) -> List[ImageRecord]:
        return [r for r in self.images if split is None or r.split == split]

    def scene_counts(self, split: Optional[str] = None) -> Dict[str, int]:
        counts = {s: 0 for s in SCENES}
        for r in self.select(split):
            counts[r.scene] += 1
        return counts

    def validate(self) -> None:
        ids = self.by_id()
        if len(ids) != len(self.images):
            seen, dupes = set(), set()
            for r in self.images:
                (dupes if r.image_id in seen else seen).add(r.image_id)
            raise ManifestError(f"duplicate image_id(s): {sorted(dupes)}")
        for r in self.images:
            if r.split not in SPLITS:
                raise ManifestError(f"{r.image_id}: split {r.split!r} not in {SPLITS}")
            if r.scene not in SCENES:
                raise ManifestError(f"{r.image_id}: scene {r.scene!r} not in {SCENES}")
            if r.reference_scene not in SCENES + ("",):
                raise ManifestError(f"{r.image_id}: reference_scene {r.reference_scene!r} invalid")
            if r.width < 1 or r.height < 1:
                raise ManifestError(f"{r.image_id}: non-positive size {r.width}x{r.height}")
        for i, b in enumerate(self.boxes):
            rec = ids.get(b.image_id)
            if rec is None:
                raise ManifestError(f"box {i} references unknown image {b.image_id!r}")
            if not (0 <= b.x1 < b.x2 <= rec.width and 0 <= b.y1 < b.y2 <= rec.height):
                raise ManifestError(
                    f"box {i} {b.as_tuple()} outside {b.image_id} bounds {rec.width}x{rec.height}"
                )
        for r in self.images:
            seen = {r.image_id}
            cur = r
            while not cur.is_original:
                src = ids.get(cur.source_id)
                if src is None:
                    raise ManifestError(f"{cur.image_id}: dangling provenance source {cur.source_id!r}")
                if src.image_id in seen:
                    raise ManifestError(f"{r.image_id}: provenance cycle through {src.image_id}")
                seen.add(src.image_id)
                cur = src

    def save(self, directory) -> None:
        directory = Path(directory)
        atomic_write_text(
            directory / "images.csv",
            csv_text(
                IMAGES_HEADER,
                (
                    [r.image_id, r.path, r.width, r.height, r.split, r.scene, r.source_id, r.op, r.reference_scene]
                    for r in self.images
                ),
            ),
        )
        atomic_write_text(
            directory / "boxes.csv",
            csv_text(BOXES_HEADER, ([b.image_id] + [fmt_number(v) for v in b.as_tuple()] for b in self.boxes)),
        )

    @classmethod
    def load(cls, directory, root=None) -> "DatasetManifest":
        directory = Path(directory)
        images = [
            ImageRecord(
                row["image_id"],
                row["path"],
                int(row["width"]),
                int(row["height"]),
                row["split"],
                row["scene"],
                row["source_id"],
                row["op"],
                row.get("reference_scene", "") or "",
            )
            for row in read_csv(directory / "images.csv", IMAGES_HEADER[:-1])
        ]
        boxes = [
            BoxRecord(row["image_id"], float(row["x1"]), float(row["y1"]), float(row["x2"]), float(row["y2"]))
            for row in read_csv(directory / "boxes.csv", BOXES_HEADER)
        ]
        manifest = cls(images, boxes, Path(root) if root is not None else directory)
        manifest.validate()
        return manifest


# --- images -----------------------------------------------------------------


def read_pixels(path) -> np.ndarray:
    """Raw 8-bit pixels: (H, W) for grayscale, (H, W, 3) for RGB."""
    try:
        with Image.open(path) as im:
            if im.mode in ("L", "RGB"):
                arr = np.asarray(im)
            elif im.mode in ("1", "P", "LA", "I;16", "I"):
                arr = np.asarray(im.convert("L"))
            elif im.mode == "RGBA":
                arr = np.asarray(im.convert("RGB"))
            else:
                raise ManifestError(f"unsupported image mode {im.mode!r}: {path}")
    except (OSError, UnidentifiedImageError) as exc:
        raise ManifestError(f"cannot read image {path}: {exc}") from exc
    if arr.dtype != np.uint8:
        raise ManifestError(f"expected 8-bit image: {path}")
    return arr.copy()


def write_pixels(path, pixels: np.ndarray) -> None:
    """Write (H, W) or (H, W, 3) uint8 pixels as PNG (or PGM by suffix), atomically."""
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8:
        raise ManifestError("write_pixels expects uint8 data")
    buf = io.BytesIO()
    fmt = "PPM" if Path(path).suffix.lower() in (".pgm", ".ppm") else "PNG"
    Image.fromarray(pixels).save(buf, format=fmt)
    atomic_write_bytes(path, buf.getvalue())


def to_unit(pixels: np.ndarray) -> np.ndarray:
    return pixels.astype(np.float32) / np.float32(255.0)


def from_unit(values: np.ndarray) -> np.ndarray:
    return np.round(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)


def nearest_resize(arr: np.ndarray, size: int) -> np.ndarray:
    """Nearest-neighbour resize of the last two axes to size x size."""
    h, w = arr.shape[-2:]
    rows = np.minimum((np.arange(size) * 2 + 1) * h // (2 * size), h - 1)
    cols = np.minimum((np.arange(size) * 2 + 1) * w // (2 * size), w - 1)
    return arr[..., rows[:, None], cols[None, :]]


def load_image(path, image_size: Optional[int] = None, channels: int = 1) -> np.ndarray:
    """Load an 8-bit PNG/PGM as a (channels, H, W) float32 tensor in [0, 1].

    Grayscale is replicated to ``channels``; RGB is kept at 3 channels or
    reduced to luminance when ``channels == 1``.
    """
    pixels = read_pixels(path)
    if pixels.ndim == 3:
        if channels == 1:
            with Image.open(path) as im:
                pixels = np.asarray(im.convert("L"))
            chw = pixels[None]
        elif channels == 3:
            chw = pixels.transpose(2, 0, 1)
        else:
            raise ManifestError(f"cannot map RGB image to {channels} channels: {path}")
    else:
        chw = np.repeat(pixels[None], channels, axis=0)
    if image_size is not None:
        chw = nearest_resize(chw, image_size)
    return to_unit(np.ascontiguousarray(chw))


def to_training_range(x: np.ndarray) -> np.ndarray:
    """[0, 1] intensities -> [-1, 1]."""
    return x * 2 - 1


def load_image_stack(manifest: DatasetManifest, records: List[ImageRecord], image_size: int, channels: int):
    return np.stack([load_image(manifest.image_path(r), image_size, channels) for r in records])
