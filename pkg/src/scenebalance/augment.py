"""Minority-scene augmentation: plan the deficit, then replicate, rotate or add noise."""
from __future__ import annotations

import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .manifest import (
    BoxRecord,
    DatasetManifest,
    ImageRecord,
    csv_text,
    from_unit,
    read_csv,
    read_pixels,
    to_unit,
    write_pixels,
)

OPS = ("replicate", "rotate", "noise")
ANGLES = (90, 180, 270)
PLAN_HEADER = ["source_id", "op", "params", "new_id"]


class BalanceError(RuntimeError):
    """Raised when a plan cannot be applied; ``written`` lists files left on disk."""

    def __init__(self, message, written=()):
        super().__init__(message)
        self.written = list(written)


@dataclass(frozen=True)
class AugmentationPolicy:
    ops: Tuple[str, ...] = ("replicate",)
    noise_variance: float = 0.1
    angles: Tuple[int, ...] = ANGLES
    seed: int = 0

    def __post_init__(self):
        if not self.ops:
            raise ValueError("at least one augmentation op must be enabled")
        bad = set(self.ops) - set(OPS)
        if bad:
            raise ValueError(f"unknown augmentation ops {sorted(bad)}")
        if "noise" in self.ops and not self.noise_variance > 0:
            raise ValueError("noise variance must be positive")
        if "rotate" in self.ops and (not self.angles or set(self.angles) - set(ANGLES)):
            raise ValueError(f"rotation angles must be a nonempty subset of {ANGLES}")

    def expanded_ops(self) -> List[Tuple[str, int]]:
        """Enabled ops in cycling order: replicate, rotate-90/180/270, noise."""
        out = []
        if "replicate" in self.ops:
            out.append(("replicate", 0))
        if "rotate" in self.ops:
            out.extend(("rotate", a) for a in sorted(set(self.angles)))
        if "noise" in self.ops:
            out.append(("noise", 0))
        return out


@dataclass(frozen=True)
class Directive:
    source_id: str
    op: str
    params: Tuple[Tuple[str, object], ...]
    new_id: str

    @property
    def param_dict(self) -> Dict[str, object]:
        return dict(self.params)

    @property
    def op_label(self) -> str:
        return f"rotate{self.param_dict['angle']}" if self.op == "rotate" else self.op

    def params_text(self) -> str:
        return ";".join(f"{k}={v}" for k, v in self.params)


@dataclass
class BalancePlan:
    minority_label: str
    directives: List[Directive]
    n_major: int
    n_minor_before: int
    n_sources: int

    @property
    def n_minor_after(self) -> int:
        return self.n_minor_before + len(self.directives)

    @property
    def residual(self) -> int:
        return self.n_major - self.n_minor_after

    def per_source_counts(self) -> Dict[str, int]:
        counts: Dict[str, int] = {}
        for d in self.directives:
            counts[d.source_id] = counts.get(d.source_id, 0) + 1
        return counts

    def to_csv_text(self) -> str:
        return csv_text(PLAN_HEADER, ([d.source_id, d.op, d.params_text(), d.new_id] for d in self.directives))

    @staticmethod
    def read_directives(path) -> List[Directive]:
        out = []
        for row in read_csv(path, PLAN_HEADER):
            params = []
            for item in filter(None, row["params"].split(";")):
                key, value = item.split("=", 1)
                params.append((key, _parse_param(key, value)))
            out.append(Directive(row["source_id"], row["op"], tuple(params), row["new_id"]))
        return out


def _parse_param(key, value):
    if key in ("angle", "seed"):
        return int(value)
    return float(value)


def _noise_seed(master: int, index: int) -> int:
    return int(np.random.SeedSequence([master, index]).generate_state(1, np.uint32)[0])


def plan_balance(
    sizes: Tuple[int, int],
    minority_ids: Sequence[str],
    policy: AugmentationPolicy,
    minority_label: str = "inshore",
) -> BalancePlan:
    """Assign ``n_major - n_minor`` directives round-robin over sources and enabled ops.

    Directive ``i`` uses source ``i mod n_minor`` and op ``i mod len(ops)``.
    """
    n_major, n_minor = sizes
    if n_minor < 1:
        raise ValueError("minority cluster is empty; nothing to augment")
    if n_major < n_minor:
        raise ValueError(f"majority size {n_major} is smaller than minority size {n_minor}")
    if len(minority_ids) != n_minor:
        raise ValueError(f"got {len(minority_ids)} minority ids for a minority of {n_minor}")
    ops = policy.expanded_ops()
    directives = []
    for i in range(n_major - n_minor):
        src = minority_ids[i % n_minor]
        op, angle = ops[i % len(ops)]
        if op == "replicate":
            params, tag = (), "rep"
        elif op == "rotate":
            params, tag = (("angle", angle),), f"rot{angle}"
        else:
            params, tag = (("variance", policy.noise_variance), ("seed", _noise_seed(policy.seed, i))), "noise"
        directives.append(Directive(src, op, params, f"{src}_bal{i:05d}_{tag}"))
    return BalancePlan(minority_label, directives, n_major, n_minor, n_minor)


# --- sample-level transforms ----------------------------------------------------


def _check_boxes(boxes: np.ndarray, width: int, height: int) -> None:
    for i, (x1, y1, x2, y2) in enumerate(boxes):
        if not (0 <= x1 < x2 <= width and 0 <= y1 < y2 <= height):
            raise ValueError(f"box {i} ({x1}, {y1}, {x2}, {y2}) outside {width}x{height} image")


def rotate_boxes(boxes, width: int, angle: int, height: int = None) -> np.ndarray:
    """Rotate (x1, y1, x2, y2) boxes counter-clockwise in multiples of 90 degrees.

    One quarter turn maps a point (x, y) of a W-wide image to (y, W - x).
    """
    if angle not in (0,) + ANGLES:
        raise ValueError(f"angle must be one of 0, 90, 180, 270; got {angle}")
    out = np.array(boxes, dtype=np.float64).reshape(-1, 4)
    w, h = width, height
    for _ in range(angle // 90):
        x1, y1, x2, y2 = out.T.copy()
        out = np.stack([y1, w - x2, y2, w - x1], axis=1)
        w, h = h, w
    return out


def rotate_sample(image: np.ndarray, boxes, angle: int):
    """Rotate pixels (last two axes = H, W) and boxes together, lattice-exact."""
    if angle not in ANGLES:
        raise ValueError(f"angle must be one of {ANGLES}, got {angle}")
    height, width = image.shape[-2:]
    boxes = np.array(boxes, dtype=np.float64).reshape(-1, 4)
    _check_boxes(boxes, width, height)
    rotated = np.rot90(image, angle // 90, axes=(-2, -1))
    return np.ascontiguousarray(rotated), rotate_boxes(boxes, width, angle, height)


def noise_field(shape, variance: float, seed: int) -> np.ndarray:
    """The pre-clip additive Gaussian field used by :func:`add_noise`."""
    if not variance > 0:
        raise ValueError("noise variance must be positive")
    return np.random.default_rng(seed).normal(0.0, np.sqrt(variance), size=shape)


def add_noise(image: np.ndarray, variance: float = 0.1, seed: int = 0) -> np.ndarray:
    """Add i.i.d. N(0, variance) to [0, 1] intensities and clip back to [0, 1]."""
    image = np.asarray(image)
    if image.size and (image.min() < 0 or image.max() > 1):
        raise ValueError("add_noise expects intensities in [0, 1]")
    noisy = image.astype(np.float64) + noise_field(image.shape, variance, seed)
    return np.clip(noisy, 0.0, 1.0).astype(image.dtype if image.dtype.kind == "f" else np.float64)


@dataclass
class Sample:
    image_id: str
    image: np.ndarray
    boxes: np.ndarray
    provenance: Tuple[str, ...] = ()


def replicate(sample: Sample, new_id: str) -> Sample:
    """Pixel- and box-identical copy under ``new_id``; provenance lists the source first."""
    if new_id == sample.image_id:
        raise ValueError("replica needs a fresh image_id")
    return Sample(new_id, sample.image.copy(), np.array(sample.boxes, copy=True), (sample.image_id,) + sample.provenance)


# --- manifest-level application ---------------------------------------------


def _to_chw(pixels: np.ndarray) -> np.ndarray:
    return pixels[None] if pixels.ndim == 2 else pixels.transpose(2, 0, 1)


def _from_chw(chw: np.ndarray, gray: bool) -> np.ndarray:
    return chw[0] if gray else np.ascontiguousarray(chw.transpose(1, 2, 0))


def apply_balance(
    manifest: DatasetManifest, plan: BalancePlan, policy: AugmentationPolicy = None, out_dir: str = "augmented"
) -> DatasetManifest:
    """Execute ``plan`` and return a new manifest with the augmented records appended.

    New images are written under ``manifest.root / out_dir``. On failure the
    input manifest is untouched and :class:`BalanceError` lists written files.
    """
    ids = manifest.by_id()
    boxes_by = manifest.boxes_by_image()
    for d in plan.directives:
        if d.source_id not in ids:
            raise BalanceError(f"directive {d.new_id} references unknown image {d.source_id!r}")
        if d.new_id in ids:
            raise BalanceError(f"directive output id {d.new_id!r} already exists")
    result = manifest.copy()
    written: List[Path] = []
    try:
        for d in plan.directives:
            src = ids[d.source_id]
            src_path = manifest.image_path(src)
            suffix = src_path.suffix.lower() if src_path.suffix.lower() in (".png", ".pgm") else ".png"
            rel = Path(out_dir) / f"{d.new_id}{suffix}"
            dst = manifest.root / rel
            dst.parent.mkdir(parents=True, exist_ok=True)
            src_boxes = np.array([b.as_tuple() for b in boxes_by[src.image_id]], dtype=np.float64).reshape(-1, 4)
            width, height = src.width, src.height
            if d.op == "replicate":
                shutil.copyfile(src_path, dst)
                new_boxes = src_boxes
            elif d.op == "rotate":
                pixels = read_pixels(src_path)
                chw, new_boxes = rotate_sample(_to_chw(pixels), src_boxes, d.param_dict["angle"])
                write_pixels(dst, _from_chw(chw, pixels.ndim == 2))
                if d.param_dict["angle"] in (90, 270):
                    width, height = height, width
            elif d.op == "noise":
                pixels = read_pixels(src_path)
                p = d.param_dict
                noisy = add_noise(to_unit(pixels), p["variance"], p["seed"])
                write_pixels(dst, from_unit(noisy))
                new_boxes = src_boxes
            else:
                raise BalanceError(f"unknown op {d.op!r} in directive {d.new_id}", written)
            written.append(dst)
            result.images.append(
                ImageRecord(
                    d.new_id,
                    rel.as_posix(),
                    width,
                    height,
                    src.split,
                    plan.minority_label,
                    src.image_id,
                    d.op_label,
                    src.reference_scene,
                )
            )
            result.boxes.extend(BoxRecord(d.new_id, *map(float, b)) for b in new_boxes)
    except BalanceError:
        raise
    except (OSError, ValueError) as exc:
        raise BalanceError(f"augmentation failed: {exc}", written) from exc
    result.validate()
    return result


def check_parity(manifest: DatasetManifest, n_sources: int, split: str = "train") -> None:
    counts = manifest.scene_counts(split)
    gap = abs(counts["inshore"] - counts["offshore"])
    if gap >= max(n_sources, 1):
        raise BalanceError(f"scene counts {counts} differ by {gap} >= {n_sources} minority sources")
