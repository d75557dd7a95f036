"""Single-class detection scoring: IoU matching, precision/recall, AP and false-alarm rate by scene."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .manifest import DatasetManifest, csv_text, fmt_number, read_csv

GROUPS = ("inshore+offshore", "inshore", "offshore")
GROUP_FILES = {"inshore+offshore": "pr_all.csv", "inshore": "pr_inshore.csv", "offshore": "pr_offshore.csv"}
DETECTIONS_HEADER = ["image_id", "x1", "y1", "x2", "y2", "score"]
PR_HEADER = ["rank", "score", "recall", "precision"]
METRICS_HEADER = ["group", "recall", "precision", "map", "false_alarm_rate", "tp", "fp", "fn", "flags"]
DUPLICATE_NOTE = "duplicate detections of one ground truth count as false positives"


class Box(NamedTuple):
    x1: float
    y1: float
    x2: float
    y2: float

    def validate(self) -> "Box":
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box {tuple(self)}")
        return self

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)


@dataclass(frozen=True)
class Detection:
    image_id: str
    box: Box
    score: float

    def __post_init__(self):
        object.__setattr__(self, "box", Box(*map(float, self.box)).validate())
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"detection score {self.score} on {self.image_id} outside [0, 1]")


def iou(a, b) -> float:
    a, b = Box(*a).validate(), Box(*b).validate()
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def ranking(detections: Sequence[Detection]) -> List[int]:
    """Indices by descending score; ties keep input order."""
    return sorted(range(len(detections)), key=lambda i: -detections[i].score)


@dataclass
class MatchResult:
    is_tp: List[bool]  # aligned with the input detections
    gt_matched: Dict[str, List[bool]]

    @property
    def tp(self) -> int:
        return sum(self.is_tp)

    @property
    def fp(self) -> int:
        return len(self.is_tp) - self.tp

    @property
    def fn(self) -> int:
        return sum(not m for flags in self.gt_matched.values() for m in flags)


def match_detections(
    gts: Dict[str, Sequence], detections: Sequence[Detection], iou_threshold: float = 0.5
) -> MatchResult:
    """Greedy one-to-one matching in descending score order.

    Each detection claims the unmatched ground truth of its image with the
    highest IoU >= ``iou_threshold`` (lowest index on ties); otherwise it is a FP.
    """
    boxes = {k: [Box(*b).validate() for b in v] for k, v in gts.items()}
    matched = {k: [False] * len(v) for k, v in boxes.items()}
    is_tp = [False] * len(detections)
    for i in ranking(detections):
        det = detections[i]
        best, best_iou = -1, iou_threshold
        for j, g in enumerate(boxes.get(det.image_id, ())):
            if matched[det.image_id][j]:
                continue
            v = iou(det.box, g)
            if v >= best_iou and (best < 0 or v > best_iou):
                best, best_iou = j, v
        if best >= 0:
            matched[det.image_id][best] = True
            is_tp[i] = True
    return MatchResult(is_tp, matched)


class Rates(NamedTuple):
    recall: float
    precision: float
    undefined: Tuple[str, ...] = ()


def precision_recall(tp: int, fp: int, fn: int) -> Rates:
    """recall = TP/(TP+FN), precision = TP/(TP+FP); 0/0 -> 0 and named in ``undefined``."""
    if min(tp, fp, fn) < 0:
        raise ValueError("counts must be non-negative")
    undefined = []
    if tp + fn == 0:
        undefined.append("recall")
    if tp + fp == 0:
        undefined.append("precision")
    recall = tp / (tp + fn) if tp + fn else 0.0
    precision = tp / (tp + fp) if tp + fp else 0.0
    return Rates(recall, precision, tuple(undefined))


@dataclass
class PRCurve:
    recall: np.ndarray
    precision: np.ndarray
    thresholds: np.ndarray

    def points(self) -> List[Tuple[float, float]]:
        return list(zip(self.recall.tolist(), self.precision.tolist()))

    def __len__(self):
        return len(self.recall)


def pr_curve(detections: Sequence[Detection], is_tp: Sequence[bool], n_gt: int) -> PRCurve:
    """One (recall, precision) point per detection along the score ranking."""
    if n_gt <= 0:
        raise ValueError("precision-recall curve needs at least one ground truth")
    if len(detections) != len(is_tp):
        raise ValueError("match flags must align with detections")
    order = ranking(detections)
    hits = np.array([bool(is_tp[i]) for i in order], dtype=np.int64)
    ctp = np.cumsum(hits)
    cfp = np.cumsum(1 - hits)
    recall = ctp / n_gt
    precision = ctp / np.maximum(ctp + cfp, 1)
    scores = np.array([detections[i].score for i in order], dtype=np.float64)
    return PRCurve(recall.astype(np.float64), precision.astype(np.float64), scores)


def average_precision(curve: PRCurve) -> float:
    """All-point interpolated area under the monotone precision envelope."""
    if len(curve) == 0:
        raise ValueError("average precision of an empty curve")
    envelope = np.maximum.accumulate(curve.precision[::-1])[::-1]
    steps = np.diff(np.concatenate([[0.0], curve.recall]))
    return float(np.sum(steps * envelope))


@dataclass
class GroupMetrics:
    group: str
    tp: int
    fp: int
    fn: int
    recall: float
    precision: float
    map: float
    curve: PRCurve
    flags: Tuple[str, ...] = ()

    @property
    def false_alarm_rate(self) -> float:
        return 1.0 - self.precision

    @property
    def n_gt(self) -> int:
        return self.tp + self.fn


@dataclass
class EvalReport:
    groups: Dict[str, GroupMetrics]
    iou_threshold: float = 0.5
    score_threshold: float = 0.0
    notes: List[str] = field(default_factory=lambda: [DUPLICATE_NOTE])

    def __getitem__(self, group: str) -> GroupMetrics:
        return self.groups[group]

    def to_text(self) -> str:
        lines = [f"# {n}" for n in self.notes]
        lines.append(f"# iou_threshold = {self.iou_threshold!r}; score_threshold = {self.score_threshold!r}")
        lines.append(f"{'group':<18}{'recall%':>9}{'precision%':>12}{'mAP%':>9}{'Pf%':>9}{'TP':>7}{'FP':>7}{'FN':>7}  flags")
        for g in GROUPS:
            m = self.groups[g]
            p_hund = round(m.precision * 10000)
            lines.append(
                f"{g:<18}{m.recall * 100:>9.2f}{p_hund / 100:>12.2f}{m.map * 100:>9.2f}"
                f"{(10000 - p_hund) / 100:>9.2f}{m.tp:>7}{m.fp:>7}{m.fn:>7}  {','.join(m.flags) or '-'}"
            )
        return "\n".join(lines) + "\n"

    def metrics_csv(self) -> str:
        rows = []
        for g in GROUPS:
            m = self.groups[g]
            rows.append(
                [g, repr(m.recall), repr(m.precision), repr(m.map), repr(m.false_alarm_rate), m.tp, m.fp, m.fn, ";".join(m.flags)]
            )
        return csv_text(METRICS_HEADER, rows)

    def curve_csv(self, group: str) -> str:
        c = self.groups[group].curve
        return csv_text(
            PR_HEADER,
            ([i + 1, repr(float(s)), repr(float(r)), repr(float(p))] for i, (s, r, p) in enumerate(zip(c.thresholds, c.recall, c.precision))),
        )


def _group_metrics(name, gts, detections, iou_threshold) -> GroupMetrics:
    match = match_detections(gts, detections, iou_threshold)
    rates = precision_recall(match.tp, match.fp, match.fn)
    flags = list(rates.undefined)
    n_gt = match.tp + match.fn
    if n_gt == 0:
        flags.append("no_ground_truth")
        curve = PRCurve(np.zeros(0), np.zeros(0), np.zeros(0))
        ap = 0.0
    else:
        curve = pr_curve(detections, match.is_tp, n_gt)
        ap = average_precision(curve) if len(curve) else 0.0
    return GroupMetrics(name, match.tp, match.fp, match.fn, rates.recall, rates.precision, ap, curve, tuple(flags))


def image_scene(record) -> str:
    """The scene used for grouping: the assigned scene, else the reference label."""
    return record.scene if record.scene != "unknown" else (record.reference_scene or "unknown")


def evaluate(
    manifest: DatasetManifest,
    detections: Sequence[Detection],
    iou_threshold: float = 0.5,
    split: Optional[str] = None,
    score_threshold: float = 0.0,
) -> EvalReport:
    """Score detections against the manifest's boxes for all, inshore and offshore images."""
    ids = manifest.by_id()
    for d in detections:
        if d.image_id not in ids:
            raise ValueError(f"detection references unknown image {d.image_id!r}")
    records = manifest.select(split)
    boxes = manifest.boxes_by_image()
    members = {
        "inshore+offshore": {r.image_id for r in records if image_scene(r) in ("inshore", "offshore")},
        "inshore": {r.image_id for r in records if image_scene(r) == "inshore"},
        "offshore": {r.image_id for r in records if image_scene(r) == "offshore"},
    }
    kept = [d for d in detections if d.score >= score_threshold]
    groups = {}
    for g in GROUPS:
        gts = {i: [b.as_tuple() for b in boxes[i]] for i in sorted(members[g])}
        dets = [d for d in kept if d.image_id in members[g]]
        groups[g] = _group_metrics(g, gts, dets, iou_threshold)
    return EvalReport(groups, iou_threshold, score_threshold)


def detections_csv(detections: Iterable[Detection]) -> str:
    return csv_text(
        DETECTIONS_HEADER, ([d.image_id, *(fmt_number(v) for v in d.box), repr(float(d.score))] for d in detections)
    )


def load_detections(path) -> List[Detection]:
    out = []
    for n, row in enumerate(read_csv(path, DETECTIONS_HEADER), start=2):
        try:
            box = tuple(float(row[k]) for k in ("x1", "y1", "x2", "y2"))
            out.append(Detection(row["image_id"], box, float(row["score"])))
        except ValueError as exc:
            raise ValueError(f"{path}:{n}: {exc}") from exc
    return out
