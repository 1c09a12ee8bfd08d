"""Detection scoring: IoU, greedy matching, PR curves and per-group AP."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .dataset import (
    DetectionRecord,
    FaceAnnotation,
    FrameRecord,
    Manifest,
    group_by_scenario,
)

DEFAULT_IOU = 0.5


def iou(a, b) -> float:
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return float(inter / union)


def iou_matrix(boxes_a, boxes_b) -> np.ndarray:
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    ix = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    iy = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(ix, 0, None) * np.clip(iy, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return inter / union


class CrossFrameError(ValueError):
    pass


@dataclass
class MatchResult:
    frame_id: str
    iou_threshold: float
    matches: list[tuple[str, str, float]] = field(default_factory=list)
    false_positives: list[str] = field(default_factory=list)
    false_negatives: list[str] = field(default_factory=list)
    # detections that landed on ignored annotations; neither TP nor FP
    ignored: list[str] = field(default_factory=list)

    def matched_detection(self) -> dict[str, str]:
        """annotation_id -> detection_id"""
        return {a: d for d, a, _ in self.matches}


def detection_order(detections: Sequence[DetectionRecord]) -> list[int]:
    """Indices by decreasing confidence, ties by detection_id."""
    return sorted(range(len(detections)), key=lambda i: (-detections[i].confidence, detections[i].detection_id))


def match_detections(
    detections: Sequence[DetectionRecord],
    annotations: Sequence[FaceAnnotation],
    iou_threshold: float = DEFAULT_IOU,
    frame_id: str | None = None,
    ignore: Iterable[str] = (),
) -> MatchResult:
    """Greedy VOC matching of one frame's detections against its annotations.

    Detections are visited by decreasing confidence and each claims the
    unclaimed annotation of highest IoU at or above ``iou_threshold``.
    Annotations listed in ``ignore`` can be claimed but the claiming detection
    is then reported in ``ignored`` rather than as a TP or FP.
    """
    frame_ids = {d.frame_id for d in detections}
    if frame_id is None:
        frame_id = next(iter(frame_ids)) if frame_ids else ""
    if frame_ids - {frame_id}:
        raise CrossFrameError(f"detections from several frames passed to match_detections: {sorted(frame_ids)}")
    ignore = set(ignore)
    result = MatchResult(frame_id=frame_id, iou_threshold=iou_threshold)
    if not annotations:
        result.false_positives = [detections[i].detection_id for i in detection_order(detections)]
        return result
    order = detection_order(detections)
    ious = iou_matrix([d.bbox for d in detections], [a.bbox for a in annotations])
    claimed = np.zeros(len(annotations), dtype=bool)
    for i in order:
        det = detections[i]
        cand = np.where(claimed, -1.0, ious[i])
        j = int(np.argmax(cand))
        if cand[j] >= iou_threshold:
            claimed[j] = True
            ann = annotations[j]
            if ann.annotation_id in ignore:
                result.ignored.append(det.detection_id)
            else:
                result.matches.append((det.detection_id, ann.annotation_id, float(ious[i, j])))
        else:
            result.false_positives.append(det.detection_id)
    result.false_negatives = [
        a.annotation_id for a, c in zip(annotations, claimed) if not c and a.annotation_id not in ignore
    ]
    return result


@dataclass
class PRCurve:
    recall: np.ndarray
    precision: np.ndarray
    n_gt: int


def _ranked(scores, tp, tie_keys=None):
    scores = np.asarray(scores, dtype=np.float64)
    tp = np.asarray(tp, dtype=bool)
    if tie_keys is None:
        order = np.argsort(-scores, kind="stable")
    else:
        order = np.array(sorted(range(len(scores)), key=lambda i: (-scores[i], tie_keys[i])), dtype=np.intp)
    return tp[order]


def pr_curve(scores, tp, n_gt: int, tie_keys=None) -> PRCurve:
    if n_gt < 1:
        raise ValueError("average precision is undefined without ground truth")
    tp_sorted = _ranked(scores, tp, tie_keys)
    ctp = np.cumsum(tp_sorted)
    cfp = np.cumsum(~tp_sorted)
    recall = ctp / n_gt
    precision = ctp / np.maximum(ctp + cfp, 1)
    return PRCurve(recall, precision, n_gt)


def average_precision(scores, tp, n_gt: int, tie_keys=None) -> float:
    """All-points interpolated AP over detections labelled TP/FP.

    ``tie_keys`` (usually detection ids) fix the order of equal scores.
    """
    curve = pr_curve(scores, tp, n_gt, tie_keys)
    mrec = np.concatenate(([0.0], curve.recall, [1.0]))
    mpre = np.concatenate(([0.0], curve.precision, [0.0]))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


# --------------------------------------------------------------------------
# group-level evaluation


@dataclass
class DetectionRow:
    group_axis: str
    group: str
    qp: int | None
    subset_id: str
    ap: float | None
    n_gt: int
    n_det: int
    n_tp: int
    n_fp: int
    n_fn: int

    FIELDS = ("group_axis", "group", "qp", "subset_id", "ap", "n_gt", "n_det", "n_tp", "n_fp", "n_fn")

    def as_row(self) -> list:
        return [
            self.group_axis, self.group, "" if self.qp is None else self.qp, self.subset_id,
            "" if self.ap is None else f"{self.ap:.6f}",
            self.n_gt, self.n_det, self.n_tp, self.n_fp, self.n_fn,
        ]


@dataclass
class DetectionReport:
    rows: list[DetectionRow]
    mean_ap: float | None
    notes: list[str] = field(default_factory=list)
    matches: dict[str, MatchResult] = field(default_factory=dict)

    def ap(self) -> dict[str, float | None]:
        return {r.group: r.ap for r in self.rows}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(DetectionRow.FIELDS)
        for r in self.rows:
            w.writerow(r.as_row())
        return buf.getvalue()


def evaluation_frames(manifest: Manifest, subset=None) -> tuple[list[FrameRecord], set[str]]:
    """Frames to score plus the annotation ids to treat as ignore regions.

    Without a subset every frame and annotation counts.  With a subset only
    frames hosting a selected annotation are scored and the other faces in
    those frames become ignore regions, so detecting them is not penalized.
    """
    if subset is None:
        return list(manifest.frames), set()
    selected: dict[str, set[str]] = {}
    for fid, aid in subset.selected:
        selected.setdefault(fid, set()).add(aid)
    frames, ignore = [], set()
    for frame in manifest.frames:
        keep = selected.get(frame.frame_id)
        if not keep:
            continue
        frames.append(frame)
        ignore.update(a.annotation_id for a in frame.annotations if a.annotation_id not in keep)
    return frames, ignore


def match_frames(
    frames: Iterable[FrameRecord],
    detections: Sequence[DetectionRecord],
    iou_threshold: float = DEFAULT_IOU,
    ignore: Iterable[str] = (),
) -> dict[str, MatchResult]:
    by_frame: dict[str, list[DetectionRecord]] = {}
    for det in detections:
        by_frame.setdefault(det.frame_id, []).append(det)
    ignore = set(ignore)
    return {
        f.frame_id: match_detections(by_frame.get(f.frame_id, []), f.annotations, iou_threshold,
                                     frame_id=f.frame_id, ignore=ignore)
        for f in frames
    }


def map_by_group(
    manifest: Manifest,
    detections: Sequence[DetectionRecord],
    axis: str = "full_cell",
    iou_threshold: float = DEFAULT_IOU,
    subset=None,
    qp: int | None = None,
) -> DetectionReport:
    """Per-group AP over pooled frames; the mean skips groups without GT."""
    for det in detections:
        if not manifest.has_frame(det.frame_id):
            raise ValueError(f"detection {det.detection_id!r} references unknown frame {det.frame_id!r}")
    frames, ignore = evaluation_frames(manifest, subset)
    matches = match_frames(frames, detections, iou_threshold, ignore)
    det_by_id = {d.detection_id: d for d in detections}
    subset_id = "" if subset is None else subset.subset_id
    rows, notes = [], []
    for label, group in group_by_scenario(frames, axis).items():
        scores, tp, keys = [], [], []
        n_gt = n_fn = 0
        for frame in group:
            m = matches[frame.frame_id]
            n_gt += sum(1 for a in frame.annotations if a.annotation_id not in ignore)
            n_fn += len(m.false_negatives)
            for did, _, _ in m.matches:
                scores.append(det_by_id[did].confidence); tp.append(True); keys.append(did)
            for did in m.false_positives:
                scores.append(det_by_id[did].confidence); tp.append(False); keys.append(did)
        n_tp = sum(tp)
        if n_gt == 0:
            ap = None
            notes.append(f"group {label!r} has no ground truth; AP undefined and excluded from the mean")
        else:
            ap = average_precision(scores, tp, n_gt, keys)
        rows.append(DetectionRow(axis, label, qp, subset_id, ap, n_gt, len(scores), n_tp, len(scores) - n_tp, n_fn))
    defined = [r.ap for r in rows if r.ap is not None]
    mean_ap = float(np.mean(defined)) if defined else None
    return DetectionReport(rows, mean_ap, notes, matches)


def plot_data(reports: Iterable[DetectionReport]) -> dict:
    """x = qp, y = ap per group, for external plotting."""
    series: dict[str, dict[str, list]] = {}
    for rep in reports:
        for r in rep.rows:
            s = series.setdefault(r.group, {"x": [], "y": []})
            s["x"].append(r.qp)
            s["y"].append(r.ap)
    return {"metric": "ap", "series": series}
