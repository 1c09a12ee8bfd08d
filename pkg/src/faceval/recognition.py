"""1:1 face verification, with and without the detector in the loop.

Perfect-detection mode scores ground-truth annotations directly.
End-to-end mode represents every annotation by the detection that matched
it; a genuine pair with an undetected member is a forced failure and an
impostor pair with an undetected member leaves the FPR denominator.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .dataset import DetectionRecord, FrameRecord, Manifest, group_label, axis_labels
from .detection import DEFAULT_IOU, evaluation_frames, match_frames

log = logging.getLogger(__name__)

DEFAULT_PAIR_CEILING = 10**8
MISS_POLICIES = ("penalize", "exclude")
PAIR_POLICIES = ("within_group", "all")


# --------------------------------------------------------------------------
# alignment


@dataclass(frozen=True)
class SimilarityTransform:
    scale: float
    theta: float
    tx: float
    ty: float

    @property
    def matrix(self) -> np.ndarray:
        c, s = math.cos(self.theta), math.sin(self.theta)
        return np.array([[self.scale * c, -self.scale * s, self.tx],
                         [self.scale * s, self.scale * c, self.ty]])

    def apply(self, pts) -> np.ndarray:
        M = self.matrix
        return np.asarray(pts, dtype=np.float64).reshape(-1, 2) @ M[:, :2].T + M[:, 2]

    def residual(self, src, dst) -> float:
        return float(((self.apply(src) - np.asarray(dst, dtype=np.float64)) ** 2).sum())


def estimate_similarity_transform(src, dst) -> SimilarityTransform:
    """Least-squares scale/rotation/translation mapping ``src`` onto ``dst`` (Umeyama)."""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    if src.shape != dst.shape:
        raise ValueError("source and template point sets differ in size")
    if not (np.all(np.isfinite(src)) and np.all(np.isfinite(dst))):
        raise ValueError("non-finite landmark coordinates")
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    xs, xd = src - mu_s, dst - mu_d
    var_s = (xs ** 2).sum() / len(src)
    if var_s < 1e-12:
        raise ValueError("degenerate source landmarks: zero variance")
    cov = xd.T @ xs / len(src)
    U, D, Vt = np.linalg.svd(cov)
    S = np.array([1.0, np.sign(np.linalg.det(U) * np.linalg.det(Vt)) or 1.0])
    R = U @ np.diag(S) @ Vt
    scale = float((D * S).sum() / var_s)
    t = mu_d - scale * R @ mu_s
    return SimilarityTransform(scale, float(math.atan2(R[1, 0], R[0, 0])), float(t[0]), float(t[1]))


def load_template(path=None) -> np.ndarray:
    """Five-point alignment template; the packaged 112x112 default when ``path`` is None."""
    if path is None:
        text = resources.files("faceval").joinpath("data/template_112.json").read_text(encoding="utf-8")
    else:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    points = np.asarray(json.loads(text)["points"], dtype=np.float64)
    if points.shape != (5, 2):
        raise ValueError("alignment template must hold five (x, y) points")
    return points


def alignment_transforms(detections: Iterable[DetectionRecord], template) -> list[dict]:
    """Per-detection landmark->template transforms, for external croppers."""
    out = []
    for det in detections:
        if len(det.landmarks) != 5:
            continue
        st = estimate_similarity_transform(det.landmarks, template)
        out.append({"detection_id": det.detection_id, "s": st.scale, "theta": st.theta, "tx": st.tx, "ty": st.ty})
    return out


# --------------------------------------------------------------------------
# pairs


class PairCeilingError(ValueError):
    pass


@dataclass(frozen=True)
class PairRecord:
    a: str
    b: str
    genuine: bool
    cells: tuple[str, str]


class Subject(NamedTuple):
    annotation_id: str
    identity_id: str
    group: str


def _group_members(subjects: Sequence[Subject], policy: str) -> dict[str, list[int]]:
    if policy not in PAIR_POLICIES:
        raise ValueError(f"pair policy must be one of {PAIR_POLICIES}")
    groups: dict[str, list[int]] = {}
    for i, s in enumerate(subjects):
        groups.setdefault(s.group if policy == "within_group" else "all", []).append(i)
    return groups


def count_pairs(subjects: Sequence[Subject], policy: str = "within_group") -> int:
    return sum(len(m) * (len(m) - 1) // 2 for m in _group_members(subjects, policy).values())


def generate_pairs(
    subjects: Sequence[Subject],
    policy: str = "within_group",
    ceiling: int = DEFAULT_PAIR_CEILING,
) -> list[PairRecord]:
    """Exhaustive pairs within each group (or across everything for ``policy='all'``)."""
    n = count_pairs(subjects, policy)
    if n > ceiling:
        raise PairCeilingError(f"{n} pairs exceed the ceiling of {ceiling}")
    out = []
    for members in _group_members(subjects, policy).values():
        for x in range(len(members)):
            si = subjects[members[x]]
            for y in range(x + 1, len(members)):
                sj = subjects[members[y]]
                out.append(PairRecord(si.annotation_id, sj.annotation_id,
                                      si.identity_id == sj.identity_id, (si.group, sj.group)))
    return out


# --------------------------------------------------------------------------
# operating point


class RocPoint(NamedTuple):
    tpr: float
    threshold: float
    achieved_fpr: float
    degenerate: bool
    low_resolution: bool


def tpr_at_fpr(genuine, impostor, target_fpr: float = 0.01) -> RocPoint:
    """TPR at the lowest observed-score threshold whose FPR stays within target.

    Scores at or above the threshold are accepted.  Genuine scores may be
    ``-inf`` (never accepted).  When even the top score admits more than the
    allowed number of impostors, the top score is returned with
    ``degenerate=True``.
    """
    g = np.asarray(genuine, dtype=np.float64).ravel()
    imp = np.asarray(impostor, dtype=np.float64).ravel()
    if g.size == 0 or imp.size == 0:
        raise ValueError("tpr_at_fpr needs at least one genuine and one impostor score")
    if not 0 < target_fpr < 1:
        raise ValueError("target_fpr must lie in (0, 1)")
    low_res = imp.size < 1.0 / target_fpr
    allowed = math.floor(target_fpr * imp.size + 1e-9)
    imp_desc = np.sort(imp)[::-1]
    finite = np.concatenate([g[np.isfinite(g)], imp])
    if allowed >= imp.size:
        threshold = float(finite.min())
        degenerate = False
    else:
        cut = imp_desc[allowed]             # must reject this score
        above = finite[finite > cut]
        if above.size:
            threshold = float(above.min())
            degenerate = False
        else:
            threshold = float(finite.max())
            degenerate = True
    tpr = float(np.count_nonzero(g >= threshold) / g.size)
    fpr = float(np.count_nonzero(imp >= threshold) / imp.size)
    return RocPoint(tpr, threshold, fpr, degenerate, low_res)


# --------------------------------------------------------------------------
# reports


@dataclass
class VerificationRow:
    group_axis: str
    group: str
    qp: int | None
    subset_id: str
    tpr: float | None
    achieved_fpr: float | None
    threshold: float | None
    n_genuine: int
    n_impostor: int
    n_genuine_missed: int
    n_impostor_excluded: int
    policy: str
    n_unmatched_detections: int = 0
    degenerate: bool = False
    low_resolution: bool = False

    FIELDS = ("group_axis", "group", "qp", "subset_id", "tpr", "achieved_fpr", "threshold", "n_genuine",
              "n_impostor", "n_genuine_missed", "n_impostor_excluded", "policy")

    def as_row(self) -> list:
        def f(v):
            return "" if v is None else f"{v:.6f}"
        return [self.group_axis, self.group, "" if self.qp is None else self.qp, self.subset_id,
                f(self.tpr), f(self.achieved_fpr), f(self.threshold), self.n_genuine, self.n_impostor,
                self.n_genuine_missed, self.n_impostor_excluded, self.policy]


@dataclass
class VerificationReport:
    rows: list[VerificationRow]
    target_fpr: float
    notes: list[str] = field(default_factory=list)

    def tpr(self) -> dict[str, float | None]:
        return {r.group: r.tpr for r in self.rows}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(VerificationRow.FIELDS)
        for r in self.rows:
            w.writerow(r.as_row())
        return buf.getvalue()


def _subjects(frames: Iterable[FrameRecord], axis: str, ignore: set[str]) -> list[Subject]:
    return [
        Subject(a.annotation_id, a.identity_id, group_label(f, axis))
        for f in frames for a in f.annotations if a.annotation_id not in ignore
    ]


def _score_groups(
    subjects: list[Subject],
    vectors: np.ndarray,
    present: np.ndarray,
    axis: str,
    target_fpr: float,
    policy: str,
    pair_policy: str,
    qp: int | None,
    subset_id: str,
    mode: str,
) -> VerificationReport:
    if policy not in MISS_POLICIES:
        raise ValueError(f"miss policy must be one of {MISS_POLICIES}")
    rows, notes = [], []
    groups = _group_members(subjects, pair_policy)
    order = axis_labels(axis) if pair_policy == "within_group" else ("all",)
    policy_label = "perfect" if mode == "perfect" else policy
    for label in [g for g in order if g in groups]:
        idx = np.asarray(groups[label], dtype=np.intp)
        ident = np.array([subjects[i].identity_id for i in idx])
        E = vectors[idx]
        iu, ju = np.triu_indices(len(idx), k=1)
        scores = np.einsum("ij,ij->i", E[iu], E[ju])
        genuine = ident[iu] == ident[ju]
        both = present[idx][iu] & present[idx][ju]
        n_gen_missed = int(np.count_nonzero(genuine & ~both))
        n_imp_excl = int(np.count_nonzero(~genuine & ~both))
        if policy == "penalize":
            g_scores = np.where(both[genuine], scores[genuine], -np.inf)
        else:
            g_scores = scores[genuine & both]
        i_scores = scores[~genuine & both]
        row = VerificationRow(axis if pair_policy == "within_group" else "all", label, qp, subset_id,
                              None, None, None, int(g_scores.size), int(i_scores.size),
                              n_gen_missed, n_imp_excl, policy_label)
        if g_scores.size == 0 or i_scores.size == 0:
            notes.append(f"group {label!r}: no {'genuine' if g_scores.size == 0 else 'impostor'} pairs; TPR undefined")
        else:
            pt = tpr_at_fpr(g_scores, i_scores, target_fpr)
            row.tpr, row.threshold, row.achieved_fpr = pt.tpr, pt.threshold, pt.achieved_fpr
            row.degenerate, row.low_resolution = pt.degenerate, pt.low_resolution
            if pt.degenerate:
                notes.append(f"group {label!r}: FPR {target_fpr} unattainable, degenerate threshold "
                             f"(achieved FPR {pt.achieved_fpr:.4f})")
            if pt.low_resolution:
                notes.append(f"group {label!r}: only {i_scores.size} impostor pairs; "
                             f"FPR {target_fpr} is below the resolution 1/{i_scores.size}")
        rows.append(row)
    return VerificationReport(rows, target_fpr, notes)


def _pair_guard(subjects, pair_policy, ceiling):
    n = count_pairs(subjects, pair_policy)
    if n > ceiling:
        raise PairCeilingError(f"{n} pairs exceed the ceiling of {ceiling}")


def verify_perfect_detection(
    manifest: Manifest,
    embeddings: Mapping[str, np.ndarray],
    axis: str = "full_cell",
    target_fpr: float = 0.01,
    subset=None,
    pair_policy: str = "within_group",
    qp: int | None = None,
    ceiling: int = DEFAULT_PAIR_CEILING,
) -> VerificationReport:
    """Verification over ground-truth faces, assuming every face was found."""
    frames, ignore = evaluation_frames(manifest, subset)
    subjects = _subjects(frames, axis, ignore)
    _pair_guard(subjects, pair_policy, ceiling)
    missing = [s.annotation_id for s in subjects if s.annotation_id not in embeddings]
    if missing:
        raise KeyError(f"no embedding for annotation {missing[0]!r} ({len(missing)} missing)")
    vectors = np.array([embeddings[s.annotation_id] for s in subjects], dtype=np.float64).reshape(len(subjects), -1)
    present = np.ones(len(subjects), dtype=bool)
    return _score_groups(subjects, vectors, present, axis, target_fpr, "penalize", pair_policy, qp,
                         "" if subset is None else subset.subset_id, "perfect")


def verify_end_to_end(
    manifest: Manifest,
    detections: Sequence[DetectionRecord],
    embeddings: Mapping[str, np.ndarray],
    axis: str = "full_cell",
    iou_threshold: float = DEFAULT_IOU,
    target_fpr: float = 0.01,
    subset=None,
    policy: str = "penalize",
    pair_policy: str = "within_group",
    qp: int | None = None,
    ceiling: int = DEFAULT_PAIR_CEILING,
) -> VerificationReport:
    """Verification where each face is seen only through its matched detection.

    ``embeddings`` is keyed by detection_id.  Pairs are still defined on the
    ground-truth annotations so the pair set equals the perfect-detection one.
    """
    for det in detections:
        if not manifest.has_frame(det.frame_id):
            raise ValueError(f"detection {det.detection_id!r} references unknown frame {det.frame_id!r}")
    frames, ignore = evaluation_frames(manifest, subset)
    matches = match_frames(frames, detections, iou_threshold, ignore)
    det_of: dict[str, str] = {}
    unmatched: dict[str, int] = {}
    for f in frames:
        m = matches[f.frame_id]
        det_of.update(m.matched_detection())
        label = group_label(f, axis) if pair_policy == "within_group" else "all"
        unmatched[label] = unmatched.get(label, 0) + len(m.false_positives)
    subjects = _subjects(frames, axis, ignore)
    _pair_guard(subjects, pair_policy, ceiling)
    dim = len(next(iter(embeddings.values()))) if embeddings else 1
    vectors = np.zeros((len(subjects), dim))
    present = np.zeros(len(subjects), dtype=bool)
    for i, s in enumerate(subjects):
        did = det_of.get(s.annotation_id)
        if did is None:
            continue
        if did not in embeddings:
            raise KeyError(f"no embedding for matched detection {did!r}")
        vectors[i] = embeddings[did]
        present[i] = True
    report = _score_groups(subjects, vectors, present, axis, target_fpr, policy, pair_policy, qp,
                           "" if subset is None else subset.subset_id, "e2e")
    for row in report.rows:
        row.n_unmatched_detections = unmatched.get(row.group, 0)
    return report


def plot_data(reports: Iterable[VerificationReport]) -> dict:
    series: dict[str, dict[str, list]] = {}
    for rep in reports:
        for r in rep.rows:
            s = series.setdefault(r.group, {"x": [], "y": []})
            s["x"].append(r.qp)
            s["y"].append(r.tpr)
    return {"metric": "tpr", "series": series}
