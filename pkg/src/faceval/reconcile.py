"""Cross-modality annotation reconciliation.

RGB and IR cameras at one location see the same scene through a small,
fixed offset.  A homography estimated from keypoint correspondences maps RGB
boxes into IR coordinates, where the two human annotation sets are merged
into one consistent set and copied back to RGB.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .dataset import FaceAnnotation, FrameRecord, Manifest, ManifestError, _iter_jsonl, dumps_jsonl
from .detection import iou_matrix

log = logging.getLogger(__name__)


class HomographyError(ValueError):
    pass


class DegenerateError(HomographyError):
    pass


class NoConsensusError(HomographyError):
    pass


@dataclass(frozen=True)
class Correspondence:
    capture_id: str
    src: tuple[float, float]
    dst: tuple[float, float]
    confidence: float | None = None


@dataclass(frozen=True)
class RansacConfig:
    threshold: float = 3.0
    max_iterations: int = 2000
    confidence: float = 0.999
    min_inliers: int = 10
    rng_seed: int = 0

    def __post_init__(self):
        if not self.threshold > 0:
            raise ValueError("RANSAC threshold must be positive")
        if not 0 < self.confidence < 1:
            raise ValueError("RANSAC confidence must lie in (0, 1)")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")


@dataclass(frozen=True, eq=False)
class Homography:
    H: np.ndarray
    inliers: int
    mean_error_px: float
    inlier_mask: np.ndarray | None = field(default=None, repr=False)

    def inverse(self) -> np.ndarray:
        Hi = np.linalg.inv(self.H)
        return Hi / Hi[2, 2]

    def to_dict(self, location: str | None = None) -> dict:
        out = {} if location is None else {"location": location}
        out.update(H=[float(v) for v in self.H.ravel()], inliers=int(self.inliers),
                   mean_error_px=float(self.mean_error_px))
        return out

    @classmethod
    def from_dict(cls, d: Mapping) -> "Homography":
        H = np.asarray(d["H"], dtype=np.float64).reshape(3, 3)
        return cls(normalize_h(H), int(d.get("inliers", 0)), float(d.get("mean_error_px", 0.0)))


def normalize_h(H: np.ndarray) -> np.ndarray:
    H = np.asarray(H, dtype=np.float64)
    if abs(H[2, 2]) < 1e-15:
        raise DegenerateError("homography has a vanishing bottom-right entry")
    H = H / H[2, 2]
    if abs(np.linalg.det(H)) <= 1e-12:
        raise DegenerateError("homography is singular")
    return H


# --------------------------------------------------------------------------
# fitting


def _conditioner(pts: np.ndarray) -> np.ndarray:
    """Similarity moving the centroid to the origin with mean distance sqrt(2)."""
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    if d < 1e-12:
        raise DegenerateError("all points coincide")
    s = math.sqrt(2.0) / d
    return np.array([[s, 0.0, -s * c[0]], [0.0, s, -s * c[1]], [0.0, 0.0, 1.0]])


def fit_homography_dlt(src, dst) -> np.ndarray:
    """Normalized DLT on n >= 4 correspondences; bottom-right entry scaled to 1."""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    if len(src) < 4 or len(src) != len(dst):
        raise HomographyError("need at least four matching point pairs")
    Ts, Td = _conditioner(src), _conditioner(dst)
    s = src @ Ts[:2, :2].T + Ts[:2, 2]
    d = dst @ Td[:2, :2].T + Td[:2, 2]
    n = len(s)
    x, y, u, v = s[:, 0], s[:, 1], d[:, 0], d[:, 1]
    zero, one = np.zeros(n), np.ones(n)
    A = np.empty((2 * n, 9))
    A[0::2] = np.stack([-x, -y, -one, zero, zero, zero, u * x, u * y, u], axis=1)
    A[1::2] = np.stack([zero, zero, zero, -x, -y, -one, v * x, v * y, v], axis=1)
    if len(A) < 9:
        A = np.vstack([A, np.zeros((9 - len(A), 9))])
    _, sv, vt = np.linalg.svd(A, full_matrices=False)
    if n == 4 and sv[-2] < 1e-10 * sv[0]:
        raise DegenerateError("rank-deficient minimal sample")
    Hn = vt[-1].reshape(3, 3)
    return normalize_h(np.linalg.inv(Td) @ Hn @ Ts)


def project(H: np.ndarray, pts) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    hom = pts @ H[:, :2].T + H[:, 2]
    w = hom[:, 2]
    if np.any(np.abs(w) < 1e-12):
        raise DegenerateError("point maps to infinity (|w| < 1e-12)")
    return hom[:, :2] / w[:, None]


def _project_unsafe(H, pts):
    hom = pts @ H[:, :2].T + H[:, 2]
    w = hom[:, 2]
    w = np.where(np.abs(w) < 1e-12, np.nan, w)
    return hom[:, :2] / w[:, None]


def symmetric_transfer_error(H: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Mean of forward and backward reprojection distances, per correspondence."""
    try:
        Hi = np.linalg.inv(H)
    except np.linalg.LinAlgError:
        return np.full(len(src), np.inf)
    fwd = np.linalg.norm(_project_unsafe(H, src) - dst, axis=1)
    bwd = np.linalg.norm(_project_unsafe(Hi, dst) - src, axis=1)
    err = 0.5 * (fwd + bwd)
    return np.where(np.isnan(err), np.inf, err)


def _collinear3(p: np.ndarray, tol: float) -> bool:
    for a, b, c in ((0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)):
        area = abs((p[b, 0] - p[a, 0]) * (p[c, 1] - p[a, 1]) - (p[b, 1] - p[a, 1]) * (p[c, 0] - p[a, 0]))
        if area <= tol:
            return True
    return False


def _as_arrays(correspondences) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(correspondences, tuple) and len(correspondences) == 2:
        src, dst = correspondences
    else:
        corr = list(correspondences)
        src = [c.src for c in corr]
        dst = [c.dst for c in corr]
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    if len(src) != len(dst):
        raise HomographyError("source and destination point counts differ")
    if not (np.all(np.isfinite(src)) and np.all(np.isfinite(dst))):
        raise HomographyError("non-finite correspondence coordinates")
    return src, dst


def estimate_homography(correspondences, config: RansacConfig = RansacConfig()) -> Homography:
    """Robust RGB->IR homography from point correspondences.

    ``correspondences`` is a sequence of :class:`Correspondence` or a
    ``(src, dst)`` pair of (n, 2) arrays.  Minimal 4-point samples are fitted
    by normalized DLT inside a RANSAC loop scored by symmetric transfer
    error; the best consensus set is refitted on all of its inliers.
    """
    src, dst = _as_arrays(correspondences)
    n = len(src)
    if n < 4:
        raise HomographyError(f"need at least 4 correspondences, got {n}")
    # an explicit minimum larger than the data can never be met
    need = max(4, min(config.min_inliers, n))
    rng = np.random.default_rng(config.rng_seed)
    scale = max(np.ptp(src, axis=0).max(), np.ptp(dst, axis=0).max(), 1.0)
    tol = 1e-6 * scale * scale

    best_mask, best_count, best_err = None, 0, np.inf
    limit = config.max_iterations
    it = 0
    while it < limit:
        it += 1
        idx = rng.choice(n, 4, replace=False)
        if _collinear3(src[idx], tol) or _collinear3(dst[idx], tol):
            continue
        try:
            H = fit_homography_dlt(src[idx], dst[idx])
        except HomographyError:
            continue
        err = symmetric_transfer_error(H, src, dst)
        mask = err < config.threshold
        count = int(mask.sum())
        mean_err = float(err[mask].mean()) if count else np.inf
        if count > best_count or (count == best_count and mean_err < best_err):
            best_mask, best_count, best_err = mask, count, mean_err
            w = count / n
            denom = math.log1p(-min(w ** 4, 1 - 1e-12))
            needed = math.ceil(math.log(1 - config.confidence) / denom) if denom < 0 else limit
            limit = min(limit, max(needed, it))
    if best_mask is None or best_count < need:
        raise NoConsensusError(f"no consensus: best inlier count {best_count} < required {need}")

    mask = best_mask
    H = fit_homography_dlt(src[mask], dst[mask])
    for _ in range(10):
        err = symmetric_transfer_error(H, src, dst)
        new_mask = err < config.threshold
        if new_mask.sum() < need or np.array_equal(new_mask, mask):
            break
        mask = new_mask
        H = fit_homography_dlt(src[mask], dst[mask])
    err = symmetric_transfer_error(H, src, dst)
    mask = err < config.threshold
    if mask.sum() < need:
        raise NoConsensusError(f"no consensus after refit: {int(mask.sum())} inliers < required {need}")
    return Homography(normalize_h(H), int(mask.sum()), float(err[mask].mean()), mask)


def warp_points(H: np.ndarray, pts) -> np.ndarray:
    return project(np.asarray(H, dtype=np.float64), pts)


def warp_box(H, bbox) -> tuple[float, float, float, float]:
    """Axis-aligned hull of the four corners mapped through H."""
    x0, y0, x1, y1 = bbox
    corners = np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]], dtype=np.float64)
    p = project(np.asarray(H, dtype=np.float64), corners)
    lo, hi = p.min(axis=0), p.max(axis=0)
    return (float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1]))


def warp_annotation(H, ann: FaceAnnotation, **changes) -> FaceAnnotation:
    # pose is a 3-D quantity; a plane map cannot correct it
    return replace(
        ann,
        bbox=warp_box(H, ann.bbox),
        landmarks=tuple(tuple(map(float, p)) for p in warp_points(H, ann.landmarks)),
        **changes,
    )


# --------------------------------------------------------------------------
# reconciliation


@dataclass(frozen=True)
class IdentityConflict:
    capture_id: str
    annotation_ids: tuple[str, str]
    identity_ids: tuple[str, str]
    iou: float


@dataclass
class ReconcileResult:
    ir: list[FaceAnnotation]
    rgb: list[FaceAnnotation]
    conflicts: list[IdentityConflict] = field(default_factory=list)


def _find(parent, i):
    while parent[i] != i:
        parent[i] = parent[parent[i]]
        i = parent[i]
    return i


def reconcile_capture(
    rgb_annotations: Sequence[FaceAnnotation],
    ir_annotations: Sequence[FaceAnnotation],
    H_rgb_to_ir,
    dedup_iou: float = 0.5,
    capture_id: str = "",
) -> ReconcileResult:
    """Merge one capture's RGB and IR annotations into a single face set.

    RGB faces are warped into IR coordinates and pooled with the IR faces.
    Overlapping faces (IoU >= ``dedup_iou``) of the same identity collapse to
    one survivor: the IR annotation is kept unless the RGB-derived box is
    strictly larger, and an IR annotation that was already reconciled always
    wins.  Overlaps between different identities are reported as conflicts
    and both faces are kept.  The merged set is copied back to RGB through
    the inverse map, so both modalities end with the same face count.

    Ids: a face keeps its original id in every modality where it was
    annotated; a face created by the transfer gets ``<id>@ir`` or ``<id>@rgb``.
    """
    H = normalize_h(np.asarray(getattr(H_rgb_to_ir, "H", H_rgb_to_ir), dtype=np.float64))
    Hinv = np.linalg.inv(H)
    Hinv /= Hinv[2, 2]
    warped = [warp_annotation(H, a) for a in rgb_annotations]
    pool = list(ir_annotations) + warped
    n_ir = len(ir_annotations)
    origin = ["ir"] * n_ir + ["rgb"] * len(warped)

    ious = iou_matrix([a.bbox for a in pool], [a.bbox for a in pool]) if pool else np.zeros((0, 0))
    pairs = [(ious[i, j], i, j) for i in range(len(pool)) for j in range(i + 1, len(pool)) if ious[i, j] >= dedup_iou]
    pairs.sort(key=lambda t: (-t[0], t[1], t[2]))
    parent = list(range(len(pool)))
    ident = {i: pool[i].identity_id for i in range(len(pool))}
    conflicts: list[IdentityConflict] = []
    for v, i, j in pairs:
        ri, rj = _find(parent, i), _find(parent, j)
        if ri == rj:
            continue
        if ident[ri] != ident[rj]:
            conflicts.append(IdentityConflict(
                capture_id, (pool[i].annotation_id, pool[j].annotation_id),
                (pool[i].identity_id, pool[j].identity_id), float(v)))
            continue
        lo, hi = min(ri, rj), max(ri, rj)
        parent[hi] = lo

    clusters: dict[int, list[int]] = {}
    for i in range(len(pool)):
        clusters.setdefault(_find(parent, i), []).append(i)

    def rank(i):
        # reconciled IR first, then area, then IR before RGB, then input order
        a = pool[i]
        settled = origin[i] == "ir" and a.source == "reconciled"
        return (not settled, -a.area, origin[i] != "ir", i)

    out_ir, out_rgb = [], []
    for members in sorted(clusters.values(), key=lambda m: min(m)):
        survivor = pool[min(members, key=rank)]
        ir_ids = [pool[i].annotation_id for i in members if origin[i] == "ir"]
        rgb_ids = [pool[i].annotation_id for i in members if origin[i] == "rgb"]
        ir_id = min(ir_ids) if ir_ids else f"{min(rgb_ids)}@ir"
        rgb_id = min(rgb_ids) if rgb_ids else f"{min(ir_ids)}@rgb"
        ir_face = replace(survivor, annotation_id=ir_id, source="reconciled")
        out_ir.append(ir_face)
        out_rgb.append(warp_annotation(Hinv, ir_face, annotation_id=rgb_id))
    return ReconcileResult(out_ir, out_rgb, conflicts)


def estimate_location_homographies(
    correspondences: Sequence[Correspondence],
    manifest: Manifest,
    config: RansacConfig = RansacConfig(),
) -> dict[str, Homography]:
    """One homography per camera location from pooled correspondences."""
    loc_of = {f.capture_id: f.location for f in manifest.frames}
    pooled: dict[str, list[Correspondence]] = {}
    for c in correspondences:
        if c.capture_id not in loc_of:
            raise ManifestError(f"correspondence references unknown capture {c.capture_id!r}")
        pooled.setdefault(loc_of[c.capture_id], []).append(c)
    return {loc: estimate_homography(pooled[loc], config) for loc in sorted(pooled)}


@dataclass
class ReconciledManifest:
    manifest: Manifest
    conflicts: list[IdentityConflict]
    counts: list[tuple[str, int, int, int]]  # capture_id, n_rgb_in, n_ir_in, n_out
    notes: list[str] = field(default_factory=list)


def reconcile_manifest(
    manifest: Manifest,
    homographies: Mapping[str, Homography | np.ndarray],
    dedup_iou: float = 0.5,
    overrides: Mapping[str, Homography | np.ndarray] | None = None,
) -> ReconciledManifest:
    """Reconcile every capture that has both an RGB and an IR source frame.

    ``homographies`` is keyed by location, ``overrides`` by capture_id.
    Compressed variants (frames with a qp) sharing a capture and modality
    with a source frame receive the same reconciled annotations, with ids
    suffixed ``#q<qp>`` to stay unique.
    """
    overrides = overrides or {}
    by_capture: dict[str, dict[str, FrameRecord]] = {}
    for f in manifest.frames:
        if f.qp is None:
            slot = by_capture.setdefault(f.capture_id, {})
            if f.modality in slot:
                raise ManifestError(f"capture {f.capture_id!r} has two uncompressed {f.modality} frames")
            slot[f.modality] = f

    new_ann: dict[tuple[str, str], tuple[FaceAnnotation, ...]] = {}
    conflicts, counts, notes = [], [], []
    for cap, slot in by_capture.items():
        rgb, ir = slot.get("rgb"), slot.get("ir")
        if rgb is None or ir is None:
            only = rgb or ir
            notes.append(f"capture {cap!r} has only a {only.modality} frame; annotations tagged, not merged")
            new_ann[(cap, only.modality)] = tuple(replace(a, source="reconciled") for a in only.annotations)
            continue
        H = overrides.get(cap)
        if H is None:
            H = homographies.get(rgb.location)
        if H is None:
            raise ManifestError(f"no homography for location {rgb.location!r} (capture {cap!r})")
        res = reconcile_capture(rgb.annotations, ir.annotations, H, dedup_iou, capture_id=cap)
        new_ann[(cap, "rgb")] = tuple(res.rgb)
        new_ann[(cap, "ir")] = tuple(res.ir)
        conflicts.extend(res.conflicts)
        counts.append((cap, len(rgb.annotations), len(ir.annotations), len(res.ir)))

    frames = []
    for f in manifest.frames:
        anns = new_ann.get((f.capture_id, f.modality))
        if anns is None:
            frames.append(f)
            continue
        if f.qp is not None:
            anns = tuple(replace(a, annotation_id=f"{a.annotation_id}#q{f.qp}") for a in anns)
        frames.append(replace(f, annotations=anns))
    return ReconciledManifest(Manifest(frames), conflicts, counts, notes)


# --------------------------------------------------------------------------
# file formats


def load_correspondences(path) -> list[Correspondence]:
    out = []
    for lineno, obj in _iter_jsonl(path):
        try:
            c = Correspondence(
                capture_id=str(obj["capture_id"]),
                src=(float(obj["src"][0]), float(obj["src"][1])),
                dst=(float(obj["dst"][0]), float(obj["dst"][1])),
                confidence=None if obj.get("confidence") is None else float(obj["confidence"]),
            )
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            raise ManifestError(f"malformed correspondence ({exc!r})", line=lineno, path=str(path)) from None
        if not all(math.isfinite(v) for v in (*c.src, *c.dst)):
            raise ManifestError("non-finite correspondence coordinates", line=lineno, path=str(path))
        out.append(c)
    return out


def correspondences_to_jsonl(correspondences: Iterable[Correspondence]) -> str:
    return dumps_jsonl(
        {"capture_id": c.capture_id, "src": list(c.src), "dst": list(c.dst), "confidence": c.confidence}
        for c in correspondences
    )


def write_correspondences(path, correspondences: Iterable[Correspondence]) -> None:
    Path(path).write_text(correspondences_to_jsonl(correspondences), encoding="utf-8")


def homographies_to_json(homographies: Mapping[str, Homography]) -> str:
    return json.dumps([h.to_dict(loc) for loc, h in sorted(homographies.items())], indent=2) + "\n"


def load_homographies(path) -> dict[str, Homography]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if isinstance(data, dict):
        data = [data]
    return {d["location"]: Homography.from_dict(d) for d in data}
