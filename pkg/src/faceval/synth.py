"""Synthetic datasets with known ground truth.

Every generator is driven by one integer seed.  Random streams are derived
per capture, per frame or per face from that seed and a stable key, so the
output does not depend on generation order.
"""

from __future__ import annotations

import fnmatch
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .balance import BalanceConfig, SubsetSpec
from .dataset import (
    DEFAULT_POSE_EDGES,
    ILLUMINATIONS,
    LOCATIONS,
    MODALITIES,
    DetectionRecord,
    FaceAnnotation,
    FrameRecord,
    Manifest,
    Pose,
    check_edges,
    detection_to_dict,
    dumps_jsonl,
    histogram_distance,
    histogram_from_counts,
    manifest_to_jsonl,
    pose_bin_index,
    pose_counts,
)
from .detection import iou, iou_matrix
from .reconcile import Correspondence, correspondences_to_jsonl, project, warp_box

log = logging.getLogger(__name__)


class SynthConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__(f"{field_name}: {message}")


def _prob(name, v):
    if not 0.0 <= v <= 1.0:
        raise SynthConfigError(name, f"probability {v} outside [0, 1]")


@dataclass(frozen=True)
class DetectorModel:
    qps: tuple[int, ...] = (18, 24, 30, 36, 43, 50)
    miss: tuple[float, ...] = (0.05, 0.07, 0.10, 0.15, 0.25, 0.40)
    jitter_px: tuple[float, ...] = (1.0, 1.5, 2.0, 3.0, 4.0, 6.0)
    fp_per_frame: tuple[float, ...] = (0.05, 0.06, 0.08, 0.10, 0.15, 0.20)
    confidence_sd: float = 0.05
    # extra miss probability for faces human annotators also missed
    hidden_miss: float = 0.8
    # (min |yaw| in degrees, extra miss probability), ascending
    pose_miss: tuple[tuple[float, float], ...] = ()

    def validate(self, prefix="detector"):
        n = len(self.qps)
        for name in ("miss", "jitter_px", "fp_per_frame"):
            if len(getattr(self, name)) != n:
                raise SynthConfigError(f"{prefix}.{name}", f"needs one value per qp ({n})")
        if list(self.qps) != sorted(set(self.qps)) or not all(0 <= q <= 51 for q in self.qps):
            raise SynthConfigError(f"{prefix}.qps", "must be strictly increasing values in [0, 51]")
        for i, p in enumerate(self.miss):
            _prob(f"{prefix}.miss[{i}]", p)
        if any(b < a for a, b in zip(self.miss, self.miss[1:])):
            raise SynthConfigError(f"{prefix}.miss", "must be nondecreasing in qp")
        if any(b < a for a, b in zip(self.jitter_px, self.jitter_px[1:])) or min(self.jitter_px) < 0:
            raise SynthConfigError(f"{prefix}.jitter_px", "must be nonnegative and nondecreasing in qp")
        if any(b < a for a, b in zip(self.fp_per_frame, self.fp_per_frame[1:])) or min(self.fp_per_frame) < 0:
            raise SynthConfigError(f"{prefix}.fp_per_frame", "must be nonnegative and nondecreasing in qp")
        _prob(f"{prefix}.hidden_miss", self.hidden_miss)
        for i, (_, p) in enumerate(self.pose_miss):
            _prob(f"{prefix}.pose_miss[{i}]", p)
        if self.confidence_sd < 0:
            raise SynthConfigError(f"{prefix}.confidence_sd", "must be nonnegative")

    def index(self, qp: int) -> int:
        try:
            return self.qps.index(qp)
        except ValueError:
            raise ValueError(f"qp {qp} not in detector model table {list(self.qps)}") from None

    def pose_penalty(self, yaw: float) -> float:
        p = 0.0
        for lo, prob in self.pose_miss:
            if abs(yaw) >= lo:
                p = prob
        return p


@dataclass(frozen=True)
class EmbeddingModel:
    dim: int = 128
    noise_sd: float = 0.05

    def validate(self, prefix="embedding"):
        if self.dim < 8:
            raise SynthConfigError(f"{prefix}.dim", "must be at least 8")
        if self.noise_sd < 0:
            raise SynthConfigError(f"{prefix}.noise_sd", "must be nonnegative")


def _default_pose():
    return {
        "yaw": {"means": [0.0, -70.0, 70.0], "sds": [15.0, 10.0, 10.0], "weights": [0.7, 0.15, 0.15]},
        "pitch": {"means": [0.0], "sds": [10.0], "weights": [1.0]},
        "roll": {"means": [0.0], "sds": [8.0], "weights": [1.0]},
    }


def _default_homographies():
    # RGB -> IR, row-major; translation plus slight scale/rotation/projective terms
    return {
        "console": [1.01, 0.004, 12.0, -0.003, 1.008, -7.0, 2e-6, -1e-6, 1.0],
        "rearview": [0.995, -0.006, -9.0, 0.005, 0.992, 5.0, -1e-6, 2e-6, 1.0],
        "wheel": [1.004, 0.002, 6.0, -0.002, 1.006, 10.0, 1e-6, 1e-6, 1.0],
    }


@dataclass(frozen=True)
class SynthConfig:
    n_identities: int = 10
    frames_per_cell: int = 20
    occupants: int = 4
    width: int = 640
    height: int = 480
    # "location/illumination" -> multiplier on frames_per_cell
    cell_multipliers: Mapping[str, float] = field(default_factory=dict)
    # per-identity probability of joining a capture round
    identity_presence: tuple[float, ...] | None = None
    pose: Mapping[str, Mapping[str, Sequence[float]]] = field(default_factory=_default_pose)
    homographies: Mapping[str, Sequence[float]] = field(default_factory=_default_homographies)
    # glob over "location/modality/illumination" -> human drop probability
    drop: Mapping[str, float] = field(default_factory=lambda: {"*/rgb/indoor": 0.75})
    correspondences_per_capture: int = 12
    outlier_fraction: float = 0.3
    correspondence_noise_px: float = 0.5
    detector: DetectorModel = field(default_factory=DetectorModel)
    embedding: EmbeddingModel = field(default_factory=EmbeddingModel)
    seed: int = 0

    def validate(self) -> "SynthConfig":
        if self.n_identities < 2:
            raise SynthConfigError("n_identities", "need at least 2 identities")
        if self.frames_per_cell < 1:
            raise SynthConfigError("frames_per_cell", "must be at least 1")
        if self.occupants < 1:
            raise SynthConfigError("occupants", "must be at least 1")
        if self.width * 1.0 / self.occupants < 120 or self.height < 160:
            raise SynthConfigError("width", "frame too small for the requested occupants")
        for key, mult in self.cell_multipliers.items():
            loc, _, ill = key.partition("/")
            if loc not in LOCATIONS or ill not in ILLUMINATIONS:
                raise SynthConfigError(f"cell_multipliers.{key}", "key must be 'location/illumination'")
            if mult < 0:
                raise SynthConfigError(f"cell_multipliers.{key}", "must be nonnegative")
        if self.identity_presence is not None:
            if len(self.identity_presence) != self.n_identities:
                raise SynthConfigError("identity_presence", "needs one value per identity")
            for i, p in enumerate(self.identity_presence):
                _prob(f"identity_presence[{i}]", p)
        for angle in ("yaw", "pitch", "roll"):
            spec = self.pose.get(angle)
            if spec is None:
                raise SynthConfigError(f"pose.{angle}", "missing")
            n = len(spec["means"])
            if n == 0 or len(spec["sds"]) != n or len(spec["weights"]) != n:
                raise SynthConfigError(f"pose.{angle}", "means, sds and weights must have equal nonzero length")
            if min(spec["weights"]) < 0 or sum(spec["weights"]) <= 0:
                raise SynthConfigError(f"pose.{angle}.weights", "must be nonnegative with positive sum")
        for loc in LOCATIONS:
            h = self.homographies.get(loc)
            if h is None or len(h) != 9:
                raise SynthConfigError(f"homographies.{loc}", "needs 9 row-major entries")
            if abs(np.linalg.det(np.reshape(h, (3, 3)))) < 1e-12:
                raise SynthConfigError(f"homographies.{loc}", "singular")
        for pattern, p in self.drop.items():
            _prob(f"drop.{pattern}", p)
        _prob("outlier_fraction", self.outlier_fraction)
        if self.correspondences_per_capture < 0:
            raise SynthConfigError("correspondences_per_capture", "must be nonnegative")
        if self.correspondence_noise_px < 0:
            raise SynthConfigError("correspondence_noise_px", "must be nonnegative")
        self.detector.validate()
        self.embedding.validate()
        return self

    def drop_probability(self, location: str, modality: str, illumination: str) -> float:
        label = f"{location}/{modality}/{illumination}"
        p = 0.0
        for pattern, prob in self.drop.items():
            if fnmatch.fnmatchcase(label, pattern):
                p = prob
        return p

    def homography(self, location: str) -> np.ndarray:
        H = np.asarray(self.homographies[location], dtype=np.float64).reshape(3, 3)
        return H / H[2, 2]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cell_multipliers"] = dict(self.cell_multipliers)
        d["pose"] = {k: {kk: list(vv) for kk, vv in v.items()} for k, v in self.pose.items()}
        d["homographies"] = {k: list(v) for k, v in self.homographies.items()}
        d["drop"] = dict(self.drop)
        return json.loads(json.dumps(d))

    @classmethod
    def from_dict(cls, d: Mapping) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise SynthConfigError(sorted(unknown)[0], "unknown field")
        kw = dict(d)
        try:
            if "detector" in kw:
                det = dict(kw["detector"])
                bad = set(det) - {f.name for f in fields(DetectorModel)}
                if bad:
                    raise SynthConfigError(f"detector.{sorted(bad)[0]}", "unknown field")
                for key in ("qps", "miss", "jitter_px", "fp_per_frame"):
                    if key in det:
                        det[key] = tuple(det[key])
                if "pose_miss" in det:
                    det["pose_miss"] = tuple(tuple(p) for p in det["pose_miss"])
                kw["detector"] = DetectorModel(**det)
            if "embedding" in kw:
                emb = dict(kw["embedding"])
                bad = set(emb) - {f.name for f in fields(EmbeddingModel)}
                if bad:
                    raise SynthConfigError(f"embedding.{sorted(bad)[0]}", "unknown field")
                kw["embedding"] = EmbeddingModel(**emb)
            if kw.get("identity_presence") is not None:
                kw["identity_presence"] = tuple(kw["identity_presence"])
        except TypeError as exc:
            raise SynthConfigError("config", str(exc)) from None
        return cls(**kw).validate()


# --------------------------------------------------------------------------
# seeded streams


def _key_int(key: str) -> int:
    return int.from_bytes(hashlib.blake2b(key.encode("utf-8"), digest_size=8).digest(), "little")


def _rng(seed: int, stream: str, key: str = "") -> np.random.Generator:
    return np.random.default_rng([seed & 0xFFFFFFFF, _key_int(stream), _key_int(key)])


def _sample_angle(rng: np.random.Generator, spec) -> float:
    w = np.asarray(spec["weights"], dtype=np.float64)
    j = rng.choice(len(w), p=w / w.sum())
    return float(np.clip(rng.normal(spec["means"][j], spec["sds"][j]), -179.0, 179.0))


def _landmarks(box, yaw):
    x0, y0, x1, y1 = box
    w, h = x1 - x0, y1 - y0
    shift = 0.18 * w * math.sin(math.radians(yaw))
    return (
        (x0 + 0.32 * w, y0 + 0.40 * h),
        (x0 + 0.68 * w, y0 + 0.40 * h),
        (x0 + 0.50 * w + shift, y0 + 0.60 * h),
        (x0 + 0.36 * w, y0 + 0.80 * h),
        (x0 + 0.64 * w, y0 + 0.80 * h),
    )


@dataclass
class SynthData:
    config: SynthConfig
    true_manifest: Manifest
    human_manifest: Manifest
    correspondences: list[Correspondence]
    homographies: dict[str, np.ndarray]
    # truth annotation ids left out of the human set
    hidden: frozenset[str]

    def truth_sidecar(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "homographies": {loc: [float(v) for v in H.ravel()] for loc, H in sorted(self.homographies.items())},
            "n_frames": len(self.true_manifest),
            "n_annotations": self.true_manifest.n_annotations,
            "n_human_annotations": self.human_manifest.n_annotations,
            "n_correspondences": len(self.correspondences),
        }


def generate_truth(config: SynthConfig = SynthConfig()) -> SynthData:
    """True manifest, human manifest with dropped faces, correspondences and homographies."""
    config.validate()
    identities = [f"id{i:03d}" for i in range(config.n_identities)]
    presence = config.identity_presence or (1.0,) * config.n_identities
    W, Hh = config.width, config.height
    homs = {loc: config.homography(loc) for loc in LOCATIONS}
    true_frames, human_frames, corr = [], [], []
    hidden = set()
    for loc in LOCATIONS:
        H = homs[loc]
        for ill in ILLUMINATIONS:
            mult = config.cell_multipliers.get(f"{loc}/{ill}", 1.0)
            rounds = int(round(config.frames_per_cell * mult))
            for r in range(rounds):
                rr = _rng(config.seed, "round", f"{loc}/{ill}/{r}")
                members = [i for i, p in enumerate(presence) if rr.random() < p]
                members = [members[i] for i in rr.permutation(len(members))]
                for c in range(0, len(members), config.occupants):
                    chunk = members[c:c + config.occupants]
                    cap = f"{loc}-{ill}-r{r:03d}-c{c // config.occupants}"
                    rng = _rng(config.seed, "capture", cap)
                    rgb_anns, ir_anns, rgb_h, ir_h = [], [], [], []
                    slot_w = W / len(chunk)
                    p_drop = {m: config.drop_probability(loc, m, ill) for m in MODALITIES}
                    for j, ident_idx in enumerate(chunk):
                        size = rng.uniform(60.0, 90.0)
                        cx = (j + 0.5) * slot_w + rng.uniform(-10, 10)
                        cy = 0.45 * Hh + rng.uniform(-20, 20)
                        box = (cx - size / 2, cy - 0.6 * size, cx + size / 2, cy + 0.6 * size)
                        pose = Pose(*(_sample_angle(rng, config.pose[a]) for a in ("yaw", "pitch", "roll")))
                        lms = _landmarks(box, pose.yaw)
                        ident = identities[ident_idx]
                        rgb = FaceAnnotation(f"{cap}-p{j}-rgb", ident, tuple(map(float, box)), lms, pose)
                        ir = FaceAnnotation(
                            f"{cap}-p{j}-ir", ident, warp_box(H, box),
                            tuple(tuple(map(float, p)) for p in project(H, lms)), pose)
                        rgb_anns.append(rgb)
                        ir_anns.append(ir)
                        for ann, kept in ((rgb, rgb_h), (ir, ir_h)):
                            mod = "rgb" if ann is rgb else "ir"
                            if rng.random() < p_drop[mod]:
                                hidden.add(ann.annotation_id)
                            else:
                                kept.append(ann)
                    for mod, anns, kept in (("rgb", rgb_anns, rgb_h), ("ir", ir_anns, ir_h)):
                        frame = FrameRecord(f"{cap}-{mod}", cap, loc, mod, ill, W, Hh, tuple(anns))
                        true_frames.append(frame)
                        human_frames.append(replace(frame, annotations=tuple(kept)))
                    corr.extend(_correspondences(config, cap, H, rng))
    return SynthData(config, Manifest(true_frames), Manifest(human_frames), corr, homs, frozenset(hidden))


def _correspondences(config: SynthConfig, cap: str, H: np.ndarray, rng: np.random.Generator):
    n = config.correspondences_per_capture
    if n == 0:
        return []
    W, Hh = config.width, config.height
    src = np.column_stack([rng.uniform(0, W, n), rng.uniform(0, Hh, n)])
    dst = project(H, src) + rng.normal(0.0, config.correspondence_noise_px, (n, 2))
    outlier = rng.random(n) < config.outlier_fraction
    dst[outlier] = np.column_stack([rng.uniform(0, W, outlier.sum()), rng.uniform(0, Hh, outlier.sum())])
    conf = np.where(outlier, rng.uniform(0.2, 0.7, n), rng.uniform(0.5, 1.0, n))
    return [
        Correspondence(cap, (float(s[0]), float(s[1])), (float(d[0]), float(d[1])), round(float(c), 4))
        for s, d, c in zip(src, dst, conf)
    ]


# --------------------------------------------------------------------------
# detector


def simulate_detector(
    true_manifest: Manifest,
    detector: DetectorModel,
    qp: int,
    seed: int = 0,
    hidden: Iterable[str] = (),
) -> list[DetectionRecord]:
    """Detections for every true face at one QP.

    Each face and each false-positive slot draws its random numbers once,
    independent of qp, so faces missed at a low qp stay missed at higher
    qps and jitter only grows: degradation is monotone by construction.
    """
    qi = detector.index(qp)
    miss_q, sd, fp_rate = detector.miss[qi], detector.jitter_px[qi], detector.fp_per_frame[qi]
    hidden = set(hidden)
    n_fp_slots = 3
    out: list[DetectionRecord] = []
    for frame in true_manifest.frames:
        rng = _rng(seed, "detector", frame.frame_id)
        truth_boxes = [a.bbox for a in frame.annotations]
        for j, ann in enumerate(frame.annotations):
            u = rng.random()
            z = rng.normal(size=4)
            zl = rng.normal(size=(5, 2))
            zc = rng.normal()
            p_keep = (1.0 - miss_q) * (1.0 - detector.pose_penalty(ann.pose.yaw))
            if ann.annotation_id in hidden:
                p_keep *= 1.0 - detector.hidden_miss
            if u >= p_keep:
                continue
            x0, y0, x1, y1 = (np.asarray(ann.bbox) + sd * z).tolist()
            if x1 - x0 < 1 or y1 - y0 < 1:
                continue
            box = (x0, y0, x1, y1)
            conf = float(np.clip(iou(box, ann.bbox) + detector.confidence_sd * zc, 0.0, 1.0))
            lms = tuple(tuple(map(float, p)) for p in np.asarray(ann.landmarks) + sd * zl)
            out.append(DetectionRecord(f"q{qp}-{frame.frame_id}-d{j}", frame.frame_id, box, conf, lms, qp))
        for k in range(n_fp_slots):
            u = rng.random()
            size = rng.uniform(30.0, 90.0)
            cx, cy = rng.uniform(size, frame.width - size), rng.uniform(size, frame.height - size)
            zc = rng.normal()
            if u >= min(1.0, fp_rate / n_fp_slots):
                continue
            box = (cx - size / 2, cy - size / 2, cx + size / 2, cy + size / 2)
            overlap = float(iou_matrix([box], truth_boxes).max()) if truth_boxes else 0.0
            conf = float(np.clip(overlap + detector.confidence_sd * zc, 0.0, 1.0))
            lms = _landmarks(box, 0.0)
            out.append(DetectionRecord(f"q{qp}-{frame.frame_id}-f{k}", frame.frame_id, box, conf, lms, qp))
    return out


# --------------------------------------------------------------------------
# embeddings


def identity_centroids(identities: Sequence[str], model: EmbeddingModel, seed: int = 0) -> dict[str, np.ndarray]:
    out = {}
    for ident in identities:
        v = _rng(seed, "centroid", ident).normal(size=model.dim)
        out[ident] = v / np.linalg.norm(v)
    return out


def face_embedding(centroid: np.ndarray, face_key: str, model: EmbeddingModel, seed: int = 0) -> np.ndarray:
    """Centroid plus tangent-space Gaussian noise, renormalized."""
    noise = _rng(seed, "face", face_key).normal(0.0, model.noise_sd, size=len(centroid))
    noise -= noise.dot(centroid) * centroid
    v = centroid + noise
    return v / np.linalg.norm(v)


def simulate_embeddings(
    subjects: Iterable[tuple[str, str, Sequence[float]]],
    true_manifest: Manifest,
    model: EmbeddingModel,
    seed: int = 0,
    min_iou: float = 0.3,
) -> dict[str, np.ndarray]:
    """Embeddings for (subject_ref, frame_id, bbox) triples.

    Each subject is resolved to the true face it overlaps most in its frame,
    so an annotation and a detection of the same face get the same vector.
    Subjects covering no true face get a random unit vector.
    """
    idents = sorted({a.identity_id for _, a in true_manifest.annotations()})
    centroids = identity_centroids(idents, model, seed)
    out: dict[str, np.ndarray] = {}
    for ref, frame_id, bbox in subjects:
        frame = true_manifest.frame(frame_id)
        face = None
        if frame.annotations:
            ious = iou_matrix([bbox], [a.bbox for a in frame.annotations])[0]
            j = int(np.argmax(ious))
            if ious[j] >= min_iou:
                face = frame.annotations[j]
        if face is None:
            v = _rng(seed, "clutter", ref).normal(size=model.dim)
            out[ref] = v / np.linalg.norm(v)
        else:
            out[ref] = face_embedding(centroids[face.identity_id], face.annotation_id, model, seed)
    return out


def annotation_embeddings(manifest: Manifest, true_manifest: Manifest, model: EmbeddingModel, seed: int = 0):
    return simulate_embeddings(((a.annotation_id, f.frame_id, a.bbox) for f, a in manifest.annotations()),
                               true_manifest, model, seed)


def reconciled_aliases(true_manifest: Manifest, emb: dict) -> dict:
    """Embeddings under the ids the reconciler gives transferred faces.

    A face copied from the IR frame into the RGB frame is named
    ``<ir id>@rgb``; it shows the same face as the RGB truth annotation.
    """
    other = {"rgb": "ir", "ir": "rgb"}
    out = {}
    for f, a in true_manifest.annotations():
        stem, _, mod = a.annotation_id.rpartition("-")
        if mod == f.modality and a.annotation_id in emb:
            out[f"{stem}-{other[mod]}@{mod}"] = emb[a.annotation_id]
    return out


def detection_embeddings(detections: Iterable[DetectionRecord], true_manifest: Manifest,
                         model: EmbeddingModel, seed: int = 0):
    return simulate_embeddings(((d.detection_id, d.frame_id, d.bbox) for d in detections),
                               true_manifest, model, seed)


# --------------------------------------------------------------------------
# pose negative control


def altered_pose_manifest(
    manifest: Manifest,
    bin_edges=DEFAULT_POSE_EDGES,
    span: tuple[float, float] = (-90.0, 90.0),
    per_bin: int | None = None,
    seed: int = 0,
) -> SubsetSpec:
    """Subset with an equal number of faces in every yaw bin inside ``span``.

    ``per_bin`` defaults to the smallest nonzero bin count.  Bins holding
    fewer faces than ``per_bin`` are filled as far as possible and reported in
    the returned subset's warnings.  Faces outside ``span`` are not selected.
    """
    edges = check_edges(bin_edges)
    lo_idx = int(pose_bin_index([span[0]], edges)[0])
    hi_idx = int(pose_bin_index([np.nextafter(span[1], -np.inf)], edges)[0])
    bins: dict[int, list[tuple[str, FaceAnnotation]]] = {b: [] for b in range(lo_idx, hi_idx + 1)}
    for frame, ann in manifest.annotations():
        b = int(pose_bin_index([ann.pose.yaw], edges)[0])
        if b in bins:
            bins[b].append((frame.frame_id, ann))
    sizes = {b: len(v) for b, v in bins.items()}
    nonzero = [s for s in sizes.values() if s > 0]
    if not nonzero:
        raise ValueError("no faces inside the requested yaw span")
    quota = per_bin if per_bin is not None else min(nonzero)
    rng = _rng(seed, "altered-pose")
    warnings, selected, chosen_anns = [], [], []
    for b, members in bins.items():
        if len(members) < quota:
            warnings.append(f"yaw bin [{edges[b]:g}, {edges[b + 1]:g}) has {len(members)} faces, "
                            f"fewer than {quota}; partially filled")
        take = rng.permutation(len(members))[:quota]
        for t in sorted(take):
            fid, ann = members[t]
            selected.append((fid, ann.annotation_id))
            chosen_anns.append(ann)
    for w in warnings:
        log.warning(w)
    counts = pose_counts([tuple(a.pose) for a in chosen_anns], edges)
    hist = histogram_from_counts(counts, edges)
    ref = histogram_from_counts(pose_counts([tuple(a.pose) for _, a in manifest.annotations()], edges), edges)
    cfg = BalanceConfig(k=max(quota, 1), pose_bin_edges=tuple(float(e) for e in edges), rng_seed=seed,
                        pose_mode="uniform_bins")
    return SubsetSpec("altered-pose", quota, tuple(sorted(selected)), hist,
                      histogram_distance(hist, ref), cfg, tuple(warnings))


# --------------------------------------------------------------------------
# file set


def synth_artifacts(config: SynthConfig = SynthConfig()) -> dict[str, str]:
    """File name -> contents for the full synthetic file set."""
    data = generate_truth(config)
    dets = []
    for qp in config.detector.qps:
        dets.extend(simulate_detector(data.true_manifest, config.detector, qp, config.seed, data.hidden))
    emb = annotation_embeddings(data.true_manifest, data.true_manifest, config.embedding, config.seed)
    emb.update(reconciled_aliases(data.true_manifest, emb))
    emb.update(detection_embeddings(dets, data.true_manifest, config.embedding, config.seed))
    emb_rows = ({"subject_ref": k, "vector": [round(float(x), 8) for x in v / np.linalg.norm(v)]}
                for k, v in emb.items())
    return {
        "true_manifest.jsonl": manifest_to_jsonl(data.true_manifest),
        "human_manifest.jsonl": manifest_to_jsonl(data.human_manifest),
        "correspondences.jsonl": correspondences_to_jsonl(data.correspondences),
        "detections.jsonl": dumps_jsonl(detection_to_dict(d) for d in dets),
        "embeddings.jsonl": dumps_jsonl(emb_rows),
        "truth.json": json.dumps(data.truth_sidecar(), indent=2, sort_keys=True) + "\n",
    }
