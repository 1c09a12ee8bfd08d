"""Domain records, manifest I/O, scenario grouping and pose histograms.

A manifest is a JSON Lines file with one frame object per line.  Detections
and embeddings are separate JSON Lines files keyed back to frames and
annotations; embeddings may also be stored in the compact ``FEV1`` binary
sidecar.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Mapping, NamedTuple, Sequence

import numpy as np

LOCATIONS = ("console", "rearview", "wheel")
MODALITIES = ("rgb", "ir")
ILLUMINATIONS = ("indoor", "outdoor")
SOURCES = ("human", "reconciled")
AXES = ("illumination", "modality", "location", "full_cell")

# viewer's perspective
LANDMARK_NAMES = ("left_eye", "right_eye", "nose", "left_mouth", "right_mouth")

DEFAULT_POSE_EDGES = np.linspace(-180.0, 180.0, 37)


class ManifestError(ValueError):
    """Raised for malformed or invariant-violating input records."""

    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"{line}: "
        elif where:
            where += " "
        super().__init__(where + message)


class DuplicateIdError(ManifestError):
    pass


class Pose(NamedTuple):
    yaw: float
    pitch: float
    roll: float


@dataclass(frozen=True)
class FaceAnnotation:
    annotation_id: str
    identity_id: str
    bbox: tuple[float, float, float, float]
    landmarks: tuple[tuple[float, float], ...]
    pose: Pose
    source: str = "human"

    def validate(self) -> None:
        x0, y0, x1, y1 = self.bbox
        if not all(math.isfinite(v) for v in self.bbox):
            raise ManifestError(f"annotation {self.annotation_id!r}: non-finite bbox")
        if not (x0 < x1 and y0 < y1):
            raise ManifestError(
                f"annotation {self.annotation_id!r}: bbox {list(self.bbox)} needs x_min<x_max and y_min<y_max"
            )
        if len(self.landmarks) != 5 or any(len(p) != 2 for p in self.landmarks):
            raise ManifestError(f"annotation {self.annotation_id!r}: expected 5 (x, y) landmarks")
        for name, angle in zip(Pose._fields, self.pose):
            if not -180.0 <= angle <= 180.0:
                raise ManifestError(f"annotation {self.annotation_id!r}: {name}={angle} outside [-180, 180]")
        if self.source not in SOURCES:
            raise ManifestError(f"annotation {self.annotation_id!r}: unknown source {self.source!r}")

    @property
    def area(self) -> float:
        x0, y0, x1, y1 = self.bbox
        return (x1 - x0) * (y1 - y0)


@dataclass(frozen=True)
class FrameRecord:
    frame_id: str
    capture_id: str
    location: str
    modality: str
    illumination: str
    width: int
    height: int
    annotations: tuple[FaceAnnotation, ...] = ()
    qp: int | None = None

    @property
    def scenario(self) -> "ScenarioKey":
        return ScenarioKey(self.location, self.modality, self.illumination)

    def validate(self) -> None:
        fid = self.frame_id
        if self.location not in LOCATIONS:
            raise ManifestError(f"frame {fid!r}: unknown location {self.location!r}")
        if self.modality not in MODALITIES:
            raise ManifestError(f"frame {fid!r}: unknown modality {self.modality!r}")
        if self.illumination not in ILLUMINATIONS:
            raise ManifestError(f"frame {fid!r}: unknown illumination {self.illumination!r}")
        if not (self.width > 0 and self.height > 0):
            raise ManifestError(f"frame {fid!r}: width and height must be positive")
        if self.qp is not None and not 0 <= self.qp <= 51:
            raise ManifestError(f"frame {fid!r}: qp {self.qp} outside [0, 51]")
        for ann in self.annotations:
            ann.validate()


class ScenarioKey(NamedTuple):
    location: str
    modality: str
    illumination: str

    @property
    def label(self) -> str:
        return "/".join(self)


ALL_CELLS = tuple(
    ScenarioKey(loc, mod, ill) for loc in LOCATIONS for mod in MODALITIES for ill in ILLUMINATIONS
)


@dataclass(frozen=True)
class DetectionRecord:
    detection_id: str
    frame_id: str
    bbox: tuple[float, float, float, float]
    confidence: float
    landmarks: tuple[tuple[float, float], ...] = ()
    qp: int | None = None

    def validate(self) -> None:
        x0, y0, x1, y1 = self.bbox
        if not (x0 < x1 and y0 < y1):
            raise ManifestError(f"detection {self.detection_id!r}: degenerate bbox {list(self.bbox)}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ManifestError(f"detection {self.detection_id!r}: confidence {self.confidence} outside [0, 1]")
        if self.landmarks and len(self.landmarks) != 5:
            raise ManifestError(f"detection {self.detection_id!r}: expected 5 landmarks")


class Manifest:
    """An ordered, validated collection of frames with id lookups."""

    def __init__(self, frames: Iterable[FrameRecord]):
        self.frames: tuple[FrameRecord, ...] = tuple(frames)
        self._frames: dict[str, FrameRecord] = {}
        self._annotations: dict[str, tuple[FrameRecord, FaceAnnotation]] = {}
        captures: dict[str, tuple[str, str]] = {}
        for frame in self.frames:
            frame.validate()
            if frame.frame_id in self._frames:
                raise DuplicateIdError(f"duplicate frame_id {frame.frame_id!r}")
            self._frames[frame.frame_id] = frame
            scene = (frame.location, frame.illumination)
            if captures.setdefault(frame.capture_id, scene) != scene:
                raise ManifestError(
                    f"frame {frame.frame_id!r}: capture {frame.capture_id!r} disagrees on location/illumination"
                )
            for ann in frame.annotations:
                if ann.annotation_id in self._annotations:
                    raise DuplicateIdError(f"duplicate annotation_id {ann.annotation_id!r}")
                self._annotations[ann.annotation_id] = (frame, ann)

    def __len__(self) -> int:
        return len(self.frames)

    def __iter__(self) -> Iterator[FrameRecord]:
        return iter(self.frames)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Manifest) and self.frames == other.frames

    def __repr__(self) -> str:
        return f"Manifest({len(self.frames)} frames, {len(self._annotations)} annotations)"

    def frame(self, frame_id: str) -> FrameRecord:
        return self._frames[frame_id]

    def has_frame(self, frame_id: str) -> bool:
        return frame_id in self._frames

    def annotation(self, annotation_id: str) -> tuple[FrameRecord, FaceAnnotation]:
        return self._annotations[annotation_id]

    def annotations(self) -> Iterator[tuple[FrameRecord, FaceAnnotation]]:
        for frame in self.frames:
            for ann in frame.annotations:
                yield frame, ann

    @property
    def n_annotations(self) -> int:
        return len(self._annotations)


# --------------------------------------------------------------------------
# (de)serialization


def _pair(p) -> tuple[float, float]:
    return (float(p[0]), float(p[1]))


def annotation_from_dict(d: Mapping) -> FaceAnnotation:
    pose = d["pose"]
    return FaceAnnotation(
        annotation_id=str(d["annotation_id"]),
        identity_id=str(d["identity_id"]),
        bbox=tuple(float(v) for v in d["bbox"]),
        landmarks=tuple(_pair(p) for p in d["landmarks"]),
        pose=Pose(float(pose["yaw"]), float(pose["pitch"]), float(pose["roll"])),
        source=d.get("source", "human"),
    )


def annotation_to_dict(a: FaceAnnotation) -> dict:
    return {
        "annotation_id": a.annotation_id,
        "identity_id": a.identity_id,
        "bbox": list(a.bbox),
        "landmarks": [list(p) for p in a.landmarks],
        "pose": a.pose._asdict(),
        "source": a.source,
    }


def frame_from_dict(d: Mapping) -> FrameRecord:
    qp = d.get("qp")
    return FrameRecord(
        frame_id=str(d["frame_id"]),
        capture_id=str(d["capture_id"]),
        location=d["location"],
        modality=d["modality"],
        illumination=d["illumination"],
        width=int(d["width"]),
        height=int(d["height"]),
        annotations=tuple(annotation_from_dict(a) for a in d.get("annotations", ())),
        qp=None if qp is None else int(qp),
    )


def frame_to_dict(f: FrameRecord) -> dict:
    return {
        "frame_id": f.frame_id,
        "capture_id": f.capture_id,
        "location": f.location,
        "modality": f.modality,
        "illumination": f.illumination,
        "qp": f.qp,
        "width": f.width,
        "height": f.height,
        "annotations": [annotation_to_dict(a) for a in f.annotations],
    }


def _iter_jsonl(path) -> Iterator[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"invalid JSON: {exc.msg}", line=lineno, path=str(path)) from None
            if not isinstance(obj, dict):
                raise ManifestError("expected a JSON object", line=lineno, path=str(path))
            yield lineno, obj


def dumps_jsonl(rows: Iterable[Mapping]) -> str:
    return "".join(json.dumps(r, sort_keys=False, separators=(",", ":")) + "\n" for r in rows)


def load_manifest(path) -> Manifest:
    """Parse and validate a JSON Lines manifest.

    Errors carry the file path and line number of the offending record.
    """
    frames = []
    seen_frames: set[str] = set()
    seen_anns: set[str] = set()
    for lineno, obj in _iter_jsonl(path):
        try:
            frame = frame_from_dict(obj)
            frame.validate()
        except ManifestError as exc:
            raise type(exc)(str(exc), line=lineno, path=str(path)) from None
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"malformed frame record ({exc!r})", line=lineno, path=str(path)) from None
        if frame.frame_id in seen_frames:
            raise DuplicateIdError(f"duplicate frame_id {frame.frame_id!r}", line=lineno, path=str(path))
        seen_frames.add(frame.frame_id)
        for ann in frame.annotations:
            if ann.annotation_id in seen_anns:
                raise DuplicateIdError(
                    f"duplicate annotation_id {ann.annotation_id!r}", line=lineno, path=str(path)
                )
            seen_anns.add(ann.annotation_id)
        frames.append(frame)
    try:
        return Manifest(frames)
    except ManifestError as exc:
        raise ManifestError(str(exc), path=str(path)) from None


def manifest_to_jsonl(manifest: Manifest | Iterable[FrameRecord]) -> str:
    return dumps_jsonl(frame_to_dict(f) for f in manifest)


def write_manifest(path, manifest: Manifest | Iterable[FrameRecord]) -> None:
    Path(path).write_text(manifest_to_jsonl(manifest), encoding="utf-8")


def detection_from_dict(d: Mapping) -> DetectionRecord:
    qp = d.get("qp")
    return DetectionRecord(
        detection_id=str(d["detection_id"]),
        frame_id=str(d["frame_id"]),
        bbox=tuple(float(v) for v in d["bbox"]),
        confidence=float(d["confidence"]),
        landmarks=tuple(_pair(p) for p in d.get("landmarks") or ()),
        qp=None if qp is None else int(qp),
    )


def detection_to_dict(det: DetectionRecord) -> dict:
    out = {
        "detection_id": det.detection_id,
        "frame_id": det.frame_id,
        "bbox": list(det.bbox),
        "confidence": det.confidence,
        "landmarks": [list(p) for p in det.landmarks],
    }
    if det.qp is not None:
        out["qp"] = det.qp
    return out


def load_detections(path, manifest: Manifest | None = None) -> list[DetectionRecord]:
    """Load detector output; with ``manifest`` every frame_id must resolve."""
    dets = []
    seen: set[str] = set()
    for lineno, obj in _iter_jsonl(path):
        try:
            det = detection_from_dict(obj)
            det.validate()
        except ManifestError as exc:
            raise ManifestError(str(exc), line=lineno, path=str(path)) from None
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"malformed detection record ({exc!r})", line=lineno, path=str(path)) from None
        if det.detection_id in seen:
            raise DuplicateIdError(f"duplicate detection_id {det.detection_id!r}", line=lineno, path=str(path))
        if manifest is not None and not manifest.has_frame(det.frame_id):
            raise ManifestError(f"detection {det.detection_id!r}: unknown frame_id {det.frame_id!r}",
                                line=lineno, path=str(path))
        seen.add(det.detection_id)
        dets.append(det)
    return dets


def write_detections(path, detections: Iterable[DetectionRecord]) -> None:
    Path(path).write_text(dumps_jsonl(detection_to_dict(d) for d in detections), encoding="utf-8")


# --------------------------------------------------------------------------
# embeddings

FEV_MAGIC = b"FEV1"
UNIT_NORM_TOL = 1e-6


def _check_embeddings(ids: Sequence[str], vectors: np.ndarray, path=None) -> None:
    if vectors.ndim != 2:
        raise ManifestError("embeddings must share one dimension", path=path)
    norms = np.linalg.norm(vectors.astype(np.float64), axis=1)
    bad = np.flatnonzero(np.abs(norms - 1.0) > UNIT_NORM_TOL)
    if bad.size:
        i = int(bad[0])
        raise ManifestError(f"embedding {ids[i]!r} has norm {norms[i]:.9f}, expected unit length", path=path)
    if len(set(ids)) != len(ids):
        raise DuplicateIdError("duplicate subject_ref in embeddings", path=path)


def load_embeddings(path) -> dict[str, np.ndarray]:
    """Read embeddings keyed by subject_ref, from JSON Lines or an FEV1 sidecar."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == FEV_MAGIC:
        return _load_fev(path)
    ids: list[str] = []
    rows: list[list[float]] = []
    dim = None
    for lineno, obj in _iter_jsonl(path):
        try:
            ref, vec = str(obj["subject_ref"]), [float(v) for v in obj["vector"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"malformed embedding record ({exc!r})", line=lineno, path=str(path)) from None
        if dim is None:
            dim = len(vec)
        elif len(vec) != dim:
            raise ManifestError(f"embedding {ref!r} has dimension {len(vec)}, expected {dim}",
                                line=lineno, path=str(path))
        ids.append(ref)
        rows.append(vec)
    vectors = np.asarray(rows, dtype=np.float64).reshape(len(rows), dim or 0)
    _check_embeddings(ids, vectors, str(path))
    return dict(zip(ids, vectors))


def _load_fev(path: Path) -> dict[str, np.ndarray]:
    data = path.read_bytes()
    try:
        d, n = struct.unpack_from("<IQ", data, 4)
        pos = 16
        ids, rows = [], []
        for _ in range(n):
            (ln,) = struct.unpack_from("<I", data, pos)
            pos += 4
            if pos + ln + 4 * d > len(data):
                raise struct.error(f"record {len(ids)} runs past the end of the file")
            ids.append(data[pos:pos + ln].decode("utf-8"))
            pos += ln
            rows.append(np.frombuffer(data, dtype="<f4", count=d, offset=pos))
            pos += 4 * d
    except (struct.error, UnicodeDecodeError) as exc:
        raise ManifestError(f"truncated FEV1 file ({exc})", path=str(path)) from None
    if pos != len(data):
        raise ManifestError("trailing bytes after FEV1 records", path=str(path))
    vectors = np.asarray(rows, dtype=np.float64).reshape(n, d)
    _check_embeddings(ids, vectors, str(path))
    return dict(zip(ids, vectors))


def write_embeddings(path, embeddings: Mapping[str, np.ndarray], binary: bool | None = None) -> None:
    """Write embeddings as JSON Lines, or FEV1 when ``binary`` (default: ``.fev`` suffix)."""
    path = Path(path)
    if binary is None:
        binary = path.suffix == ".fev"
    if binary:
        items = list(embeddings.items())
        d = len(items[0][1]) if items else 0
        chunks = [FEV_MAGIC, struct.pack("<IQ", d, len(items))]
        for ref, vec in items:
            raw = ref.encode("utf-8")
            chunks.append(struct.pack("<I", len(raw)))
            chunks.append(raw)
            chunks.append(np.asarray(vec, dtype="<f4").tobytes())
        path.write_bytes(b"".join(chunks))
    else:
        rows = ({"subject_ref": k, "vector": [float(x) for x in v]} for k, v in embeddings.items())
        path.write_text(dumps_jsonl(rows), encoding="utf-8")


# --------------------------------------------------------------------------
# grouping


def group_label(frame: FrameRecord, axis: str) -> str:
    if axis == "full_cell":
        return frame.scenario.label
    if axis in ("illumination", "modality", "location"):
        return getattr(frame, axis)
    raise ValueError(f"unknown grouping axis {axis!r}; expected one of {AXES}")


def axis_labels(axis: str) -> tuple[str, ...]:
    """All possible group labels for ``axis``, in canonical order."""
    return {
        "illumination": ILLUMINATIONS,
        "modality": MODALITIES,
        "location": LOCATIONS,
        "full_cell": tuple(c.label for c in ALL_CELLS),
    }[axis]


def group_by_scenario(frames: Iterable[FrameRecord], axis: str) -> dict[str, list[FrameRecord]]:
    """Partition frames by scenario label; only non-empty groups are returned."""
    groups: dict[str, list[FrameRecord]] = {}
    for frame in frames:
        groups.setdefault(group_label(frame, axis), []).append(frame)
    order = axis_labels(axis)
    return {label: groups[label] for label in order if label in groups}


# --------------------------------------------------------------------------
# pose histograms


@dataclass(frozen=True, eq=False)
class PoseHistogram:
    edges: np.ndarray
    yaw: np.ndarray
    pitch: np.ndarray
    roll: np.ndarray

    def marginals(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.yaw, self.pitch, self.roll

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PoseHistogram):
            return NotImplemented
        return np.array_equal(self.edges, other.edges) and all(
            np.array_equal(a, b) for a, b in zip(self.marginals(), other.marginals())
        )

    def to_dict(self) -> dict:
        return {
            "edges": [float(e) for e in self.edges],
            "yaw": [float(v) for v in self.yaw],
            "pitch": [float(v) for v in self.pitch],
            "roll": [float(v) for v in self.roll],
        }


def check_edges(edges) -> np.ndarray:
    edges = np.asarray(edges, dtype=np.float64)
    if edges.ndim != 1 or edges.size < 2:
        raise ValueError("pose bin edges need at least two values")
    if np.any(np.diff(edges) <= 0):
        raise ValueError("pose bin edges must be strictly increasing")
    if edges[0] > -180.0 or edges[-1] < 180.0:
        raise ValueError("pose bin edges must cover [-180, 180]")
    return edges


def pose_bin_index(angles, edges: np.ndarray) -> np.ndarray:
    """Bin index per angle; a value on an interior edge goes to the higher bin."""
    idx = np.searchsorted(edges, np.asarray(angles, dtype=np.float64), side="right") - 1
    return np.clip(idx, 0, len(edges) - 2)


def pose_counts(poses, edges: np.ndarray) -> np.ndarray:
    """Raw (3, n_bins) counts for an (n, 3) array of yaw/pitch/roll."""
    poses = np.asarray(poses, dtype=np.float64).reshape(-1, 3)
    nb = len(edges) - 1
    idx = pose_bin_index(poses, edges)
    return np.stack([np.bincount(idx[:, j], minlength=nb) for j in range(3)]).astype(np.float64)


def histogram_from_counts(counts: np.ndarray, edges: np.ndarray) -> PoseHistogram:
    totals = counts.sum(axis=1, keepdims=True)
    if np.any(totals <= 0):
        raise ValueError("cannot normalize an empty pose histogram")
    norm = counts / totals
    return PoseHistogram(np.asarray(edges, dtype=np.float64), norm[0], norm[1], norm[2])


def compute_pose_histogram(annotations: Iterable[FaceAnnotation], bin_edges=DEFAULT_POSE_EDGES) -> PoseHistogram:
    edges = check_edges(bin_edges)
    poses = [tuple(a.pose) for a in annotations]
    if not poses:
        raise ValueError("compute_pose_histogram needs at least one annotation")
    return histogram_from_counts(pose_counts(poses, edges), edges)


def histogram_distance(a: PoseHistogram, b: PoseHistogram) -> float:
    """Mean over yaw/pitch/roll of the L1 distance between marginals (range [0, 2])."""
    if a.edges.shape != b.edges.shape or not np.array_equal(a.edges, b.edges):
        raise ValueError("pose histograms have different bin edges")
    return float(np.mean([np.abs(x - y).sum() for x, y in zip(a.marginals(), b.marginals())]))
