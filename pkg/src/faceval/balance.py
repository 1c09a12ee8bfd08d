"""Balanced, pose-preserving evaluation subsets.

Identities are handled one at a time.  For every (identity, scenario cell)
exactly ``k`` annotations are picked, greedily steering the pose histogram
of everything selected so far towards the pose histogram of the full
dataset.  Repeating the procedure with earlier picks masked out yields
non-overlapping subsets measured against the same reference.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .dataset import (
    AXES,
    DEFAULT_POSE_EDGES,
    FaceAnnotation,
    FrameRecord,
    Manifest,
    PoseHistogram,
    axis_labels,
    check_edges,
    group_label,
    histogram_distance,
    histogram_from_counts,
    pose_bin_index,
    pose_counts,
)

log = logging.getLogger(__name__)

POSE_MODES = ("preserve_original", "uniform_bins")


class InfeasibleBalanceError(ValueError):
    pass


@dataclass(frozen=True)
class BalanceConfig:
    cells: str = "full_cell"
    k: int | str = "auto"
    pose_bin_edges: tuple[float, ...] = tuple(float(e) for e in DEFAULT_POSE_EDGES)
    pose_tolerance: float = 0.15
    rng_seed: int = 0
    pose_mode: str = "preserve_original"

    def __post_init__(self):
        if self.cells not in AXES:
            raise ValueError(f"cells must be one of {AXES}, got {self.cells!r}")
        if self.k != "auto" and (not isinstance(self.k, int) or self.k < 1):
            raise ValueError(f"k must be 'auto' or an integer >= 1, got {self.k!r}")
        if not 0 < self.pose_tolerance <= 2:
            raise ValueError("pose_tolerance must lie in (0, 2]")
        if self.pose_mode not in POSE_MODES:
            raise ValueError(f"pose_mode must be one of {POSE_MODES}")
        check_edges(self.pose_bin_edges)

    @property
    def edges(self) -> np.ndarray:
        return np.asarray(self.pose_bin_edges, dtype=np.float64)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class SubsetSpec:
    subset_id: str
    k: int
    selected: tuple[tuple[str, str], ...]
    histogram: PoseHistogram
    distance: float
    config: BalanceConfig
    warnings: tuple[str, ...] = ()

    def __eq__(self, other):
        return isinstance(other, SubsetSpec) and self.to_json() == other.to_json()

    def __len__(self):
        return len(self.selected)

    def to_dict(self) -> dict:
        return {
            "subset_id": self.subset_id,
            "k": self.k,
            "config": self.config.to_dict(),
            "selected": [list(p) for p in self.selected],
            "achieved_distance": self.distance,
            "pose_histogram": self.histogram.to_dict(),
            "warnings": list(self.warnings),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "SubsetSpec":
        cfg = dict(d["config"])
        cfg["pose_bin_edges"] = tuple(cfg["pose_bin_edges"])
        h = d["pose_histogram"]
        return cls(
            subset_id=d["subset_id"],
            k=int(d["k"]),
            selected=tuple((str(f), str(a)) for f, a in d["selected"]),
            histogram=PoseHistogram(*(np.asarray(h[key], dtype=np.float64) for key in ("edges", "yaw", "pitch", "roll"))),
            distance=float(d["achieved_distance"]),
            config=BalanceConfig(**cfg),
            warnings=tuple(d.get("warnings", ())),
        )


def _pose_bins(annotations: Sequence[FaceAnnotation], edges: np.ndarray) -> np.ndarray:
    poses = np.array([tuple(a.pose) for a in annotations], dtype=np.float64).reshape(-1, 3)
    return pose_bin_index(poses, edges)


def greedy_pose_select(
    candidates: Sequence[FaceAnnotation],
    k: int,
    reference: PoseHistogram,
    rng_seed: int | np.random.Generator = 0,
    start_counts: np.ndarray | None = None,
) -> list[FaceAnnotation]:
    """Pick ``k`` candidates, each step adding the one that brings the running
    pose histogram closest to ``reference``; ties go to a seeded random pick.

    ``start_counts`` (shape (3, n_bins)) seeds the running histogram with
    earlier selections; it is updated in place.
    """
    if k > len(candidates):
        raise InfeasibleBalanceError(f"need {k} candidates, only {len(candidates)} available")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    edges = reference.edges
    ref = np.stack(reference.marginals())
    counts = np.zeros_like(ref) if start_counts is None else start_counts
    bins = _pose_bins(candidates, edges)
    remaining = list(range(len(candidates)))
    picked: list[int] = []
    rows = np.arange(3)
    for _ in range(k):
        n1 = counts[0].sum() + 1.0
        base = np.abs(counts / n1 - ref)                      # (3, nb)
        base_sum = base.sum(axis=1)                           # (3,)
        b = bins[remaining]                                   # (r, 3)
        old = base[rows, b]                                   # (r, 3)
        new = np.abs((counts[rows, b] + 1.0) / n1 - ref[rows, b])
        dist = (base_sum + new - old).mean(axis=1)
        best = dist.min()
        ties = np.flatnonzero(dist <= best + 1e-12)
        choice = remaining[int(ties[rng.integers(len(ties))]) if len(ties) > 1 else int(ties[0])]
        picked.append(choice)
        remaining.remove(choice)
        counts[rows, bins[choice]] += 1.0
    return [candidates[i] for i in picked]


def source_frames(manifest: Manifest) -> list[FrameRecord]:
    """Uncompressed frames when the manifest has any, else every frame."""
    src = [f for f in manifest.frames if f.qp is None]
    return src or list(manifest.frames)


def reference_histogram(manifest: Manifest, edges=DEFAULT_POSE_EDGES) -> PoseHistogram:
    edges = check_edges(edges)
    poses = [tuple(a.pose) for f in source_frames(manifest) for a in f.annotations]
    if not poses:
        raise InfeasibleBalanceError("manifest has no annotations")
    return histogram_from_counts(pose_counts(poses, edges), edges)


def uniform_target(reference: PoseHistogram) -> PoseHistogram:
    """Equal mass on every bin the reference occupies, per angle."""
    marg = []
    for m in reference.marginals():
        occ = (m > 0).astype(np.float64)
        marg.append(occ / occ.sum())
    return PoseHistogram(reference.edges, *marg)


def _cell_table(manifest: Manifest, axis: str, masked: set[tuple[str, str]]):
    """identity -> cell -> [(frame_id, annotation)] over unmasked source annotations."""
    table: dict[str, dict[str, list[tuple[str, FaceAnnotation]]]] = {}
    cells: set[str] = set()
    for frame in source_frames(manifest):
        label = group_label(frame, axis)
        cells.add(label)
        for ann in frame.annotations:
            if (frame.frame_id, ann.annotation_id) in masked:
                continue
            table.setdefault(ann.identity_id, {}).setdefault(label, []).append((frame.frame_id, ann))
    order = [c for c in axis_labels(axis) if c in cells]
    return table, order


def feasible_k(table, cells) -> dict[str, int]:
    return {ident: min(len(by_cell.get(c, ())) for c in cells) for ident, by_cell in table.items()}


def resolve_k(per_identity: dict[str, int]) -> int:
    """Largest total subset size k * (#identities with at least k per cell); ties to larger k."""
    best_k, best_total = 0, 0
    for k in sorted(set(per_identity.values()), reverse=True):
        if k < 1:
            continue
        total = k * sum(1 for v in per_identity.values() if v >= k)
        if total > best_total:
            best_k, best_total = k, total
    if best_k < 1:
        raise InfeasibleBalanceError("no identity has at least one annotation in every cell")
    return best_k


def plan_balanced_subset(
    manifest: Manifest,
    config: BalanceConfig = BalanceConfig(),
    subset_id: str = "subset-00",
    exclude: set[tuple[str, str]] | frozenset = frozenset(),
    reference: PoseHistogram | None = None,
) -> SubsetSpec:
    """Select k annotations per (identity, cell) with pose-preserving greedy picks.

    ``exclude`` masks (frame_id, annotation_id) pairs taken by earlier subsets;
    ``reference`` defaults to the pose histogram of every source annotation.
    Identities short of k in some cell are dropped and listed in ``warnings``.
    """
    edges = config.edges
    if reference is None:
        reference = reference_histogram(manifest, edges)
    target = reference if config.pose_mode == "preserve_original" else uniform_target(reference)
    table, cells = _cell_table(manifest, config.cells, set(exclude))
    if not table:
        raise InfeasibleBalanceError("no annotations left to select from")
    per_identity = feasible_k(table, cells)
    k = resolve_k(per_identity) if config.k == "auto" else config.k
    warnings = []
    keep = []
    for ident in sorted(per_identity):
        have = per_identity[ident]
        if have >= k:
            keep.append(ident)
        else:
            short = [c for c in cells if len(table[ident].get(c, ())) < k]
            warnings.append(f"identity {ident!r} dropped: fewer than k={k} annotations in {', '.join(short)}")
    if not keep:
        raise InfeasibleBalanceError(f"no identity has k={k} annotations in every cell")
    for w in warnings:
        log.warning(w)

    rng = np.random.default_rng(config.rng_seed)
    counts = np.zeros((3, len(edges) - 1))
    selected: list[tuple[str, str]] = []
    for ident in keep:
        for cell in cells:
            cands = table[ident][cell]
            frame_of = {id(a): fid for fid, a in cands}
            chosen = greedy_pose_select([a for _, a in cands], k, target, rng, start_counts=counts)
            selected.extend((frame_of[id(a)], a.annotation_id) for a in chosen)
    selected.sort()
    hist = histogram_from_counts(counts, edges)
    dist = histogram_distance(hist, reference)
    if config.pose_mode == "preserve_original" and dist > config.pose_tolerance:
        warnings.append(f"achieved pose distance {dist:.4f} exceeds tolerance {config.pose_tolerance}")
    return SubsetSpec(subset_id, k, tuple(selected), hist, dist, config, tuple(warnings))


def extract_disjoint_subsets(
    manifest: Manifest,
    config: BalanceConfig = BalanceConfig(),
    m: int = 2,
) -> tuple[list[SubsetSpec], str | None]:
    """Up to ``m`` pairwise-disjoint balanced subsets.

    Returns the subsets built and, when fewer than ``m`` were feasible, a
    message describing the shortfall.  ``k`` is resolved once, on the first
    subset, so every subset has the same per-(identity, cell) count.
    """
    reference = reference_histogram(manifest, config.edges)
    taken: set[tuple[str, str]] = set()
    subsets: list[SubsetSpec] = []
    cfg = config
    for j in range(m):
        try:
            spec = plan_balanced_subset(manifest, cfg, f"subset-{j:02d}", taken, reference)
        except InfeasibleBalanceError as exc:
            return subsets, f"insufficient data for subset {j + 1} of {m}: {exc}"
        subsets.append(spec)
        taken.update(spec.selected)
        if cfg.k == "auto":
            cfg = BalanceConfig(**{**asdict(cfg), "k": spec.k})
    return subsets, None


def subset_counts(manifest: Manifest, subset: SubsetSpec) -> dict[tuple[str, str], int]:
    """(identity, cell) -> number of selected annotations."""
    counts: dict[tuple[str, str], int] = {}
    for fid, aid in subset.selected:
        frame, ann = manifest.annotation(aid)
        key = (ann.identity_id, group_label(frame, subset.config.cells))
        counts[key] = counts.get(key, 0) + 1
    return counts


def inherit_selection(manifest: Manifest, subset: SubsetSpec) -> list[tuple[str, str]]:
    """Selected pairs extended to compressed variants of the selected source frames.

    A variant frame shares capture_id and modality with its source; its
    annotations are matched to selected source annotations by identity.
    """
    chosen: dict[tuple[str, str], set[str]] = {}
    for fid, aid in subset.selected:
        frame, ann = manifest.annotation(aid)
        chosen.setdefault((frame.capture_id, frame.modality), set()).add(ann.identity_id)
    out = list(subset.selected)
    for f in manifest.frames:
        if f.qp is None:
            continue
        idents = chosen.get((f.capture_id, f.modality))
        if idents:
            out.extend((f.frame_id, a.annotation_id) for a in f.annotations if a.identity_id in idents)
    return sorted(set(out))
