import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from faceval.dataset import (
    ALL_CELLS, DEFAULT_POSE_EDGES, DuplicateIdError, FaceAnnotation, FrameRecord, Manifest, ManifestError,
    Pose, axis_labels, check_edges, compute_pose_histogram, group_by_scenario, histogram_distance,
    load_detections, load_embeddings, load_manifest, manifest_to_jsonl, pose_bin_index, write_embeddings,
    write_manifest,
)

LMS = ((1.0, 1.0), (3.0, 1.0), (2.0, 2.0), (1.0, 3.0), (3.0, 3.0))


def ann(aid, ident="a", bbox=(0.0, 0.0, 10.0, 10.0), yaw=0.0, source="human"):
    return FaceAnnotation(aid, ident, bbox, LMS, Pose(yaw, 0.0, 0.0), source)


def frame(fid, cap="c0", loc="console", mod="rgb", ill="indoor", anns=(), qp=None):
    return FrameRecord(fid, cap, loc, mod, ill, 640, 480, tuple(anns), qp)


def write_lines(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))


def test_manifest_round_trip(tmp_path, small_data):
    p = tmp_path / "m.jsonl"
    write_manifest(p, small_data.human_manifest)
    assert load_manifest(p) == small_data.human_manifest


def test_bad_bbox_reports_line(tmp_path):
    good = json.loads(manifest_to_jsonl([frame("f0", anns=[ann("x")])]))
    bad = json.loads(manifest_to_jsonl([frame("f1", cap="c1", anns=[ann("y")])]))
    bad["annotations"][0]["bbox"] = [10, 0, 5, 10]
    p = tmp_path / "m.jsonl"
    write_lines(p, [good, bad])
    with pytest.raises(ManifestError) as exc:
        load_manifest(p)
    assert exc.value.line == 2
    assert "bbox" in str(exc.value)


def test_duplicate_annotation_id(tmp_path):
    p = tmp_path / "m.jsonl"
    p.write_text(manifest_to_jsonl([frame("f0", anns=[ann("x")]), frame("f1", cap="c1", anns=[ann("x")])]))
    with pytest.raises(DuplicateIdError):
        load_manifest(p)


@pytest.mark.parametrize("field,value", [("location", "roof"), ("modality", "depth"), ("illumination", "dusk")])
def test_unknown_enum(tmp_path, field, value):
    row = json.loads(manifest_to_jsonl([frame("f0")]))
    row[field] = value
    p = tmp_path / "m.jsonl"
    write_lines(p, [row])
    with pytest.raises(ManifestError, match=value):
        load_manifest(p)


def test_invalid_json_line(tmp_path):
    p = tmp_path / "m.jsonl"
    p.write_text(manifest_to_jsonl([frame("f0")]) + "{oops\n")
    with pytest.raises(ManifestError) as exc:
        load_manifest(p)
    assert exc.value.line == 2


def test_pose_out_of_range():
    with pytest.raises(ManifestError, match="yaw"):
        ann("x", yaw=200.0).validate()


def test_capture_must_share_location(tmp_path):
    p = tmp_path / "m.jsonl"
    p.write_text(manifest_to_jsonl([frame("f0"), frame("f1", mod="ir", loc="wheel")]))
    with pytest.raises(ManifestError, match="c0"):
        load_manifest(p)


def test_detections_unknown_frame(tmp_path):
    m = Manifest([frame("f0")])
    p = tmp_path / "d.jsonl"
    write_lines(p, [{"detection_id": "d0", "frame_id": "nope", "bbox": [0, 0, 5, 5], "confidence": 0.5}])
    with pytest.raises(ManifestError, match="nope"):
        load_detections(p, m)


def test_detection_confidence_range(tmp_path):
    p = tmp_path / "d.jsonl"
    write_lines(p, [{"detection_id": "d0", "frame_id": "f0", "bbox": [0, 0, 5, 5], "confidence": 1.5}])
    with pytest.raises(ManifestError, match="confidence"):
        load_detections(p)


def _unit_rows(n, d, seed=0):
    v = np.random.default_rng(seed).normal(size=(n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def test_embedding_json_and_binary_agree(tmp_path):
    emb = {f"s{i}": v for i, v in enumerate(_unit_rows(5, 16))}
    write_embeddings(tmp_path / "e.jsonl", emb)
    write_embeddings(tmp_path / "e.fev", emb)
    a = load_embeddings(tmp_path / "e.jsonl")
    b = load_embeddings(tmp_path / "e.fev")
    assert list(a) == list(b) == list(emb)
    for k in emb:
        np.testing.assert_allclose(a[k], emb[k], atol=0)
        np.testing.assert_allclose(b[k], emb[k], atol=1e-7)


def test_fev_layout(tmp_path):
    # hand-built file: magic, d, n, then (len, id, floats)
    vec = np.array([0.6, 0.8], dtype="<f4")
    raw = b"FEV1" + struct.pack("<IQ", 2, 1) + struct.pack("<I", 3) + b"abc" + vec.tobytes()
    p = tmp_path / "h.fev"
    p.write_bytes(raw)
    out = load_embeddings(p)
    np.testing.assert_allclose(out["abc"], [0.6, 0.8], rtol=1e-7)


def test_fev_truncated(tmp_path):
    p = tmp_path / "t.fev"
    p.write_bytes(b"FEV1" + struct.pack("<IQ", 4, 2) + struct.pack("<I", 1) + b"a")
    with pytest.raises(ManifestError, match="truncated"):
        load_embeddings(p)


def test_embedding_not_unit(tmp_path):
    p = tmp_path / "e.jsonl"
    write_lines(p, [{"subject_ref": "a", "vector": [1.0, 1.0]}])
    with pytest.raises(ManifestError, match="norm"):
        load_embeddings(p)


def test_embedding_dimension_mismatch(tmp_path):
    p = tmp_path / "e.jsonl"
    write_lines(p, [{"subject_ref": "a", "vector": [1.0, 0.0]}, {"subject_ref": "b", "vector": [1.0, 0.0, 0.0]}])
    with pytest.raises(ManifestError, match="dimension"):
        load_embeddings(p)


def test_grouping_full_cell_has_twelve_labels():
    assert len(axis_labels("full_cell")) == 12 == len(ALL_CELLS)
    assert axis_labels("modality") == ("rgb", "ir")


def test_group_by_scenario_skips_empty():
    frames = [frame("a"), frame("b", cap="c1", mod="ir"), frame("c", cap="c2", ill="outdoor")]
    groups = group_by_scenario(frames, "illumination")
    assert {k: [f.frame_id for f in v] for k, v in groups.items()} == {"indoor": ["a", "b"], "outdoor": ["c"]}
    assert list(group_by_scenario(frames, "full_cell")) == ["console/rgb/indoor", "console/rgb/outdoor",
                                                           "console/ir/indoor"]


@given(st.lists(st.sampled_from(ALL_CELLS), min_size=1, max_size=30), st.sampled_from(
    ("illumination", "modality", "location", "full_cell")))
def test_grouping_is_partition(cells, axis):
    frames = [frame(f"f{i}", cap=f"c{i}", loc=c.location, mod=c.modality, ill=c.illumination)
              for i, c in enumerate(cells)]
    groups = group_by_scenario(frames, axis)
    ids = [f.frame_id for g in groups.values() for f in g]
    assert sorted(ids) == sorted(f.frame_id for f in frames)
    assert len(ids) == len(set(ids))


def test_edge_rules():
    assert pose_bin_index([-180.0, 180.0, 0.0, 10.0, 9.999], DEFAULT_POSE_EDGES).tolist() == [0, 35, 18, 19, 18]
    with pytest.raises(ValueError):
        check_edges([-180, 0, 0, 180])
    with pytest.raises(ValueError):
        check_edges([-90, 0, 90])


def test_histogram_needs_faces():
    with pytest.raises(ValueError):
        compute_pose_histogram([])


def test_histogram_distance_hand_value():
    edges = [-180.0, 0.0, 180.0]
    a = compute_pose_histogram([ann("x", yaw=-10.0), ann("y", yaw=10.0)], edges)
    b = compute_pose_histogram([ann("z", yaw=10.0)], edges)
    # yaw: |0.5-0| + |0.5-1| = 1; pitch/roll all at 0 in the upper bin -> 0
    assert histogram_distance(a, b) == pytest.approx(1 / 3)


def test_histogram_distance_edge_mismatch():
    a = compute_pose_histogram([ann("x")], [-180.0, 0.0, 180.0])
    b = compute_pose_histogram([ann("x")], DEFAULT_POSE_EDGES)
    with pytest.raises(ValueError):
        histogram_distance(a, b)


angles = st.floats(-180, 180, allow_nan=False)
pose_lists = st.lists(st.tuples(angles, angles, angles), min_size=1, max_size=12)


def _hist(poses):
    return compute_pose_histogram(
        [FaceAnnotation(str(i), "a", (0, 0, 1, 1), LMS, Pose(*p)) for i, p in enumerate(poses)], DEFAULT_POSE_EDGES)


@settings(max_examples=60)
@given(pose_lists, pose_lists, pose_lists)
def test_histogram_distance_is_metric(p, q, r):
    a, b, c = _hist(p), _hist(q), _hist(r)
    assert histogram_distance(a, a) == 0
    assert histogram_distance(a, b) == pytest.approx(histogram_distance(b, a))
    assert 0 <= histogram_distance(a, b) <= 2 + 1e-12
    assert histogram_distance(a, c) <= histogram_distance(a, b) + histogram_distance(b, c) + 1e-12


@settings(max_examples=40)
@given(pose_lists)
def test_histogram_rows_sum_to_one(poses):
    h = _hist(poses)
    for row in (h.yaw, h.pitch, h.roll):
        assert row.sum() == pytest.approx(1.0)
