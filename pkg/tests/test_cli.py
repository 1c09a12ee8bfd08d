import csv
import io
import json
import sys

import pytest

from faceval.cli import main
from faceval.dataset import detection_to_dict, dumps_jsonl, load_manifest

SMALL = {"n_identities": 5, "frames_per_cell": 4, "occupants": 3, "seed": 3}


def rows(path):
    return list(csv.DictReader(io.StringIO(path.read_text())))


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "synth.json").write_text(json.dumps(SMALL))
    assert main(["synth", "--config", str(root / "synth.json"), "--out", str(root / "syn")]) == 0
    syn = root / "syn"
    code = main(["reconcile", "--manifest", str(syn / "human_manifest.jsonl"),
                 "--correspondences", str(syn / "correspondences.jsonl"), "--out", str(root / "rec")])
    assert code == 0
    return root


def test_synth_writes_six_files(pipeline):
    assert sorted(p.name for p in (pipeline / "syn").iterdir()) == [
        "correspondences.jsonl", "detections.jsonl", "embeddings.jsonl", "human_manifest.jsonl",
        "true_manifest.jsonl", "truth.json"]


def test_synth_bad_probability(tmp_path, capsys):
    (tmp_path / "bad.json").write_text(json.dumps({"drop": {"*/rgb/indoor": 1.5}}))
    assert main(["synth", "--config", str(tmp_path / "bad.json"), "--out", str(tmp_path / "o")]) == 2
    assert "drop" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_reconcile_outputs(pipeline):
    rec = pipeline / "rec"
    assert {p.name for p in rec.iterdir()} == {"reconciled_manifest.jsonl", "homographies.json",
                                              "reconcile_counts.csv", "conflicts.csv"}
    m = load_manifest(rec / "reconciled_manifest.jsonl")
    assert all(a.source == "reconciled" for _, a in m.annotations())
    counts = rows(rec / "reconcile_counts.csv")
    assert all(int(r["n_out"]) >= max(int(r["n_rgb_in"]), int(r["n_ir_in"])) for r in counts)


def test_eval_detect_oracle_detections(pipeline, tmp_path):
    truth = load_manifest(pipeline / "syn" / "true_manifest.jsonl")
    from faceval.dataset import DetectionRecord
    dets = [DetectionRecord("o-" + a.annotation_id, f.frame_id, a.bbox, 1.0) for f, a in truth.annotations()]
    (tmp_path / "d.jsonl").write_text(dumps_jsonl(detection_to_dict(d) for d in dets))
    code = main(["eval-detect", "--gt", "human", "--manifest", str(pipeline / "syn" / "true_manifest.jsonl"),
                 "--detections", str(tmp_path / "d.jsonl"), "--out", str(tmp_path / "o")])
    assert code == 0
    assert all(r["ap"] == "1.000000" for r in rows(tmp_path / "o" / "detection_report.csv"))


def _ap(path):
    return {(r["group"], r["qp"]): float(r["ap"]) for r in rows(path)}


def test_human_gt_flatters_detector(pipeline, tmp_path):
    syn, rec = pipeline / "syn", pipeline / "rec"
    common = ["--detections", str(syn / "detections.jsonl"), "--qps", "18"]
    assert main(["eval-detect", "--gt", "human", "--manifest", str(syn / "human_manifest.jsonl"),
                 "--out", str(tmp_path / "h"), *common]) == 0
    assert main(["eval-detect", "--reconciled", str(rec / "reconciled_manifest.jsonl"),
                 "--out", str(tmp_path / "r"), *common]) == 0
    h, r = _ap(tmp_path / "h" / "detection_report.csv"), _ap(tmp_path / "r" / "detection_report.csv")
    indoor_rgb = [k for k in h if k[0].endswith("rgb/indoor")]
    assert sum(h[k] - r[k] for k in indoor_rgb) / len(indoor_rgb) > 0.1


def test_verify_perfect_vs_e2e(pipeline, tmp_path):
    syn, rec = pipeline / "syn", pipeline / "rec"
    base = ["--reconciled", str(rec / "reconciled_manifest.jsonl"), "--embeddings", str(syn / "embeddings.jsonl"),
            "--group-axis", "modality", "--target-fpr", "0.05"]
    assert main(["eval-verify", "--mode", "perfect", "--out", str(tmp_path / "p"), *base]) in (0, 1)
    assert main(["eval-e2e", "--detections", str(syn / "detections.jsonl"), "--qps", "50",
                 "--out", str(tmp_path / "e"), *base]) in (0, 1)
    p = {r["group"]: r for r in rows(tmp_path / "p" / "verification_report.csv")}
    e = {r["group"]: r for r in rows(tmp_path / "e" / "verification_report.csv")}
    for g in p:
        assert int(e[g]["n_genuine_missed"]) > 0
        assert float(e[g]["tpr"]) < float(p[g]["tpr"])
    assert {x.name for x in (tmp_path / "e").iterdir()} >= {"alignment.jsonl", "detection_report.csv",
                                                           "verification_report.csv"}
    first = json.loads((tmp_path / "e" / "alignment.jsonl").read_text().splitlines()[0])
    assert set(first) == {"detection_id", "s", "theta", "tx", "ty"}


def test_sweep_and_single_qp_reduction(pipeline, tmp_path):
    syn, rec = pipeline / "syn", pipeline / "rec"
    base = ["--reconciled", str(rec / "reconciled_manifest.jsonl"), "--detections", str(syn / "detections.jsonl")]
    assert main(["sweep", "--out", str(tmp_path / "s"), *base]) in (0, 1)
    sweep = rows(tmp_path / "s" / "sweep_report.csv")
    assert {int(r["qp"]) for r in sweep} == {18, 24, 30, 36, 43, 50}
    plot = json.loads((tmp_path / "s" / "sweep_plot.json").read_text())
    assert plot["config"]["qps"] == [18, 24, 30, 36, 43, 50] and "out" not in plot["config"]
    assert main(["sweep", "--qps", "30", "--out", str(tmp_path / "one"), *base]) in (0, 1)
    assert main(["eval-detect", "--qps", "30", "--out", str(tmp_path / "det"), *base]) in (0, 1)
    one = {r["group"]: r["value"] for r in rows(tmp_path / "one" / "sweep_report.csv")}
    det = {r["group"]: r["ap"] for r in rows(tmp_path / "det" / "detection_report.csv")}
    assert one == det


def test_sweep_missing_qp_aborts(pipeline, tmp_path, capsys):
    syn, rec = pipeline / "syn", pipeline / "rec"
    code = main(["sweep", "--qps", "18,20,22", "--reconciled", str(rec / "reconciled_manifest.jsonl"),
                 "--detections", str(syn / "detections.jsonl"), "--out", str(tmp_path / "s")])
    assert code == 2
    assert "[20, 22]" in capsys.readouterr().err
    assert not (tmp_path / "s").exists()


def test_sweep_per_qp_files(pipeline, tmp_path):
    syn, rec = pipeline / "syn", pipeline / "rec"
    by_qp = {}
    for line in (syn / "detections.jsonl").read_text().splitlines():
        by_qp.setdefault(json.loads(line)["qp"], []).append(line)
    for qp in (18, 50):
        (tmp_path / f"det_{qp}.jsonl").write_text("\n".join(by_qp[qp]) + "\n")
    code = main(["sweep", "--qps", "18,50", "--reconciled", str(rec / "reconciled_manifest.jsonl"),
                 "--detections", str(tmp_path / "det_{qp}.jsonl"), "--out", str(tmp_path / "s")])
    assert code in (0, 1)
    assert {r["qp"] for r in rows(tmp_path / "s" / "sweep_report.csv")} == {"18", "50"}


def test_encoder_shim_runs_per_qp(pipeline, tmp_path):
    syn, rec = pipeline / "syn", pipeline / "rec"
    script = f"{sys.executable} -c \"open(r'{tmp_path}/ran_{{qp}}', 'w').close()\""
    code = main(["sweep", "--qps", "18,24", "--encoder-cmd", script, "--reconciled",
                 str(rec / "reconciled_manifest.jsonl"), "--detections", str(syn / "detections.jsonl"),
                 "--out", str(tmp_path / "s")])
    assert code in (0, 1)
    assert (tmp_path / "ran_18").exists() and (tmp_path / "ran_24").exists()


def test_qp_out_of_range(pipeline, tmp_path, capsys):
    code = main(["sweep", "--qps", "18,60", "--reconciled", str(pipeline / "rec" / "reconciled_manifest.jsonl"),
                 "--detections", str(pipeline / "syn" / "detections.jsonl"), "--out", str(tmp_path / "s")])
    assert code == 2 and "60" in capsys.readouterr().err


def test_missing_input_path(tmp_path, capsys):
    code = main(["eval-detect", "--gt", "human", "--manifest", str(tmp_path / "nope.jsonl"),
                 "--detections", str(tmp_path / "d.jsonl"), "--out", str(tmp_path / "o")])
    assert code == 2 and "nope.jsonl" in capsys.readouterr().err


def test_schema_error_names_line(pipeline, tmp_path, capsys):
    bad = tmp_path / "m.jsonl"
    lines = (pipeline / "syn" / "human_manifest.jsonl").read_text().splitlines()
    row = json.loads(lines[1])
    row["modality"] = "thermal"
    lines[1] = json.dumps(row)
    bad.write_text("\n".join(lines) + "\n")
    code = main(["balance", "--manifest", str(bad), "--out", str(tmp_path / "o")])
    err = capsys.readouterr().err
    assert code == 2 and "m.jsonl:2:" in err and "thermal" in err


def test_config_file_and_flag_override(pipeline, tmp_path):
    cfg = {"paths": {"reconciled": str(pipeline / "rec" / "reconciled_manifest.jsonl"),
                     "detections": str(pipeline / "syn" / "detections.jsonl")},
           "qps": [18], "group_axes": ["illumination"], "iou_threshold": 0.5}
    (tmp_path / "run.json").write_text(json.dumps(cfg))
    assert main(["eval-detect", "--config", str(tmp_path / "run.json"), "--iou", "0.3",
                 "--out", str(tmp_path / "o")]) in (0, 1)
    plot = json.loads((tmp_path / "o" / "detection_plot.json").read_text())
    assert plot["config"]["iou_threshold"] == 0.3 and plot["config"]["group_axes"] == ["illumination"]
    assert {r["group"] for r in rows(tmp_path / "o" / "detection_report.csv")} == {"indoor", "outdoor"}


def test_unknown_config_field(tmp_path, capsys):
    (tmp_path / "run.json").write_text(json.dumps({"target_fpr": 0.01, "colour": "red"}))
    assert main(["eval-detect", "--config", str(tmp_path / "run.json"), "--out", str(tmp_path / "o")]) == 2
    assert "colour" in capsys.readouterr().err


def test_target_fpr_range(pipeline, tmp_path):
    assert main(["eval-verify", "--target-fpr", "0.7", "--reconciled",
                 str(pipeline / "rec" / "reconciled_manifest.jsonl"), "--out", str(tmp_path / "o")]) == 2


def test_balance_outputs_and_warning_exit(pipeline, tmp_path):
    code = main(["balance", "--manifest", str(pipeline / "rec" / "reconciled_manifest.jsonl"), "--k", "1",
                 "--count", "50", "--out", str(tmp_path / "b")])
    assert code == 1  # more subsets requested than the data supports
    subsets = json.loads((tmp_path / "b" / "subsets.json").read_text())
    assert 1 <= len(subsets) < 50
    counts = rows(tmp_path / "b" / "balance_counts.csv")
    assert {r["count"] for r in counts} == {"1"}


def test_eval_with_subset(pipeline, tmp_path):
    rec = pipeline / "rec" / "reconciled_manifest.jsonl"
    assert main(["balance", "--manifest", str(rec), "--k", "1", "--count", "2", "--out", str(tmp_path / "b")]) in (0, 1)
    code = main(["eval-detect", "--reconciled", str(rec), "--detections", str(pipeline / "syn" / "detections.jsonl"),
                 "--subsets", str(tmp_path / "b" / "subsets.json"), "--subset-id", "subset-01", "--qps", "18",
                 "--out", str(tmp_path / "o")])
    assert code in (0, 1)
    assert {r["subset_id"] for r in rows(tmp_path / "o" / "detection_report.csv")} == {"subset-01"}
    bad = main(["eval-detect", "--reconciled", str(rec), "--detections", str(pipeline / "syn" / "detections.jsonl"),
                "--subsets", str(tmp_path / "b" / "subsets.json"), "--subset-id", "nope", "--out", str(tmp_path / "x")])
    assert bad == 2


def test_inputs_not_mutated(pipeline, tmp_path):
    src = pipeline / "syn" / "human_manifest.jsonl"
    before = src.read_bytes()
    main(["balance", "--manifest", str(src), "--out", str(tmp_path / "b")])
    assert src.read_bytes() == before
