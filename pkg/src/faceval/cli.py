"""Command-line entry point: ``faceval <command> [options]``.

Exit codes: 0 success, 1 finished with evaluation warnings, 2 bad input or
configuration, 3 internal error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import shlex
import subprocess
import sys
import tempfile
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

from . import balance, detection, recognition, reconcile, synth
from .dataset import AXES, ManifestError, load_detections, load_embeddings, load_manifest, manifest_to_jsonl

log = logging.getLogger("faceval")

DEFAULT_QPS = (18, 24, 30, 36, 43, 50)
EXIT_OK, EXIT_WARN, EXIT_INPUT, EXIT_INTERNAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    manifest: str | None = None
    reconciled: str | None = None
    detections: str | None = None
    embeddings: str | None = None
    correspondences: str | None = None
    subsets: str | None = None
    template: str | None = None
    out: str | None = None
    gt: str = "reconciled"
    mode: str = "perfect"
    group_axes: list[str] = field(default_factory=lambda: ["full_cell"])
    iou_threshold: float = 0.5
    target_fpr: float = 0.01
    qps: list[int] = field(default_factory=lambda: list(DEFAULT_QPS))
    miss_policy: str = "penalize"
    pair_policy: str = "within_group"
    dedup_iou: float = 0.5
    subset_id: str | None = None
    count: int = 1
    seed: int = 0
    # optional per-qp command template run by sweep before loading detections
    encoder_cmd: str | None = None
    balance: dict = field(default_factory=dict)
    ransac: dict = field(default_factory=dict)

    PATH_FIELDS = ("manifest", "reconciled", "detections", "embeddings", "correspondences", "subsets", "template")

    def validate(self) -> "RunConfig":
        if not 0 < self.target_fpr <= 0.5:
            raise UsageError(f"target_fpr must lie in (0, 0.5], got {self.target_fpr}")
        if not 0 < self.iou_threshold <= 1:
            raise UsageError(f"iou_threshold must lie in (0, 1], got {self.iou_threshold}")
        bad = [q for q in self.qps if not 0 <= int(q) <= 51]
        if bad:
            raise UsageError(f"qp values must lie in [0, 51], got {bad}")
        for axis in self.group_axes:
            if axis not in AXES:
                raise UsageError(f"unknown group axis {axis!r}")
        if self.gt not in ("human", "reconciled"):
            raise UsageError("gt must be 'human' or 'reconciled'")
        if self.mode not in ("perfect", "e2e"):
            raise UsageError("mode must be 'perfect' or 'e2e'")
        if self.miss_policy not in recognition.MISS_POLICIES:
            raise UsageError(f"miss_policy must be one of {recognition.MISS_POLICIES}")
        if self.pair_policy not in recognition.PAIR_POLICIES:
            raise UsageError(f"pair_policy must be one of {recognition.PAIR_POLICIES}")
        for name in self.PATH_FIELDS:
            p = getattr(self, name)
            if p is not None and "{qp}" not in p and not Path(p).exists():
                raise UsageError(f"{name} path does not exist: {p}")
        return self

    def echo(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d.pop("out")
        return d

    def balance_config(self) -> balance.BalanceConfig:
        kw = dict(self.balance)
        kw.setdefault("rng_seed", self.seed)
        if "pose_bin_edges" in kw:
            kw["pose_bin_edges"] = tuple(float(e) for e in kw["pose_bin_edges"])
        try:
            return balance.BalanceConfig(**kw)
        except TypeError as exc:
            raise UsageError(f"balance config: {exc}") from None

    def ransac_config(self) -> reconcile.RansacConfig:
        kw = dict(self.ransac)
        kw.setdefault("rng_seed", self.seed)
        try:
            return reconcile.RansacConfig(**kw)
        except TypeError as exc:
            raise UsageError(f"ransac config: {exc}") from None

    def gt_path(self) -> str:
        path = self.reconciled if self.gt == "reconciled" else self.manifest
        if path is None:
            flag = "--reconciled" if self.gt == "reconciled" else "--manifest"
            raise UsageError(f"--gt {self.gt} needs {flag}")
        return path


def load_run_config(args: argparse.Namespace) -> RunConfig:
    base: dict = {}
    if getattr(args, "config", None):
        try:
            base = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        paths = base.pop("paths", {})
        base.update(paths)
        known = {f.name for f in fields(RunConfig)}
        unknown = sorted(set(base) - known)
        if unknown:
            raise UsageError(f"unknown config field {unknown[0]!r}")
    cfg = RunConfig(**base)
    overrides = {
        "manifest": args.manifest, "reconciled": args.reconciled, "detections": args.detections,
        "embeddings": args.embeddings, "correspondences": args.correspondences, "subsets": args.subsets,
        "template": args.template, "out": args.out, "gt": args.gt, "mode": args.mode,
        "group_axes": args.group_axis, "iou_threshold": args.iou, "target_fpr": args.target_fpr,
        "qps": args.qps, "miss_policy": args.miss_policy, "pair_policy": args.pair_policy,
        "dedup_iou": args.dedup_iou, "subset_id": args.subset_id, "count": args.count, "seed": args.seed,
        "encoder_cmd": getattr(args, "encoder_cmd", None),
    }
    for key, value in overrides.items():
        if value is not None:
            setattr(cfg, key, value)
    for key in ("k", "pose_mode", "pose_tolerance", "cells"):
        value = getattr(args, key, None)
        if value is not None:
            cfg.balance[key] = int(value) if key == "k" and value != "auto" else value
    if cfg.out is None:
        raise UsageError("--out is required")
    return cfg.validate()


# --------------------------------------------------------------------------
# output handling


class Outputs:
    """Collects output files and writes them all at once via temp-file + rename."""

    def __init__(self, out_dir):
        self.dir = Path(out_dir)
        self.files: dict[str, bytes] = {}

    def add(self, name: str, content: str | bytes) -> None:
        self.files[name] = content.encode("utf-8") if isinstance(content, str) else content

    def add_json(self, name: str, obj) -> None:
        self.add(name, json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")

    def commit(self) -> list[Path]:
        self.dir.mkdir(parents=True, exist_ok=True)
        staged = []
        try:
            for name, data in self.files.items():
                fd, tmp = tempfile.mkstemp(prefix=f".{name}.", dir=self.dir)
                with os.fdopen(fd, "wb") as fh:
                    fh.write(data)
                staged.append((tmp, self.dir / name))
        except BaseException:
            for tmp, _ in staged:
                os.unlink(tmp)
            raise
        for tmp, final in staged:
            os.replace(tmp, final)
        return [final for _, final in staged]


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _subset(cfg: RunConfig):
    if cfg.subsets is None:
        return None
    data = json.loads(Path(cfg.subsets).read_text(encoding="utf-8"))
    specs = [balance.SubsetSpec.from_dict(d) for d in (data if isinstance(data, list) else [data])]
    if not specs:
        raise UsageError(f"{cfg.subsets} holds no subsets")
    if cfg.subset_id is None:
        return specs[0]
    for s in specs:
        if s.subset_id == cfg.subset_id:
            return s
    raise UsageError(f"subset {cfg.subset_id!r} not found in {cfg.subsets}")


def _detections_by_qp(cfg: RunConfig, manifest, qps: Sequence[int] | None = None) -> dict:
    """qp -> detections.  A ``{qp}`` placeholder in the path means one file per qp."""
    path = cfg.detections
    if path is None:
        raise UsageError("--detections is required")
    if "{qp}" in path:
        qps = list(qps or cfg.qps)
        missing = [q for q in qps if not Path(path.format(qp=q)).exists()]
        if missing:
            raise UsageError(f"missing detections for qp {missing}")
        return {q: load_detections(path.format(qp=q), manifest) for q in qps}
    dets = load_detections(path, manifest)
    by_qp: dict = {}
    for d in dets:
        by_qp.setdefault(d.qp, []).append(d)
    if qps is not None:
        missing = [q for q in qps if q not in by_qp]
        if missing:
            raise UsageError(f"missing detections for qp {missing}")
        return {q: by_qp[q] for q in qps}
    return dict(sorted(by_qp.items(), key=lambda kv: (kv[0] is not None, kv[0] or 0)))


# --------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    if args.out is None:
        raise UsageError("--out is required")
    raw = {}
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
    if args.seed is not None:
        raw["seed"] = args.seed
    config = synth.SynthConfig.from_dict(raw)
    out = Outputs(args.out)
    for name, text in synth.synth_artifacts(config).items():
        out.add(name, text)
    for path in out.commit():
        log.info("wrote %s", path)
    return EXIT_OK


def cmd_balance(args) -> int:
    cfg = load_run_config(args)
    if cfg.manifest is None:
        raise UsageError("--manifest is required")
    manifest = load_manifest(cfg.manifest)
    bcfg = cfg.balance_config()
    subsets, shortfall = balance.extract_disjoint_subsets(manifest, bcfg, cfg.count)
    warnings = [w for s in subsets for w in s.warnings]
    if shortfall:
        warnings.append(shortfall)
    if not subsets:
        raise UsageError(shortfall or "no subset could be built")
    reference = balance.reference_histogram(manifest, bcfg.edges)
    out = Outputs(cfg.out)
    out.add("subsets.json", json.dumps([s.to_dict() for s in subsets], indent=1, sort_keys=True) + "\n")
    rows = []
    for s in subsets:
        for (ident, cell), n in sorted(balance.subset_counts(manifest, s).items()):
            rows.append([s.subset_id, ident, cell, n])
    out.add("balance_counts.csv", _csv(["subset_id", "identity_id", "cell", "count"], rows))
    out.add_json("balance_plot.json", {
        "config": cfg.echo(),
        "reference": reference.to_dict(),
        "subsets": {s.subset_id: {"distance": s.distance, "histogram": s.histogram.to_dict()} for s in subsets},
        "warnings": warnings,
    })
    out.commit()
    return _finish(warnings)


def cmd_reconcile(args) -> int:
    cfg = load_run_config(args)
    if cfg.manifest is None or cfg.correspondences is None:
        raise UsageError("reconcile needs --manifest and --correspondences")
    manifest = load_manifest(cfg.manifest)
    corr = reconcile.load_correspondences(cfg.correspondences)
    homs = reconcile.estimate_location_homographies(corr, manifest, cfg.ransac_config())
    result = reconcile.reconcile_manifest(manifest, homs, cfg.dedup_iou)
    out = Outputs(cfg.out)
    out.add("reconciled_manifest.jsonl", manifest_to_jsonl(result.manifest))
    out.add("homographies.json", reconcile.homographies_to_json(homs))
    out.add("reconcile_counts.csv", _csv(["capture_id", "n_rgb_in", "n_ir_in", "n_out"], result.counts))
    out.add("conflicts.csv", _csv(
        ["capture_id", "annotation_a", "annotation_b", "identity_a", "identity_b", "iou"],
        [[c.capture_id, *c.annotation_ids, *c.identity_ids, f"{c.iou:.6f}"] for c in result.conflicts]))
    out.commit()
    warnings = list(result.notes) + [f"identity conflict in {c.capture_id}: {c.annotation_ids}" for c in result.conflicts]
    return _finish(warnings)


def _detection_reports(cfg: RunConfig, manifest, subset, dets_by_qp):
    reports = []
    for axis in cfg.group_axes:
        for qp, dets in dets_by_qp.items():
            reports.append(detection.map_by_group(manifest, dets, axis, cfg.iou_threshold, subset, qp))
    return reports


def _write_detection(out: Outputs, cfg: RunConfig, reports) -> list[str]:
    rows = [r.as_row() for rep in reports for r in rep.rows]
    out.add("detection_report.csv", _csv(detection.DetectionRow.FIELDS, rows))
    plot = detection.plot_data(reports)
    plot["config"] = cfg.echo()
    out.add_json("detection_plot.json", plot)
    return [n for rep in reports for n in rep.notes]


def _write_verification(out: Outputs, cfg: RunConfig, reports) -> list[str]:
    rows = [r.as_row() for rep in reports for r in rep.rows]
    out.add("verification_report.csv", _csv(recognition.VerificationRow.FIELDS, rows))
    plot = recognition.plot_data(reports)
    plot["config"] = cfg.echo()
    plot["miss_policy"] = cfg.miss_policy if cfg.mode == "e2e" else "perfect"
    out.add_json("verification_plot.json", plot)
    return [n for rep in reports for n in rep.notes]


def cmd_eval_detect(args) -> int:
    cfg = load_run_config(args)
    manifest = load_manifest(cfg.gt_path())
    subset = _subset(cfg)
    dets_by_qp = _detections_by_qp(cfg, manifest, cfg.qps if args.qps else None)
    out = Outputs(cfg.out)
    warnings = _write_detection(out, cfg, _detection_reports(cfg, manifest, subset, dets_by_qp))
    out.commit()
    return _finish(warnings)


def _verification_reports(cfg: RunConfig, manifest, subset, embeddings, dets_by_qp=None):
    reports = []
    for axis in cfg.group_axes:
        if dets_by_qp is None:
            reports.append(recognition.verify_perfect_detection(
                manifest, embeddings, axis, cfg.target_fpr, subset, cfg.pair_policy))
            continue
        for qp, dets in dets_by_qp.items():
            reports.append(recognition.verify_end_to_end(
                manifest, dets, embeddings, axis, cfg.iou_threshold, cfg.target_fpr, subset,
                cfg.miss_policy, cfg.pair_policy, qp))
    return reports


def cmd_eval_verify(args) -> int:
    cfg = load_run_config(args)
    if cfg.embeddings is None:
        raise UsageError("--embeddings is required")
    manifest = load_manifest(cfg.gt_path())
    subset = _subset(cfg)
    embeddings = load_embeddings(cfg.embeddings)
    dets_by_qp = None
    if cfg.mode == "e2e":
        dets_by_qp = _detections_by_qp(cfg, manifest, cfg.qps if args.qps else None)
    out = Outputs(cfg.out)
    warnings = _write_verification(out, cfg, _verification_reports(cfg, manifest, subset, embeddings, dets_by_qp))
    out.commit()
    return _finish(warnings)


def cmd_eval_e2e(args) -> int:
    """Detection scoring chained into verification on the same matched detections."""
    cfg = load_run_config(args)
    cfg.mode = "e2e"
    if cfg.embeddings is None:
        raise UsageError("--embeddings is required")
    manifest = load_manifest(cfg.gt_path())
    subset = _subset(cfg)
    embeddings = load_embeddings(cfg.embeddings)
    dets_by_qp = _detections_by_qp(cfg, manifest, cfg.qps if args.qps else None)
    template = recognition.load_template(cfg.template)
    out = Outputs(cfg.out)
    warnings = _write_detection(out, cfg, _detection_reports(cfg, manifest, subset, dets_by_qp))
    warnings += _write_verification(out, cfg, _verification_reports(cfg, manifest, subset, embeddings, dets_by_qp))
    transforms = [t for dets in dets_by_qp.values() for t in recognition.alignment_transforms(dets, template)]
    out.add("alignment.jsonl", "".join(json.dumps(t, sort_keys=True) + "\n" for t in transforms))
    out.commit()
    return _finish(warnings)


def cmd_sweep(args) -> int:
    cfg = load_run_config(args)
    manifest = load_manifest(cfg.gt_path())
    subset = _subset(cfg)
    if cfg.encoder_cmd:
        _run_encoder(cfg.encoder_cmd, cfg.qps)
    # fails before any evaluation when a qp is missing
    dets_by_qp = _detections_by_qp(cfg, manifest, cfg.qps)
    embeddings = load_embeddings(cfg.embeddings) if cfg.embeddings else None
    det_reports = _detection_reports(cfg, manifest, subset, dets_by_qp)
    ver_reports = []
    if embeddings is not None:
        ver_reports = _verification_reports(cfg, manifest, subset, embeddings, dets_by_qp)
    rows, series, warnings = [], {}, []
    for rep in det_reports:
        warnings += rep.notes
        for r in rep.rows:
            rows.append(["ap", r.group_axis, r.group, r.qp, r.subset_id, "" if r.ap is None else f"{r.ap:.6f}"])
            s = series.setdefault("ap", {}).setdefault(f"{r.group_axis}:{r.group}", {"x": [], "y": []})
            s["x"].append(r.qp); s["y"].append(r.ap)
    for rep in ver_reports:
        warnings += rep.notes
        for r in rep.rows:
            rows.append(["tpr", r.group_axis, r.group, r.qp, r.subset_id, "" if r.tpr is None else f"{r.tpr:.6f}"])
            s = series.setdefault("tpr", {}).setdefault(f"{r.group_axis}:{r.group}", {"x": [], "y": []})
            s["x"].append(r.qp); s["y"].append(r.tpr)
    out = Outputs(cfg.out)
    out.add("sweep_report.csv", _csv(["metric", "group_axis", "group", "qp", "subset_id", "value"], rows))
    out.add_json("sweep_plot.json", {"config": cfg.echo(), "series": series})
    out.commit()
    return _finish(warnings)


def _run_encoder(template: str, qps) -> None:
    """Run an external encoding/detection step once per qp; its outputs are opaque to us."""
    for qp in qps:
        argv = shlex.split(template.format(qp=qp))
        log.info("encoder: %s", " ".join(argv))
        proc = subprocess.run(argv, capture_output=True, text=True)
        if proc.returncode != 0:
            raise UsageError(f"encoder command failed for qp {qp} (exit {proc.returncode}): {proc.stderr.strip()}")


def _finish(warnings: Sequence[str]) -> int:
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    return EXIT_WARN if warnings else EXIT_OK


# --------------------------------------------------------------------------
# parser


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run configuration; flags override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--manifest", help="human-annotated manifest (JSON Lines)")
    p.add_argument("--reconciled", help="reconciled manifest (JSON Lines)")
    p.add_argument("--detections", help="detections JSON Lines; a {qp} placeholder selects per-qp files")
    p.add_argument("--embeddings", help="embeddings (JSON Lines or FEV1)")
    p.add_argument("--correspondences")
    p.add_argument("--subsets", help="subsets.json written by 'balance'")
    p.add_argument("--subset-id")
    p.add_argument("--template", help="five-point alignment template JSON")
    p.add_argument("--gt", choices=("human", "reconciled"))
    p.add_argument("--mode", choices=("perfect", "e2e"))
    p.add_argument("--group-axis", action="append", choices=AXES,
                   help="grouping axis; repeat for several (default full_cell)")
    p.add_argument("--target-fpr", type=float)
    p.add_argument("--iou", type=float)
    p.add_argument("--qps", type=lambda s: [int(v) for v in s.split(",")], help="comma-separated qp list")
    p.add_argument("--miss-policy", choices=recognition.MISS_POLICIES)
    p.add_argument("--pair-policy", choices=recognition.PAIR_POLICIES)
    p.add_argument("--dedup-iou", type=float)
    p.add_argument("--count", type=int, help="number of disjoint subsets (balance)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="faceval", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset with known truth")
    p.add_argument("--config", help="synthetic-data configuration JSON")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    for name, func, text in (
        ("balance", cmd_balance, "build balanced, pose-preserving subsets"),
        ("reconcile", cmd_reconcile, "make RGB/IR annotations consistent"),
        ("eval-detect", cmd_eval_detect, "per-group detection AP"),
        ("eval-verify", cmd_eval_verify, "per-group TPR at a target FPR"),
        ("eval-e2e", cmd_eval_e2e, "detection chained into verification"),
        ("sweep", cmd_sweep, "evaluate every qp and merge the reports"),
    ):
        p = sub.add_parser(name, help=text)
        _common(p)
        if name == "sweep":
            p.add_argument("--encoder-cmd", help="command template run once per qp, e.g. 'enc --qp {qp}'")
        if name == "balance":
            p.add_argument("--k", help="samples per (identity, cell) or 'auto'")
            p.add_argument("--cells", choices=AXES)
            p.add_argument("--pose-mode", choices=balance.POSE_MODES)
            p.add_argument("--pose-tolerance", type=float)
        p.set_defaults(func=func)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    level = os.environ.get("FACEVAL_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ManifestError, synth.SynthConfigError, balance.InfeasibleBalanceError,
            reconcile.HomographyError, recognition.PairCeilingError, KeyError, ValueError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # pragma: no cover - reported, not raised
        log.exception("internal error")
        print(f"internal error: {exc!r}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
