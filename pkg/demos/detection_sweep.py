"""Detection AP per cell across compression levels, with human and reconciled GT."""

from faceval import detection, reconcile, synth

cfg = synth.SynthConfig(n_identities=6, frames_per_cell=20)
data = synth.generate_truth(cfg)
rec = reconcile.reconcile_manifest(
    data.human_manifest, reconcile.estimate_location_homographies(data.correspondences, data.human_manifest))

rows = {}
for qp in cfg.detector.qps:
    dets = synth.simulate_detector(data.true_manifest, cfg.detector, qp, cfg.seed, data.hidden)
    for gt_name, gt in (("human", data.human_manifest), ("reconciled", rec.manifest)):
        for label, ap in detection.map_by_group(gt, dets, "full_cell", 0.5, None, qp).ap().items():
            rows.setdefault((label, gt_name), []).append(ap)

print("group".ljust(30) + "gt".ljust(12) + "".join(f"qp{q:<6d}" for q in cfg.detector.qps))
for (label, gt_name), aps in sorted(rows.items()):
    if "console" in label:
        print(label.ljust(30) + gt_name.ljust(12) + "".join(f"{a:<8.3f}" for a in aps))
