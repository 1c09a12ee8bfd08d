"""Verification TPR at fixed FPR: perfect detection versus the full pipeline."""

from faceval import recognition, synth

cfg = synth.SynthConfig(n_identities=8, frames_per_cell=20, embedding=synth.EmbeddingModel(noise_sd=0.15))
data = synth.generate_truth(cfg)
emb = synth.annotation_embeddings(data.true_manifest, data.true_manifest, cfg.embedding, cfg.seed)
perfect = recognition.verify_perfect_detection(data.true_manifest, emb, "modality", 0.01).tpr()

for qp in cfg.detector.qps:
    dets = synth.simulate_detector(data.true_manifest, cfg.detector, qp, cfg.seed, data.hidden)
    demb = synth.detection_embeddings(dets, data.true_manifest, cfg.embedding, cfg.seed)
    e2e = recognition.verify_end_to_end(data.true_manifest, dets, demb, "modality", 0.5, 0.01).tpr()
    print(f"qp {qp:2d}  " + "  ".join(f"{g}: perfect {perfect[g]:.3f} e2e {e2e[g]:.3f}" for g in sorted(e2e)))
