"""Build identity-balanced subsets that keep the dataset's head-pose mix."""

from faceval import balance, synth

skew = {"console/indoor": 3.0, "rearview/indoor": 2.0, "wheel/outdoor": 0.5}
cfg = synth.SynthConfig(n_identities=8, frames_per_cell=60, drop={}, cell_multipliers=skew)
m = synth.generate_truth(cfg).true_manifest

subs, shortfall = balance.extract_disjoint_subsets(m, balance.BalanceConfig(k=8), 3)
for s in subs:
    counts = set(balance.subset_counts(m, s).values())
    print(f"{s.subset_id}: {len(s)} faces, per (identity, cell) {counts}, pose distance {s.distance:.4f}")
if shortfall:
    print(shortfall)

flat = balance.plan_balanced_subset(m, balance.BalanceConfig(k=8, pose_mode="uniform_bins"))
print(f"uniform-bins variant: pose distance {flat.distance:.4f}")
