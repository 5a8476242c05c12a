"""Compare the REML estimators on one Gaussian-outcome GM2 dataset.

Run: python demos/reml_compare.py [seed]
"""
import sys
import warnings

from spatial_affine.linear_estimators import reml_fit
from spatial_affine.simgen import generate_dataset, gm_catalog

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
cfg = gm_catalog(300)[1].with_(outcome_family="gaussian")
data, truth = generate_dataset(cfg, seed)
graph = cfg.get_graph()

print(f"true beta_z = {truth.reveal('beta_z')}")
for tag in ("OLS", "GLS", "GLS-RS", "Affine", "Affine-RS"):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        fit = reml_fit(data, graph, tag, seed=seed)
    lo, hi = fit.ci[0]
    print(f"{tag:>10}: beta_z = {fit.beta_z:+.3f}  95% CI ({lo:+.3f}, {hi:+.3f})")
