"""Fit the affine-RS Poisson model to the bundled county-scale synthetic data.

Uses a short chain by default; pass an iteration count for a full run.
Run: python demos/county_fit.py [iterations]
"""
import sys

from spatial_affine.gibbs import ChainConfig, ModelConfig, paerc_summary, run_chain
from spatial_affine.cli import ingest_dataset, ingest_graph
from spatial_affine.simgen import bundled_county_paths

iters = int(sys.argv[1]) if len(sys.argv) > 1 else 2000
paths = bundled_county_paths()
data, ids = ingest_dataset(paths["data"], censor_threshold=10)
graph = ingest_graph(paths["adjacency"], ids)
cfg = ModelConfig("poisson", "affine-rs", exposure_transform_for_joint="log",
                  chain=ChainConfig(iters, iters // 4))
samples = run_chain(cfg, data, graph)
rr = paerc_summary(samples)
print(f"n = {data.n}, censored = {int(data.censor_mask.sum())}")
print(f"relative rate per unit exposure: {rr['relative_rate']:.4f} "
      f"({rr['lower']:.4f}, {rr['upper']:.4f})")
print(f"acceptance: { {k: round(v, 2) for k, v in samples.acceptance.items()} }")
