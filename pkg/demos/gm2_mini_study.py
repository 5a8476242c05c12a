"""Small Bayesian replicate study on GM2 Poisson data.

A few replicates with short chains; the acceptance suite runs the full
100-replicate version. Run: python demos/gm2_mini_study.py [reps]
"""
import sys
import warnings

from spatial_affine.gibbs import ChainConfig
from spatial_affine.simgen import bayes_estimator, gm_catalog, run_study

reps = int(sys.argv[1]) if len(sys.argv) > 1 else 5
chain = ChainConfig(4000, 1000)
ests = [bayes_estimator(e, chain=chain) for e in ("nonspatial", "spatial-rs", "affine-rs")]
with warnings.catch_warnings():
    warnings.simplefilter("ignore")
    summary = run_study(gm_catalog(300)[1], ests, reps, master_seed=0,
                        progress=lambda k, m: print(f"rep {k}/{m}", file=sys.stderr))
for row in summary.table():
    print(f"{row['Estimator']:>12}  bias {row['Bias']:+.3f}  se {row['Std. Err.']:.3f}  "
          f"rmse {row['RMSE']:.3f}  coverage {row['95% CI Coverage']:.2f}")
