"""Identification reports for a few ring-graph parameter sets."""
from spatial_affine.identifiability import RingParams, identification_report

cases = {
    "GM2": RingParams(400, phi_u=0.5, phi_z=0.2, rho=0.3),
    "rho = 0": RingParams(400, phi_u=0.5, phi_z=0.2, rho=0.0),
    "no confounder dependence": RingParams(400, phi_u=0.0, phi_z=0.0, rho=0.0),
}
for name, params in cases.items():
    rep = identification_report(params)
    worst = max((abs(e) for e in rep.errors.values()), default=float("nan"))
    print(f"{name:>26}: {rep.verdict:<17} {rep.decay_class:<15} max error {worst:.1e}")
