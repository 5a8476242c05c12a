"""Joint Gaussian Markov random field for the latent confounder and exposure.

The precision of ``(U, Z) | X`` is the block matrix ``[[G, Q], [Q', H]]``
where ``G`` and ``H`` are CAR precisions on a shared graph and ``Q`` is
diagonal with ``q_ii = -rho * sqrt(g_ii * h_ii)``. For CAR blocks this gives
``Q = -rho * sqrt(tau_u * tau_z) * D``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg
import scipy.sparse as sps
import scipy.sparse.linalg as spla

from .graph import AdjacencyGraph, CarParams, car_precision, grid, ring

__all__ = [
    "NonPositiveDefiniteError",
    "JointPrecision",
    "GaussianLaw",
    "SpectralJoint",
    "build_joint_precision",
    "conditional_u_given_z",
    "marginal_z_law",
    "rho_bound",
    "exact_rho_limit",
    "condition_number_log_prior",
    "surrogate_condition_number",
    "default_surrogate",
]


class NonPositiveDefiniteError(ValueError):
    def __init__(self, message, params=None):
        super().__init__(message if params is None else f"{message}: {params}")
        self.params = params


@dataclass(frozen=True)
class GaussianLaw:
    """Multivariate normal given by its mean and either precision or covariance."""

    mean: np.ndarray
    matrix: object
    kind: str = "precision"

    def __post_init__(self):
        if self.kind not in ("precision", "covariance"):
            raise ValueError(f"kind must be 'precision' or 'covariance', got {self.kind!r}")
        if self.matrix.shape != (len(self.mean), len(self.mean)):
            raise ValueError("mean and matrix dimensions disagree")

    def dense(self) -> np.ndarray:
        m = self.matrix
        return m.toarray() if sps.issparse(m) else np.asarray(m)

    def covariance(self) -> np.ndarray:
        if self.kind == "covariance":
            return self.dense()
        return np.linalg.inv(self.dense())


@dataclass(frozen=True, eq=False)
class JointPrecision:
    graph: AdjacencyGraph
    g_params: CarParams
    h_params: CarParams
    rho: float

    @cached_property
    def G(self) -> sps.csr_matrix:
        return car_precision(self.graph, self.g_params)

    @cached_property
    def H(self) -> sps.csr_matrix:
        return car_precision(self.graph, self.h_params)

    @cached_property
    def q_diag(self) -> np.ndarray:
        return -self.rho * np.sqrt(self.G.diagonal() * self.H.diagonal())

    @cached_property
    def Q(self) -> sps.csr_matrix:
        return sps.diags(self.q_diag, format="csr")

    @cached_property
    def full(self) -> sps.csr_matrix:
        return sps.bmat([[self.G, self.Q], [self.Q, self.H]], format="csr")

    @property
    def params(self) -> tuple:
        return (self.g_params.tau, self.g_params.phi,
                self.h_params.tau, self.h_params.phi, self.rho)

    def spectral(self) -> "SpectralJoint":
        return SpectralJoint.for_graph(self.graph)


def build_joint_precision(graph: AdjacencyGraph, g_params: CarParams,
                          h_params: CarParams, rho: float) -> JointPrecision:
    if not abs(rho) < 1:
        raise ValueError(f"rho must lie in (-1, 1), got {rho}")
    graph.require_no_isolated()
    jp = JointPrecision(graph, g_params, h_params, float(rho))
    sj = SpectralJoint.for_graph(graph)
    if not sj.is_pd(g_params.phi, h_params.phi, rho):
        raise NonPositiveDefiniteError("joint precision is not positive definite",
                                       jp.params)
    return jp


def _solve_G(jp: JointPrecision, b: np.ndarray) -> np.ndarray:
    if jp.graph.n <= 512:
        c = scipy.linalg.cho_factor(jp.G.toarray(), lower=True)
        return scipy.linalg.cho_solve(c, b)
    return spla.spsolve(sps.csc_matrix(jp.G), b)


def conditional_u_given_z(jp: JointPrecision, z, x_mat, gamma) -> GaussianLaw:
    """Law of ``U | Z, X``: mean ``-G^{-1} Q (z - X gamma)``, precision ``G``."""
    z = np.asarray(z, dtype=float)
    resid = z - _mean(x_mat, gamma, len(z))
    if len(z) != jp.graph.n:
        raise ValueError(f"z has length {len(z)}, graph has {jp.graph.n} nodes")
    mean = -_solve_G(jp, jp.q_diag * resid)
    return GaussianLaw(mean, jp.G, "precision")


def marginal_z_law(jp: JointPrecision, x_mat, gamma) -> GaussianLaw:
    """Law of ``Z | X`` with ``U`` integrated out: precision ``H - Q G^{-1} Q``."""
    n = jp.graph.n
    mean = _mean(x_mat, gamma, n)
    Ginv_Q = _solve_G(jp, np.diag(jp.q_diag))
    prec = jp.H.toarray() - jp.q_diag[:, None] * Ginv_Q
    prec = 0.5 * (prec + prec.T)
    return GaussianLaw(mean, prec, "precision")


def _mean(x_mat, gamma, n):
    if x_mat is None:
        return np.zeros(n)
    x_mat = np.asarray(x_mat, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    if x_mat.ndim != 2 or x_mat.shape[0] != n or x_mat.shape[1] != len(gamma):
        raise ValueError(f"design of shape {x_mat.shape} incompatible with "
                         f"n={n} and {len(gamma)} coefficients")
    return x_mat @ gamma


def _dense(m):
    return m.toarray() if sps.issparse(m) else np.asarray(m, dtype=float)


def rho_bound(G, H) -> float:
    """Conservative bound on ``|rho|`` that guarantees a PD joint precision.

    ``min(lambda_min(G), lambda_min(H)) / sqrt(max_i g_ii h_ii)``.
    """
    Gd, Hd = _dense(G), _dense(H)
    if Gd.shape != Hd.shape:
        raise ValueError("G and H must have the same dimension")
    lg = np.linalg.eigvalsh(Gd)[0]
    lh = np.linalg.eigvalsh(Hd)[0]
    if lg <= 0 or lh <= 0:
        raise NonPositiveDefiniteError("rho_bound needs PD blocks",
                                       (float(lg), float(lh)))
    return float(min(lg, lh) / np.sqrt(np.max(np.diag(Gd) * np.diag(Hd))))


def exact_rho_limit(graph: AdjacencyGraph, phi_u: float, phi_z: float) -> float:
    """Supremum of ``|rho|`` keeping the joint CAR precision PD.

    With ``S = D^{-1/2} W D^{-1/2}`` having eigenvalues ``lam``, the joint
    precision is PD iff ``rho^2 < (1 - phi_u lam)(1 - phi_z lam)`` for all
    ``lam``. The limit does not depend on the precision scales.
    """
    return SpectralJoint.for_graph(graph).rho_limit(phi_u, phi_z)


def condition_number_log_prior(kappa: float, rate: float = 0.1) -> float:
    """Log-density of an Exponential(rate) left-truncated at 1.

    ``kappa == 1`` gets the boundary density rather than ``-inf``.
    """
    if rate <= 0:
        raise ValueError("rate must be positive")
    if not kappa >= 1.0:
        return -math.inf
    return math.log(rate) - rate * (kappa - 1.0)


def default_surrogate(kind: str = "ring") -> AdjacencyGraph:
    """Small graph on which the condition-number prior is evaluated."""
    if kind in ("ring", "ring4"):
        return ring(4)
    if kind in ("grid", "grid4x4"):
        return grid(4, 4)
    raise ValueError(f"unknown surrogate {kind!r}")


def surrogate_condition_number(g_params: CarParams, h_params: CarParams, rho: float,
                               surrogate_graph: AdjacencyGraph | None = None) -> float:
    graph = default_surrogate() if surrogate_graph is None else surrogate_graph
    kappa = SpectralJoint.for_graph(graph).condition_number(
        g_params.tau, g_params.phi, h_params.tau, h_params.phi, rho)
    if not np.isfinite(kappa):
        raise NonPositiveDefiniteError("surrogate joint precision is not PD",
                                       (g_params.tau, g_params.phi,
                                        h_params.tau, h_params.phi, rho))
    return kappa


_SPECTRAL_CACHE: dict = {}


@dataclass(frozen=True, eq=False)
class SpectralJoint:
    """Spectral shortcuts for joint CAR precisions on a fixed graph.

    With ``Delta = diag(D^{1/2}, D^{1/2})`` the joint precision factors as
    ``Delta [[tau_u (I - phi_u S), c I], [c I, tau_z (I - phi_z S)]] Delta``
    with ``c = -rho sqrt(tau_u tau_z)``; the inner matrix splits into 2x2
    blocks along the eigenvectors of ``S``.
    """

    graph: AdjacencyGraph
    lam: np.ndarray
    sum_log_deg: float
    degree: float | None = None
    _dense_cache: dict = field(default_factory=dict)

    @classmethod
    def for_graph(cls, graph: AdjacencyGraph) -> "SpectralJoint":
        key = id(graph)
        hit = _SPECTRAL_CACHE.get(key)
        if hit is not None and hit.graph is graph:
            return hit
        lam, _ = graph.normalized_spectrum
        deg = float(graph.degrees[0]) if graph.is_regular else None
        sj = cls(graph, lam, float(np.sum(np.log(graph.degrees))), deg)
        if len(_SPECTRAL_CACHE) > 64:
            _SPECTRAL_CACHE.clear()
        _SPECTRAL_CACHE[key] = sj
        return sj

    @property
    def n(self) -> int:
        return self.graph.n

    def is_pd(self, phi_u, phi_z, rho) -> bool:
        if abs(phi_u) >= 1 or abs(phi_z) >= 1 or abs(rho) >= 1:
            return False
        a = 1.0 - phi_u * self.lam
        b = 1.0 - phi_z * self.lam
        return bool(np.min(a * b) > rho * rho)

    def rho_limit(self, phi_u, phi_z) -> float:
        a = 1.0 - phi_u * self.lam
        b = 1.0 - phi_z * self.lam
        return float(np.sqrt(max(np.min(a * b), 0.0)))

    def logdet_car(self, tau, phi) -> float:
        """``log |tau (D - phi W)|``."""
        return (self.sum_log_deg + self.n * math.log(tau)
                + float(np.sum(np.log1p(-phi * self.lam))))

    def logdet_joint(self, tau_u, phi_u, tau_z, phi_z, rho) -> float:
        """``log |P|`` of the joint precision, ``-inf`` outside the PD region."""
        a = 1.0 - phi_u * self.lam
        b = 1.0 - phi_z * self.lam
        m = a * b - rho * rho
        if np.min(m) <= 0:
            return -math.inf
        return (2.0 * self.sum_log_deg + self.n * (math.log(tau_u) + math.log(tau_z))
                + float(np.sum(np.log(m))))

    def eigenvalues(self, tau_u, phi_u, tau_z, phi_z, rho) -> np.ndarray:
        """All ``2n`` eigenvalues of the joint precision, ascending."""
        if self.degree is not None:
            ga = tau_u * (1.0 - phi_u * self.lam)
            hb = tau_z * (1.0 - phi_z * self.lam)
            c2 = rho * rho * tau_u * tau_z
            t = ga + hb
            disc = np.sqrt((ga - hb) ** 2 + 4.0 * c2)
            ev = self.degree * np.concatenate([(t - disc) / 2.0, (t + disc) / 2.0])
            return np.sort(ev)
        dw = self._dense_cache.get("dw")
        if dw is None:
            dw = self._dense_cache["dw"] = (np.diag(self.graph.degrees.astype(float)),
                                            self.graph.adjacency.toarray())
        D, W = dw
        q = -rho * math.sqrt(tau_u * tau_z) * D
        full = np.block([[tau_u * (D - phi_u * W), q], [q, tau_z * (D - phi_z * W)]])
        return np.linalg.eigvalsh(full)

    def condition_number(self, tau_u, phi_u, tau_z, phi_z, rho) -> float:
        ev = self.eigenvalues(tau_u, phi_u, tau_z, phi_z, rho)
        if ev[0] <= 0:
            return math.inf
        return float(ev[-1] / ev[0])
