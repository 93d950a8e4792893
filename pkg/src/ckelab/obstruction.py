"""Holomorphic potentials, the coupled Futaki invariant and the operator L."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .curvature import MetricTuple, reference_volume, ricci_potential
from .errors import KernelExcess, ShapeMismatch
from .grid import PotentialVector, VolumeDensity
from .toric import Decomposition

__all__ = [
    "HolomorphicField",
    "KernelBasis",
    "holomorphic_potential",
    "futaki_coupled",
    "futaki_barycenter",
    "linearized_L",
    "L_matrix",
    "kernel_basis",
    "project_perp",
    "project_z",
    "check_nondegeneracy",
    "singular_value_scan",
]

ZERO_THRESHOLD = 1e-6
GAP_RATIO = 1e3


@dataclass(frozen=True)
class HolomorphicField:
    """``sum_k xi_k z_k d/dz_k`` for a real coefficient vector ``xi``."""

    coefficients: tuple

    def __post_init__(self):
        xi = np.asarray(self.coefficients, dtype=float).ravel()
        if not np.all(np.isfinite(xi)):
            raise ValueError("field coefficients must be finite")
        object.__setattr__(self, "coefficients", tuple(float(c) for c in xi))

    @property
    def xi(self) -> np.ndarray:
        return np.array(self.coefficients)

    @classmethod
    def generator(cls, n: int, k: int) -> "HolomorphicField":
        xi = np.zeros(n)
        xi[k] = 1.0
        return cls(tuple(xi))


def holomorphic_potential(V: HolomorphicField, moment: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Moment-map pairing ``<xi, grad psi>`` centred against ``omega^n`` weights."""
    H = np.asarray(moment) @ V.xi
    return H - np.dot(H, weights) / weights.sum()


def futaki_coupled(metrics: MetricTuple, V: HolomorphicField) -> float:
    """``sum_i int H_i (1 - e^{f_i}) omega_i^n / int omega_i^n``."""
    rp = ricci_potential(metrics)
    total = 0.0
    for i in range(metrics.N):
        w = rp.weights[i]
        H = holomorphic_potential(V, metrics.grad[i], w)
        total += np.dot(H * (1.0 - np.exp(rp.f.values[i])), w) / w.sum()
    return float(total)


def futaki_barycenter(decomposition: Decomposition, V: HolomorphicField, supports=None) -> float:
    """Closed form ``<xi, sum_i bar(Q_i)>`` of the toric coupled Futaki invariant.

    Independent of any metric or grid; used as an oracle for ``futaki_coupled``.
    """
    if supports is None:
        bars = decomposition.barycenters()
    else:
        from fractions import Fraction

        from .toric import Polytope

        bars = np.array([[float(c) for c in Polytope.from_inequalities(
            decomposition.background.normals,
            [Fraction(s).limit_denominator(10**12) for s in row]).barycenter()] for row in supports])
    return float(bars.sum(axis=0) @ V.xi)


def _mean0(dV0: VolumeDensity) -> np.ndarray:
    return dV0.weights / dV0.mass


def linearized_L(u: PotentialVector, theta: MetricTuple, dV0: VolumeDensity) -> PotentialVector:
    """``(L u)_i = Delta_{theta_i} u_i + sum_j u_j - int sum_j u_j dV0``."""
    if u.values.shape != (theta.N, theta.grid.K):
        raise ShapeMismatch(f"expected shape {(theta.N, theta.grid.K)}, got {u.values.shape}")
    g = theta.grid
    lap = g.laplacian(theta.hess, u.values)
    s = u.values.sum(axis=0)
    s = s - np.dot(s, _mean0(dV0))
    return PotentialVector(g, lap + s[None, :])


def L_matrix(theta: MetricTuple, dV0: VolumeDensity) -> np.ndarray:
    """Dense discretisation of ``L`` acting on stacked ``(N*K,)`` vectors."""
    g = theta.grid
    N, K = theta.N, g.K
    m = _mean0(dV0)
    coupling = np.eye(K) - np.outer(np.ones(K), m)
    A = np.zeros((N * K, N * K))
    for i in range(N):
        for j in range(N):
            A[i * K:(i + 1) * K, j * K:(j + 1) * K] = coupling
        A[i * K:(i + 1) * K, i * K:(i + 1) * K] += g.laplacian_matrix(theta.hess[i])
    return A


def singular_value_scan(theta: MetricTuple, dV0: VolumeDensity) -> np.ndarray:
    """Singular values of ``L`` in the ``L^2(dV0)`` norm, ascending."""
    A = L_matrix(theta, dV0)
    r = np.sqrt(np.tile(_mean0(dV0), theta.N))
    S = r[:, None] * A / r[None, :]
    asym = np.max(np.abs(S - S.T))
    if asym <= 1e-10 * np.max(np.abs(S)):
        # self-adjoint in L^2(dV0): singular values are |eigenvalues|
        return np.sort(np.abs(linalg.eigvalsh(0.5 * (S + S.T), check_finite=False)))
    return np.sort(linalg.svdvals(S, check_finite=False))


@dataclass
class KernelBasis:
    """Orthonormal basis ``v_1..v_d`` of ``R^N + H_z`` under ``<<., .>>_{dV0}``."""

    vectors: np.ndarray  # (d, N, K)
    n_constants: int
    field_coefficients: np.ndarray  # (d, n): xi of the field attached to each v_p
    dV0: VolumeDensity = field(repr=False)
    singular_values: np.ndarray = field(default=None, repr=False)
    gap_ratio: float = None

    @property
    def d(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim_z(self) -> int:
        return self.d - self.n_constants

    def coefficients(self, u: np.ndarray) -> np.ndarray:
        m = _mean0(self.dV0)
        return np.einsum("pik,ik,k->p", self.vectors, np.asarray(u), m)

    def field_of(self, c: np.ndarray) -> "HolomorphicField":
        return HolomorphicField(tuple(np.asarray(c) @ self.field_coefficients))


def _gram_schmidt(raw: np.ndarray, m: np.ndarray):
    """Modified Gram–Schmidt (two passes); returns vectors and transform ``T`` with ``v = T raw``."""
    d = raw.shape[0]
    T = np.eye(d)
    V = raw.copy()
    for p in range(d):
        for _ in range(2):
            for q in range(p):
                c = np.einsum("ik,ik,k->", V[p], V[q], m)
                V[p] -= c * V[q]
                T[p] -= c * T[q]
        nrm = np.sqrt(np.einsum("ik,ik,k->", V[p], V[p], m))
        V[p] /= nrm
        T[p] /= nrm
    return V, T


def kernel_basis(theta: MetricTuple, dV0: VolumeDensity | None = None, scan: bool = True,
                 threshold: float = ZERO_THRESHOLD, gap: float = GAP_RATIO) -> KernelBasis:
    """Constants plus moment-map potential vectors of the torus generators, orthonormalised.

    With ``scan`` the discretised ``L`` is checked for kernel directions beyond
    these; extra near-zero singular values raise ``KernelExcess``.
    """
    dV0 = dV0 or reference_volume(theta)
    g = theta.grid
    N, K, n = theta.N, g.K, g.n
    raw = np.zeros((N + n, N, K))
    for i in range(N):
        raw[i, i] = 1.0
    weights = theta.volume_weights()
    for k in range(n):
        V = HolomorphicField.generator(n, k)
        for i in range(N):
            raw[N + k, i] = holomorphic_potential(V, theta.grad[i], weights[i])
    vecs, T = _gram_schmidt(raw, _mean0(dV0))
    basis = KernelBasis(vecs, N, T[:, N:], dV0)
    if scan:
        sv = singular_value_scan(theta, dV0)
        basis.singular_values = sv
        d = basis.d
        zero = sv < threshold * sv[-1]
        nz = int(zero.sum())
        basis.gap_ratio = float(sv[d] / max(sv[d - 1], 1e-300))
        if nz > d:
            raise KernelExcess(f"{nz} near-zero singular values, expected {d}")
    return basis


def project_perp(u: PotentialVector, basis: KernelBasis) -> PotentialVector:
    c = basis.coefficients(u.values)
    return PotentialVector(u.grid, u.values - np.einsum("p,pik->ik", c, basis.vectors))


def project_z(u: PotentialVector, basis: KernelBasis) -> PotentialVector:
    c = basis.coefficients(u.values)
    return PotentialVector(u.grid, np.einsum("p,pik->ik", c, basis.vectors))


def check_nondegeneracy(theta: MetricTuple, dV0: VolumeDensity | None = None,
                        threshold: float = ZERO_THRESHOLD, gap: float = GAP_RATIO) -> dict:
    """Singular-value profile of ``L`` against the expected kernel ``N + dim z``."""
    dV0 = dV0 or reference_volume(theta)
    expected = theta.N + theta.grid.n
    report = {"expected": expected, "threshold": threshold, "gap_required": gap}
    try:
        sv = singular_value_scan(theta, dV0)
    except (np.linalg.LinAlgError, ValueError) as exc:
        report.update(passed=False, reason=f"scan failed: {exc}")
        return report
    count = int(np.sum(sv < threshold * sv[-1]))
    ratio = float(sv[expected] / max(sv[expected - 1], 1e-300)) if len(sv) > expected else float("nan")
    report.update(
        singular_values_low=sv[: expected + 6].tolist(),
        largest=float(sv[-1]),
        count=count,
        gap_ratio=ratio,
        passed=bool(count == expected and ratio > gap),
    )
    if not report["passed"]:
        report["reason"] = (f"{count} near-zero singular values (expected {expected}), "
                            f"gap ratio {ratio:.3g}")
    return report
