"""Ricci potentials, harmonic deformation directions, ``h_eta`` and ``I_eta``."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg, sparse

from .errors import NotExact, NotKaehler, NotPositive, ShapeMismatch, Unbounded
from .grid import cofactor, FormField, Grid, PotentialVector, ScalarField, VolumeDensity, poisson_solve
from .toric import Decomposition, GuilleminPotential

__all__ = [
    "MetricTuple",
    "RicciPotentialTuple",
    "HarmonicDeformation",
    "ricci_potential",
    "cke_residual",
    "harmonic_representative",
    "make_deformation",
    "scaling_increments",
    "trace_free_basis",
    "h_eta",
    "i_eta",
    "reference_volume",
    "corrected_determinant",
    "determinant_jacobian",
    "NORM_CONVENTION",
]

HARMONIC_TOL = 1e-8

NORM_CONVENTION = (
    "deformations normalised by ||eta||^2 = sum_i int |eta_i|^2_{sum_j theta_j} dV0, "
    "dV0 = theta_1^n / int theta_1^n")


def _initial_moment(grid: Grid, supports: np.ndarray) -> np.ndarray:
    nu = grid.background.normal_array()
    lP = grid.reference.ell(grid.y)
    target = lP * supports - supports
    y0 = np.linalg.lstsq(nu, target.T, rcond=None)[0].T
    l = y0 @ nu.T + supports
    if np.any(l <= 0):
        return None
    return y0


def corrected_determinant(grid: Grid, base_hess: np.ndarray, base_det: np.ndarray,
                          phi: np.ndarray) -> np.ndarray:
    """``det(A + D^2 phi)`` with the correction terms in divergence form.

    ``det(A + D^2 phi) = det A + d_a(cof(A)^ab d_b phi) + det D^2 phi`` and in two
    dimensions ``det D^2 phi = d_a(cof(D^2 phi)^ab d_b phi) / 2``.  The weak
    discretisation keeps every class volume exactly fixed and makes the
    linearisation the self-adjoint Laplacian.
    """
    out = base_det + grid.divergence(cofactor(base_hess), phi)
    if grid.n == 2:
        out = out + 0.5 * grid.divergence(cofactor(grid.hessian(phi)), phi)
    return out


def determinant_jacobian(grid: Grid, base_hess: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Dense derivative of ``corrected_determinant`` for one factor."""
    J = grid.divergence_matrix(cofactor(base_hess))
    if grid.n == 2:
        J += 0.5 * grid.divergence_matrix(cofactor(grid.hessian(phi)))
        # derivative through cof(D^2 phi) in the flux
        Hs = grid.hessian_sparse
        H01 = 0.5 * (Hs[0][1] + Hs[1][0])
        g = grid.grad(phi)
        W = grid.dx_weights
        Dx = grid.dx_sparse
        q0 = sparse.diags(g[:, 0]) @ Hs[1][1] - sparse.diags(g[:, 1]) @ H01
        q1 = sparse.diags(g[:, 1]) @ Hs[0][0] - sparse.diags(g[:, 0]) @ H01
        flux = Dx[0].T @ sparse.diags(W) @ q0 + Dx[1].T @ sparse.diags(W) @ q1
        J -= 0.5 * (sparse.diags(1.0 / W) @ flux).toarray()
    return J


@dataclass
class MetricTuple:
    """N torus-invariant Kähler potentials sampled on a grid.

    ``psi``, ``grad`` and ``hess`` hold the full potentials, their moment maps
    and Hessians; ``det`` holds the volume densities ``det D^2 psi_i``.
    ``supports`` are the current class support numbers, shape ``(N, F)``.
    ``phi`` is the accumulated smooth correction on top of ``base`` (the
    uncorrected ``(psi, grad, hess, det)``).
    """

    decomposition: Decomposition
    grid: Grid
    psi: np.ndarray
    grad: np.ndarray
    hess: np.ndarray
    supports: np.ndarray
    phi: np.ndarray = None
    det: np.ndarray = None
    base: tuple = field(default=None, repr=False)

    def __post_init__(self):
        if self.phi is None:
            self.phi = np.zeros(self.psi.shape)
        if self.det is None:
            self.det = np.linalg.det(self.hess)
        if self.base is None:
            if np.any(self.phi):
                raise ValueError("a corrected tuple needs its base")
            self.base = (self.psi, self.grad, self.hess, self.det)

    @property
    def N(self) -> int:
        return self.psi.shape[0]

    @classmethod
    def reference(cls, decomposition: Decomposition, grid: Grid) -> "MetricTuple":
        if grid.background is not decomposition.background and grid.background != decomposition.background:
            raise ValueError("grid and decomposition live on different backgrounds")
        sup = decomposition.supports()
        psi, grad, hess, det = [], [], [], []
        for i in range(decomposition.N):
            pot = GuilleminPotential(grid.background.normal_array(), sup[i])
            v, y, h = pot.evaluate(grid.x, _initial_moment(grid, sup[i]))
            psi.append(v)
            grad.append(y)
            hess.append(h)
            # det D^2_x psi = det H_ref / det Hess(u) evaluated without cancellation
            det.append(np.exp(-np.linalg.slogdet(pot.hess_u(y))[1]))
        return cls(decomposition, grid, np.array(psi), np.array(grad), np.array(hess), sup,
                   None, np.array(det))

    def factor_potential(self, i: int) -> GuilleminPotential:
        return GuilleminPotential(self.grid.background.normal_array(), self.supports[i])

    def with_correction(self, phi: np.ndarray) -> "MetricTuple":
        """Add smooth potentials ``phi`` (shape ``(N, K)``)."""
        phi = np.asarray(phi, dtype=float)
        if phi.shape != self.psi.shape:
            raise ShapeMismatch(f"expected shape {self.psi.shape}, got {phi.shape}")
        return self.with_total_correction(self.phi + phi)

    def with_total_correction(self, phi: np.ndarray) -> "MetricTuple":
        """The base tuple corrected by exactly ``phi``."""
        g = self.grid
        psi0, grad0, hess0, det0 = self.base
        return replace(self, psi=psi0 + phi, grad=grad0 + g.grad(phi), hess=hess0 + g.hessian(phi),
                       det=corrected_determinant(g, hess0, det0, phi), phi=phi)

    def forms(self):
        return [FormField(self.grid, h) for h in self.hess]

    def volume_weights(self) -> np.ndarray:
        """``omega_i^n`` quadrature weights in Hessian units."""
        if np.any(self.det <= 0):
            raise NotPositive("volume density is not positive")
        return math.factorial(self.grid.n) * self.det * self.grid.dx_weights

    def check_kaehler(self):
        """Raise ``NotKaehler`` naming the first non-positive factor and node."""
        for i, h in enumerate(self.hess):
            bad = (h[:, 0, 0] <= 0) | (self.det[i] <= 0)
            if self.grid.n == 2:
                bad |= np.linalg.det(h) <= 0
            if np.any(bad):
                k = int(np.flatnonzero(bad)[0])
                raise NotKaehler(f"factor {i} not Kähler at node {k} (y={self.grid.y[k]})", i, k)


def reference_volume(metrics: MetricTuple) -> VolumeDensity:
    """``dV0 = theta_1^n / int theta_1^n`` as a normalised quadrature measure."""
    w = metrics.volume_weights()[0]
    return VolumeDensity(metrics.grid, w / w.sum())


@dataclass
class RicciPotentialTuple:
    f: PotentialVector
    constants: np.ndarray
    norms: dict
    weights: np.ndarray = field(repr=False, default=None)  # omega_i^n quadrature weights
    tilt: np.ndarray = field(repr=False, default=None)  # normalised e^{f_i} omega_i^n / V_i


def _check_positioning(metrics: MetricTuple, tol: float = 1e-9):
    total = metrics.supports.sum(axis=0)
    canonical = -np.array(metrics.grid.background.offsets, dtype=float)
    # translations of the sum are harmless only if they vanish
    drift = np.max(np.abs(total - canonical))
    if drift > tol:
        raise Unbounded(
            "factor supports do not add up to the canonical anticanonical polytope "
            f"(max deviation {drift:.3e}); the Ricci potential would grow affinely")


def ricci_potential(metrics: MetricTuple) -> RicciPotentialTuple:
    """``f_i = -log det D^2 psi_i - sum_j psi_j + c_i`` with ``int (1 - e^{f_i}) omega_i^n = 0``.

    The normalising constant has the closed form
    ``c_i = log V_i - log int e^{-sum psi} dx`` because
    ``e^{f_i} omega_i^n = e^{c_i} e^{-sum_j psi_j} dx`` for every ``i``.
    """
    _check_positioning(metrics)
    g = metrics.grid
    if np.any(metrics.det <= 0):
        i, k = np.argwhere(metrics.det <= 0)[0]
        raise NotPositive(f"factor {i} is not Kähler at node {k}")
    logdet = np.log(metrics.det)
    Psi = metrics.psi.sum(axis=0)
    fac = math.factorial(g.n)
    weights = metrics.volume_weights()
    V = weights.sum(axis=1)
    log_zeta = -Psi - g.logdetH
    shift = log_zeta.max()
    zeta = fac * np.exp(log_zeta - shift) * g.dy
    logZ = np.log(zeta.sum()) + shift
    c = np.log(V) - logZ
    f = -logdet - Psi + c[:, None]
    tilt = zeta / zeta.sum()
    ef = np.exp(f)
    normalization = np.abs(np.sum((1.0 - ef) * weights, axis=1)) / V
    norms = {
        "sup": float(np.max(np.abs(f))),
        "normalization": float(np.max(normalization)),
        "volumes": V.tolist(),
    }
    return RicciPotentialTuple(PotentialVector(g, f), c, norms, weights, tilt)


def cke_residual(metrics: MetricTuple) -> float:
    """``max_i ||f_i||_inf``; vanishes exactly at a coupled Kähler–Einstein tuple."""
    return ricci_potential(metrics).norms["sup"]


@dataclass
class HarmonicDeformation:
    """A direction ``eta = (eta_1, ..., eta_N)`` of harmonic invariant (1,1)-forms.

    ``values`` and ``grads`` are potentials of ``eta_i`` (log-singular at the
    boundary like any potential of a nonzero class) and their moment-map
    variations; ``increments`` are support-number increments, scaled with the
    forms.
    """

    increments: np.ndarray
    forms: np.ndarray
    values: np.ndarray
    grads: np.ndarray
    scale: float = 1.0
    traces: np.ndarray = None
    label: str = ""

    @property
    def N(self) -> int:
        return self.forms.shape[0]

    def scaled(self, s: float) -> "HarmonicDeformation":
        return replace(self, increments=self.increments * s, forms=self.forms * s,
                       values=self.values * s, grads=self.grads * s, scale=self.scale * s,
                       traces=None if self.traces is None else self.traces * s)

    def norm(self, theta: MetricTuple, dV0: VolumeDensity) -> float:
        S = np.linalg.inv(theta.hess.sum(axis=0))
        sq = sum(np.einsum("kab,kbc,kcd,kda->k", S, e, S, e) for e in self.forms)
        return float(np.sqrt(np.dot(sq, dV0.weights) / dV0.mass))


@dataclass
class DeformationComponent:
    form: np.ndarray
    value: np.ndarray
    grad: np.ndarray
    trace: float


def harmonic_representative(theta: MetricTuple, i: int, increment) -> DeformationComponent:
    """Harmonic representative for ``theta_i`` of a support-number increment.

    Starts from the variation of factor ``i``'s Guillemin potential (a closed
    representative of the class) and corrects it by ``i∂∂̄u`` with
    ``Delta_theta u = c - tr_theta eta_0`` so the trace becomes constant.
    """
    g = theta.grid
    delta = np.asarray(increment, dtype=float)
    if not np.any(delta):
        z = np.zeros((g.K, g.n, g.n))
        return DeformationComponent(z, np.zeros(g.K), np.zeros((g.K, g.n)), 0.0)
    pot = theta.factor_potential(i)
    _, yref, href = pot.evaluate(g.x, theta.grad[i] - g.grad(theta.phi[i]) if theta.phi is not None else None)
    g0, grad0, hess0 = pot.class_derivative(delta, yref, href)
    th = theta.hess[i]
    inv = np.linalg.inv(th)
    tr0 = np.einsum("kab,kba->k", inv, hess0)
    vol = g.volume_weights(th)
    const = np.dot(tr0, vol) / vol.sum()
    rhs = const - tr0
    rhs = rhs - np.dot(rhs, vol) / vol.sum()  # second pass removes cancellation error
    # near-degenerate nodes carry inversion noise with negligible volume; judge in L^2
    l2 = np.sqrt(np.dot(rhs ** 2, vol) / vol.sum())
    if l2 > HARMONIC_TOL * max(1.0, abs(const)):
        u = poisson_solve(FormField(g, th), ScalarField(g, rhs),
                          VolumeDensity(g, vol), tol=1e-7).values
        form = hess0 + g.hessian(u)
        value = g0 + u
        grad = grad0 + g.grad(u)
    else:
        form, value, grad = hess0, g0, grad0
    form = 0.5 * (form + np.swapaxes(form, 1, 2))
    return DeformationComponent(form, value, grad, float(const))


def scaling_increments(decomposition: Decomposition, mus) -> np.ndarray:
    """Increments moving ``Q_i`` to ``Q_i + t mu_i P`` (supports of P are all one)."""
    mus = np.asarray(mus, dtype=float)
    return np.outer(mus, np.ones(decomposition.background.n_facets))


def make_deformation(theta: MetricTuple, increments, dV0: VolumeDensity | None = None,
                     normalize: bool = True, label: str = "") -> HarmonicDeformation:
    """Harmonic deformation for per-factor support increments, unit-normalised."""
    inc = np.asarray(increments, dtype=float)
    if inc.shape != theta.supports.shape:
        raise ValueError(f"increments must have shape {theta.supports.shape}")
    if np.max(np.abs(inc.sum(axis=0))) > 1e-12:
        raise NotExact("class increments must sum to zero")
    comps = [harmonic_representative(theta, i, inc[i]) for i in range(theta.N)]
    eta = HarmonicDeformation(inc, np.array([c.form for c in comps]), np.array([c.value for c in comps]),
                              np.array([c.grad for c in comps]), 1.0,
                              np.array([c.trace for c in comps]), label)
    if normalize:
        dV0 = dV0 or reference_volume(theta)
        nrm = eta.norm(theta, dV0)
        if nrm == 0:
            raise ValueError("zero deformation cannot be normalised")
        eta = eta.scaled(1.0 / nrm)
        eta.scale = 1.0 / nrm
    return eta


def _volume_gradient(decomposition: Decomposition, supports_row) -> np.ndarray:
    """``dVol/dp_F`` for a polytope with the background's normals and given supports."""
    from .toric import Polytope
    from fractions import Fraction

    bg = decomposition.background
    q = Polytope.from_inequalities(bg.normals, [Fraction(s).limit_denominator(10**12) for s in supports_row])
    return np.array([float(q.face_measure(nu)) for nu in bg.normals])


def trace_free_basis(theta: MetricTuple, dV0: VolumeDensity | None = None, tol: float = 1e-10):
    """Basis of harmonic deformations with ``tr_{theta_i} eta_i = 0`` for all ``i``.

    A harmonic invariant form has constant trace ``d/dt log Vol(Q_i + t delta_i)``,
    so the conditions are linear in the increments: ``grad Vol(Q_i) . delta_i = 0``.
    Increments are taken modulo translations of each factor.
    """
    dec = theta.decomposition
    N = theta.N
    nu = dec.background.normal_array()
    F = nu.shape[0]
    B = linalg.null_space(nu.T)  # (F, F-n) complement of translations
    r = B.shape[1]
    if N < 2 or r == 0:
        return []
    nvar = (N - 1) * r
    A = np.zeros((N, nvar))
    grads = [_volume_gradient(dec, theta.supports[i]) for i in range(N)]
    for i in range(N - 1):
        A[i, i * r:(i + 1) * r] = grads[i] @ B
        A[N - 1, i * r:(i + 1) * r] = -(grads[N - 1] @ B)
    ns = linalg.null_space(A, rcond=tol)
    out = []
    for k in range(ns.shape[1]):
        inc = np.zeros((N, F))
        for i in range(N - 1):
            inc[i] = B @ ns[i * r:(i + 1) * r, k]
        inc[N - 1] = -inc[:N - 1].sum(axis=0)
        out.append(make_deformation(theta, inc, dV0, label=f"trace-free-{k}"))
    return out


def h_eta(eta: HarmonicDeformation, dV0: VolumeDensity) -> ScalarField:
    """Potential of ``sum_j eta_j`` with zero ``dV0``-mean."""
    if np.max(np.abs(eta.increments.sum(axis=0))) > 1e-12:
        raise NotExact("sum of class increments does not vanish")
    h = eta.values.sum(axis=0)
    h = h - np.dot(h, dV0.weights) / dV0.mass
    return ScalarField(dV0.grid, h)


def i_eta(eta: HarmonicDeformation, theta: MetricTuple) -> PotentialVector:
    """Centred pointwise norms ``|eta_i|^2_{theta_i} - mean``."""
    theta.check_kaehler()
    inv = np.linalg.inv(theta.hess)
    out = []
    for i in range(eta.N):
        sq = np.einsum("kab,kbc,kcd,kda->k", inv[i], eta.forms[i], inv[i], eta.forms[i])
        vol = theta.volume_weights()[i]
        out.append(sq - np.dot(sq, vol) / vol.sum())
    return PotentialVector(theta.grid, np.array(out))
