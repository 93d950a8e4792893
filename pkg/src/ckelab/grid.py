"""Spectral grids over the moment polytope and the calculus built on them.

Points of the (open) toric manifold are parametrised by the moment map ``y``
of the background's canonical potential.  Torus-invariant smooth functions on
the compact manifold are exactly the smooth functions of ``y`` on the closed
polytope, so fields are collocated at Gauss–Legendre nodes of a square mapped
bilinearly onto the polytope.  On P1 the composite map is ``x = 2 atanh(s)``.

Derivatives with respect to log-coordinates use the chain rule
``d/dx_b = sum_a H_ba d/dy_a`` with ``H = D^2_x psi_ref``, which keeps every
intermediate quantity smooth up to the boundary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
from numpy.polynomial import legendre
from numpy.polynomial.legendre import leggauss
from scipy import linalg, sparse

from .errors import NotPositive, NotSolvable, ShapeMismatch, SolverDiverged, UnsupportedGeometry
from .toric import GuilleminPotential, ToricBackground

__all__ = [
    "Grid",
    "ScalarField",
    "FormField",
    "PotentialVector",
    "VolumeDensity",
    "diff_matrix",
    "cofactor",
    "ddbar",
    "trace",
    "integrate",
    "pairing",
    "poisson_solve",
    "volume_density",
    "sobolev2_norm",
    "c2_norm",
    "write_field",
    "random_smooth_field",
    "spectral_tail",
]


def cofactor(m: np.ndarray) -> np.ndarray:
    """Cofactor (adjugate) of stacked 1x1 or 2x2 matrices."""
    m = np.asarray(m)
    if m.shape[-1] == 1:
        return np.ones_like(m)
    out = np.empty_like(m)
    out[..., 0, 0] = m[..., 1, 1]
    out[..., 1, 1] = m[..., 0, 0]
    out[..., 0, 1] = -m[..., 0, 1]
    out[..., 1, 0] = -m[..., 1, 0]
    return out


def diff_matrix(nodes: np.ndarray) -> np.ndarray:
    """Barycentric collocation differentiation matrix on arbitrary distinct nodes."""
    x = np.asarray(nodes, dtype=float)
    dx = x[:, None] - x[None, :]
    np.fill_diagonal(dx, 1.0)
    # barycentric weights in log form to avoid overflow for large M
    logw = -np.sum(np.log(np.abs(dx)), axis=1)
    sign = np.prod(np.sign(dx), axis=1)
    logw -= logw.max()
    w = sign * np.exp(logw)
    D = (w[None, :] / w[:, None]) / dx
    np.fill_diagonal(D, 0.0)
    np.fill_diagonal(D, -D.sum(axis=1))
    return D


def _square_corners(background: ToricBackground) -> np.ndarray:
    verts = background.anticanonical_polytope.as_float()
    if len(verts) == 4:
        return verts
    if len(verts) == 3:
        # collapse one square corner onto the midpoint of the longest edge
        lengths = [np.linalg.norm(verts[(k + 1) % 3] - verts[k]) for k in range(3)]
        k = int(np.argmax(lengths))
        mid = 0.5 * (verts[k] + verts[(k + 1) % 3])
        return np.array([verts[(k + 1) % 3], verts[(k + 2) % 3], verts[k], mid])[[3, 0, 1, 2]]
    raise UnsupportedGeometry(
        f"{background.name}: polygons with {len(verts)} vertices have no smooth single-square chart")


class Grid:
    """Tensor Gauss–Legendre grid mapped onto the background's moment polytope."""

    def __init__(self, background: ToricBackground, M: int = 64):
        if M < 4:
            raise ValueError("need at least 4 nodes per axis")
        self.background = background
        self.M = int(M)
        self.n = background.dim
        s1, w1 = leggauss(self.M)
        self.D1 = diff_matrix(s1)
        self.s1 = s1
        n = self.n
        if n == 1:
            P = background.anticanonical_polytope.as_float()[:, 0]
            lo, hi = P.min(), P.max()
            self.sigma = s1[:, None]
            self.qweights = w1.copy()
            self.y = (lo + (s1 + 1.0) * (hi - lo) / 2.0)[:, None]
            self.DG = np.full((self.M, 1, 1), (hi - lo) / 2.0)
        else:
            S, T = np.meshgrid(s1, s1, indexing="ij")
            s, t = S.ravel(), T.ravel()
            self.sigma = np.stack([s, t], axis=1)
            self.qweights = np.outer(w1, w1).ravel()
            c = _square_corners(background)
            Nsh = np.stack([(1 - s) * (1 - t), (1 + s) * (1 - t), (1 + s) * (1 + t), (1 - s) * (1 + t)], 1) / 4
            dNs = np.stack([-(1 - t), (1 - t), (1 + t), -(1 + t)], 1) / 4
            dNt = np.stack([-(1 - s), -(1 + s), (1 + s), (1 - s)], 1) / 4
            self.y = Nsh @ c
            self.DG = np.stack([dNs @ c, dNt @ c], axis=2)  # [k, y_a, sigma_c]
        self.K = self.y.shape[0]
        self.detDG = np.linalg.det(self.DG)
        if np.any(self.detDG <= 0):
            raise UnsupportedGeometry("square-to-polytope map is not orientation preserving")
        self.invDG = np.linalg.inv(self.DG)  # [k, sigma_c, y_a]
        self.reference = GuilleminPotential(background.normal_array(), np.ones(background.n_facets))
        self.x = self.reference.x_of_y(self.y)
        Hu = self.reference.hess_u(self.y)
        self.H = np.linalg.inv(Hu)
        self.H = 0.5 * (self.H + np.swapaxes(self.H, 1, 2))
        self.logdetH = -np.linalg.slogdet(Hu)[1]
        self.dy = np.abs(self.detDG) * self.qweights
        # C[k, b, c] = d sigma_c / d x_b
        self.C = np.einsum("kba,kca->kbc", self.H, self.invDG)

    def __repr__(self):
        return f"Grid({self.background.name}, M={self.M})"

    # --- differentiation -------------------------------------------------
    def _dsigma(self, f: np.ndarray, c: int) -> np.ndarray:
        f = np.asarray(f, dtype=float)
        if self.n == 1:
            return f @ self.D1.T
        shape = f.shape[:-1] + (self.M, self.M)
        g = f.reshape(shape)
        if c == 0:
            out = np.einsum("ij,...jl->...il", self.D1, g)
        else:
            out = np.einsum("lj,...ij->...il", self.D1, g)
        return out.reshape(f.shape)

    def grad(self, f: np.ndarray) -> np.ndarray:
        """Gradient in log-coordinates, shape ``f.shape + (n,)``."""
        ds = np.stack([self._dsigma(f, c) for c in range(self.n)], axis=-1)
        return np.einsum("kbc,...kc->...kb", self.C, ds)

    def hessian(self, f: np.ndarray) -> np.ndarray:
        g = self.grad(f)
        h = np.stack([self.grad(g[..., b]) for b in range(self.n)], axis=-1)
        return 0.5 * (h + np.swapaxes(h, -1, -2))

    @cached_property
    def sigma_sparse(self):
        D = sparse.csr_matrix(self.D1)
        if self.n == 1:
            return [D]
        I = sparse.identity(self.M, format="csr")
        return [sparse.kron(D, I, format="csr"), sparse.kron(I, D, format="csr")]

    @cached_property
    def dx_sparse(self):
        Ds = self.sigma_sparse
        return [sum(sparse.diags(self.C[:, b, c]) @ Ds[c] for c in range(self.n)).tocsr()
                for b in range(self.n)]

    @cached_property
    def hessian_sparse(self):
        Dx = self.dx_sparse
        return [[(Dx[a] @ Dx[b]).tocsr() for b in range(self.n)] for a in range(self.n)]

    @property
    def sigma_matrices(self):
        return [D.toarray() for D in self.sigma_sparse]

    @property
    def dx_matrices(self):
        return [D.toarray() for D in self.dx_sparse]

    @property
    def hessian_matrices(self):
        return [[D.toarray() for D in row] for row in self.hessian_sparse]

    @cached_property
    def dx_weights(self) -> np.ndarray:
        """Quadrature weights of the flat measure ``dx = dy / det H``."""
        return self.dy * np.exp(-self.logdetH)

    def divergence_matrix(self, B: np.ndarray) -> np.ndarray:
        """Weak form of ``u -> sum_ab d_a(B^ab d_b u)`` against the flat measure ``dx``.

        Built as ``-W^{-1} sum Dx_a^T W B^ab Dx_b``, which drops boundary flux;
        torus-invariant fields on the compact manifold carry none.
        """
        W = self.dx_weights
        Dx = self.dx_sparse
        out = None
        for a in range(self.n):
            for b in range(self.n):
                term = Dx[a].T @ sparse.diags(W * B[:, a, b]) @ Dx[b]
                out = term if out is None else out + term
        return -(sparse.diags(1.0 / W) @ out).toarray()

    def divergence(self, B: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Matrix-free ``divergence_matrix(B) @ u`` for ``u`` of shape ``(..., K)``."""
        W = self.dx_weights
        flux = W[:, None] * np.einsum("...kab,...kb->...ka", B, self.grad(u))
        out = sum(flux[..., a] @ self.dx_sparse[a] for a in range(self.n))
        return -out / W

    def laplacian(self, omega: np.ndarray, u: np.ndarray) -> np.ndarray:
        det = np.linalg.det(omega)
        return self.divergence(cofactor(omega), u) / det

    def laplacian_matrix(self, omega: np.ndarray) -> np.ndarray:
        """Dense matrix of ``Delta_omega u = tr(omega^{-1} D^2 u)`` in divergence form.

        For a Hessian form ``det(omega) Delta_omega u = d_a(cof(omega)^ab d_b u)``;
        the weak discretisation is exactly self-adjoint for ``omega^n`` and
        annihilates only constants.
        """
        det = np.linalg.det(omega)
        return self.divergence_matrix(cofactor(omega)) / det[:, None]

    # --- measures --------------------------------------------------------
    def volume_weights(self, omega: np.ndarray) -> np.ndarray:
        """Quadrature weights of ``omega^n`` (Hessian units, ``int = n! Vol``)."""
        sign, logdet = np.linalg.slogdet(omega)
        if np.any(sign <= 0):
            raise NotPositive("form is not positive definite")
        return math.factorial(self.n) * np.exp(logdet - self.logdetH) * self.dy

    def shell(self) -> np.ndarray:
        """Indices of the outermost ring of nodes."""
        idx = np.arange(self.K)
        if self.n == 1:
            return np.array([0, self.M - 1])
        i, j = np.divmod(idx, self.M)
        return idx[(i == 0) | (j == 0) | (i == self.M - 1) | (j == self.M - 1)]


@dataclass(frozen=True)
class ScalarField:
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise ValueError("scalar field has non-finite values")


@dataclass(frozen=True)
class FormField:
    grid: Grid
    values: np.ndarray  # (K, n, n)

    def __post_init__(self):
        if not np.allclose(self.values, np.swapaxes(self.values, -1, -2), atol=1e-12, rtol=1e-10):
            raise ValueError("form field is not symmetric")


@dataclass(frozen=True)
class PotentialVector:
    grid: Grid
    values: np.ndarray  # (N, K)

    @property
    def N(self) -> int:
        return self.values.shape[0]

    def __add__(self, other):
        _check_same(self, other)
        return PotentialVector(self.grid, self.values + other.values)

    def __sub__(self, other):
        _check_same(self, other)
        return PotentialVector(self.grid, self.values - other.values)

    def __mul__(self, c):
        return PotentialVector(self.grid, self.values * c)

    __rmul__ = __mul__


@dataclass(frozen=True)
class VolumeDensity:
    """Quadrature measure per node; ``integrate`` is a weighted sum."""

    grid: Grid
    weights: np.ndarray

    def __post_init__(self):
        if np.any(self.weights < 0) or self.weights.sum() <= 0:
            raise ValueError("volume density must be nonnegative with positive mass")

    @property
    def mass(self) -> float:
        return float(self.weights.sum())

    def normalized(self) -> "VolumeDensity":
        return VolumeDensity(self.grid, self.weights / self.weights.sum())


def _values(f):
    return f.values if hasattr(f, "values") else np.asarray(f, dtype=float)


def _check_same(u, v):
    if u.values.shape != v.values.shape or u.grid is not v.grid:
        raise ShapeMismatch(f"potential vectors of shapes {u.values.shape} and {v.values.shape}")


def volume_density(omega, grid: Grid | None = None) -> VolumeDensity:
    grid = grid or omega.grid
    return VolumeDensity(grid, grid.volume_weights(_values(omega)))


def ddbar(phi) -> FormField:
    """Hessian of ``phi`` in log-coordinates (the i∂∂̄ operator in Hessian units).

    Differentiation is spectral in the moment coordinates, so ``phi`` must be a
    function on the manifold (smooth up to the polytope boundary).  Potentials
    of Kähler classes are log-singular there; their Hessians come from the
    closed-form Guillemin part plus ``ddbar`` of the smooth correction.
    """
    return FormField(phi.grid, phi.grid.hessian(phi.values))


def _check_positive(w: np.ndarray):
    # n <= 2: positive definite iff all leading minors positive
    bad = w[:, 0, 0] <= 0
    if w.shape[-1] == 2:
        bad |= np.linalg.det(w) <= 0
    if np.any(bad):
        k = int(np.flatnonzero(bad)[0])
        raise NotPositive(f"form fails positive definiteness at node {k}")


def trace(eta, omega) -> ScalarField:
    """Pointwise ``tr(omega^{-1} eta)``."""
    w = _values(omega)
    _check_positive(w)
    return ScalarField(omega.grid, np.einsum("kab,kba->k", np.linalg.inv(w), _values(eta)))


def integrate(f, dV: VolumeDensity) -> float:
    return float(np.dot(_values(f), dV.weights))


def pairing(u: PotentialVector, v: PotentialVector, dV0: VolumeDensity) -> float:
    """``<<u, v>> = int sum_i u_i v_i dV0`` with ``dV0`` normalised to mass one."""
    _check_same(u, v)
    return float(np.einsum("ik,ik,k->", u.values, v.values, dV0.weights) / dV0.mass)


def poisson_solve(omega: FormField, rhs: ScalarField, dV: VolumeDensity, tol: float = 1e-8) -> ScalarField:
    """Solve ``Delta_omega u = rhs`` with ``int u dV = 0``.

    ``Delta_omega`` is the divergence-form Laplacian of ``laplacian_matrix``.
    Compatibility is checked against the volume of ``omega``.
    """
    grid = omega.grid
    w = omega.values
    _check_positive(w)
    vol = grid.volume_weights(w)
    r = rhs.values
    scale = np.max(np.abs(r)) * vol.sum()
    compat = abs(np.dot(r, vol)) / max(scale, 1e-300)
    if scale > 0 and compat > tol:
        raise NotSolvable(f"right-hand side has nonzero mean (relative {compat:.3e})")
    L = grid.laplacian_matrix(w)
    K = grid.K
    m = dV.weights / dV.mass
    # bordered system: [L  1][u]   [rhs]
    #                  [m' 0][k] = [ 0 ]
    A = np.zeros((K + 1, K + 1))
    A[:K, :K] = L
    A[:K, K] = 1.0
    A[K, :K] = m
    b = np.concatenate([r, [0.0]])
    sol = linalg.solve(A, b)
    u = sol[:K]
    res = np.linalg.norm(L @ u - r) / max(np.linalg.norm(r), 1e-300)
    if np.linalg.norm(r) > 0 and res > 1e-6:
        raise SolverDiverged(f"Poisson residual {res:.3e}")
    return ScalarField(grid, u)


def sobolev2_norm(f: np.ndarray, grid: Grid, dV: VolumeDensity) -> float:
    """Discrete ``W^{2,2}`` norm from log-coordinate derivatives up to order two."""
    f = np.asarray(f, dtype=float)
    g = grid.grad(f)
    h = grid.hessian(f)
    m = dV.weights / dV.mass
    dens = f**2 + np.sum(g**2, axis=-1) + np.sum(h**2, axis=(-1, -2))
    return float(np.sqrt(np.dot(dens, m)))


def c2_norm(f: np.ndarray, grid: Grid) -> float:
    """Max of sup norms of ``f`` and its log-coordinate derivatives up to order two."""
    f = np.asarray(f, dtype=float)
    return float(max(np.max(np.abs(f)), np.max(np.abs(grid.grad(f))), np.max(np.abs(grid.hessian(f)))))


def spectral_tail(grid: Grid, f: np.ndarray, modes: int = 3) -> float:
    """Largest Legendre coefficient among the top ``modes`` degrees, relative to the largest overall."""
    M = grid.M
    V = legendre.legvander(grid.s1, M - 1)
    C = np.linalg.solve(V, np.asarray(f, dtype=float).reshape((M,) * grid.n))
    if grid.n == 2:
        C = np.linalg.solve(V, C.T).T
    a = np.abs(C)
    top = a.max()
    if top == 0:
        return 0.0
    idx = np.indices(a.shape)
    return float(a[np.any(idx >= M - modes, axis=0)].max() / top)


def random_smooth_field(grid: Grid, rng: np.random.Generator, count: int = 1, degree: int = 3) -> np.ndarray:
    """Random polynomials of total degree ``<= degree`` in the rescaled moment coordinates.

    Smooth torus-invariant functions on the compact manifold; shape ``(count, K)``,
    each normalised to unit sup norm.
    """
    y = grid.y / np.max(np.abs(grid.y))
    out = np.zeros((count, grid.K))
    for c in range(count):
        for i in range(degree + 1):
            for j in range(degree + 1 - i if grid.n == 2 else 1):
                mono = y[:, 0] ** i * (y[:, 1] ** j if grid.n == 2 else 1.0)
                out[c] += rng.standard_normal() * mono
        out[c] /= np.max(np.abs(out[c]))
    return out


def write_field(path, grid: Grid, values, names=None):
    """Columnar text: sigma, moment and log coordinates, then value columns."""
    values = np.atleast_2d(np.asarray(values, dtype=float))
    if values.shape[-1] != grid.K:
        values = values.T
    n = grid.n
    names = names or [f"f{k}" for k in range(values.shape[0])]
    cols = ([f"s{a}" for a in range(n)] + [f"y{a}" for a in range(n)]
            + [f"x{a}" for a in range(n)] + list(names))
    data = np.column_stack([grid.sigma, grid.y, grid.x, values.T])
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, data, header=" ".join(cols), fmt="%.17g")
