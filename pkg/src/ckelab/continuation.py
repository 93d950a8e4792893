"""Projected Newton continuation of coupled Kähler–Einstein tuples along a deformation.

Unknowns are the potential corrections ``Phi`` (shape ``(N, K)``) together with
multipliers ``lam`` for the kernel directions.  The bordered system is

    (1 - e^{f_i}) - sum_p lam_p v_p[i] = 0        i = 1..N
    <<Phi, v_p>> = 0                               v_p non-constant
    log int e^{-sum_j phi_j} dV0 = 0
    int phi_k dV0 = 0                              k = 2..N

At a solution ``lam_p = <<1 - e^{f}, v_p>>`` are the kernel coefficients ``c_p``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg

from .curvature import HarmonicDeformation, MetricTuple, corrected_determinant, determinant_jacobian, ricci_potential
from .errors import Diverged, NoConvergence, NotPositive
from .grid import Grid, PotentialVector, VolumeDensity, c2_norm, sobolev2_norm, spectral_tail
from .obstruction import KernelBasis, holomorphic_potential, kernel_basis
from .toric import Decomposition

__all__ = [
    "ProjectedResidual",
    "JacobianBlocks",
    "BranchSolution",
    "ContinuationTrace",
    "deformed_tuple",
    "operator_F",
    "jacobian",
    "solve_branch",
    "curly_F",
    "continue_in_t",
    "ricci_iteration_start",
]

NEWTON_TOL = 1e-9
MAX_NEWTON = 50
RESOLUTION_TOL = 1e-4


def deformed_tuple(theta: MetricTuple, eta: HarmonicDeformation | None, t: float) -> MetricTuple:
    """``theta_i + t eta_i`` as a new uncorrected tuple (``theta`` itself at ``t = 0``)."""
    if eta is None or t == 0:
        return theta
    hess = theta.hess + t * eta.forms
    det = theta.det + (np.linalg.det(hess) - np.linalg.det(theta.hess))
    m = MetricTuple(theta.decomposition, theta.grid, theta.psi + t * eta.values, theta.grad + t * eta.grads,
                    hess, theta.supports + t * eta.increments, None, det)
    m.check_kaehler()
    return m


def _l2(u: np.ndarray, m: np.ndarray) -> float:
    return float(np.sqrt(np.einsum("ik,ik,k->", u, u, m)))


@dataclass
class ProjectedResidual:
    """Components of the modified operator at one point."""

    perp_part: PotentialVector
    log_mass: float
    means: np.ndarray
    c: np.ndarray
    raw: np.ndarray = field(repr=False)  # 1 - e^{f_i}
    dV0: VolumeDensity = field(repr=False, default=None)

    @property
    def perp_norm(self) -> float:
        return _l2(self.perp_part.values, self.dV0.weights / self.dV0.mass)

    @property
    def norm(self) -> float:
        return self.perp_norm + abs(self.log_mass) + float(np.sum(np.abs(self.means)))


def _evaluate(base: MetricTuple, Phi: np.ndarray, basis: KernelBasis):
    metrics = base.with_total_correction(Phi)
    metrics.check_kaehler()
    rp = ricci_potential(metrics)
    r = 1.0 - np.exp(rp.f.values)
    m = basis.dV0.weights / basis.dV0.mass
    c = basis.coefficients(r)
    perp = r - np.einsum("p,pik->ik", c, basis.vectors)
    S = Phi.sum(axis=0)
    shift = -S.max()
    log_mass = float(np.log(np.dot(m, np.exp(-S - shift))) + shift)
    means = Phi[1:] @ m
    res = ProjectedResidual(PotentialVector(base.grid, perp), log_mass, means, c, r, basis.dV0)
    return res, metrics, rp


def operator_F(t: float, Phi, eta: HarmonicDeformation | None, theta: MetricTuple,
               basis: KernelBasis) -> ProjectedResidual:
    """The modified operator at ``(t, Phi)``; raises ``NotKaehler`` outside the cone."""
    Phi = np.asarray(getattr(Phi, "values", Phi), dtype=float)
    return _evaluate(deformed_tuple(theta, eta, t), Phi, basis)[0]


@dataclass
class JacobianBlocks:
    """Exact derivatives at one point; all blocks act on stacked ``(N*K,)`` vectors."""

    dr: np.ndarray  # d(1 - e^{f}) / dPhi, (NK, NK)
    dlog_mass: np.ndarray  # (NK,)
    dmeans: np.ndarray  # (N-1, NK)

    def projected(self, basis: KernelBasis) -> np.ndarray:
        """``pi_z^perp`` composed with ``dr``."""
        m = np.tile(basis.dV0.weights / basis.dV0.mass, basis.vectors.shape[1])
        V = basis.vectors.reshape(basis.d, -1)
        return self.dr - V.T @ ((V * m) @ self.dr)


def _jacobian(metrics: MetricTuple, rp, Phi: np.ndarray, m: np.ndarray) -> JacobianBlocks:
    g = metrics.grid
    N, K = Phi.shape
    ef = np.exp(rp.f.values)
    base_hess = metrics.base[2]
    coupling = np.eye(K) - np.outer(np.ones(K), rp.tilt)
    dr = np.zeros((N * K, N * K))
    for i in range(N):
        rows = slice(i * K, (i + 1) * K)
        for j in range(N):
            dr[rows, j * K:(j + 1) * K] = coupling
        dr[rows, rows] += determinant_jacobian(g, base_hess[i], Phi[i]) / metrics.det[i][:, None]
        dr[rows] *= ef[i][:, None]
    S = Phi.sum(axis=0)
    e = m * np.exp(-(S - S.min()))
    dlm = np.tile(-e / e.sum(), N)
    dmeans = np.zeros((N - 1, N * K))
    for k in range(1, N):
        dmeans[k - 1, k * K:(k + 1) * K] = m
    return JacobianBlocks(dr, dlm, dmeans)


def jacobian(t: float, Phi, eta: HarmonicDeformation | None, theta: MetricTuple,
             basis: KernelBasis) -> JacobianBlocks:
    Phi = np.asarray(getattr(Phi, "values", Phi), dtype=float)
    base = deformed_tuple(theta, eta, t)
    _, metrics, rp = _evaluate(base, Phi, basis)
    return _jacobian(metrics, rp, Phi, basis.dV0.weights / basis.dV0.mass)


@dataclass
class BranchSolution:
    t: float
    Phi: np.ndarray
    c: np.ndarray
    metrics: MetricTuple = field(repr=False)
    residual: ProjectedResidual = field(repr=False)
    iterations: int = 0
    history: list = field(default_factory=list)

    @property
    def closure(self) -> float:
        """``||(1 - e^f) - sum c_p v_p||_{L^2(dV0)}``."""
        return self.residual.perp_norm


def _bordered(blocks: JacobianBlocks, basis: KernelBasis, m: np.ndarray) -> np.ndarray:
    N = basis.vectors.shape[1]
    NK = blocks.dr.shape[0]
    d = basis.d
    nz = d - basis.n_constants
    V = basis.vectors.reshape(d, -1)
    mm = np.tile(m, N)
    A = np.zeros((NK + d, NK + d))
    A[:NK, :NK] = blocks.dr
    A[:NK, NK:] = -V.T
    A[NK:NK + nz, :NK] = V[basis.n_constants:] * mm
    A[NK + nz, :NK] = blocks.dlog_mass
    A[NK + nz + 1:, :NK] = blocks.dmeans
    return A


def _full_residual(res: ProjectedResidual, lam: np.ndarray, Phi: np.ndarray, basis: KernelBasis,
                   m: np.ndarray) -> np.ndarray:
    r1 = res.raw - np.einsum("p,pik->ik", lam, basis.vectors)
    r2 = np.einsum("pik,ik,k->p", basis.vectors[basis.n_constants:], Phi, m)
    return np.concatenate([r1.ravel(), r2, [res.log_mass], res.means])


def solve_branch(t: float, eta: HarmonicDeformation | None, theta: MetricTuple, basis: KernelBasis | None = None,
                 Phi0=None, tol: float = NEWTON_TOL, max_iter: int = MAX_NEWTON) -> BranchSolution:
    """Damped Newton on the bordered system at fixed ``t``.

    Converged when ``||perp|| + |log_mass| + sum |means| < tol``.  Raises
    ``Diverged`` after ``max_iter`` steps or when step halving stalls, and
    ``NotKaehler`` if ``theta + t eta`` itself leaves the cone.
    """
    basis = basis or kernel_basis(theta, scan=False)
    base = deformed_tuple(theta, eta, t)
    m = basis.dV0.weights / basis.dV0.mass
    N, K = theta.N, theta.grid.K
    Phi = np.zeros((N, K)) if Phi0 is None else np.array(getattr(Phi0, "values", Phi0), dtype=float)
    res, metrics, rp = _evaluate(base, Phi, basis)
    lam = res.c.copy()
    history = []

    def merit(res_, Phi_):
        r2 = np.einsum("pik,ik,k->p", basis.vectors[basis.n_constants:], Phi_, m)
        return res_.norm + float(np.sum(np.abs(r2)))

    cur = merit(res, Phi)
    history.append(cur)
    it = 0
    while cur >= tol:
        if it >= max_iter:
            raise Diverged(f"no convergence in {max_iter} Newton steps at t={t} (residual {cur:.3e})")
        it += 1
        A = _bordered(_jacobian(metrics, rp, Phi, m), basis, m)
        R = _full_residual(res, lam, Phi, basis, m)
        try:
            step = linalg.solve(A, -R, check_finite=False)
        except (linalg.LinAlgError, ValueError) as exc:
            raise Diverged(f"singular Newton system at t={t}: {exc}") from exc
        dPhi = step[:N * K].reshape(N, K)
        dlam = step[N * K:]
        alpha = 1.0
        while True:
            try:
                trial = _evaluate(base, Phi + alpha * dPhi, basis)
                new = merit(trial[0], Phi + alpha * dPhi)
            except NotPositive:
                new = math.inf
            if new < cur or (alpha == 1.0 and new < 10 * cur and cur > 1e-3):
                break
            alpha *= 0.5
            if alpha < 2.0 ** -30:
                raise Diverged(f"step halving stalled at t={t} (residual {cur:.3e})")
        Phi = Phi + alpha * dPhi
        lam = lam + alpha * dlam
        res, metrics, rp = trial
        cur = new
        history.append(cur)
    return BranchSolution(t, Phi, res.c, metrics, res, it, history)


def curly_F(sol: BranchSolution, basis: KernelBasis):
    """Futaki-type value ``F(t, eta)`` of the field attached to ``sum c_p v_p``.

    Returns ``(value, diagnostic)`` with ``diagnostic[i] = ||(1 - e^{f_i}) - H_i||_{L^2(dV0)}``.
    """
    V = basis.field_of(sol.c)
    metrics = sol.metrics
    w = metrics.volume_weights()
    r = sol.residual.raw
    m = basis.dV0.weights / basis.dV0.mass
    total = 0.0
    diag = []
    for i in range(metrics.N):
        H = holomorphic_potential(V, metrics.grad[i], w[i])
        total += float(np.dot(H * r[i], w[i]) / w[i].sum())
        diag.append(float(np.sqrt(np.dot((r[i] - H) ** 2, m))))
    return total, np.array(diag)


TRACE_FIELDS = ["t", "status", "iterations", "residual", "closure", "curly_F", "c_norm",
                "cke_residual", "phi_sobolev2", "phi_c2", "one_minus_ef_sup", "one_minus_ef_c2", "diagnostic", "c", "reason"]


@dataclass
class ContinuationTrace:
    """Per-``t`` record of a continuation run; failures are kept, never dropped."""

    label: str = ""
    entries: list = field(default_factory=list)
    fields: list = field(default_factory=list, repr=False)  # Phi arrays of converged entries

    @property
    def converged(self) -> list:
        return [e for e in self.entries if e["status"] == "converged"]

    @property
    def reached(self) -> float:
        c = self.converged
        return c[-1]["t"] if c else float("nan")

    def column(self, name: str) -> np.ndarray:
        return np.array([e[name] for e in self.converged], dtype=float)

    @classmethod
    def synthetic(cls, ts, values, label: str = "synthetic", **columns) -> "ContinuationTrace":
        """A trace holding planted ``curly_F`` values (and optional extra columns)."""
        tr = cls(label)
        for k, (t, v) in enumerate(zip(ts, values)):
            e = {name: float("nan") for name in TRACE_FIELDS}
            e.update(t=float(t), status="converged", iterations=0, curly_F=float(v), c=[], reason="")
            for name, col in columns.items():
                e[name] = col[k]
            tr.entries.append(e)
        return tr

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRACE_FIELDS)
            for e in self.entries:
                w.writerow([json.dumps(e[k]) if isinstance(e[k], (list, tuple)) else e[k] for k in TRACE_FIELDS])

    @classmethod
    def from_csv(cls, path, label: str = "") -> "ContinuationTrace":
        tr = cls(label or Path(path).stem)
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                e = {}
                for k, v in row.items():
                    if k in ("status", "reason"):
                        e[k] = v
                    elif v.startswith("["):
                        e[k] = json.loads(v)
                    elif k == "iterations":
                        e[k] = int(float(v))
                    else:
                        e[k] = float(v) if v not in ("", "None") else float("nan")
                tr.entries.append(e)
        return tr

    def to_json(self) -> dict:
        return {"label": self.label, "reached": self.reached, "entries": self.entries}


def _entry(sol: BranchSolution, basis: KernelBasis) -> dict:
    g = sol.metrics.grid
    F, diag = curly_F(sol, basis)
    r = sol.residual.raw
    return {
        "t": float(sol.t),
        "status": "converged",
        "iterations": sol.iterations,
        "residual": float(sol.history[-1]),
        "closure": sol.closure,
        "curly_F": F,
        "c_norm": float(np.linalg.norm(sol.c)),
        "cke_residual": float(ricci_potential(sol.metrics).norms["sup"]),
        "phi_sobolev2": [sobolev2_norm(p, g, basis.dV0) for p in sol.Phi],
        "phi_c2": [c2_norm(p, g) for p in sol.Phi],
        "one_minus_ef_sup": np.max(np.abs(r), axis=1).tolist(),
        "one_minus_ef_c2": [c2_norm(ri, g) for ri in r],
        "diagnostic": diag.tolist(),
        "c": sol.c.tolist(),
        "reason": "",
    }


def continue_in_t(theta: MetricTuple, eta: HarmonicDeformation, ts, basis: KernelBasis | None = None,
                  tol: float = NEWTON_TOL, warm: str = "secant", label: str = "") -> ContinuationTrace:
    """Solve along increasing ``ts``, warm-starting each point; stop at the first failure."""
    ts = [float(t) for t in ts]
    if any(b <= a for a, b in zip(ts, ts[1:])) or (ts and ts[0] < 0):
        raise ValueError("t grid must be non-negative and increasing")
    basis = basis or kernel_basis(theta, scan=False)
    trace = ContinuationTrace(label or getattr(eta, "label", ""))
    prev = []  # (t, Phi)
    for t in ts:
        if warm == "secant" and len(prev) >= 2:
            (t0, p0), (t1, p1) = prev[-2:]
            guess = p1 + (t - t1) / (t1 - t0) * (p1 - p0)
        else:
            guess = prev[-1][1] if prev else None
        try:
            try:
                sol = solve_branch(t, eta, theta, basis, guess, tol=tol)
            except (Diverged, NotPositive):
                if guess is None or not prev:
                    raise
                sol = solve_branch(t, eta, theta, basis, prev[-1][1], tol=tol)
        except (Diverged, NotPositive) as exc:
            e = {name: float("nan") for name in TRACE_FIELDS}
            e.update(t=t, status=type(exc).__name__, iterations=0, c=[], reason=str(exc))
            trace.entries.append(e)
            break
        trace.entries.append(_entry(sol, basis))
        trace.fields.append(sol.Phi)
        prev.append((t, sol.Phi))
    return trace


def _ma_step(grid: Grid, hess0: np.ndarray, det0: np.ndarray, phi: np.ndarray, target: np.ndarray,
             m: np.ndarray, tol: float = 1e-11, max_iter: int = 40) -> np.ndarray:
    """Solve ``log det(A + D^2 phi) = target`` (compatible up to a constant) with ``int phi dV = 0``."""
    K = grid.K
    for _ in range(max_iter):
        det = corrected_determinant(grid, hess0, det0, phi)
        if np.any(det <= 0):
            raise NoConvergence("Monge–Ampère step left the Kähler cone")
        G = np.log(det) - target
        G = G - np.dot(G, m)
        if np.max(np.abs(G)) < tol:
            return phi
        J = determinant_jacobian(grid, hess0, phi) / det[:, None]
        A = np.zeros((K + 1, K + 1))
        A[:K, :K] = J
        A[:K, K] = 1.0
        A[K, :K] = m
        step = linalg.solve(A, np.concatenate([-G, [-np.dot(phi, m)]]), check_finite=False)[:K]
        alpha = 1.0
        while alpha > 1e-6:
            trial = corrected_determinant(grid, hess0, det0, phi + alpha * step)
            if np.all(trial > 0):
                Gt = np.log(trial) - target
                Gt = Gt - np.dot(Gt, m)
                if np.max(np.abs(Gt)) < np.max(np.abs(G)):
                    break
            alpha *= 0.5
        phi = phi + alpha * step
    raise NoConvergence("Monge–Ampère Newton did not converge")


def ricci_iteration_start(decomposition: Decomposition, grid: Grid, max_iter: int = 60,
                          tol: float = 1e-6, theta: MetricTuple | None = None) -> MetricTuple:
    """Coupled Ricci iteration ``det D^2 psi_i^new ∝ e^{-sum_j psi_j^old}`` from the Guillemin tuple.

    Returns the corrected tuple once ``cke_residual < tol``; raises
    ``NoConvergence`` otherwise (the expected outcome on obstructed classes).
    """
    theta = theta or MetricTuple.reference(decomposition, grid)
    psi0, _, hess0, det0 = theta.base
    phi = theta.phi.copy()
    m = grid.dy / grid.dy.sum()
    history = []
    for k in range(max_iter):
        cur = theta.with_total_correction(phi)
        res = ricci_potential(cur).norms["sup"]
        history.append(res)
        if res < tol:
            tail = max(spectral_tail(grid, p) for p in cur.phi)
            if tail > RESOLUTION_TOL:
                # a coarse grid can fake a solution with a correction it cannot resolve
                raise NoConvergence(f"Ricci iteration reached residual {res:.3e} with an under-resolved "
                                    f"correction (spectral tail {tail:.2e}); refine the grid")
            return cur
        if not np.isfinite(res) or res > 1e6:
            break
        # an obstructed class plateaus while the potentials drift
        if k >= 8 and res > 0.98 * history[-6] and res > 100 * tol:
            raise NoConvergence(f"Ricci iteration stalled at residual {res:.3e} after {k} steps")
        S = cur.psi.sum(axis=0)
        new = np.empty_like(phi)
        try:
            for i in range(theta.N):
                new[i] = _ma_step(grid, hess0[i], det0[i], phi[i], -S, m)
        except NoConvergence as exc:
            raise NoConvergence(f"Ricci iteration failed at step {k} (residual {res:.3e}): {exc}") from exc
        phi = new
    last = history[-1] if history else math.inf
    raise NoConvergence(f"Ricci iteration did not reach {tol:g} in {max_iter} steps (last residual {last:.3e})")
