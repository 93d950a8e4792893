"""Expansion-order fits of the obstruction function and the predicted coefficients."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .continuation import NEWTON_TOL, ContinuationTrace
from .curvature import HarmonicDeformation, MetricTuple, h_eta, i_eta
from .errors import InsufficientData, NotTraceFree, NotTrivialStart
from .grid import PotentialVector, VolumeDensity, pairing
from .obstruction import KernelBasis, project_z

__all__ = [
    "ExpansionReport",
    "AlmostCKEReport",
    "fit_expansion",
    "predicted_order2",
    "predicted_order4",
    "almost_cke_check",
    "zero_floor",
]

MIN_POINTS = 5
TRACE_FREE_TOL = 1e-8


def zero_floor(tol: float = NEWTON_TOL) -> float:
    """Values of ``|F|`` below this are indistinguishable from zero."""
    return 10.0 * tol


@dataclass
class ExpansionReport:
    label: str
    order: float
    coefficient: float
    candidate_order: int | None = None
    predicted: float | None = None
    rel_discrepancy: float | None = None
    zero_at_resolution: bool = False
    r2: float = float("nan")
    t_range: tuple = (float("nan"), float("nan"))
    n_points: int = 0
    notes: list = field(default_factory=list)

    def with_prediction(self, predicted: float) -> "ExpansionReport":
        self.predicted = float(predicted)
        if predicted != 0 and np.isfinite(self.coefficient):
            self.rel_discrepancy = abs(self.coefficient - predicted) / abs(predicted)
        return self

    def to_json(self) -> dict:
        d = asdict(self)
        d["t_range"] = list(self.t_range)
        return d

    def csv_row(self, model: str = "", decomposition: str = "") -> list:
        return [model, decomposition, self.label, self.order, self.coefficient, self.predicted,
                self.rel_discrepancy]


def _window(trace: ContinuationTrace, floor: float):
    rows = [e for e in trace.converged if e["t"] > 0]
    if len(rows) < MIN_POINTS:
        raise InsufficientData(f"need at least {MIN_POINTS} converged entries with t > 0, got {len(rows)}")
    t = np.array([e["t"] for e in rows])
    if t.max() / t.min() < 10.0 - 1e-9:
        raise InsufficientData("converged entries must span a decade in t")
    F = np.array([e["curly_F"] for e in rows])
    cn = np.array([e.get("c_norm", float("nan")) for e in rows], dtype=float)
    keep = t <= trace.reached / 4.0
    if keep.sum() < MIN_POINTS:
        keep = np.zeros_like(keep)
        keep[np.argsort(t)[:MIN_POINTS]] = True
    # a kernel coefficient at the floor carries no information about F
    keep &= ~(np.isfinite(cn) & (cn < floor))
    return t[keep], F[keep], t, F


def fit_expansion(trace: ContinuationTrace, k: int | None = None, tol: float = NEWTON_TOL) -> ExpansionReport:
    """Leading order and coefficient of ``F(t) ~ a t^k``.

    The order comes from regressing ``log|F| = A + k log t + B t``; the
    coefficient from fitting ``F / t^k = a + b t`` with ``k`` the candidate or
    the rounded fitted order.
    """
    floor = zero_floor(tol)
    t, F, t_all, F_all = _window(trace, floor)
    label = trace.label
    if np.all(np.abs(F_all) < floor):
        return ExpansionReport(label, math.inf, 0.0, k, zero_at_resolution=True,
                               t_range=(float(t_all.min()), float(t_all.max())), n_points=len(t_all),
                               notes=["identically zero at resolution"])
    ok = np.abs(F) >= floor
    if ok.sum() < 3:
        raise InsufficientData("fewer than three samples above the zero floor")
    t, F = t[ok], F[ok]
    y = np.log(np.abs(F))
    X = np.column_stack([np.ones_like(t), np.log(t), t]) if len(t) >= MIN_POINTS else \
        np.column_stack([np.ones_like(t), np.log(t)])
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    pred = X @ beta
    ss = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - np.sum((y - pred) ** 2) / ss if ss > 0 else 1.0
    order = float(beta[1])
    kk = k if k is not None else int(round(order))
    R = F / t ** kk
    A = np.column_stack([np.ones_like(t), t])
    coef = float(np.linalg.lstsq(A, R, rcond=None)[0][0])
    return ExpansionReport(label, order, coef, k, r2=float(r2), t_range=(float(t.min()), float(t.max())),
                           n_points=len(t))


def _check_trace_free(eta: HarmonicDeformation):
    if np.max(np.abs(eta.traces)) > TRACE_FREE_TOL:
        raise NotTraceFree(f"tr_theta eta = {np.asarray(eta.traces).tolist()}")


def predicted_order2(eta: HarmonicDeformation, theta: MetricTuple, basis: KernelBasis,
                     dV0: VolumeDensity | None = None) -> float:
    """``<<pi_z h_eta, pi_z h_eta>>`` with ``h_eta`` repeated in every slot."""
    _check_trace_free(eta)
    dV0 = dV0 or basis.dV0
    h = h_eta(eta, dV0).values
    hv = PotentialVector(theta.grid, np.tile(h, (theta.N, 1)))
    z = project_z(hv, basis)
    return pairing(z, z, dV0)


def _is_trivial_start(theta: MetricTuple, rtol: float = 1e-9) -> bool:
    bg = theta.decomposition.background
    if not bg.guillemin_is_ke or not theta.decomposition.is_homothetic() or np.any(theta.phi):
        return False
    vols = np.asarray(theta.decomposition.volumes(), dtype=float)
    lam = (vols / vols.sum()) ** (1.0 / theta.grid.n)
    scaled = theta.hess / lam[:, None, None, None]
    return bool(np.max(np.abs(scaled - scaled[0])) <= rtol * np.max(np.abs(scaled[0])))


def predicted_order4(eta: HarmonicDeformation, theta: MetricTuple, basis: KernelBasis,
                     dV0: VolumeDensity | None = None) -> float:
    """``<<pi_z I_eta, pi_z I_eta>> / 4`` at a start ``theta_i = lambda_i omega_KE``."""
    if not _is_trivial_start(theta):
        raise NotTrivialStart("start is not a scaled Kähler–Einstein tuple")
    _check_trace_free(eta)
    dV0 = dV0 or basis.dV0
    z = project_z(i_eta(eta, theta), basis)
    return 0.25 * pairing(z, z, dV0)


@dataclass
class AlmostCKEReport:
    m: int
    slope: float
    C: float
    required: float
    passed: bool
    trivially: bool = False
    n_points: int = 0

    def to_json(self) -> dict:
        return asdict(self)


def almost_cke_check(trace: ContinuationTrace, m: int, floor: float = 1e-6,
                     column: str = "one_minus_ef_c2") -> AlmostCKEReport:
    """Log–log slope of ``max_i ||1 - e^{f_i}||`` against ``t``.

    Passes when the slope is at least ``(m + 1)/2 - 0.2``; a branch whose norms
    all sit below ``floor`` passes trivially with infinite slope.
    """
    rows = [e for e in trace.converged if e["t"] > 0]
    if len(rows) < 3:
        raise InsufficientData("need at least three converged entries with t > 0")
    t = np.array([e["t"] for e in rows])
    norms = np.array([np.max(e[column]) if np.ndim(e[column]) else e[column] for e in rows], dtype=float)
    required = (m + 1) / 2.0 - 0.2
    if np.all(norms < floor):
        return AlmostCKEReport(m, math.inf, 0.0, required, True, True, len(t))
    ok = norms >= floor
    if ok.sum() < 3:
        raise InsufficientData("fewer than three norms above the floor")
    slope, logC = np.polyfit(np.log(t[ok]), np.log(norms[ok]), 1)
    return AlmostCKEReport(m, float(slope), float(np.exp(logC)), required, bool(slope >= required),
                           False, int(ok.sum()))
