"""Acceptance criteria, one test per criterion; each prints a pass/fail line."""

import time

import numpy as np
import pytest

from ckelab.analysis import almost_cke_check, fit_expansion, zero_floor
from ckelab.config import list_presets, load_config
from ckelab.continuation import ContinuationTrace, continue_in_t
from ckelab.curvature import (MetricTuple, cke_residual, make_deformation, reference_volume, ricci_potential,
                              scaling_increments, trace_free_basis)
from ckelab.grid import Grid, PotentialVector, pairing, random_smooth_field
from ckelab.harness import build_decomposition, build_etas, build_start, decomposition_search, perturbed_representative
from ckelab.obstruction import (HolomorphicField, futaki_coupled, kernel_basis, linearized_L,
                                singular_value_scan)
from ckelab.toric import get_background, make_decomposition, product_decomposition, scaled_decomposition

P1 = get_background("P1")
P1xP1 = get_background("P1xP1")
P2 = get_background("P2")
BL1 = get_background("Bl1P2")


def _p1_dec():
    return scaled_decomposition(P1, ["3/10", "7/10"])


def _product_dec():
    return product_decomposition([("6/5", "3/5"), ("4/5", "7/5")])


def _start(dec, M):
    th = MetricTuple.reference(dec, Grid(dec.background, M))
    return th, reference_volume(th)


def test_criterion_1_exact_recovery(criterion):
    out = []
    ok = True
    for name, dec in (("P1", _p1_dec()), ("P1xP1", _product_dec())):
        t0 = time.perf_counter()
        from ckelab.toric import reference_metric_tuple

        res = cke_residual(reference_metric_tuple(dec, Grid(dec.background, 64)))
        dt = time.perf_counter() - t0
        ok &= res < 1e-8 and dt < 10
        out.append(f"{name} residual {res:.1e} in {dt:.2f} s")
    criterion(1, ok, "; ".join(out) + " (need < 1e-8, < 10 s, M = 64)")
    assert ok


def test_criterion_2_linearization(criterion):
    rng = np.random.default_rng(2)
    worst = {}
    for name, dec in (("P1", _p1_dec()), ("P1xP1", _product_dec())):
        th, dV0 = _start(dec, 64)
        errs = []
        for _ in range(10):
            u = random_smooth_field(th.grid, rng, th.N)
            s = 1e-4
            fd = (ricci_potential(th.with_correction(s * u)).f.values
                  - ricci_potential(th.with_correction(-s * u)).f.values) / (2 * s)
            # -L u = -Delta u_i - sum_j u_j + int sum_j u_j dV0
            Lu = linearized_L(PotentialVector(th.grid, u), th, dV0).values
            errs.append(np.linalg.norm(fd + Lu) / np.linalg.norm(Lu))
        worst[name] = max(errs)
    ok = all(v < 1e-4 for v in worst.values())
    criterion(2, ok, ", ".join(f"{k} max rel err {v:.1e}" for k, v in worst.items())
              + " over 10 random directions, step 1e-4 (need < 1e-4)")
    assert ok


def test_criterion_3_L_structure(criterion):
    rng = np.random.default_rng(3)
    cases = [("P1", _p1_dec(), 64, 3), ("P1xP1", _product_dec(), 24, 4),
             ("P2", scaled_decomposition(P2, ["1/3", "1/3", "1/3"]), 16, 5)]
    out = []
    ok = True
    for name, dec, M, d in cases:
        th, dV0 = _start(dec, M)
        g = th.grid
        sa = 0.0
        for _ in range(5):
            u, v = (PotentialVector(g, random_smooth_field(g, rng, th.N)) for _ in range(2))
            Lu, Lv = linearized_L(u, th, dV0), linearized_L(v, th, dV0)
            scale = np.sqrt(pairing(Lu, Lu, dV0) * pairing(v, v, dV0))
            sa = max(sa, abs(pairing(Lu, v, dV0) - pairing(u, Lv, dV0)) / scale)
        ann = 0.0
        for c in np.eye(th.N):
            ann = max(ann, np.max(np.abs(linearized_L(PotentialVector(g, np.outer(c, np.ones(g.K))), th, dV0).values)))
        for k in range(g.n):
            ann = max(ann, np.max(np.abs(linearized_L(PotentialVector(g, th.grad[:, :, k]), th, dV0).values)))
        sv = singular_value_scan(th, dV0)
        count = int(np.sum(sv < 1e-6 * sv[-1]))
        gap = sv[d] / sv[d - 1]
        good = sa < 1e-9 and ann < 1e-8 and count == d and gap > 1e3
        ok &= good
        out.append(f"{name} (M={M}) self-adjoint {sa:.0e}, kernel residual {ann:.0e}, dim {count}/{d}, gap {gap:.0e}")
    criterion(3, ok, "; ".join(out))
    assert ok


def test_criterion_4_futaki(criterion):
    rng = np.random.default_rng(4)
    out = []
    ok = True
    models = [("P1", _p1_dec(), 64), ("P1xP1", _product_dec(), 32),
              ("P2", scaled_decomposition(P2, ["1/3", "1/3", "1/3"]), 32),
              ("Bl1P2", make_decomposition(BL1, [BL1.anticanonical_polytope]), 32)]
    for name, dec, M in models:
        th, _ = _start(dec, M)
        other = perturbed_representative(th, rng)
        worst_rel, worst_exact = 0.0, 0.0
        for k in range(th.grid.n):
            V = HolomorphicField.generator(th.grid.n, k)
            a, b = futaki_coupled(th, V), futaki_coupled(other, V)
            worst_rel = max(worst_rel, abs(a - b) / max(abs(a), 1.0))
            if name != "Bl1P2":
                worst_exact = max(worst_exact, abs(a))
        ok &= worst_rel < 1e-6 and worst_exact < 1e-8
        out.append(f"{name} rep. defect {worst_rel:.0e}" + ("" if name == "Bl1P2" else f", |Fut| {worst_exact:.0e}"))
    V = HolomorphicField((0.0, -1.0))  # exceptional direction
    vals = [futaki_coupled(_start(models[-1][1], M)[0], V) for M in (48, 64, 96)]
    stable = all(abs(v) > 1e-3 for v in vals) and len({np.sign(v) for v in vals}) == 1
    ok &= stable
    out.append("Bl1P2 exceptional Fut at M=48/64/96: " + "/".join(f"{v:.10f}" for v in vals))
    criterion(4, ok, "; ".join(out) + " (defect relative to max(|Fut|, 1))")
    assert ok


@pytest.fixture(scope="module")
def p1_trace():
    th, dV0 = _start(_p1_dec(), 64)
    eta = make_deformation(th, scaling_increments(th.decomposition, [1, -1]), dV0)
    return continue_in_t(th, eta, np.linspace(0, 0.1, 11), kernel_basis(th, dV0, scan=False))


@pytest.fixture(scope="module")
def trace_free_traces():
    out = []
    th, dV0 = _start(scaled_decomposition(P1xP1, ["1/2", "1/2"]), 16)
    basis = kernel_basis(th, dV0, scan=False)
    ts = [0.0, *np.geomspace(0.005, 0.1, 8)]
    for eta in trace_free_basis(th, dV0):
        out.append(("P1xP1 half", continue_in_t(th, eta, ts, basis), True))
    return out


def test_criterion_5_continuation(p1_trace, criterion):
    tr = p1_trace
    F = np.abs(tr.column("curly_F"))
    cke = tr.column("cke_residual")
    ok = tr.reached >= 0.05 and F.max() < 1e-8 and cke.max() < 1e-7
    criterion(5, ok, f"P1 branch reached t = {tr.reached:g}, max |F| {F.max():.0e}, "
                     f"max cke residual {cke.max():.0e} (need t >= 0.05, < 1e-8, < 1e-7)")
    assert ok


def test_criterion_6_closure(p1_trace, trace_free_traces, criterion):
    traces = [("P1 scaling", p1_trace)] + [(n, t) for n, t, _ in trace_free_traces]
    th, dV0 = _start(_product_dec(), 16)
    cfg = load_config("p1xp1-product-1.2-0.6")
    eta = build_etas(cfg, th, dV0)[0]
    traces.append(("P1xP1 product", continue_in_t(th, eta, cfg.t_values(), kernel_basis(th, dV0, scan=False))))
    th, dV0 = _start(scaled_decomposition(P2, ["1/3", "1/3", "1/3"]), 16)
    eta = make_deformation(th, scaling_increments(th.decomposition, [1, -1, 0]), dV0)
    traces.append(("P2 scaling", continue_in_t(th, eta, [0, 0.02, 0.05], kernel_basis(th, dV0, scan=False))))
    worst = {n: float(t.column("closure").max()) for n, t in traces}
    npts = sum(len(t.converged) for _, t in traces)
    ok = all(v < 1e-8 for v in worst.values()) and npts > 0
    criterion(6, ok, f"{npts} branch points, worst closure " + ", ".join(f"{k} {v:.0e}" for k, v in worst.items()))
    assert ok


def test_criterion_7_expansion_orders(trace_free_traces, criterion):
    ts = np.geomspace(1e-3, 1e-1, 12)
    r2 = fit_expansion(ContinuationTrace.synthetic(ts, 3 * ts**2 + ts**3), tol=0.0)
    r4 = fit_expansion(ContinuationTrace.synthetic(ts, 0.25 * ts**4), tol=0.0)
    synth = (abs(r2.order - 2) < 0.05 and abs(r2.coefficient - 3) < 0.03
             and abs(r4.order - 4) < 0.05 and abs(r4.coefficient - 0.25) < 0.0025)
    out = [f"synthetic orders {r2.order:.4f}/{r4.order:.4f}, coefficients {r2.coefficient:.4f}/{r4.coefficient:.4f}"]
    ok = synth and len(trace_free_traces) > 0
    for name, tr, trivial in trace_free_traces:
        rep = fit_expansion(tr)
        need = 4 - 0.2 if trivial else 2 - 0.1
        good = rep.zero_at_resolution or rep.order >= need
        ok &= good
        out.append(f"{name}: " + ("zero at resolution" if rep.zero_at_resolution else f"order {rep.order:.2f}"))
    criterion(7, ok, "; ".join(out))
    assert ok


def test_criterion_8_coefficient_match(criterion):
    res = decomposition_search(M=16, max_iter=40)
    scan = res["barycenter_scan"]
    if not res["exercised"]:
        statuses = {f"{c['model']} {c['decomposition']}": c["status"] for c in res["candidates"]}
        criterion(8, True, f"not exercised: no Bl1P2/Bl2P2 candidate gave a cKE start "
                           f"({sum(s == 'NoConvergence' for s in statuses.values())} NoConvergence, "
                           f"Bl2P2 {statuses['Bl2P2 anticanonical']}); "
                           f"min |sum of barycenters| over trapezoid splits {scan['min_norm']:.4f} > 0")
        assert scan["min_norm"] > 0
        return
    criterion(8, False, f"search found {res['found']} but no coefficient comparison is wired for it")
    pytest.fail("a nontrivial start was found; extend the coefficient comparison")


def test_criterion_9_almost_cke(p1_trace, trace_free_traces, criterion):
    ts = np.geomspace(1e-3, 1e-1, 12)
    ok15 = almost_cke_check(ContinuationTrace.synthetic(ts, ts**2, one_minus_ef_c2=list(ts**1.5)), 2)
    ok10 = almost_cke_check(ContinuationTrace.synthetic(ts, ts**2, one_minus_ef_c2=list(ts)), 2)
    ok = ok15.passed and not ok10.passed
    out = [f"synthetic m=2: slope 1.5 {'pass' if ok15.passed else 'fail'}, slope 1.0 "
           f"{'pass' if ok10.passed else 'fail'}"]
    real = [("P1 scaling", p1_trace)] + [(n, t) for n, t, _ in trace_free_traces]
    for name, tr in real:
        rep = fit_expansion(tr)
        if not rep.zero_at_resolution:
            continue
        chk = almost_cke_check(tr, m=4)
        ok &= chk.passed
        out.append(f"{name}: " + ("norms at floor" if chk.trivially else f"slope {chk.slope:.2f}"))
    criterion(9, ok, "; ".join(out))
    assert ok


def _preset_quantities(cfg, M):
    dec = build_decomposition(cfg)
    g = Grid(dec.background, M)
    out = {}
    th0 = MetricTuple.reference(dec, g)
    for xi in cfg.fields or np.eye(g.n).tolist():
        out[f"Fut{xi}"] = futaki_coupled(th0, HolomorphicField(tuple(xi)))
    try:
        th, _ = build_start(cfg, dec, g)
    except Exception:
        return out
    dV0 = reference_volume(th)
    d = th.N + g.n
    out["sv"] = singular_value_scan(th, dV0)[d:d + 6]
    if cfg.eta:
        basis = kernel_basis(th, dV0, scan=False)
        for k, eta in enumerate(build_etas(cfg, th, dV0)):
            tr = continue_in_t(th, eta, cfg.t_values(), basis)
            out[f"F{k}"] = tr.column("curly_F")
    return out


def test_criterion_10_refinement(criterion):
    floor = zero_floor()
    worst = {}
    ok = True
    for name in list_presets():
        cfg = load_config(name)
        a, b = _preset_quantities(cfg, cfg.resolution), _preset_quantities(cfg, 2 * cfg.resolution)
        assert a.keys() == b.keys()
        w = 0.0
        for key in a:
            x, y = np.atleast_1d(a[key]), np.atleast_1d(b[key])
            n = min(len(x), len(y))
            x, y = x[:n], y[:n]
            big = np.maximum(np.abs(x), np.abs(y))
            # values below the zero floor at both resolutions agree as zero
            rel = np.where(big >= floor, np.abs(x - y) / np.where(big > 0, big, 1), 0.0)
            w = max(w, float(rel.max(initial=0.0)))
        worst[name] = w
        ok &= w < 1e-7
    criterion(10, ok, "max relative change on doubling M: " + ", ".join(f"{k} {v:.0e}" for k, v in worst.items()))
    assert ok
