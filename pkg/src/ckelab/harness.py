"""Experiment drivers behind the command line: start tuples, runs, reports and manifests."""

from __future__ import annotations

import csv
import json
import platform
import sys
from concurrent.futures import ProcessPoolExecutor
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import fit_expansion, predicted_order2, predicted_order4, zero_floor
from .config import ExperimentConfig, parse_fraction
from .continuation import ContinuationTrace, continue_in_t, ricci_iteration_start
from .curvature import (NORM_CONVENTION, MetricTuple, cke_residual, make_deformation, reference_volume,
                        scaling_increments, trace_free_basis)
from .errors import (ConfigError, InsufficientData, NoConvergence, NotAvailable, NotExact, NotKaehler,
                     NotTraceFree, NotTrivialStart, UnsupportedGeometry)
from .grid import Grid, random_smooth_field, write_field
from .obstruction import (HolomorphicField, check_nondegeneracy, futaki_barycenter, futaki_coupled,
                          kernel_basis)
from .toric import (Decomposition, Polytope, get_background, make_decomposition, product_decomposition,
                    reference_metric_tuple, scaled_decomposition)

__all__ = [
    "build_decomposition",
    "build_start",
    "build_etas",
    "perturbed_representative",
    "bl1p2_split",
    "decomposition_search",
    "cmd_solve",
    "cmd_deform",
    "cmd_futaki",
    "cmd_kernel",
    "cmd_expand",
]

EXIT_OK, EXIT_CONFIG, EXIT_NONCONVERGENCE = 0, 1, 2


# --- building blocks --------------------------------------------------------

def build_decomposition(cfg: ExperimentConfig) -> Decomposition:
    bg = get_background(cfg.model)
    spec = cfg.decomposition
    kind = spec["type"]
    try:
        if kind == "anticanonical":
            return make_decomposition(bg, [bg.anticanonical_polytope])
        if kind == "scaled":
            return scaled_decomposition(bg, [parse_fraction(v) for v in spec["lambdas"]])
        if kind == "product":
            return product_decomposition([tuple(parse_fraction(v) for v in s) for s in spec["sides"]])
        if kind == "supports":
            polys = [Polytope.from_inequalities(bg.normals, [parse_fraction(v) for v in row])
                     for row in spec["supports"]]
            return make_decomposition(bg, polys)
        polys = [Polytope([tuple(parse_fraction(c) for c in v) for v in verts]) for verts in spec["polytopes"]]
        return make_decomposition(bg, polys)
    except KeyError as exc:
        raise ConfigError(f"decomposition of type {kind!r} needs field {exc}") from exc
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"bad decomposition: {exc}") from exc


def build_start(cfg: ExperimentConfig, dec: Decomposition, grid: Grid):
    """Start tuple and how it was obtained (closed form or Ricci iteration)."""
    if cfg.start in ("auto", "reference"):
        try:
            return reference_metric_tuple(dec, grid), "reference"
        except NotAvailable:
            if cfg.start == "reference":
                raise
    theta = ricci_iteration_start(dec, grid, tol=cfg.tolerances["ricci"])
    return theta, "ricci"


def build_etas(cfg: ExperimentConfig, theta: MetricTuple, dV0) -> list:
    """Deformation directions named by the config; a list of specs gives several."""
    if not cfg.eta:
        raise ConfigError("this command needs an 'eta' entry")
    specs = cfg.eta if isinstance(cfg.eta, list) else [cfg.eta]
    try:
        return [eta for spec in specs for eta in _etas_from(spec, theta, dV0)]
    except (NotExact, ValueError) as exc:
        raise ConfigError(f"bad eta: {exc}") from exc


def _etas_from(spec, theta: MetricTuple, dV0) -> list:
    if not isinstance(spec, dict):
        raise ConfigError(f"eta entry must be an object, got {spec!r}")
    if "scaling" in spec:
        inc = scaling_increments(theta.decomposition, [float(v) for v in spec["scaling"]])
        return [make_deformation(theta, inc, dV0, label="scaling")]
    if "increments" in spec:
        inc = np.array([[float(parse_fraction(v)) for v in row] for row in spec["increments"]])
        if inc.shape != theta.supports.shape:
            raise ConfigError(f"increments must have shape {theta.supports.shape}")
        return [make_deformation(theta, inc, dV0, label="increments")]
    if "trace_free" in spec:
        basis = trace_free_basis(theta, dV0)
        k = spec["trace_free"]
        if k == "all":
            return basis
        if not isinstance(k, int) or not 0 <= k < len(basis):
            raise ConfigError(f"trace-free element {k!r} out of range (dimension {len(basis)})")
        return [basis[k]]
    raise ConfigError("eta needs 'scaling', 'increments' or 'trace_free'")


def perturbed_representative(theta: MetricTuple, rng: np.random.Generator, amplitude: float = 0.05):
    """``theta + i ddbar phi`` for a random smooth ``phi``, shrunk until Kähler."""
    phi = random_smooth_field(theta.grid, rng, theta.N)
    while amplitude > 1e-8:
        try:
            out = theta.with_correction(amplitude * phi)
            out.check_kaehler()
            return out
        except NotKaehler:
            amplitude /= 2
    raise NotKaehler("could not find a Kähler perturbation")


def bl1p2_split(a1, c1) -> Decomposition:
    """Two truncated triangles ``Q(a, c)`` adding up to the anticanonical polytope of Bl1P2.

    ``Q(a, c) = {y1 >= 0, y2 >= 0, y2 <= a - c, y1 + y2 <= a}``, translated
    by ``-(a/3)(1, 1)``; sizes satisfy ``a1 + a2 = 3``, ``c1 + c2 = 1``.
    """
    bg = get_background("Bl1P2")
    a1, c1 = parse_fraction(a1), parse_fraction(c1)
    polys = []
    for a, c in ((a1, c1), (3 - a1, 1 - c1)):
        if not 0 < c < a:
            raise ValueError("need 0 < c < a for both factors")
        v = (-a / 3, -a / 3)
        verts = [(0, 0), (a, 0), (c, a - c), (0, a - c)]
        polys.append(Polytope([(x + v[0], y + v[1]) for x, y in verts]))
    return make_decomposition(bg, polys)


def decomposition_search(M: int = 12, max_iter: int = 30, splits=None) -> dict:
    """Look for nontrivial cKE starts on the one- and two-point blow-ups.

    Every candidate is screened with the barycenter oracle and run through
    the Ricci iteration; a start counts only if the iteration converges.
    """
    splits = splits or [("3/2", "1/2"), ("1", "1/4"), ("2", "3/4"), ("1", "1/2"), ("2", "1/2")]
    rows = []
    found = None
    bg = get_background("Bl1P2")
    candidates = [("Bl1P2", "anticanonical", make_decomposition(bg, [bg.anticanonical_polytope]))]
    for a1, c1 in splits:
        candidates.append(("Bl1P2", f"split a1={a1} c1={c1}", bl1p2_split(a1, c1)))
    for model, label, dec in candidates:
        bars = np.asarray(dec.barycenters(), dtype=float).sum(axis=0)
        row = {"model": model, "decomposition": label, "barycenter_sum": bars.tolist()}
        try:
            theta = ricci_iteration_start(dec, Grid(dec.background, M), max_iter=max_iter)
            row.update(status="converged", residual=cke_residual(theta))
            found = found or (model, label)
        except NoConvergence as exc:
            row.update(status="NoConvergence", reason=str(exc))
        rows.append(row)
    bg2 = get_background("Bl2P2")
    dec2 = make_decomposition(bg2, [bg2.anticanonical_polytope])
    row = {"model": "Bl2P2", "decomposition": "anticanonical",
           "barycenter_sum": np.asarray(dec2.barycenters(), dtype=float).sum(axis=0).tolist()}
    try:
        Grid(bg2, M)
    except UnsupportedGeometry as exc:
        row.update(status="UnsupportedGeometry", reason=str(exc))
    rows.append(row)
    return {"candidates": rows, "found": found, "exercised": found is not None,
            "barycenter_scan": barycenter_scan()}


def barycenter_scan(steps: int = 12) -> dict:
    """Smallest ``|sum_i bar(Q_i)|`` over the two-factor trapezoid splits of Bl1P2.

    A cKE tuple needs this sum to vanish, so a positive minimum rules the family out.
    """
    best = None
    for k in range(1, 3 * steps):
        for j in range(1, steps):
            a1, c1 = Fraction(k, steps), Fraction(j, steps)
            try:
                dec = bl1p2_split(a1, c1)
            except ValueError:
                continue
            v = float(np.linalg.norm(np.asarray(dec.barycenters(), dtype=float).sum(axis=0)))
            if best is None or v < best[0]:
                best = (v, str(a1), str(c1))
    return {"min_norm": best[0], "a1": best[1], "c1": best[2], "steps": steps}


# --- persistence --------------------------------------------------------------

def _default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Fraction):
        return str(o)
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not serialisable: {type(o).__name__}")


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, default=_default, sort_keys=True) + "\n")


def manifest(cfg: ExperimentConfig, command: str, grid: Grid | None = None, **extra) -> dict:
    import scipy

    out = {
        "command": command,
        "config": cfg.to_json(),
        "versions": {"ckelab": __version__, "python": platform.python_version(), "numpy": np.__version__,
                     "scipy": scipy.__version__},
        "tolerances": cfg.tolerances,
        "seed": cfg.seed,
        "norm_convention": NORM_CONVENTION,
        "argv": sys.argv[1:],
    }
    if grid is not None:
        out["grid"] = {"model": grid.background.name, "M": grid.M, "nodes": grid.K, "dim": grid.n,
                       "stretch": cfg.stretch}
    out.update(extra)
    return out


def _prepare(out) -> Path:
    out = Path(out)
    (out / "fields").mkdir(parents=True, exist_ok=True)
    return out


def _write_tuple_fields(out: Path, theta: MetricTuple, prefix: str = "start"):
    g = theta.grid
    for i in range(theta.N):
        write_field(out / "fields" / f"{prefix}_factor{i + 1}.txt", g,
                    np.column_stack([theta.psi[i], theta.phi[i]]), ["psi", "phi"])


# --- commands -------------------------------------------------------------------

def cmd_solve(cfg: ExperimentConfig, out) -> int:
    out = _prepare(out)
    dec = build_decomposition(cfg)
    grid = Grid(dec.background, cfg.resolution)
    report = {"model": cfg.model, "decomposition": cfg.decomposition, "N": dec.N}
    write_json(out / "manifest.json", manifest(cfg, "solve", grid))
    try:
        theta, how = build_start(cfg, dec, grid)
    except NoConvergence as exc:
        report.update(status="NoConvergence", reason=str(exc),
                      futaki_barycenter_sum=np.asarray(dec.barycenters(), dtype=float).sum(axis=0).tolist())
        write_json(out / "report.json", report)
        return EXIT_NONCONVERGENCE
    res = cke_residual(theta)
    tol = cfg.tolerances["residual"] if how == "reference" else cfg.tolerances["ricci"]
    report.update(status="converged" if res < tol else "residual above tolerance", start=how,
                  cke_residual=res, tolerance=tol)
    _write_tuple_fields(out, theta)
    np.savez(out / "checkpoint.npz", phi=theta.phi, supports=theta.supports, M=grid.M, model=cfg.model)
    write_json(out / "report.json", report)
    return EXIT_OK if res < tol else EXIT_NONCONVERGENCE


def _deform_one(cfg_dict: dict, k: int, out: str) -> dict:
    cfg = ExperimentConfig(**cfg_dict)
    out = _prepare(out)
    dec = build_decomposition(cfg)
    grid = Grid(dec.background, cfg.resolution)
    theta, how = build_start(cfg, dec, grid)
    dV0 = reference_volume(theta)
    eta = build_etas(cfg, theta, dV0)[k]
    basis = kernel_basis(theta, dV0, scan=False)
    tol = cfg.tolerances["newton"]
    trace = continue_in_t(theta, eta, cfg.t_values(), basis, tol=tol, label=eta.label or f"eta-{k}")
    trace.to_csv(out / "trace.csv")
    write_json(out / "trace.json", trace.to_json())
    for j, Phi in enumerate(trace.fields):
        write_field(out / "fields" / f"phi_t{j:03d}.txt", grid, Phi.T, [f"phi{i + 1}" for i in range(theta.N)])
    floor = zero_floor(tol)
    flags = [{"t": e["t"], "cke_residual": e["cke_residual"]} for e in trace.converged
             if abs(e["curly_F"]) < floor]
    report = {"eta": eta.label, "increments": eta.increments, "scale": eta.scale, "start": how,
              "reached": trace.reached, "complete": trace.reached >= max(cfg.t_values()),
              "entries": len(trace.entries),
              "failure": next((e for e in trace.entries if e["status"] != "converged"), None),
              "cke_found": flags, "norm_convention": NORM_CONVENTION}
    try:
        rep = fit_expansion(trace, tol=tol)
        try:
            rep.with_prediction(predicted_order2(eta, theta, basis, dV0))
            try:
                report["predicted_order4"] = predicted_order4(eta, theta, basis, dV0)
            except NotTrivialStart:
                pass
        except NotTraceFree:
            rep.notes.append("eta not trace-free: no predicted coefficient")
        report["expansion"] = rep.to_json()
    except InsufficientData as exc:
        report["expansion"] = {"skipped": str(exc)}
    write_json(out / "report.json", report)
    return report


def cmd_deform(cfg: ExperimentConfig, out, jobs: int = 1) -> int:
    out = _prepare(out)
    dec = build_decomposition(cfg)
    grid = Grid(dec.background, cfg.resolution)
    write_json(out / "manifest.json", manifest(cfg, "deform", grid))
    try:
        theta, _ = build_start(cfg, dec, grid)
    except NoConvergence as exc:
        write_json(out / "report.json", {"status": "NoConvergence", "reason": str(exc)})
        return EXIT_NONCONVERGENCE
    n_eta = len(build_etas(cfg, theta, reference_volume(theta)))
    if n_eta == 0:
        raise ConfigError("no deformation directions (empty trace-free basis)")
    if n_eta == 1:
        reports = [_deform_one(cfg.to_json(), 0, str(out))]
    else:
        dirs = [str(out / f"eta-{k}") for k in range(n_eta)]
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as ex:
                reports = list(ex.map(_deform_one, [cfg.to_json()] * n_eta, range(n_eta), dirs))
        else:
            reports = [_deform_one(cfg.to_json(), k, d) for k, d in enumerate(dirs)]
        write_json(out / "report.json", {"directions": reports})
    return EXIT_OK if all(r["complete"] for r in reports) else EXIT_NONCONVERGENCE


def cmd_futaki(cfg: ExperimentConfig, out) -> int:
    out = _prepare(out)
    dec = build_decomposition(cfg)
    grid = Grid(dec.background, cfg.resolution)
    write_json(out / "manifest.json", manifest(cfg, "futaki", grid))
    theta = MetricTuple.reference(dec, grid)
    other = perturbed_representative(theta, np.random.default_rng(cfg.seed))
    fields = cfg.fields or [list(np.eye(grid.n)[k]) for k in range(grid.n)]
    rows = []
    for xi in fields:
        V = HolomorphicField(tuple(xi))
        a, b = futaki_coupled(theta, V), futaki_coupled(other, V)
        rows.append({"model": cfg.model, "decomposition": cfg.name or dec.background.name, "V": list(V.coefficients),
                     "futaki": a, "futaki_perturbed": b, "defect": abs(a - b),
                     "barycenter": futaki_barycenter(dec, V)})
    with open(out / "futaki.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "decomposition", "V", "futaki", "futaki_perturbed", "barycenter"])
        for r in rows:
            w.writerow([r["model"], r["decomposition"], json.dumps(r["V"]), repr(r["futaki"]),
                        repr(r["futaki_perturbed"]), repr(r["barycenter"])])
    write_json(out / "report.json", {"values": rows})
    return EXIT_OK


def cmd_kernel(cfg: ExperimentConfig, out) -> int:
    out = _prepare(out)
    dec = build_decomposition(cfg)
    grid = Grid(dec.background, cfg.resolution)
    write_json(out / "manifest.json", manifest(cfg, "kernel", grid))
    try:
        theta, how = build_start(cfg, dec, grid)
    except NoConvergence as exc:
        write_json(out / "report.json", {"status": "NoConvergence", "reason": str(exc)})
        return EXIT_NONCONVERGENCE
    dV0 = reference_volume(theta)
    basis = kernel_basis(theta, dV0, scan=False)
    report = check_nondegeneracy(theta, dV0, cfg.tolerances["kernel_zero"], cfg.tolerances["kernel_gap"])
    report.update(d=basis.d, n_constants=basis.n_constants, dim_z=basis.dim_z, start=how)
    write_json(out / "report.json", report)
    return EXIT_OK if report["passed"] else EXIT_NONCONVERGENCE


def cmd_expand(trace_path, out, order: int | None = None, tol: float = 1e-9,
               cfg: ExperimentConfig | None = None) -> int:
    out = _prepare(out)
    trace = ContinuationTrace.from_csv(trace_path)
    rep = fit_expansion(trace, order, tol=tol)
    report = {"trace": str(trace_path), "expansion": rep.to_json()}
    if cfg is not None:
        dec = build_decomposition(cfg)
        grid = Grid(dec.background, cfg.resolution)
        theta, _ = build_start(cfg, dec, grid)
        dV0 = reference_volume(theta)
        basis = kernel_basis(theta, dV0, scan=False)
        eta = build_etas(cfg, theta, dV0)[0]
        try:
            rep.with_prediction(predicted_order2(eta, theta, basis, dV0))
            report["expansion"] = rep.to_json()
        except NotTraceFree as exc:
            report["prediction"] = f"skipped: {exc}"
    write_json(out / "report.json", report)
    with open(out / "expansion.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "decomposition", "eta", "order_fit", "coeff_fit", "coeff_pred", "rel_err"])
        w.writerow(rep.csv_row(cfg.model if cfg else "", cfg.name if cfg else ""))
    return EXIT_OK
