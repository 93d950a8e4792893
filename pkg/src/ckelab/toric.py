"""Toric Fano backgrounds, polytope decompositions and reference potentials.

A torus-invariant Kähler form on a toric manifold is represented in Hessian
units: ``omega = D^2 psi(x)`` on log-coordinates ``x``.  The gradient of
``psi`` is the moment map, whose image is the moment polytope ``Q`` of the
class, and ``int omega^n = n! Vol(Q)``.  Facets are written ``<y, nu_F> + p_F >= 0``
with inward integral normals ``nu_F`` and support numbers ``p_F``; the
anticanonical polytope in canonical position has every ``p_F = 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from itertools import combinations, product
from pathlib import Path

import numpy as np

from .errors import DegenerateFactor, NotAvailable, SumMismatch

__all__ = [
    "Polytope",
    "ToricBackground",
    "Decomposition",
    "KaehlerClass",
    "GuilleminPotential",
    "catalog",
    "get_background",
    "make_decomposition",
    "scaled_decomposition",
    "product_decomposition",
    "reference_metric_tuple",
]


def _frac(v) -> Fraction:
    if isinstance(v, Fraction):
        return v
    if isinstance(v, float):
        return Fraction(v).limit_denominator(10**9)
    return Fraction(v)


def _cross(o, a, b):
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def _hull2d(points):
    """Andrew's monotone chain on exact coordinates, counter-clockwise."""
    pts = sorted(set(points))
    if len(pts) <= 2:
        return pts
    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and _cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and _cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return lower[:-1] + upper[:-1]


class Polytope:
    """Convex lattice-or-rational polytope in R^1 or R^2 with exact vertices."""

    def __init__(self, vertices):
        verts = [tuple(_frac(c) for c in np.atleast_1d(v)) for v in vertices]
        if not verts:
            raise ValueError("polytope needs at least one vertex")
        dims = {len(v) for v in verts}
        if len(dims) != 1:
            raise ValueError("vertices of mixed dimension")
        self.dim = dims.pop()
        if self.dim == 1:
            xs = sorted(v[0] for v in verts)
            hull = [(xs[0],), (xs[-1],)] if xs[0] != xs[-1] else [(xs[0],)]
        elif self.dim == 2:
            hull = _hull2d(verts)
        else:
            raise ValueError("only dimensions 1 and 2 are supported")
        self.vertices = tuple(hull)

    @classmethod
    def interval(cls, lo, hi):
        return cls([(lo,), (hi,)])

    @classmethod
    def box(cls, xlo, xhi, ylo, yhi):
        return cls([(xlo, ylo), (xhi, ylo), (xhi, yhi), (xlo, yhi)])

    @classmethod
    def from_inequalities(cls, normals, supports):
        """Polytope ``{y : <y, nu_F> + p_F >= 0}``, bounded by assumption."""
        normals = [tuple(int(c) for c in nu) for nu in normals]
        supports = [_frac(p) for p in supports]
        n = len(normals[0])
        if n == 1:
            lo = max(-p / nu[0] for nu, p in zip(normals, supports) if nu[0] > 0)
            hi = min(p / -nu[0] for nu, p in zip(normals, supports) if nu[0] < 0)
            return cls([(lo,), (hi,)])
        pts = []
        for (a, pa), (b, pb) in combinations(zip(normals, supports), 2):
            det = a[0] * b[1] - a[1] * b[0]
            if det == 0:
                continue
            # a.y = -pa, b.y = -pb
            y0 = Fraction(-pa * b[1] + pb * a[1], det)
            y1 = Fraction(-a[0] * pb + b[0] * pa, det)
            if all(nu[0] * y0 + nu[1] * y1 + p >= 0 for nu, p in zip(normals, supports)):
                pts.append((y0, y1))
        return cls(pts)

    def __eq__(self, other):
        return isinstance(other, Polytope) and set(self.vertices) == set(other.vertices)

    def __hash__(self):
        return hash(frozenset(self.vertices))

    def __repr__(self):
        vs = ", ".join("(" + ", ".join(str(c) for c in v) + ")" for v in self.vertices)
        return f"Polytope([{vs}])"

    def __add__(self, other):
        return minkowski_sum([self, other])

    def translate(self, shift):
        shift = [_frac(s) for s in np.atleast_1d(shift)]
        return Polytope([tuple(c + s for c, s in zip(v, shift)) for v in self.vertices])

    def scale(self, factor):
        factor = _frac(factor)
        return Polytope([tuple(c * factor for c in v) for v in self.vertices])

    def volume(self) -> Fraction:
        """Euclidean volume (length in 1D, area in 2D), exact."""
        if self.dim == 1:
            return self.vertices[-1][0] - self.vertices[0][0]
        vs = self.vertices
        if len(vs) < 3:
            return Fraction(0)
        s = sum(vs[k][0] * vs[(k + 1) % len(vs)][1] - vs[(k + 1) % len(vs)][0] * vs[k][1]
                for k in range(len(vs)))
        return abs(s) / 2

    def barycenter(self):
        if self.dim == 1:
            return ((self.vertices[0][0] + self.vertices[-1][0]) / 2,)
        vs = self.vertices
        a = cx = cy = Fraction(0)
        for k in range(len(vs)):
            (x0, y0), (x1, y1) = vs[k], vs[(k + 1) % len(vs)]
            c = x0 * y1 - x1 * y0
            a += c
            cx += (x0 + x1) * c
            cy += (y0 + y1) * c
        return (cx / (3 * a), cy / (3 * a))

    def has_interior(self) -> bool:
        return self.volume() > 0

    def contains_origin_in_interior(self) -> bool:
        if self.dim == 1:
            return self.vertices[0][0] < 0 < self.vertices[-1][0]
        vs = self.vertices
        return len(vs) >= 3 and all(
            _cross(vs[k], vs[(k + 1) % len(vs)], (0, 0)) > 0 for k in range(len(vs)))

    def support(self, normal) -> Fraction:
        """Support number ``p`` with ``min_Q <y, normal> = -p``."""
        return -min(sum(c * int(n) for c, n in zip(v, normal)) for v in self.vertices)

    def face_measure(self, normal) -> Fraction:
        """Euclidean measure of the face minimising ``<y, normal>`` divided by ``|normal|``.

        This is ``dVol/dp`` for the support number of that face.  In 2D the
        ratio is rational: the face length is a multiple of ``|normal|``.
        """
        if self.dim == 1:
            return Fraction(1)
        vals = [sum(c * int(n) for c, n in zip(v, normal)) for v in self.vertices]
        m = min(vals)
        face = [v for v, val in zip(self.vertices, vals) if val == m]
        if len(face) < 2:
            return Fraction(0)
        (x0, y0), (x1, y1) = face[0], face[-1]
        # direction along the face is perpendicular to the normal
        nn = int(normal[0]) ** 2 + int(normal[1]) ** 2
        t = ((x1 - x0) * -int(normal[1]) + (y1 - y0) * int(normal[0]))
        return abs(Fraction(t, nn))

    def to_text(self) -> str:
        return "".join(" ".join(str(c) for c in v) + "\n" for v in self.vertices)

    @classmethod
    def from_text(cls, text: str) -> "Polytope":
        rows = []
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if line:
                rows.append(tuple(Fraction(tok) for tok in line.split()))
        return cls(rows)

    def save(self, path):
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path):
        return cls.from_text(Path(path).read_text())

    def as_float(self):
        return np.array([[float(c) for c in v] for v in self.vertices])


def minkowski_sum(polytopes) -> Polytope:
    sums = [tuple(map(sum, zip(*combo))) for combo in product(*(p.vertices for p in polytopes))]
    return Polytope(sums)


@dataclass(frozen=True)
class ToricBackground:
    """A toric Fano manifold given by its reflexive anticanonical polytope."""

    name: str
    dim: int
    normals: tuple
    offsets: tuple
    torus_generators: tuple
    guillemin_is_ke: bool = False
    is_product: bool = False
    description: str = ""
    anticanonical_polytope: Polytope = field(init=False, compare=False, repr=False)

    def __post_init__(self):
        supports = [-o for o in self.offsets]
        object.__setattr__(self, "anticanonical_polytope",
                           Polytope.from_inequalities(self.normals, supports))

    @property
    def facets(self):
        return list(zip(self.normals, self.offsets))

    @property
    def n_facets(self) -> int:
        return len(self.normals)

    def normal_array(self) -> np.ndarray:
        return np.array(self.normals, dtype=float)

    def is_reflexive(self) -> bool:
        P = self.anticanonical_polytope
        integral = all(c.denominator == 1 for v in P.vertices for c in v)
        return integral and all(o == -1 for o in self.offsets) and P.contains_origin_in_interior()


_CATALOG = (
    ToricBackground("P1", 1, ((1,), (-1,)), (-1, -1), ("z1",),
                    guillemin_is_ke=True, is_product=True,
                    description="complex projective line"),
    ToricBackground("P1xP1", 2, ((1, 0), (0, 1), (-1, 0), (0, -1)), (-1, -1, -1, -1),
                    ("z1", "z2"), guillemin_is_ke=True, is_product=True,
                    description="product of two projective lines"),
    ToricBackground("P2", 2, ((1, 0), (0, 1), (-1, -1)), (-1, -1, -1), ("z1", "z2"),
                    guillemin_is_ke=True, description="complex projective plane"),
    ToricBackground("Bl1P2", 2, ((1, 0), (0, 1), (0, -1), (-1, -1)), (-1, -1, -1, -1),
                    ("z1", "z2"), description="projective plane blown up at one point"),
    ToricBackground("Bl2P2", 2, ((1, 0), (0, 1), (-1, 0), (0, -1), (-1, -1)),
                    (-1, -1, -1, -1, -1), ("z1", "z2"),
                    description="projective plane blown up at two points"),
)


def catalog() -> list:
    """Shipped toric Fano backgrounds."""
    return list(_CATALOG)


def get_background(name: str) -> ToricBackground:
    for bg in _CATALOG:
        if bg.name.lower() == name.lower():
            return bg
    raise KeyError(f"unknown background {name!r}; known: {[b.name for b in _CATALOG]}")


@dataclass(frozen=True)
class KaehlerClass:
    polytope: Polytope

    @property
    def volume(self) -> float:
        """``int omega^n = n! Vol(Q)`` in Hessian units."""
        return math.factorial(self.polytope.dim) * float(self.polytope.volume())


@dataclass(frozen=True)
class Decomposition:
    background: ToricBackground
    polytopes: tuple
    labels: tuple

    @property
    def N(self) -> int:
        return len(self.polytopes)

    @property
    def classes(self):
        return [KaehlerClass(q) for q in self.polytopes]

    def supports(self) -> np.ndarray:
        """Support numbers, shape ``(N, F)`` over the background's facet normals."""
        return np.array([[float(q.support(nu)) for nu in self.background.normals]
                         for q in self.polytopes])

    def volumes(self) -> np.ndarray:
        return np.array([k.volume for k in self.classes])

    def barycenters(self) -> np.ndarray:
        return np.array([[float(c) for c in q.barycenter()] for q in self.polytopes])

    def is_homothetic(self) -> bool:
        """True when every factor is a translate of a positive multiple of P."""
        P = self.background.anticanonical_polytope
        ps = [P.support(nu) for nu in self.background.normals]
        for q in self.polytopes:
            qs = [q.support(nu) for nu in self.background.normals]
            # q = lam P + a  <=>  q_F = lam * p_F - <a, nu_F> for some a, lam
            A = np.array([[float(p)] + [-float(c) for c in nu]
                          for p, nu in zip(ps, self.background.normals)])
            sol, *_ = np.linalg.lstsq(A, np.array([float(v) for v in qs]), rcond=None)
            if np.max(np.abs(A @ sol - np.array([float(v) for v in qs]))) > 1e-12:
                return False
        return True


def make_decomposition(background: ToricBackground, polytopes, labels=None) -> Decomposition:
    """Validate ``Q_1 + ... + Q_N = P`` by exact vertex arithmetic."""
    polytopes = tuple(p if isinstance(p, Polytope) else Polytope(p) for p in polytopes)
    if not polytopes:
        raise ValueError("at least one factor is required")
    for q in polytopes:
        if q.dim != background.dim:
            raise ValueError(f"factor dimension {q.dim} != background dimension {background.dim}")
    P = background.anticanonical_polytope
    total = minkowski_sum(polytopes)
    if total != P:
        raise SumMismatch(f"Minkowski sum {total!r} differs from anticanonical polytope {P!r}")
    for k, q in enumerate(polytopes):
        if not q.has_interior():
            raise DegenerateFactor(f"factor {k} has empty interior")
        if background.dim == 2:
            for nu in background.normals:
                if q.face_measure(nu) <= 0:
                    raise DegenerateFactor(
                        f"factor {k} has no facet with normal {nu}; its class is not Kähler")
    if labels is None:
        labels = tuple(f"Q{k + 1}" for k in range(len(polytopes)))
    return Decomposition(background, polytopes, tuple(labels))


def scaled_decomposition(background: ToricBackground, lambdas) -> Decomposition:
    lambdas = [_frac(l) for l in lambdas]
    if sum(lambdas) != 1 or min(lambdas) <= 0:
        raise ValueError("scalings must be positive and sum to one")
    P = background.anticanonical_polytope
    return make_decomposition(background, [P.scale(l) for l in lambdas])


def product_decomposition(sides) -> Decomposition:
    """Centered rectangles ``[-a/2, a/2] x [-b/2, b/2]`` on P1xP1 with ``sum a = sum b = 2``."""
    bg = get_background("P1xP1")
    boxes = []
    for a, b in sides:
        a, b = _frac(a), _frac(b)
        boxes.append(Polytope.box(-a / 2, a / 2, -b / 2, b / 2))
    return make_decomposition(bg, boxes)


class GuilleminPotential:
    """Canonical symplectic potential ``u = sum_F l_F log l_F`` of a polytope.

    Its Legendre dual ``psi(x) = <x, y> - u(y)`` with ``x = grad u(y)`` is a
    smooth toric Kähler potential whose moment image is the polytope.  For the
    reflexive models flagged ``guillemin_is_ke`` it is the Kähler–Einstein
    potential (e.g. ``2 log(1 + e^x) - x`` on P1).
    """

    def __init__(self, normals, supports):
        self.normals = np.asarray(normals, dtype=float)
        self.supports = np.asarray(supports, dtype=float)
        self.n = self.normals.shape[1]

    def ell(self, y):
        return y @ self.normals.T + self.supports

    def x_of_y(self, y):
        return (np.log(self.ell(y)) + 1.0) @ self.normals

    def u(self, y):
        l = self.ell(y)
        return np.sum(l * np.log(l), axis=-1)

    def hess_u(self, y):
        l = self.ell(y)
        return np.einsum("kf,fa,fb->kab", 1.0 / l, self.normals, self.normals)

    def moment(self, x, y0=None, tol=1e-14, maxiter=200):
        """Solve ``grad u(y) = x`` for ``y`` inside the polytope (damped Newton)."""
        x = np.atleast_2d(x)
        if y0 is None:
            y0 = np.tile(self._center(), (x.shape[0], 1))
        y = np.array(y0, dtype=float)
        for _ in range(maxiter):
            l = self.ell(y)
            g = (np.log(l) + 1.0) @ self.normals - x
            Hm = np.einsum("kf,fa,fb->kab", 1.0 / l, self.normals, self.normals)
            step = -np.linalg.solve(Hm, g[..., None])[..., 0]
            dec = np.einsum("ka,ka->k", -g, step)
            if np.all(dec < tol**2) and np.all(np.abs(step) < tol * 10):
                break
            # keep strictly feasible: l + s * (nu . step) > 0
            dl = step @ self.normals.T
            with np.errstate(divide="ignore", invalid="ignore"):
                ratio = np.where(dl < 0, -l / dl, np.inf)
            smax = np.min(ratio, axis=1)
            s = np.minimum(1.0, 0.9 * smax)
            y = y + s[:, None] * step
        return y

    def _center(self):
        A = self.normals
        # analytic center is the minimiser of -sum log l; barycenter of a few
        # feasible vertex combinations is good enough as a starting point
        P = Polytope.from_inequalities([tuple(int(round(c)) for c in nu) for nu in A],
                                       [Fraction(s).limit_denominator(10**12) for s in self.supports])
        return np.array([float(c) for c in P.barycenter()])

    def evaluate(self, x, y=None):
        """Return ``(psi, grad psi, hess psi)`` at points ``x``; ``y`` is an optional moment guess."""
        x = np.atleast_2d(x)
        y = self.moment(x, y0=y)
        psi = np.einsum("ka,ka->k", x, y) - self.u(y)
        hess = np.linalg.inv(self.hess_u(y))
        hess = 0.5 * (hess + np.swapaxes(hess, 1, 2))
        return psi, y, hess

    def class_derivative(self, delta, y, hess):
        """Derivative in ``t`` of the potential for supports ``p + t delta``.

        Returns ``(g, grad g, hess g)`` at fixed log-coordinates, where ``y`` and
        ``hess`` are this potential's moment map and Hessian at those points.
        """
        delta = np.asarray(delta, dtype=float)
        l = self.ell(y)
        g = -np.sum(delta * (np.log(l) + 1.0), axis=1)
        w = np.einsum("kf,fa->ka", delta / l, self.normals)
        ydot = -np.einsum("kab,kb->ka", hess, w)
        rate = delta + ydot @ self.normals.T
        M = np.einsum("kf,fa,fb->kab", rate / l**2, self.normals, self.normals)
        hdot = hess @ M @ hess
        hdot = 0.5 * (hdot + np.swapaxes(hdot, 1, 2))
        return g, ydot, hdot


def reference_metric_tuple(decomposition: Decomposition, grid):
    """Closed-form coupled KE start, when one exists.

    Available when the background's canonical potential is Kähler–Einstein and
    each factor is either a homothetic copy of P or, on a product of lines,
    any box: then every Guillemin factor potential has Ricci form equal to the
    fixed anticanonical form.
    """
    from .curvature import MetricTuple

    bg = decomposition.background
    if not bg.guillemin_is_ke or not (bg.is_product or decomposition.is_homothetic()):
        raise NotAvailable(
            f"no closed-form coupled KE start for {bg.name} with this decomposition; "
            "use ricci_iteration_start")
    return MetricTuple.reference(decomposition, grid)
