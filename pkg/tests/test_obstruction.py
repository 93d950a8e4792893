from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ckelab.curvature import MetricTuple, reference_volume, ricci_potential
from ckelab.errors import ShapeMismatch
from ckelab.grid import Grid, PotentialVector, pairing, random_smooth_field
from ckelab.harness import perturbed_representative
from ckelab.obstruction import (HolomorphicField, L_matrix, check_nondegeneracy, futaki_barycenter,
                                futaki_coupled, holomorphic_potential, kernel_basis, linearized_L,
                                project_perp, project_z, singular_value_scan)
from ckelab.toric import get_background, make_decomposition, scaled_decomposition

BL1 = get_background("Bl1P2")


def _bl1(M=16):
    dec = make_decomposition(BL1, [BL1.anticanonical_polytope])
    return MetricTuple.reference(dec, Grid(BL1, M))


def test_holomorphic_potential_examples():
    g = Grid(get_background("P1"), 32)
    th = MetricTuple.reference(scaled_decomposition(g.background, [1]), g)
    w = th.volume_weights()[0]
    assert not np.any(holomorphic_potential(HolomorphicField((0.0,)), th.grad[0], w))
    H = holomorphic_potential(HolomorphicField((1.0,)), th.grad[0], w)
    # round metric: H is the moment coordinate y = tanh(x/2), already centred
    assert np.allclose(H, np.tanh(g.x[:, 0] / 2), atol=1e-14)
    assert -1 < H.min() and H.max() < 1
    assert abs(np.dot(H, w)) < 1e-14


def test_futaki_vanishes_on_exact_starts(p1, p1xp1, p2):
    for s in (p1, p1xp1, p2):
        for k in range(s.grid.n):
            assert abs(futaki_coupled(s.theta, HolomorphicField.generator(s.grid.n, k))) < 1e-8


def test_futaki_symmetric_perturbation(p1xp1):
    y1, y2 = p1xp1.grid.y.T
    even = 0.03 * np.vstack([y1**2 - 0.5 * y2**2 * y1**2, 0.5 * y2**2 + y1**2 * y2**2])
    th = p1xp1.theta.with_correction(even)
    for k in range(2):
        assert abs(futaki_coupled(th, HolomorphicField.generator(2, k))) < 1e-7


def test_bl1_futaki_metric_independent():
    th = _bl1()
    V = HolomorphicField((0.0, -1.0))
    a = futaki_coupled(th, V)
    b = futaki_coupled(perturbed_representative(th, np.random.default_rng(7)), V)
    assert abs(a) > 0.1
    assert abs(a - b) < 1e-6 * abs(a)
    assert np.isclose(a, futaki_barycenter(th.decomposition, V), rtol=1e-10)
    assert np.isclose(a, 1 / 6, rtol=1e-10)


@given(st.lists(st.floats(-3, 3), min_size=2, max_size=2), st.lists(st.floats(-3, 3), min_size=2, max_size=2))
@settings(max_examples=20, deadline=None)
def test_futaki_linear_in_field(a, b):
    th = _bl1(10)
    Fa = futaki_coupled(th, HolomorphicField(tuple(a)))
    Fb = futaki_coupled(th, HolomorphicField(tuple(b)))
    Fab = futaki_coupled(th, HolomorphicField(tuple(np.add(a, b))))
    assert abs(Fab - Fa - Fb) < 1e-12 * (1 + abs(Fa) + abs(Fb))


def test_L_annihilates_constants_and_moment_vectors(p1xp1):
    th, dV0 = p1xp1.theta, p1xp1.dV0
    c = PotentialVector(p1xp1.grid, np.outer([1.5, -2.0], np.ones(p1xp1.grid.K)))
    assert np.max(np.abs(linearized_L(c, th, dV0).values)) < 1e-10
    for k in range(2):
        m = PotentialVector(p1xp1.grid, th.grad[:, :, k])
        assert np.max(np.abs(linearized_L(m, th, dV0).values)) < 1e-8


def test_L_self_adjoint(p2, rng):
    u, v = (PotentialVector(p2.grid, random_smooth_field(p2.grid, rng, 3)) for _ in range(2))
    lhs = pairing(linearized_L(u, p2.theta, p2.dV0), v, p2.dV0)
    rhs = pairing(u, linearized_L(v, p2.theta, p2.dV0), p2.dV0)
    assert abs(lhs - rhs) < 1e-9 * max(1.0, abs(lhs))


def test_L_shape_check(p1):
    with pytest.raises(ShapeMismatch):
        linearized_L(PotentialVector(p1.grid, np.zeros((3, p1.grid.K))), p1.theta, p1.dV0)


def test_L_matrix_matches_operator(p1xp1, rng):
    u = random_smooth_field(p1xp1.grid, rng, 2)
    A = L_matrix(p1xp1.theta, p1xp1.dV0)
    Lu = linearized_L(PotentialVector(p1xp1.grid, u), p1xp1.theta, p1xp1.dV0).values
    assert np.allclose(A @ u.ravel(), Lu.ravel(), atol=1e-10)


def test_ricci_potential_linearisation(p1, rng):
    # f(theta + s ddbar u) = f(theta) - s L u + O(s^2)
    u = random_smooth_field(p1.grid, rng, 2)
    Lu = linearized_L(PotentialVector(p1.grid, u), p1.theta, p1.dV0).values
    errs = []
    for s in (1e-2, 1e-3):
        fd = (ricci_potential(p1.theta.with_correction(s * u)).f.values
              - ricci_potential(p1.theta.with_correction(-s * u)).f.values) / (2 * s)
        errs.append(np.linalg.norm(fd + Lu) / np.linalg.norm(Lu))
    assert errs[1] < 1e-4
    assert errs[1] < errs[0] / 50  # second order in s


@pytest.mark.parametrize("name,d", [("p1", 3), ("p1xp1", 4), ("p2", 5)])
def test_kernel_dimensions(name, d, request):
    s = request.getfixturevalue(name)
    b = kernel_basis(s.theta, s.dV0, scan=True)
    assert b.d == d and b.n_constants == s.theta.N
    assert b.gap_ratio > 1e3
    rep = check_nondegeneracy(s.theta, s.dV0)
    assert rep["passed"] and rep["count"] == d


def test_kernel_basis_orthonormal(p2):
    b = p2.basis
    m = p2.dV0.weights / p2.dV0.mass
    G = np.einsum("pik,qik,k->pq", b.vectors, b.vectors, m)
    assert np.allclose(G, np.eye(b.d), atol=1e-12)


def test_field_of_recovers_generator(p1xp1):
    b = p1xp1.basis
    # a moment-map vector expanded in the basis maps back to its generator
    u = p1xp1.theta.grad[:, :, 1] - np.einsum("ik,k->i", p1xp1.theta.grad[:, :, 1],
                                              p1xp1.dV0.weights)[:, None] / p1xp1.dV0.mass
    c = b.coefficients(u)
    assert np.allclose(b.field_of(c).xi, [0.0, 1.0], atol=1e-10)


def test_projections(p1xp1, rng):
    b = p1xp1.basis
    g = p1xp1.grid
    v1 = PotentialVector(g, b.vectors[0])
    assert np.max(np.abs(project_perp(v1, b).values)) < 1e-12
    u = PotentialVector(g, random_smooth_field(g, rng, 2))
    p = project_perp(u, b)
    assert np.max(np.abs(project_perp(p, b).values - p.values)) < 1e-12
    assert np.max(np.abs(project_z(p, b).values)) < 1e-12
    consts = PotentialVector(g, np.outer([2.0, -1.0], np.ones(g.K)))
    assert np.allclose(project_z(consts, b).values, consts.values, atol=1e-12)
    assert np.allclose((project_z(u, b) + project_perp(u, b)).values, u.values, atol=1e-13)


def test_degenerate_metric_reports_failure(p1xp1):
    th = p1xp1.theta
    h = th.hess.copy()
    h[1, :, 1, 1] *= 1e-9
    h[1, :, 0, 1] *= np.sqrt(1e-9)
    h[1, :, 1, 0] *= np.sqrt(1e-9)
    bad = replace(th, hess=h, det=np.linalg.det(h))
    rep = check_nondegeneracy(bad, p1xp1.dV0)
    assert rep["passed"] is False and "near-zero" in rep["reason"]


def test_singular_values_sorted(p1):
    sv = singular_value_scan(p1.theta, p1.dV0)
    assert np.all(np.diff(sv) >= 0)
    assert np.isclose(sv[3], 2.76190476, rtol=1e-6)
