import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eqwave.mesh import generate_square
from eqwave.spaces import (
    MAX_QUADRATURE_DEGREE,
    LagrangeSpace,
    RTSpace,
    edge_quadrature,
    lagrange_eval,
    lagrange_nodes,
    piola_push,
    quadrature,
    rt_dim,
    rt_dof_functionals,
    rt_eval,
)


def random_reference_points(rng, n):
    x = rng.random((n, 2))
    flip = x.sum(axis=1) > 1
    x[flip] = 1 - x[flip]
    return x


@pytest.mark.parametrize("degree", range(1, MAX_QUADRATURE_DEGREE + 1))
def test_quadrature_exactness(degree):
    rule = quadrature(degree)
    assert (rule.weights > 0).all()
    assert rule.weights.sum() == pytest.approx(0.5, abs=1e-15)
    for a in range(degree + 1):
        for b in range(degree + 1 - a):
            exact = math.factorial(a) * math.factorial(b) / math.factorial(a + b + 2)
            got = rule.weights @ (rule.points[:, 0] ** a * rule.points[:, 1] ** b)
            assert abs(got - exact) <= 1e-13


def test_quadrature_examples():
    r1 = quadrature(1)
    assert len(r1.weights) == 1 and r1.weights[0] == pytest.approx(0.5)
    assert np.allclose(r1.points[0], [1 / 3, 1 / 3])
    r = quadrature(3)
    assert r.weights @ (r.points[:, 0] ** 2 * r.points[:, 1]) == pytest.approx(1 / 60, abs=1e-15)
    e = edge_quadrature(3)
    assert e.weights @ e.points**3 == pytest.approx(0.25, abs=1e-15)
    for bad in (0, MAX_QUADRATURE_DEGREE + 1):
        with pytest.raises(ValueError):
            quadrature(bad)


@pytest.mark.parametrize("p", [1, 2])
def test_lagrange_partition_of_unity(p):
    x = random_reference_points(np.random.default_rng(0), 20)
    vals, grads = lagrange_eval(p, x)
    assert np.abs(vals.sum(axis=1) - 1).max() <= 1e-13
    assert np.abs(grads.sum(axis=1)).max() <= 1e-13


@pytest.mark.parametrize("p", [1, 2])
def test_lagrange_nodal_property(p):
    vals, _ = lagrange_eval(p, lagrange_nodes(p))
    assert np.allclose(vals, np.eye(len(vals)), atol=1e-15)


def test_lagrange_quadratic_centroid():
    vals, _ = lagrange_eval(2, np.array([[1 / 3, 1 / 3]]))
    assert vals.sum() == pytest.approx(1.0)
    assert np.allclose(vals[0, :3], -1 / 9)


@pytest.mark.parametrize("p", [1, 2])
def test_lagrange_gradients_match_finite_differences(p):
    x = random_reference_points(np.random.default_rng(1), 5) * 0.9 + 0.03
    _, g = lagrange_eval(p, x)
    h = 1e-6
    for c in range(2):
        e = np.zeros(2)
        e[c] = h
        fd = (lagrange_eval(p, x + e)[0] - lagrange_eval(p, x - e)[0]) / (2 * h)
        assert np.allclose(fd, g[:, :, c], atol=1e-8)


def test_lagrange_space_dof_counts_and_hat_functions():
    m = generate_square(0, 1, 3)
    assert LagrangeSpace(m, 1).n_dofs == m.n_vertices
    V2 = LagrangeSpace(m, 2)
    assert V2.n_dofs == m.n_vertices + m.n_edges
    for a in (0, 5, 15):
        psi = V2.hat_function(a)
        assert np.allclose(psi[: m.n_vertices], np.eye(m.n_vertices)[a])


@pytest.mark.parametrize("q", [0, 1, 2, 3])
def test_rt_dimension_and_unisolvence(q):
    x = np.array([[0.2, 0.3]])
    vals, divs = rt_eval(q, x)
    assert vals.shape == (1, rt_dim(q), 2) and divs.shape == (1, rt_dim(q))
    assert rt_dim(q) == (q + 1) * (q + 3)
    D = rt_dof_functionals(q, lambda pts: rt_eval(q, pts)[0])
    assert np.abs(D - np.eye(rt_dim(q))).max() <= 1e-11
    with pytest.raises(ValueError):
        rt_eval(4, x)


def _poly_field(coef, q):
    """Vector polynomial of degree q with coefficient array (2, q+1, q+1)."""

    def field(pts):
        out = np.zeros((len(pts), 1, 2))
        for a in range(q + 1):
            for b in range(q + 1 - a):
                m = pts[:, 0] ** a * pts[:, 1] ** b
                out[:, 0, 0] += coef[0, a, b] * m
                out[:, 0, 1] += coef[1, a, b] * m
        return out

    def divergence(pts):
        out = np.zeros(len(pts))
        for a in range(q + 1):
            for b in range(q + 1 - a):
                if a:
                    out += coef[0, a, b] * a * pts[:, 0] ** (a - 1) * pts[:, 1] ** b
                if b:
                    out += coef[1, a, b] * b * pts[:, 0] ** a * pts[:, 1] ** (b - 1)
        return out

    return field, divergence


@given(q=st.integers(0, 3), seed=st.integers(0, 2**32 - 1))
@settings(max_examples=25, deadline=None)
def test_rt_interpolant_reproduces_polynomial_fields(q, seed):
    rng = np.random.default_rng(seed)
    coef = rng.standard_normal((2, q + 1, q + 1))
    field, divergence = _poly_field(coef, q)
    c = rt_dof_functionals(q, field)[:, 0]
    x = random_reference_points(rng, 7)
    vals, divs = rt_eval(q, x)
    assert np.abs(np.einsum("nkc,k->nc", vals, c) - field(x)[:, 0]).max() <= 1e-10
    assert np.abs(divs @ c - divergence(x)).max() <= 1e-10


@pytest.mark.parametrize("q", [2, 3])
def test_constant_field_is_divergence_free(q):
    c = rt_dof_functionals(q, lambda pts: np.tile([[[1.0, 0.0]]], (len(pts), 1, 1)))[:, 0]
    _, divs = rt_eval(q, quadrature(2 * q + 2).points)
    assert np.abs(divs @ c).max() <= 1e-12


def test_piola_identity_and_scaling():
    vals, divs = rt_eval(2, np.array([[0.1, 0.2], [0.5, 0.25]]))
    v, d = piola_push(np.eye(2), 1.0, vals, divs)
    assert np.array_equal(v, vals) and np.array_equal(d, divs)
    s = 3.0
    v, d = piola_push(s * np.eye(2), s**2, vals, divs)
    assert np.allclose(d, divs / s**2)
    assert np.allclose(v, vals / s)


@pytest.mark.parametrize("q", [2, 3])
def test_normal_trace_continuous_across_shared_edge(q):
    m = generate_square(0, 1, 1)
    rt = RTSpace(m, q)
    shared = int(np.flatnonzero(m.edge_elements[:, 1] >= 0)[0])
    rng = np.random.default_rng(q)
    sigma = rng.standard_normal(rt.n_dofs)
    a, b = m.vertices[m.edges[shared]]
    s = np.array([0.2, 0.5, 0.9])
    pts = a + s[:, None] * (b - a)
    normal = m.edge_normals[shared]
    traces = []
    for k in m.edge_elements[shared]:
        J = m.jacobians[k]
        ref = np.linalg.solve(J, (pts - m.vertices[m.elements[k, 0]]).T).T
        vals, divs = rt_eval(q, ref)
        phys, _ = piola_push(J, m.dets[k], vals, divs)
        coeff = sigma[rt.element_dofs[k]] * rt.signs[k]
        traces.append(np.einsum("nic,i,c->n", phys, coeff, normal))
    assert np.allclose(traces[0], traces[1], atol=1e-12)
