"""Manifold primitives: projectors, retractions, transport, brackets."""
import numpy as np
import pytest

from ljwflow.errors import (OffManifoldError, StepSizeError,
                            UnsupportedOperationError)
from ljwflow.geometry import (TWO_PI, VectorField, circle, constant_field,
                              directional_derivative, flat_torus,
                              halton_points, levi_civita_derivative,
                              levi_civita_transport, lie_bracket,
                              tangent_project, unit_sphere)

SPHERE = unit_sphere()
TORUS = flat_torus(2)
CIRCLE = circle()


def sphere_probes(count=8, seed=3):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((count, 3))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def test_sphere_projector_properties():
    for x in sphere_probes():
        P = SPHERE.projector(x)
        assert np.abs(P - P.T).max() == 0.0
        assert np.abs(P @ P - P).max() < 1e-15
        assert np.abs(P @ x).max() < 1e-15
        assert abs(np.trace(P) - 2.0) < 1e-12


def test_sphere_retraction_normalizes_and_is_exact_at_zero():
    z = np.array([0.3, -0.4, 1.1])
    x = SPHERE.retract_point(z)
    assert abs(np.linalg.norm(x) - 1.0) < 1e-15
    y = sphere_probes(1)[0]
    assert np.array_equal(SPHERE.retract(y, np.zeros(3)), y)
    with pytest.raises(StepSizeError):
        SPHERE.retract_point(np.array([0.1, 0.0, 0.0]))


def test_sphere_dretract_matches_finite_differences():
    rng = np.random.default_rng(5)
    for x in sphere_probes(4):
        z = x + 0.2 * rng.standard_normal(3)
        w = rng.standard_normal(3)
        h = 1e-6
        fd = (SPHERE.retract_point(z + h * w)
              - SPHERE.retract_point(z - h * w)) / (2.0 * h)
        assert np.abs(SPHERE.dretract(z, w) - fd).max() < 1e-8


def test_sphere_membership_and_distance():
    assert SPHERE.contains(np.array([0.0, 0.0, 1.0]))
    assert not SPHERE.contains(np.array([0.0, 0.0, 1.1]))
    e3 = np.array([0.0, 0.0, 1.0])
    assert float(SPHERE.distance(e3, e3)) == 0.0
    assert abs(float(SPHERE.distance(e3, -e3)) - np.pi) < 1e-12
    e1 = np.array([1.0, 0.0, 0.0])
    assert abs(float(SPHERE.distance(e3, e1)) - np.pi / 2) < 1e-12
    with pytest.raises(OffManifoldError):
        SPHERE.require(np.array([2.0, 0.0, 0.0]))


def test_sphere_tangent_basis_is_orthonormal_and_tangent():
    for x in sphere_probes():
        E = SPHERE.tangent_basis(x)
        assert E.shape == (3, 2)
        assert np.abs(E.T @ E - np.eye(2)).max() < 1e-12
        assert np.abs(E.T @ x).max() < 1e-12


def test_torus_wrap_and_distance():
    x = np.array([-0.5, TWO_PI + 0.25])
    w = TORUS.wrap(x)
    assert np.all((w >= 0.0) & (w < TWO_PI))
    # distance is measured through the shorter arc of each factor
    a = np.array([0.1, 0.0])
    b = np.array([TWO_PI - 0.1, 0.0])
    assert abs(float(TORUS.distance(a, b)) - 0.2) < 1e-12
    assert np.abs(TORUS.projector(a) - np.eye(2)).max() == 0.0
    assert TORUS.contains(np.array([100.0, -3.0]))


def test_circle_is_one_dimensional_periodic_chart():
    assert CIRCLE.name == "circle"
    assert CIRCLE.ambient_dim == 1
    assert CIRCLE.periodic
    assert abs(float(CIRCLE.distance(np.array([0.1]),
                                     np.array([TWO_PI - 0.1]))) - 0.2) < 1e-12


def test_tangent_project_removes_normal_component():
    x = sphere_probes(1)[0]
    v = np.array([0.3, -1.0, 0.7])
    p = tangent_project(SPHERE, x, v)
    assert abs(float(p @ x)) < 1e-14
    assert np.abs(tangent_project(SPHERE, x, p) - p).max() < 1e-14
    with pytest.raises(OffManifoldError):
        tangent_project(SPHERE, 1.5 * x, v)


def test_directional_derivative_against_closed_form():
    a = np.array([0.2, 0.5, -0.3])

    def fn(y):
        return y * float(y @ a)

    rng = np.random.default_rng(7)
    for x in sphere_probes(4):
        E = SPHERE.tangent_basis(x)
        v = E @ rng.standard_normal(2)
        got = directional_derivative(SPHERE, fn, x, v)
        want = v * float(x @ a) + x * float(v @ a)
        assert np.abs(got - want).max() < 1e-7
    assert np.abs(directional_derivative(SPHERE, fn, sphere_probes(1)[0],
                                         np.zeros(3))).max() == 0.0


def test_levi_civita_derivative_of_projected_constant():
    # Z(y) = a - <y, a> y has covariant derivative -<x, a> v along v
    a = np.array([0.4, -0.2, 0.9])
    Z = VectorField(fn=lambda y: a - float(y @ a) * y, name="Pa")
    rng = np.random.default_rng(11)
    for x in sphere_probes(4):
        v = SPHERE.tangent_basis(x) @ rng.standard_normal(2)
        got = levi_civita_derivative(SPHERE, Z, x, v)
        assert np.abs(got + float(x @ a) * v).max() < 1e-6


def test_levi_civita_derivative_prefers_analytic_jacobian():
    a = np.array([1.0, 2.0, 3.0])
    Z = VectorField(fn=lambda y: a - float(y @ a) * y,
                    derivative=lambda y, v: -(v * float(y @ a)
                                              + y * float(v @ a)))
    x = sphere_probes(1)[0]
    v = SPHERE.tangent_basis(x)[:, 0]
    exact = levi_civita_derivative(SPHERE, Z, x, v)
    Zfd = VectorField(fn=Z.fn)
    approx = levi_civita_derivative(SPHERE, Zfd, x, v)
    assert np.abs(exact - approx).max() < 1e-7


def test_nondifferentiable_field_is_rejected():
    Z = VectorField(fn=lambda y: y, differentiable=False)
    with pytest.raises(UnsupportedOperationError):
        levi_civita_derivative(SPHERE, Z, sphere_probes(1)[0],
                               np.array([1.0, 0.0, 0.0]))


def test_transport_along_quarter_great_circle():
    # from e3 to e1: the in-plane vector rotates onto -e3, the
    # out-of-plane vector is carried unchanged
    angles = np.linspace(0.0, np.pi / 2, 65)
    pts = np.stack([np.sin(angles), np.zeros_like(angles),
                    np.cos(angles)], axis=1)
    out = levi_civita_transport(SPHERE, pts, np.array([1.0, 0.0, 0.0]))
    assert np.abs(out[-1] - np.array([0.0, 0.0, -1.0])).max() < 1e-3
    out2 = levi_civita_transport(SPHERE, pts, np.array([0.0, 1.0, 0.0]))
    assert np.abs(out2[-1] - np.array([0.0, 1.0, 0.0])).max() < 1e-12
    norms = np.linalg.norm(out, axis=1)
    assert np.abs(norms - 1.0).max() < 1e-12


def test_transport_rejects_long_steps():
    pts = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]])
    with pytest.raises(StepSizeError):
        levi_civita_transport(SPHERE, pts, np.array([1.0, 0.0, 0.0]))


def test_lie_bracket_closed_form_on_sphere():
    a = np.array([1.0, 0.0, 0.0])
    b = np.array([0.0, 1.0, 0.0])
    Z1 = VectorField(fn=lambda y: a - float(y @ a) * y, name="Pa")
    Z2 = VectorField(fn=lambda y: b - float(y @ b) * y, name="Pb")

    def bracket_exact(x):
        z1 = a - float(x @ a) * x
        z2 = b - float(x @ b) * x
        d21 = -(z1 * float(x @ b) + x * float(z1 @ b))
        d12 = -(z2 * float(x @ a) + x * float(z2 @ a))
        return d21 - d12

    for x in sphere_probes(4):
        got = lie_bracket(SPHERE, Z1, Z2, x)
        assert np.abs(got - bracket_exact(x)).max() < 1e-6
        rev = lie_bracket(SPHERE, Z2, Z1, x)
        assert np.abs(got + rev).max() < 1e-6
        assert np.abs(lie_bracket(SPHERE, Z1, Z1, x)).max() < 1e-9


def test_constant_fields_commute_on_torus():
    Z1 = constant_field(np.array([1.0, 0.0]))
    Z2 = constant_field(np.array([0.0, 1.0]))
    x = np.array([0.3, 4.0])
    assert np.abs(lie_bracket(TORUS, Z1, Z2, x)).max() == 0.0
    assert np.abs(Z1.derivative(x, np.array([1.0, 1.0]))).max() == 0.0


def test_halton_points_are_deterministic_and_on_manifold():
    for man in (SPHERE, TORUS, CIRCLE):
        pts = halton_points(man, 32)
        again = halton_points(man, 32)
        assert np.array_equal(pts, again)
        assert pts.shape == (32, man.ambient_dim)
        for p in pts:
            assert man.contains(p)
    if SPHERE.name == "sphere2":
        pts = halton_points(SPHERE, 256)
        # area-uniform sampling has mean near the centre
        assert np.abs(pts.mean(axis=0)).max() < 0.15
