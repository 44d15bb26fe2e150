"""Paired Monte Carlo estimators: functionals, guards, and identities."""
import math

import numpy as np
import pytest

import ljwflow.harness as harness
from ljwflow.connection import DiffusionSystem
from ljwflow.errors import (GridError, PreconditionError,
                            UnsupportedScenarioError)
from ljwflow.geometry import circle
from ljwflow.harness import (CylindricalFunctional, EstimatorResult,
                             chunk_ranges, conditional_flow_check,
                             estimate_eq4, estimate_eq5_multipoint,
                             estimate_eq9, girsanov_reweight_check,
                             tau_derivative_check, _nodes_for_times)
from ljwflow.noise import linear_direction
from ljwflow.scenarios import (E_HALF, build_system, conditional_data,
                               default_direction, get_scenario,
                               make_functional, start_point)

CIRCLE = build_system("circle-full")
SPHERE = build_system("sphere2-gradient")
X0C = start_point("circle-full")
X0S = start_point("sphere2-gradient")
KC = default_direction("circle-full")
KS = default_direction("sphere2-gradient")


# ---------------------------------------------------------------------------
# plumbing


def test_chunk_ranges_cover_the_sample_range(monkeypatch):
    monkeypatch.setattr(harness, "CHUNK", 10)
    assert chunk_ranges(25) == [(0, 10), (10, 10), (20, 5)]
    assert chunk_ranges(10) == [(0, 10)]
    assert chunk_ranges(0) == []


def test_result_statistics_edge_cases():
    a = np.array([1.0, 2.0, 3.0])
    same = EstimatorResult.from_samples(a, a.copy())
    assert same.z == 0.0 and same.paired_stderr == 0.0
    offset = EstimatorResult.from_samples(a, a - 1.0)
    assert offset.z == math.inf and offset.paired_mean == 1.0
    extras = {"tag": 1.0}
    kept = EstimatorResult.from_samples(a, a + 0.5, keep=True, extras=extras)
    extras["tag"] = 2.0
    assert kept.extras["tag"] == 1.0
    assert kept.count == 3
    assert np.array_equal(kept.lhs_samples, a)
    dropped = EstimatorResult.from_samples(a, a + 0.5)
    assert dropped.lhs_samples is None and dropped.rhs_samples is None


def test_evaluation_times_must_be_increasing_grid_nodes():
    assert _nodes_for_times([0.25, 1.0], 4, 1.0) == [1, 4]
    with pytest.raises(GridError):
        _nodes_for_times([0.3], 4, 1.0)
    with pytest.raises(GridError):
        _nodes_for_times([0.5, 0.5], 4, 1.0)
    with pytest.raises(GridError):
        _nodes_for_times([2.0], 4, 1.0)


def test_gradient_oracle_validation_rejects_corruption():
    F = make_functional("sphere2-gradient", "height", 1.0)
    pts = np.array([[0.0, 0.0, 1.0], [0.6, 0.0, 0.8]])
    configs = pts.reshape(2, 1, 1, 3)
    worst = F.validate_gradient(SPHERE.manifold, configs)
    assert worst <= 1e-6
    bad = CylindricalFunctional(
        times=F.times, value=F.value,
        gradient=lambda xs: 1.02 * np.asarray(F.gradient(xs)),
        num_points=1, name="corrupted")
    with pytest.raises(PreconditionError):
        bad.validate_gradient(SPHERE.manifold, configs)


# ---------------------------------------------------------------------------
# structural identities of the estimators


def test_constant_functional_zeroes_the_derivative_side():
    F = CylindricalFunctional(
        times=(1.0,),
        value=lambda xs: np.ones(xs.shape[0]),
        gradient=lambda xs: np.zeros_like(xs),
        num_points=1, name="const")
    res = estimate_eq4(CIRCLE, X0C, F, KC, 400, seed=5, L=64,
                       keep_samples=True)
    assert np.all(res.lhs_samples == 0.0)
    # right side is a mean-zero stochastic integral
    assert abs(res.rhs_mean) < 4.0 * res.rhs_stderr
    assert res.z < 4.0


def test_direction_scaling_is_exactly_linear():
    F = make_functional("circle-full", "sin-final", 1.0)
    d = np.asarray(get_scenario("circle-full").direction, dtype=float)
    k2 = linear_direction(2.0 * d)
    r1 = estimate_eq4(CIRCLE, X0C, F, KC, 300, seed=9, L=64,
                      keep_samples=True)
    r2 = estimate_eq4(CIRCLE, X0C, F, k2, 300, seed=9, L=64,
                      keep_samples=True)
    # doubling the direction doubles every float exactly
    assert np.array_equal(r2.lhs_samples, 2.0 * r1.lhs_samples)
    assert np.array_equal(r2.rhs_samples, 2.0 * r1.rhs_samples)


def test_multipoint_with_inert_slot_reduces_to_single_start():
    F1 = make_functional("circle-full", "sin-final", 1.0)
    F2 = CylindricalFunctional(
        times=F1.times,
        value=lambda xs: F1.value(xs[:, :, :1, :]),
        gradient=lambda xs: np.concatenate(
            [np.asarray(F1.gradient(xs[:, :, :1, :])),
             np.zeros_like(xs[:, :, 1:, :])], axis=2),
        num_points=2, name="padded")
    single = estimate_eq4(CIRCLE, X0C, F1, KC, 250, seed=3, L=64,
                          keep_samples=True)
    padded = estimate_eq5_multipoint(CIRCLE, [X0C, np.array([0.5])], F2, KC,
                                     250, seed=3, L=64, keep_samples=True)
    assert np.array_equal(single.lhs_samples, padded.lhs_samples)
    assert np.array_equal(single.rhs_samples, padded.rhs_samples)


def test_flow_copy_count_must_match_functional():
    pair = make_functional("circle-full", "pair-product", 1.0)
    single = make_functional("circle-full", "sin-final", 1.0)
    with pytest.raises(PreconditionError):
        estimate_eq5_multipoint(CIRCLE, [X0C], pair, KC, 10, seed=0, L=16)
    with pytest.raises(PreconditionError):
        estimate_eq9(CIRCLE, X0C, pair, KC, 10, seed=0, L=16)
    with pytest.raises(PreconditionError):
        girsanov_reweight_check(CIRCLE, X0C, pair, KC, 0.5, 10, seed=0, L=16)
    with pytest.raises(PreconditionError):
        tau_derivative_check(CIRCLE, X0C, pair, KC, 0.1, 10, seed=0, L=16)
    # matching count passes the guard
    estimate_eq9(CIRCLE, X0C, single, KC, 4, seed=0, L=16)


def test_filtered_and_plain_sides_agree_on_flat_space():
    # full-rank flat case: derivative and filtered flows coincide
    F = make_functional("circle-full", "sin-final", 1.0)
    r4 = estimate_eq4(CIRCLE, X0C, F, KC, 300, seed=11, L=64,
                      keep_samples=True)
    r9 = estimate_eq9(CIRCLE, X0C, F, KC, 300, seed=11, L=64,
                      keep_samples=True)
    assert np.abs(r4.lhs_samples - r9.lhs_samples).max() <= 1e-10
    assert np.abs(r4.rhs_samples - r9.rhs_samples).max() <= 1e-10


# ---------------------------------------------------------------------------
# reweighting


def test_reweighting_trivial_at_zero_shift():
    F = make_functional("circle-full", "sin-final", 1.0)
    res = girsanov_reweight_check(CIRCLE, X0C, F, KC, 0.0, 200, seed=2,
                                  L=32, keep_samples=True)
    assert np.array_equal(res.lhs_samples, res.rhs_samples)
    assert res.z == 0.0
    assert res.extras["weight_mean"] == 1.0
    assert res.extras["weight_stderr"] == 0.0


def test_reweighting_rejects_shifts_beyond_unit_size():
    F = make_functional("circle-full", "sin-final", 1.0)
    for tau in (1.0001, -1.5):
        with pytest.raises(PreconditionError):
            girsanov_reweight_check(CIRCLE, X0C, F, KC, tau, 10, seed=0,
                                    L=16)


def test_reweighting_matches_exact_rotation_value():
    # unit shift of the circle flow: E sin(x_T + tau) has a closed form
    F = make_functional("circle-full", "sin-final", 1.0)
    res = girsanov_reweight_check(CIRCLE, X0C, F, KC, 1.0, 4000, seed=7,
                                  L=256)
    target = E_HALF * math.sin(1.0)
    assert abs(res.lhs_mean - target) < 4.0 * res.lhs_stderr + 2e-3
    assert res.z < 3.0
    wm, ws = res.extras["weight_mean"], res.extras["weight_stderr"]
    assert abs(wm - 1.0) < 4.0 * ws


# ---------------------------------------------------------------------------
# derivative in the shift size


def test_shift_derivative_matches_flow_side():
    F = make_functional("circle-full", "sin-final", 1.0)
    res = tau_derivative_check(CIRCLE, X0C, F, KC, 0.1, 2000, seed=13,
                               L=128)
    assert res.extras["bias_bound"] >= 0.0
    threshold = 3.0 + res.extras["bias_bound"] / res.paired_stderr
    assert res.z < threshold


def test_shift_derivative_step_range_guard():
    F = make_functional("circle-full", "sin-final", 1.0)
    for tau in (0.0, 0.6, -0.1):
        with pytest.raises(PreconditionError):
            tau_derivative_check(CIRCLE, X0C, F, KC, tau, 10, seed=0, L=16)


# ---------------------------------------------------------------------------
# conditional pairing


def test_conditional_guards():
    v0, g, u = conditional_data("sphere2-gradient")
    with pytest.raises(GridError):
        conditional_flow_check(SPHERE, X0S, v0, g, u, 0.0, 10, seed=0, L=16)
    with pytest.raises(GridError):
        conditional_flow_check(SPHERE, X0S, v0, g, u, 0.3, 10, seed=0, L=16)
    with pytest.raises(PreconditionError):
        # the start point itself is normal, not tangent
        conditional_flow_check(SPHERE, X0S, X0S, g, u, 0.5, 10, seed=0,
                               L=16)


def test_conditional_pairing_exact_on_flat_space():
    v0, g, u = conditional_data("circle-full")
    res = conditional_flow_check(CIRCLE, X0C, v0, g, u, 0.5, 300, seed=4,
                                 L=64, keep_samples=True)
    assert np.abs(res.lhs_samples - res.rhs_samples).max() <= 1e-10


def test_conditional_pairing_on_curved_space():
    v0, g, u = conditional_data("sphere2-gradient")
    res = conditional_flow_check(SPHERE, X0S, v0, g, u, 0.5, 2000, seed=21,
                                 L=64)
    assert res.z < 3.0
    assert res.count == 2000


def test_drift_outside_image_rejected_for_semiconnection_variant():
    sys = build_system("torus2-transverse-drift")
    x0 = start_point("torus2-transverse-drift")
    k = default_direction("torus2-transverse-drift")
    F = make_functional("torus2-transverse-drift", "sin-first", 1.0)
    v0, g, u = conditional_data("torus2-transverse-drift")
    with pytest.raises(PreconditionError):
        estimate_eq9(sys, x0, F, k, 10, variant="eq7", seed=0, L=16)
    with pytest.raises(PreconditionError):
        conditional_flow_check(sys, x0, v0, g, u, 0.5, 10, variant="eq7",
                               seed=0, L=16)
    res = estimate_eq9(sys, x0, F, k, 200, variant="eq8", seed=0, L=32)
    assert res.count == 200 and math.isfinite(res.z)


def test_noninjective_coefficient_rejected():
    man = circle()

    def coeff(x):
        return np.array([[1.0, 1.0]])

    sys = DiffusionSystem(man, 2, coeff, scenario_id="duplicated")
    F = make_functional("circle-full", "sin-final", 1.0)
    k = linear_direction(np.array([1.0, 0.0]))
    with pytest.raises(UnsupportedScenarioError):
        estimate_eq4(sys, X0C, F, k, 10, seed=0, L=16)


# ---------------------------------------------------------------------------
# chunking


def test_estimates_do_not_depend_on_chunk_size(monkeypatch):
    F = make_functional("circle-full", "sin-final", 1.0)
    base = estimate_eq4(CIRCLE, X0C, F, KC, 100, seed=17, L=32,
                        keep_samples=True)
    monkeypatch.setattr(harness, "CHUNK", 7)
    small = estimate_eq4(CIRCLE, X0C, F, KC, 100, seed=17, L=32,
                         keep_samples=True)
    assert np.array_equal(base.lhs_samples, small.lhs_samples)
    assert np.array_equal(base.rhs_samples, small.rhs_samples)
    assert base.lhs_mean == small.lhs_mean
    assert base.paired_stderr == small.paired_stderr
    # the reported mean is the exactly summed sample mean
    assert base.lhs_mean == math.fsum(base.lhs_samples.tolist()) / 100
