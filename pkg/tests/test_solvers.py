import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mildspde.models import (additive_diffusion, constant_drift, linear_drift, multiplicative_diffusion, sine_drift,
                             zero_diffusion, zero_drift)
from mildspde.solvers import (ConvergenceError, LipschitzMap, NotZeroClassError, picard_inner, plan_windows,
                              solve_multiplicative_unbounded, solve_semilinear)
from mildspde.spectral import DiagonalGenerator, ObservationOperator, admissibility_constant
from mildspde.stochastics import TraceClassCovariance, sample_ensemble


def _deterministic(n_steps, horizon=1.0):
    return sample_ensemble(TraceClassCovariance([0.0]), np.linspace(0, horizon, n_steps + 1), 0, 1)


def test_plan_windows_heat_quarter():
    gen = DiagonalGenerator.heat(32)
    plan = plan_windows(gen, ObservationOperator.fractional(gen, 0.25), 1.0, 1.0)
    assert plan.window == 0.25
    assert 2 * plan.c**2 * plan.lipschitz**2 < 0.5 and plan.zeta < 1
    # the next larger dyadic violates one of the two conditions
    a, c, z, ok = plan.candidates[-2]
    assert a == 0.5 and not ok


def test_plan_windows_zero_lipschitz_uses_full_horizon():
    gen = DiagonalGenerator.heat(8)
    assert plan_windows(gen, ObservationOperator.derivative(8), 0.0, 2.0).window == 2.0


def test_plan_windows_fails_without_contraction():
    gen = DiagonalGenerator.heat(8)
    with pytest.raises(ConvergenceError):
        plan_windows(gen, ObservationOperator.derivative(8), 1e6, 1.0, depth=4)


@pytest.mark.parametrize("a,k,c", [(-0.7, 0.8, 1.5), (0.3, -0.5, 2.0), (-2.0, 1.0, 0.5)])
def test_linear_scalar_closed_form(a, k, c):
    gen, obs = DiagonalGenerator([a]), ObservationOperator([c])
    sol = solve_semilinear(gen, obs, linear_drift(k), zero_diffusion(1), [1.0], _deterministic(4096), tol=1e-13)
    exact = np.exp((a + k * c) * sol.grid)
    assert np.max(np.abs(sol.states[0, :, 0] - exact)) < 1e-8


def test_zero_nonlinearities_give_semigroup_orbit_exactly():
    gen = DiagonalGenerator([-1.0, -4.0, -2j])
    ens = _deterministic(16)
    xi = np.array([1.0, 2.0, 3.0])
    sol = solve_semilinear(gen, ObservationOperator.identity(3), zero_drift(), zero_diffusion(3), xi, ens, tol=0)
    assert np.allclose(sol.states[0], np.exp(np.outer(sol.grid, gen.eigenvalues)) * xi, rtol=1e-13)


def test_inner_increments_contract_at_planned_rate():
    gen = DiagonalGenerator.heat(32)
    obs = ObservationOperator.fractional(gen, 0.25)
    cov = TraceClassCovariance.power(32)
    table = np.eye(32) * 0.5
    ens = sample_ensemble(cov, np.linspace(0, 1, 129), 3, 100)
    xi = np.zeros(32)
    xi[:3] = [1.0, 0.5, 0.25]
    sol = solve_semilinear(gen, obs, sine_drift(1.0), additive_diffusion(table), xi, ens, tol=1e-8)
    plan = sol.diagnostics["plan"]
    assert plan.lipschitz == 1.0
    for window in sol.diagnostics["inner_increments"]:
        for hist in window:
            for prev, cur in zip(hist[1:-1], hist[2:]):
                if prev > 1e-26:
                    assert cur / prev <= plan.inner_rate + 0.1
    assert sol.diagnostics["residual"] < 1e-7


def test_picard_inner_with_frozen_argument_is_linear_in_noise():
    gen = DiagonalGenerator.heat(4)
    obs = ObservationOperator.identity(4)
    cov = TraceClassCovariance.power(4)
    ens = sample_ensemble(cov, np.linspace(0, 0.25, 9), 1, 5)
    u = np.zeros((5, 9, 4), dtype=complex)
    diff = multiplicative_diffusion(1.0, cov, 4)
    out = picard_inner(gen, obs, zero_drift(), diff, np.ones(4), u, ens)
    # M(0) = 0, so X(.; 0) is the free evolution
    assert np.allclose(out.states, np.exp(np.outer(ens.grid, gen.eigenvalues))[None], rtol=1e-14)
    with pytest.raises(ValueError):
        picard_inner(gen, obs, zero_drift(), diff, np.ones(4), u[:, :-1], ens)


def test_outer_fixed_point_independent_of_initial_guess():
    gen = DiagonalGenerator.heat(8)
    obs = ObservationOperator.fractional(gen, 0.25)
    cov = TraceClassCovariance.power(8)
    ens = sample_ensemble(cov, np.linspace(0, 1, 65), 8, 50)
    args = (gen, obs, sine_drift(0.5), multiplicative_diffusion(0.5, cov, 8), np.ones(8), ens)
    tol = 1e-8
    a = solve_semilinear(*args, tol=tol, initial_guess="zero")
    b = solve_semilinear(*args, tol=tol, initial_guess="noise")
    assert np.sqrt(np.max(np.mean(np.abs(a.states - b.states) ** 2, axis=(0, 2)))) < 5 * tol


def test_convergence_error_carries_history():
    gen = DiagonalGenerator.heat(4)
    cov = TraceClassCovariance.power(4)
    ens = sample_ensemble(cov, np.linspace(0, 1, 17), 0, 4)
    with pytest.raises(ConvergenceError) as info:
        solve_semilinear(gen, ObservationOperator.identity(4), sine_drift(1.0), multiplicative_diffusion(1.0, cov, 4),
                         np.ones(4), ens, tol=1e-12, max_outer=2)
    assert len(info.value.history) == 2


def _gbm_errors(solver, exponent_range, n_paths=2000, a=-0.5, sigma=0.8):
    fine = sample_ensemble(TraceClassCovariance([1.0]), np.linspace(0, 1, 2**10 + 1), 42, n_paths)
    w_end = fine.increments[:, :, 0].sum(axis=1)
    exact = np.exp((a - sigma**2 / 2) + sigma * w_end)
    errors = []
    for m in exponent_range:
        ens = fine.coarsen(2 ** (10 - m))
        x = solver(ens)
        errors.append(np.sqrt(np.mean(np.abs(x - exact) ** 2)))
    return np.array(errors)


def test_gbm_semilinear_strong_error_decreases():
    a, sigma = -0.5, 0.8
    gen = DiagonalGenerator([a])
    cov = TraceClassCovariance([1.0])

    def solver(ens):
        return solve_semilinear(gen, ObservationOperator.identity(1), zero_drift(),
                                multiplicative_diffusion(sigma, cov, 1), [1.0], ens, tol=1e-10).final[:, 0]

    err = _gbm_errors(solver, range(6, 11))
    assert np.all(np.diff(err) < 0)


def test_gbm_multiplicative_unbounded_strong_error_decreases():
    a, b, sigma = -0.5, 2.0, 0.4
    gen = DiagonalGenerator([a])
    cov = TraceClassCovariance([1.0])

    def solver(ens):
        return solve_multiplicative_unbounded(gen, ObservationOperator([b]), multiplicative_diffusion(sigma, cov, 1),
                                              [1.0], ens, tol=1e-10).final[:, 0]

    err = _gbm_errors(solver, range(6, 11), a=a, sigma=sigma * b)
    assert np.all(np.diff(err) < 0)


def test_gamma_iteration_contracts_on_zero_class_observer():
    N = 32
    gen = DiagonalGenerator.heat(N)
    obs_b = ObservationOperator.fractional(gen, 0.25)
    cov = TraceClassCovariance.power(N)
    outer = multiplicative_diffusion(1.0, cov, N)
    ens = sample_ensemble(cov, np.linspace(0, 1, 129), 6, 100)
    rng = np.random.default_rng(0)
    xi = rng.standard_normal(N) / np.arange(1, N + 1)
    sol = solve_multiplicative_unbounded(gen, obs_b, outer, xi, ens, tol=1e-9)
    rate = sol.diagnostics["rate"]
    assert rate < 1
    for hist in sol.diagnostics["increments"]:
        for prev, cur in zip(hist[:-1], hist[1:]):
            if prev > 1e-26:
                assert np.sqrt(cur / prev) <= rate + 0.1


@pytest.mark.parametrize("make_obs", [lambda g: ObservationOperator.derivative(g.mode_count),
                                      lambda g: ObservationOperator.fractional(g, 0.75)])
def test_non_zero_class_observer_is_refused(make_obs):
    gen = DiagonalGenerator.heat(64)
    cov = TraceClassCovariance.power(64)
    ens = sample_ensemble(cov, np.linspace(0, 1, 9), 0, 2)
    with pytest.raises(NotZeroClassError) as info:
        solve_multiplicative_unbounded(gen, make_obs(gen), multiplicative_diffusion(1.0, cov, 64), np.ones(64), ens)
    assert not info.value.report.zero_class_flag


def test_lipschitz_map_validation():
    with pytest.raises(ValueError):
        LipschitzMap(lambda x: x, -1.0)
    with pytest.raises(ValueError):
        LipschitzMap(lambda x: x, 1.0, kind="other")


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-3, 3).filter(lambda v: v == 0 or abs(v) > 1e-100))
def test_model_maps_respect_declared_lipschitz_constant(seed, k):
    rng = np.random.default_rng(seed)
    cov = TraceClassCovariance.power(6)
    x = rng.standard_normal((20, 6)) + 1j * rng.standard_normal((20, 6))
    # separations well above rounding of x itself, so the 1e-12 slack measures the map
    y = x + rng.standard_normal((20, 6)) * 10.0 ** rng.uniform(-2, 1, (20, 1))
    for m in (linear_drift(k), sine_drift(k), zero_drift(), constant_drift([1.0] * 6),
              multiplicative_diffusion(k, cov, 6), additive_diffusion(np.ones((6, 6))), zero_diffusion(6)):
        ratio = m.empirical_ratio(x, y, cov.eigenvalues)
        assert np.all(ratio <= m.lipschitz * (1 + 1e-12) + 1e-300)


@settings(max_examples=20, deadline=None)
@given(st.floats(0.05, 20))
def test_doubling_lipschitz_never_lengthens_window(k):
    gen = DiagonalGenerator.heat(16)
    obs = ObservationOperator.fractional(gen, 0.25)
    assert plan_windows(gen, obs, 2 * k, 1.0).window <= plan_windows(gen, obs, k, 1.0).window
