import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mildspde.spectral import DiagonalGenerator, ObservationOperator
from mildspde.stochastics import (HilbertSchmidtMap, TraceClassCovariance, det_convolution, hs_norm,
                                  observed_det_convolution, observed_stoch_convolution, residual_scale,
                                  sample_ensemble, sample_wiener, stochastic_convolution)

# trapezoid (dt = 1/256) of E|X(t)|^2 = (1 - exp(-2t))/2 over [0, 1], divided by (1 - exp(-2))/2
SINGLE_MODE_RATIO = 0.6565150996207422


def test_wiener_streams_are_keyed_by_seed_and_index():
    cov = TraceClassCovariance.power(4)
    grid = np.linspace(0, 1, 9)
    a, b = sample_wiener(cov, grid, 5, 3), sample_wiener(cov, grid, 5, 3)
    assert np.array_equal(a.increments, b.increments) and np.array_equal(a.residuals, b.residuals)
    assert not np.array_equal(a.increments, sample_wiener(cov, grid, 5, 4).increments)
    assert not np.array_equal(a.increments, sample_wiener(cov, grid, 6, 3).increments)


def test_ensemble_independent_of_threads_and_matches_single_paths():
    cov = TraceClassCovariance.power(3)
    grid = np.linspace(0, 1, 17)
    one = sample_ensemble(cov, grid, 1, 20, first_index=7, threads=1)
    many = sample_ensemble(cov, grid, 1, 20, first_index=7, threads=4)
    assert np.array_equal(one.increments, many.increments)
    assert np.array_equal(one.increments[4], sample_wiener(cov, grid, 1, 11).increments)


def test_degenerate_covariance_gives_zero_path():
    cov = TraceClassCovariance([0.0, 0.0])
    path = sample_wiener(cov, np.linspace(0, 1, 5), 0)
    assert np.all(path.values() == 0)


def test_increment_variance():
    cov = TraceClassCovariance([1.0, 0.25])
    ens = sample_ensemble(cov, np.linspace(0, 0.5, 3), 2, 20000)
    var = ens.increments.var(axis=0)
    expected = np.array([1.0, 0.25]) * 0.25
    se = expected * np.sqrt(2 / ens.n_paths)
    assert np.all(np.abs(var - expected) < 4 * se)


def test_covariance_validation():
    with pytest.raises(ValueError):
        TraceClassCovariance([1.0, -0.5])
    with pytest.raises(ValueError):
        sample_wiener(TraceClassCovariance([1.0]), [0.0, 0.5, 0.4], 0)


def test_coarsening_sums_increments_and_keeps_residual_law():
    cov = TraceClassCovariance([2.0])
    ens = sample_ensemble(cov, np.linspace(0, 1, 9), 3, 40000)
    c = ens.coarsen(4)
    assert np.allclose(c.increments[:, 0], ens.increments[:, :4].sum(axis=1), rtol=0, atol=1e-14)
    z = c.residuals[:, :, 0].ravel()
    w = c.increments[:, :, 0].ravel()
    n = z.size
    assert abs(z.var() - 2.0) < 4 * 2.0 * np.sqrt(2 / n)
    assert abs(np.corrcoef(z, w)[0, 1]) < 4 / np.sqrt(n)


def test_hs_norm_examples():
    cov = TraceClassCovariance([1.0, 0.5, 0.25])
    assert hs_norm(HilbertSchmidtMap(np.eye(3)), cov) == pytest.approx(np.sqrt(1.75))
    assert hs_norm(HilbertSchmidtMap(np.zeros((2, 3))), cov) == 0.0
    steps = hs_norm(HilbertSchmidtMap(np.stack([np.eye(3), 2 * np.eye(3)])), cov)
    assert np.allclose(steps, [np.sqrt(1.75), 2 * np.sqrt(1.75)])


@settings(max_examples=40)
@given(st.floats(-50, 0), st.floats(1e-4, 0.5))
def test_residual_scale_matches_variance_defect(mu, h):
    # E|int_0^h e^{mu(h-s)} dbeta|^2 = (phi1 part)^2 h + residual^2, for real mu
    s = residual_scale(np.array([mu + 0j]), h)[0]
    total = h if mu == 0 else np.expm1(2 * mu * h) / (2 * mu)
    mean = 1.0 if mu == 0 else np.expm1(mu * h) / (mu * h)
    assert abs(abs(s) ** 2 + mean**2 * h - total) <= 1e-9 * total


def test_det_convolution_constant_forcing_closed_form():
    gen = DiagonalGenerator([-2.0, -1j, 0.0])
    grid = np.linspace(0, 1.5, 31)
    f = np.tile([1.0, 2.0, 3.0], (30, 1))
    out = det_convolution(gen, f, grid).states
    t = grid[:, None]
    mu = gen.eigenvalues
    expected = np.where(mu == 0, t, np.expm1(mu * t) / np.where(mu == 0, 1, mu)) * f[0]
    assert np.allclose(out, expected, rtol=1e-12, atol=1e-14)
    assert np.all(det_convolution(gen, np.zeros((30, 3)), grid).states == 0)


def _mp_observed_norm(mu, c, f, grid):
    total = mp.mpf(0)
    state = [mp.mpc(0)] * len(mu)
    for j in range(len(grid) - 1):
        h = mp.mpf(grid[j + 1] - grid[j])
        m = [mp.mpc(v) for v in mu]
        fj = [mp.mpc(v) for v in f[j]]

        def y(tau, n):
            return mp.exp(m[n] * tau) * state[n] + (mp.expm1(m[n] * tau) / m[n]) * fj[n]

        total += mp.quad(lambda tau: sum(abs(c[n] * y(tau, n)) ** 2 for n in range(len(mu))), [0, h / 64, h])
        state = [y(h, n) for n in range(len(mu))]
    return mp.sqrt(total)


def test_observed_det_convolution_norm_against_independent_quadrature():
    mp.mp.dps = 25
    gen = DiagonalGenerator([-1.0, -16.0, -400.0])
    obs = ObservationOperator([1.0, 4.0, 20.0])
    grid = np.linspace(0, 1, 5)
    rng = np.random.default_rng(1)
    f = rng.standard_normal((4, 3))
    rep = observed_det_convolution(gen, obs, f, grid)
    oracle = float(_mp_observed_norm([-1.0, -16.0, -400.0], [1.0, 4.0, 20.0], f, grid))
    assert rep.lhs == pytest.approx(oracle, rel=1e-9)
    assert rep.ratio <= 1


def test_observed_det_convolution_kernel_observer_oscillatory():
    gen = DiagonalGenerator.schrodinger(4)
    w = 1 / np.arange(1, 5)
    obs = ObservationOperator(None, 1j * np.outer(w, w))
    grid = np.linspace(0, 1, 9)
    rng = np.random.default_rng(2)
    for _ in range(5):
        f = rng.standard_normal((8, 4)) + 1j * rng.standard_normal((8, 4))
        assert observed_det_convolution(gen, obs, f, grid).ratio <= 1 + 1e-8


def test_stochastic_convolution_zero_integrand_and_adaptedness():
    gen = DiagonalGenerator.heat(3)
    cov = TraceClassCovariance.power(2)
    ens = sample_ensemble(cov, np.linspace(0, 1, 5), 0, 3)
    assert np.all(stochastic_convolution(gen, HilbertSchmidtMap(np.zeros((3, 2))), ens).states == 0)
    with pytest.raises(ValueError, match="non-adapted"):
        stochastic_convolution(gen, HilbertSchmidtMap(np.ones((5, 3, 2))), ens)
    # a callable integrand only sees the state at the left endpoint
    seen = []

    def phi(j, state):
        seen.append(j)
        return np.ones((3, 2))

    stochastic_convolution(gen, phi, ens)
    assert seen == [0, 1, 2, 3]


def test_stochastic_convolution_second_moment():
    gen = DiagonalGenerator([-1.0, -30.0, -3j])
    cov = TraceClassCovariance([1.0])
    ens = sample_ensemble(cov, np.linspace(0, 1, 9), 21, 50000)
    x = stochastic_convolution(gen, HilbertSchmidtMap(np.ones((3, 1))), ens).final
    m2 = np.abs(x) ** 2
    expected = np.array([(1 - np.exp(-2)) / 2, (1 - np.exp(-60)) / 60, 1.0])
    se = m2.std(axis=0) / np.sqrt(m2.shape[0])
    assert np.all(np.abs(m2.mean(axis=0) - expected) < 4 * se)


def test_reg_max_single_mode_exact_ratio_and_degenerate_input():
    gen, obs = DiagonalGenerator([-1.0]), ObservationOperator.identity(1)
    cov = TraceClassCovariance([1.0])
    grid = np.linspace(0, 1, 257)
    rep = observed_stoch_convolution(gen, obs, HilbertSchmidtMap(np.ones((1, 1))), cov, grid, 4, 4000)
    assert abs(rep.ratio - SINGLE_MODE_RATIO) <= 3 * rep.ratio_stderr
    zero = observed_stoch_convolution(gen, obs, HilbertSchmidtMap(np.zeros((1, 1))), cov, grid, 4, 10)
    assert zero.degenerate and zero.ratio == 0.0


def test_reg_max_streaming_independent_of_threads():
    gen = DiagonalGenerator.heat(4)
    obs = ObservationOperator.fractional(gen, 0.25)
    cov = TraceClassCovariance.power(4)
    grid = np.linspace(0, 1, 33)
    phi = HilbertSchmidtMap(np.eye(4))
    a = observed_stoch_convolution(gen, obs, phi, cov, grid, 9, 300, chunk_size=64, threads=1)
    b = observed_stoch_convolution(gen, obs, phi, cov, grid, 9, 300, chunk_size=64, threads=4)
    assert np.array_equal(a.per_path, b.per_path) and a.lhs == b.lhs
