import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mildspde.spectral import (DiagonalGenerator, DomainError, ObservationOperator, admissibility_constant,
                               dyadic_alphas, gram_operator, phi1, phi2, resolvent_apply,
                               semigroup_apply, yosida_approximant, yosida_extension)

EPS = np.finfo(float).eps
# sqrt(1/2): at N = 64 the top mode has exp(-2 * 64^2 * alpha) below double precision
GAMMA_HEAT_DERIVATIVE = 0.7071067811865476
# max_n sqrt((1 - exp(-2 n^2)) / (2 n)), attained at n = 1
GAMMA_FRAC_QUARTER = 0.6575198539828996

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def modes(n):
    return arrays(complex, n, elements=st.complex_numbers(max_magnitude=10, allow_nan=False,
                                                           allow_infinity=False))


def test_phi_functions_match_direct_formula_away_from_zero():
    z = np.array([0.5, -3.0, 2j, -1 + 1j])
    assert np.allclose(phi1(z), np.expm1(z) / z, rtol=1e-14)
    assert np.allclose(phi2(z), (np.expm1(z) - z) / z**2, rtol=1e-13)


@given(st.complex_numbers(max_magnitude=3.0, allow_nan=False))
def test_phi_functions_match_high_precision_on_both_branches(z):
    zz = mpmath.mpc(z)
    with mpmath.workdps(40):
        ref1, ref2 = (complex(mpmath.nsum(lambda k: zz**k / mpmath.factorial(k + s), [0, mpmath.inf]))
                      for s in (1, 2))
    assert abs(phi1(z) - ref1) <= 8 * EPS * abs(ref1)
    assert abs(phi2(z) - ref2) <= 8 * EPS * abs(ref2)


def test_phi_continuous_across_series_cutoff():
    edge = np.exp(1j * np.linspace(0, 2 * np.pi, 64))
    for f in (phi1, phi2):
        assert np.max(np.abs(f(edge * (1 - 1e-15)) - f(edge * (1 + 1e-15)))) < 1e-14


def test_heat_and_schrodinger_eigenvalues():
    assert np.array_equal(DiagonalGenerator.heat(3).eigenvalues, [-1, -4, -9])
    assert np.array_equal(DiagonalGenerator.schrodinger(2).eigenvalues, [-1j, -4j])
    assert DiagonalGenerator.heat(3).growth_bound == (1.0, 0.0)


def test_generator_rejects_bad_growth_bound():
    with pytest.raises(ValueError):
        DiagonalGenerator([1.0, -1.0], growth_bound=(1.0, 0.5))
    with pytest.raises(ValueError):
        DiagonalGenerator([-1.0], growth_bound=(0.5, 0.0))


def test_semigroup_examples():
    gen = DiagonalGenerator.heat(2)
    assert np.array_equal(semigroup_apply(gen, 0.0, [1, 1]), [1, 1])
    assert np.allclose(semigroup_apply(gen, 1.0, [1, 1]), [np.exp(-1), np.exp(-4)], rtol=1e-15)
    u = semigroup_apply(DiagonalGenerator.schrodinger(5), 3.7, np.ones(5))
    assert np.allclose(np.abs(u), 1.0, rtol=1e-15)
    with pytest.raises(ValueError):
        semigroup_apply(gen, -1.0, [1, 1])


@settings(max_examples=50)
@given(st.floats(0, 2), st.floats(0, 2), modes(6))
def test_semigroup_law(s, t, x):
    gen = DiagonalGenerator(np.array([-1, -4, -0.5j, 0.1, -2 + 3j, 0]))
    lhs = semigroup_apply(gen, s, semigroup_apply(gen, t, x))
    rhs = semigroup_apply(gen, s + t, x)
    assert np.allclose(lhs, rhs, rtol=1e-12, atol=1e-12 * (1 + np.abs(x).max()))


def test_resolvent_examples():
    gen = DiagonalGenerator.heat(3)
    assert np.allclose(resolvent_apply(gen, 1.0, [2, 5, 10]), [1, 1, 1])
    with pytest.raises(ValueError):
        resolvent_apply(gen, 0.0, [1, 1, 1])
    with pytest.raises(ValueError):
        resolvent_apply(gen, -1.0, [1, 1, 1])


@settings(max_examples=50)
@given(st.floats(0.1, 50), st.floats(0.1, 50), modes(4))
def test_resolvent_identity(lam, nu, x):
    # R(lam) - R(nu) = (nu - lam) R(lam) R(nu)
    gen = DiagonalGenerator(np.array([-1, -9, -2j, -0.5 + 1j]))
    lhs = resolvent_apply(gen, lam, x) - resolvent_apply(gen, nu, x)
    rhs = (nu - lam) * resolvent_apply(gen, lam, resolvent_apply(gen, nu, x))
    assert np.allclose(lhs, rhs, rtol=1e-10, atol=1e-12 * (1 + np.abs(x).max()))


@settings(max_examples=50)
@given(modes(5), modes(5), st.complex_numbers(max_magnitude=5, allow_nan=False))
def test_observer_linearity(x, y, a):
    rng = np.random.default_rng(0)
    for obs in (ObservationOperator(np.arange(1, 6)),
                ObservationOperator(None, rng.standard_normal((5, 5)) + 1j * rng.standard_normal((5, 5)))):
        lhs = obs.apply(a * x + y)
        rhs = a * obs.apply(x) + obs.apply(y)
        scale = 1 + np.abs(a * x).max() + np.abs(y).max()
        assert np.allclose(lhs, rhs, atol=1e-12 * scale * 10)


def test_yosida_approximant_on_domain_elements():
    gen = DiagonalGenerator.heat(4)
    obs = ObservationOperator.derivative(4)
    x = np.array([1, 0, 0, 0], dtype=complex)
    assert np.allclose(yosida_approximant(gen, obs, 10.0, x), [10 / 11, 0, 0, 0])


def test_yosida_extension_converges_on_square_summable_limit():
    N = 256
    n = np.arange(1, N + 1, dtype=float)
    gen, obs = DiagonalGenerator.heat(N), ObservationOperator.derivative(N)
    res = yosida_extension(gen, obs, n**-2.0, tol=1e-6)
    assert np.max(np.abs(res.limit - n * n**-2.0)) <= 1e-6


def test_yosida_extension_rejects_unbounded_limit():
    N = 256
    n = np.arange(1, N + 1, dtype=float)
    gen, obs = DiagonalGenerator.heat(N), ObservationOperator.derivative(N)
    with pytest.raises(DomainError) as info:
        yosida_extension(gen, obs, n**-1.0, tol=1e-6)
    assert "not Cauchy" in str(info.value)
    assert not info.value.diagnostics["cauchy_ok"]


def test_yosida_extension_exact_on_finitely_supported_state():
    gen, obs = DiagonalGenerator.heat(64), ObservationOperator.derivative(64)
    x = np.zeros(64, dtype=complex)
    x[[0, 3, 9]] = [1, -2j, 0.5]
    res = yosida_extension(gen, obs, x)
    assert np.allclose(res.limit, obs.apply(x), rtol=0, atol=1e-12)


def test_yosida_extension_validates_schedule():
    gen, obs = DiagonalGenerator.heat(4), ObservationOperator.derivative(4)
    with pytest.raises(ValueError):
        yosida_extension(gen, obs, np.ones(4), lam_schedule=[10, 5, 20])
    with pytest.raises(ValueError):
        yosida_extension(gen, obs, np.ones(4), lam_schedule=[-1, 5, 20])


@pytest.mark.parametrize("alpha", [0.1, 1.0])
def test_admissibility_heat_derivative_closed_form(alpha):
    gen, obs = DiagonalGenerator.heat(64), ObservationOperator.derivative(64)
    rep = admissibility_constant(gen, obs, alpha)
    assert rep.gamma() == pytest.approx(GAMMA_HEAT_DERIVATIVE, rel=1e-6)


def test_admissibility_small_alpha_closed_form():
    gen, obs = DiagonalGenerator.heat(3), ObservationOperator.derivative(3)
    a = 1e-3
    expected = np.sqrt(max((1 - np.exp(-2 * n * n * a)) / 2 for n in (1, 2, 3)))
    assert admissibility_constant(gen, obs, a).gamma() == pytest.approx(expected, rel=1e-12)


def test_admissibility_zero_observer_and_bounded_case():
    gen = DiagonalGenerator.heat(8)
    rep = admissibility_constant(gen, ObservationOperator.zero(8), [0.01, 0.1, 1.0])
    assert np.all(rep.gamma_values == 0)
    assert rep.zero_class_flag
    # bounded observer on a contraction semigroup: gamma(alpha)^2 <= alpha ||C||^2
    rep = admissibility_constant(gen, ObservationOperator.identity(8), dyadic_alphas(1.0, 10))
    assert np.all(rep.gamma_values[-1] ** 2 <= rep.alpha_grid * (1 + 1e-12))
    assert rep.zero_class_flag


def test_fractional_dichotomy():
    levels = (16, 64, 256)
    gen = DiagonalGenerator.heat(256)
    low = admissibility_constant(gen, ObservationOperator.fractional(gen, 0.25), dyadic_alphas(1.0), levels)
    assert not low.divergence_flag and low.zero_class_flag
    assert low.gamma() == pytest.approx(GAMMA_FRAC_QUARTER, rel=1e-12)
    high = admissibility_constant(gen, ObservationOperator.fractional(gen, 0.75), dyadic_alphas(1.0), levels)
    assert high.divergence_flag and not high.zero_class_flag
    assert np.all(high.level_growth() > 1.2)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(1e-4, 2.0), min_size=2, max_size=6, unique=True), st.floats(0.0, 1.0))
def test_admissibility_monotone(alphas, theta):
    gen = DiagonalGenerator.heat(32)
    rep = admissibility_constant(gen, ObservationOperator.fractional(gen, theta), alphas, levels=(4, 8, 32))
    assert np.all(np.diff(rep.gamma_values, axis=1) >= 0)
    assert np.all(np.diff(rep.gamma_values, axis=0) >= 0)


def _gram_by_quadrature(gen, K, alpha, panels=400):
    # composite Gauss-Legendre on geometrically graded panels, independent of the closed form
    x, w = np.polynomial.legendre.leggauss(16)
    cuts = np.concatenate([[0.0], alpha * np.geomspace(1e-9, 1.0, panels)])
    G = np.zeros((K.shape[1], K.shape[1]), dtype=complex)
    for a, b in zip(cuts[:-1], cuts[1:]):
        t = a + (b - a) * (x + 1) / 2
        for ti, wi in zip(t, w):
            M = K * np.exp(gen.eigenvalues * ti)[None, :]
            G += (b - a) / 2 * wi * (M.conj().T @ M)
    return G


def test_kernel_observer_gram_matches_quadrature():
    gen = DiagonalGenerator.schrodinger(4)
    wv = 1 / np.arange(1, 5)
    K = 1j * np.outer(wv, wv) + np.diag(np.arange(1, 5))
    obs = ObservationOperator(None, K)
    G = gram_operator(gen, obs, 0.5)
    assert np.allclose(G, _gram_by_quadrature(gen, K, 0.5), atol=1e-10)
    rep = admissibility_constant(gen, obs, 0.5)
    assert rep.gamma() == pytest.approx(np.sqrt(np.linalg.eigvalsh(G)[-1]), rel=1e-12)


def test_diagonal_kernel_agrees_with_multipliers():
    gen = DiagonalGenerator.heat(6)
    c = np.arange(1, 7) ** 0.5
    d = admissibility_constant(gen, ObservationOperator(c), [0.01, 0.5])
    k = admissibility_constant(gen, ObservationOperator(None, np.diag(c)), [0.01, 0.5])
    assert np.allclose(d.gamma_values, k.gamma_values, rtol=1e-10)
