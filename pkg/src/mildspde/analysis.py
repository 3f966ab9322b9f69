"""Monte Carlo verification: continuous dependence on initial data, the
transition semigroup and its Lipschitz-Feller modulus, and two independent
oracles (explicit Euler-Maruyama and a single-level Picard iteration)."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .solvers import (ConvergenceError, LipschitzMap, WindowPlan, _as_batch, _mean_se, _noise_block,
                      _split_windows, _sq, _sweep, plan_windows, solve_semilinear)
from .spectral import DiagonalGenerator, ObservationOperator, admissibility_constant, dyadic_alphas
from .stochastics import (SolutionPath, StepCache, TraceClassCovariance, WienerEnsemble, apply_table)

__all__ = [
    "Problem",
    "GronwallChain",
    "DependenceReport",
    "TransitionEstimate",
    "FellerRow",
    "FellerReport",
    "StiffnessWarning",
    "gronwall_constant",
    "estimate_dependence",
    "transition_semigroup",
    "feller_modulus",
    "oracle_euler_maruyama",
    "oracle_coupled_picard",
    "sup_l2_distance",
    "strong_error",
    "observed_order",
]


class StiffnessWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Problem:
    """dX = (AX + F(CX)) dt + M(X) dW with Q-Wiener noise."""

    generator: DiagonalGenerator
    observer: ObservationOperator
    drift: LipschitzMap
    diffusion: LipschitzMap
    covariance: TraceClassCovariance
    label: str = ""

    @property
    def lipschitz(self) -> float:
        """k with ||F(x) - F(y)|| + ||M(x) - M(y)||_2 <= k ||x - y||."""
        return self.drift.lipschitz + self.diffusion.lipschitz

    def solve(self, xi, wiener: WienerEnsemble, tol: float = 1e-8, **kwargs) -> SolutionPath:
        return solve_semilinear(self.generator, self.observer, self.drift, self.diffusion, xi, wiener,
                                tol, **kwargs)


@dataclass(frozen=True)
class GronwallChain:
    """Constants of the continuous-dependence estimate E||X(t,xi) - X(t,eta)||^2 <= C_T E||xi - eta||^2."""

    horizon: float
    window: float
    windows: int
    M: float
    k: float
    gamma: float
    c: float
    p: float
    q: float
    C1: float
    C2: float
    C3: float
    C4: float
    bound: float


def gronwall_constant(problem: Problem, horizon: float, depth: int = 20) -> GronwallChain:
    """Reconstruct C_T window by window.

    On a window of length T0 with ``3 k^2 c(T0)^2 < 1/2`` the observed
    difference satisfies ``int ||C D||^2 <= 6 gamma^2 ||D(start)||^2 +
    6 k^2 gamma^2 int ||D||^2`` and the endpoint satisfies
    ``||D(end)||^2 <= p ||D(start)||^2 + q int ||D||^2``.  Chaining the
    windows gives ``int_0^t ||C D||^2 <= C1 ||D(0)||^2 + C2 int_0^t ||D||^2``,
    then ``||D(t)||^2 <= C3 ||D(0)||^2 + C4 int_0^t ||D||^2`` and Gronwall
    yields ``C_T = C3 exp(C4 T)``.  ``M`` is ``sup_{t<=T} ||T(t)||``.
    """
    gen, obs = problem.generator, problem.observer
    k = problem.lipschitz
    alphas = dyadic_alphas(horizon, depth)
    rep = admissibility_constant(gen, obs, alphas)
    window = None
    for j in range(alphas.size - 1, -1, -1):
        c = float(rep.c_values[-1, j])
        if 3 * k**2 * c**2 < 0.5:
            window, gamma = float(alphas[j]), float(rep.gamma_values[-1, j])
            break
    if window is None:
        raise ConvergenceError("no window satisfies 3 k^2 c(T0)^2 < 1/2")
    M = gen.M * np.exp(abs(gen.beta) * horizon)
    n = int(np.ceil(horizon / window - 1e-9))
    p = 3 * M**2 + 18 * window * M**2 * k**2 * gamma**2
    q = 3 * M**2 * k**2 + 18 * M**2 * k**2 * window * gamma**2
    powers = p ** np.arange(n)
    C1 = 6 * gamma**2 * float(powers.sum())
    inner = sum(float(powers[: i - 1].sum()) for i in range(1, n + 1))
    C2 = 6 * gamma**2 * q * inner + 6 * k**2 * gamma**2
    C3 = 3 * M**2 + 3 * M**2 * k**2 * horizon * C1
    C4 = 3 * M**2 * k**2 * horizon * C2 + 3 * M**2 * k**2
    return GronwallChain(horizon, window, n, M, k, gamma, float(np.sqrt(window) * gamma), p, q, C1, C2,
                         C3, C4, float(C3 * np.exp(C4 * horizon)))


@dataclass(frozen=True)
class DependenceReport:
    horizon: float
    empirical_ratio: float
    stderr: float
    stderr_rel: float
    gronwall_bound: float
    chain: GronwallChain
    degenerate: bool
    coupling: tuple
    ratio_path: np.ndarray

    @property
    def passed(self) -> bool:
        return self.empirical_ratio <= self.gronwall_bound * (1 + 3 * self.stderr_rel)


def estimate_dependence(problem: Problem, xi, eta, ensemble: WienerEnsemble, tol: float = 1e-8,
                        **solver_kwargs) -> DependenceReport:
    """sup_t E||X(t,xi) - X(t,eta)||^2 / E||xi - eta||^2 under synchronous coupling.

    Both trajectories are driven by the same ensemble; ``coupling`` records
    (seed, first path index, number of paths) of that ensemble.
    """
    horizon = float(ensemble.grid[-1])
    chain = gronwall_constant(problem, horizon)
    P, N = ensemble.n_paths, problem.generator.mode_count
    xi_b, eta_b = _as_batch(xi, P, N), _as_batch(eta, P, N)
    coupling = (ensemble.seed, ensemble.first_index, ensemble.n_paths)
    den = float(np.mean(_sq(xi_b - eta_b)))
    if den == 0.0:
        return DependenceReport(horizon, 0.0, 0.0, 0.0, chain.bound, chain, True, coupling,
                                np.zeros(ensemble.grid.size))
    X = problem.solve(xi_b, ensemble, tol, **solver_kwargs)
    Y = problem.solve(eta_b, ensemble, tol, **solver_kwargs)
    est, se = _mean_se(_sq(X.states - Y.states))
    j = int(np.argmax(est))
    ratio = float(est[j] / den)
    stderr = float(se[j] / den)
    rel = stderr / ratio if ratio > 0 else 0.0
    return DependenceReport(horizon, ratio, stderr, rel, chain.bound, chain, False, coupling, est / den)


@dataclass(frozen=True)
class TransitionEstimate:
    label: str
    point: np.ndarray
    time: float
    value: float
    stderr: float
    bound: float
    samples: np.ndarray = field(repr=False)


def _final_states(problem: Problem, x, t: float, ensemble: WienerEnsemble, tol: float, **kw):
    if t == 0:
        return _as_batch(x, ensemble.n_paths, problem.generator.mode_count)
    return problem.solve(x, ensemble.restrict(t), tol, **kw).final


def transition_semigroup(problem: Problem, phi: Callable[[np.ndarray], np.ndarray], x, t: float,
                         ensemble: WienerEnsemble, phi_max: float, tol: float = 1e-8, label: str = "",
                         **solver_kwargs) -> TransitionEstimate:
    """Monte Carlo estimate of P_t phi(x) = E phi(X(t, x)).

    ``phi`` maps states ``(P, N)`` to real values ``(P,)`` bounded by ``phi_max``.
    """
    if t < 0:
        raise ValueError("t must be non-negative")
    vals = np.asarray(phi(_final_states(problem, x, t, ensemble, tol, **solver_kwargs)), dtype=float)
    if np.any(np.abs(vals) > phi_max):
        raise ValueError("test function exceeds its declared bound")
    n = vals.size
    se = float(vals.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return TransitionEstimate(label, np.asarray(x), t, float(vals.mean()), se, phi_max, vals)


@dataclass(frozen=True)
class FellerRow:
    radius: float
    difference: float
    stderr: float
    bound: float

    @property
    def ok(self) -> bool:
        return self.difference <= self.bound + 3 * self.stderr


@dataclass(frozen=True)
class FellerReport:
    """Quantitative (Lipschitz) continuity of x -> P_t phi(x) along one direction."""

    time: float
    lipschitz_phi: float
    gronwall_bound: float
    rows: tuple

    @property
    def passed(self) -> bool:
        return all(r.ok for r in self.rows)

    @property
    def decreases_to_noise_floor(self) -> bool:
        """Each entry is at most the previous one, or within 3 standard errors
        of zero, or within the previous entry plus 3 standard errors."""
        for prev, cur in zip(self.rows[:-1], self.rows[1:]):
            floor = 3 * cur.stderr
            if cur.difference > max(prev.difference + 3 * cur.stderr, floor):
                return False
        return True


def feller_modulus(problem: Problem, phi: Callable[[np.ndarray], np.ndarray], lipschitz_phi: float, x,
                   radii, t: float, ensemble: WienerEnsemble, direction=None, tol: float = 1e-8,
                   **solver_kwargs) -> FellerReport:
    """|P_t phi(x) - P_t phi(x + r u)| for each radius r, against
    ``L_phi sqrt(C_T) r``.  The standard error is that of the coupled
    differences phi(X(t,x)) - phi(X(t,y))."""
    N = problem.generator.mode_count
    x = np.asarray(x, dtype=complex)
    if direction is None:
        direction = np.zeros(N, dtype=complex)
        direction[0] = 1.0
    direction = np.asarray(direction, dtype=complex)
    direction = direction / np.linalg.norm(direction)
    chain = gronwall_constant(problem, t)
    base = np.asarray(phi(_final_states(problem, x, t, ensemble, tol, **solver_kwargs)), dtype=float)
    rows = []
    for r in radii:
        r = float(r)
        if r == 0:
            rows.append(FellerRow(0.0, 0.0, 0.0, 0.0))
            continue
        other = np.asarray(phi(_final_states(problem, x + r * direction, t, ensemble, tol,
                                             **solver_kwargs)), dtype=float)
        d = base - other
        se = float(d.std(ddof=1) / np.sqrt(d.size)) if d.size > 1 else 0.0
        rows.append(FellerRow(r, float(abs(d.mean())), se, lipschitz_phi * np.sqrt(chain.bound) * r))
    return FellerReport(t, lipschitz_phi, chain.bound, tuple(rows))


def oracle_euler_maruyama(problem: Problem, xi, wiener: WienerEnsemble, warn_at: float = 0.5,
                          refuse_at: float = 2.0) -> SolutionPath:
    """Explicit Euler-Maruyama on the truncated system.

    X_{j+1} = X_j + h (mu X_j + F(C X_j)) + M(X_j) dW_j.
    """
    gen, obs = problem.generator, problem.observer
    h_max = float(wiener.steps.max())
    stiff = gen.spectral_radius * h_max
    if stiff > refuse_at:
        raise ValueError(f"max|mu| dt = {stiff:.3g} exceeds {refuse_at}: explicit scheme refused")
    if stiff > warn_at:
        warnings.warn(f"max|mu| dt = {stiff:.3g} > {warn_at}", StiffnessWarning, stacklevel=2)
    P, N = wiener.n_paths, gen.mode_count
    X = np.empty((P, wiener.grid.size, N), dtype=complex)
    X[:, 0] = _as_batch(xi, P, N)
    mu = gen.eigenvalues
    for j, h in enumerate(wiener.steps):
        x = X[:, j]
        rate = mu * x
        if not problem.drift.is_zero:
            rate = rate + problem.drift(obs.apply(x))
        nxt = x + h * rate
        if not problem.diffusion.is_zero:
            nxt = nxt + apply_table(problem.diffusion(x), wiener.increments[:, j], problem.diffusion.diagonal)
        X[:, j + 1] = nxt
    return SolutionPath(wiener.grid, X, obs.apply(X), {"stiffness": stiff})


def oracle_coupled_picard(problem: Problem, xi, wiener: WienerEnsemble, tol: float = 1e-8,
                          plan: WindowPlan | None = None, max_iter: int = 1000) -> SolutionPath:
    """Single-level fixed point X -> T xi + T*F(CX) + T<>M(X), window by window.

    Uses the same time stepping as the nested solver but updates drift and
    diffusion arguments together.
    """
    gen, obs = problem.generator, problem.observer
    P, N = wiener.n_paths, gen.mode_count
    grid = wiener.grid
    if plan is None:
        plan = plan_windows(gen, obs, problem.lipschitz, float(grid[-1]))
    cache = StepCache(gen.eigenvalues)
    coefs_all = [cache[float(h)] for h in wiener.steps]
    states = np.empty((P, grid.size, N), dtype=complex)
    states[:, 0] = _as_batch(xi, P, N)
    history = []
    for j0, j1 in _split_windows(grid, plan.window):
        coefs = coefs_all[j0:j1]
        dW, zeta = wiener.increments[:, j0:j1], wiener.residuals[:, j0:j1]
        X = np.zeros((P, j1 - j0 + 1, N), dtype=complex)
        w_hist = []
        for _ in range(max_iter):
            f = None if problem.drift.is_zero else problem.drift(obs.apply(X))
            Xn = _sweep(coefs, states[:, j0], f, _noise_block(coefs, problem.diffusion, X, dW, zeta))
            est, se = _mean_se(_sq(Xn - X))
            w_hist.append(float(est.max()))
            X = Xn
            if np.sqrt(float(np.max(est + 3 * se))) <= tol:
                break
        else:
            raise ConvergenceError("coupled Picard oracle did not converge", w_hist)
        states[:, j0: j1 + 1] = X
        history.append(w_hist)
    return SolutionPath(grid, states, obs.apply(states), {"increments": history, "plan": plan})


def sup_l2_distance(a: np.ndarray, b: np.ndarray) -> float:
    """sup_t sqrt(E||a(t) - b(t)||^2) for paths ``(P, J + 1, N)``."""
    return float(np.sqrt(np.max(np.mean(_sq(np.asarray(a) - np.asarray(b)), axis=0))))


def strong_error(approx: np.ndarray, exact: np.ndarray) -> float:
    """sqrt(E||approx - exact||^2) over the leading (path) axis."""
    return float(np.sqrt(np.mean(_sq(np.atleast_2d(np.asarray(approx) - np.asarray(exact))))))


def observed_order(steps, errors) -> float:
    """Least-squares slope of log(error) against log(step)."""
    return float(np.polyfit(np.log(steps), np.log(errors), 1)[0])
