"""Mild solutions of semilinear SPDEs by nested Picard iteration.

The inner iteration solves the drift equation for a frozen diffusion
argument ``u``; the outer iteration is the fixed point ``u -> X(. ; u)``.
Both are carried out window by window, with windows short enough for the
two maps to contract.  All time stepping goes through
:func:`mildspde.stochastics.advance`: the drift is integrated against the
semigroup exactly for its linear interpolant between grid points and the
diffusion is frozen at the left endpoint.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .spectral import (AdmissibilityReport, DiagonalGenerator, ObservationOperator,
                       admissibility_constant, dyadic_alphas)
from .stochastics import (SolutionPath, StepCache, WienerEnsemble, advance, noise_term)

__all__ = [
    "LipschitzMap",
    "WindowPlan",
    "ConvergenceError",
    "NotZeroClassError",
    "plan_windows",
    "picard_inner",
    "solve_semilinear",
    "solve_multiplicative_unbounded",
    "mild_residual",
]


class ConvergenceError(RuntimeError):
    """An iteration did not reach its tolerance; ``history`` holds the increments."""

    def __init__(self, message: str, history=None):
        super().__init__(message)
        self.history = history if history is not None else []


class NotZeroClassError(ValueError):
    """The observation inside the diffusion is not of zero class."""

    def __init__(self, message: str, report: AdmissibilityReport):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class LipschitzMap:
    """A globally Lipschitz map evaluated on batches of states.

    ``kind="drift"`` maps ``(..., N) -> (..., N)``.  ``kind="diffusion"``
    maps ``(..., N)`` to tables ``(..., N, K)``, or to diagonal entries
    ``(..., N)`` when ``diagonal`` is set.  ``lipschitz`` is the constant in
    the H norm (drift) or in the Hilbert-Schmidt norm weighted by the noise
    covariance (diffusion).
    """

    evaluate: Callable[[np.ndarray], np.ndarray]
    lipschitz: float
    kind: str = "drift"
    diagonal: bool = False
    is_zero: bool = False
    label: str = ""

    def __post_init__(self):
        if self.kind not in ("drift", "diffusion"):
            raise ValueError("kind must be 'drift' or 'diffusion'")
        if self.lipschitz < 0 or not np.isfinite(self.lipschitz):
            raise ValueError("Lipschitz constant must be finite and non-negative")

    def __call__(self, x):
        return self.evaluate(x)

    def empirical_ratio(self, x, y, weights=None) -> np.ndarray:
        """||G(x) - G(y)|| / ||x - y|| per sample pair (rows of ``x``, ``y``).

        For diffusions the numerator is the Hilbert-Schmidt norm with
        covariance eigenvalues ``weights``; pairs with ``x == y`` give 0.
        """
        x, y = np.atleast_2d(x), np.atleast_2d(y)
        d = self.evaluate(x) - self.evaluate(y)
        if self.kind == "drift":
            num = np.sum(np.abs(d) ** 2, axis=-1)
        else:
            lam = np.ones(1) if weights is None else np.asarray(weights, dtype=float)
            if self.diagonal:
                m = min(d.shape[-1], lam.size)
                num = np.sum(lam[:m] * np.abs(d[..., :m]) ** 2, axis=-1)
            else:
                num = np.sum(lam[: d.shape[-1]] * np.abs(d[..., : lam.size]) ** 2, axis=(-2, -1))
        den = np.sum(np.abs(x - y) ** 2, axis=-1)
        return np.where(den > 0, np.sqrt(num / np.where(den > 0, den, 1)), 0.0)


@dataclass(frozen=True)
class WindowPlan:
    """Window length T0 on which both Picard maps contract."""

    horizon: float
    window: float
    lipschitz: float
    M: float
    beta: float
    gamma: float
    c: float
    zeta: float
    candidates: tuple = ()

    @property
    def n_windows(self) -> int:
        return int(np.ceil(self.horizon / self.window - 1e-9))

    @property
    def inner_rate(self) -> float:
        """(c(T0) k)^2, the contraction factor of squared inner increments."""
        return (self.c * self.lipschitz) ** 2


def _zeta(M, beta, k, gamma, t0):
    grow = np.exp(2 * abs(beta) * t0)
    return 8 * M**2 * k**4 * grow * gamma**2 * t0**2 + 2 * M**2 * k**2 * grow * t0


def plan_windows(gen: DiagonalGenerator, obs: ObservationOperator, lipschitz: float, horizon: float,
                 depth: int = 20) -> WindowPlan:
    """Largest dyadic ``T0 = horizon * 2**-m`` (``m <= depth``) with
    ``2 c(T0)^2 k^2 < 1/2`` and ``zeta(T0) < 1``."""
    if horizon <= 0:
        raise ValueError("horizon must be positive")
    alphas = dyadic_alphas(horizon, depth)
    report = admissibility_constant(gen, obs, alphas)
    M, beta, k = gen.M, gen.beta, float(lipschitz)
    rows = []
    for j in range(alphas.size - 1, -1, -1):
        a = float(alphas[j])
        g = float(report.gamma_values[-1, j])
        c = np.sqrt(a) * g
        z = _zeta(M, beta, k, g, a)
        ok = 2 * c**2 * k**2 < 0.5 and z < 1
        rows.append((a, c, z, ok))
        if ok:
            return WindowPlan(horizon, a, k, M, beta, g, c, z, tuple(rows))
    raise ConvergenceError(f"no dyadic window down to {alphas[0]:.3e} satisfies the contraction "
                           "conditions", rows)


def _split_windows(grid: np.ndarray, window: float):
    """Index ranges [j0, j1] covering the grid, each spanning at most ``window``
    (at least one step)."""
    out = []
    j0 = 0
    last = grid.size - 1
    while j0 < last:
        limit = grid[j0] + window * (1 + 1e-9)
        j1 = int(np.searchsorted(grid, limit, side="right")) - 1
        j1 = min(max(j1, j0 + 1), last)
        out.append((j0, j1))
        j0 = j1
    return out


def _as_batch(xi, n_paths: int, n_modes: int) -> np.ndarray:
    xi = np.asarray(xi, dtype=complex)
    if xi.shape == (n_modes,):
        return np.broadcast_to(xi, (n_paths, n_modes)).copy()
    if xi.shape == (n_paths, n_modes):
        return xi.copy()
    raise ValueError(f"initial state must have shape ({n_modes},) or ({n_paths}, {n_modes})")


def _sq(x):
    return np.sum(x.real**2 + x.imag**2, axis=-1)


def _mean_se(v):
    """Ensemble mean and standard error along axis 0."""
    n = v.shape[0]
    m = v.mean(axis=0)
    se = v.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.zeros_like(m)
    return m, se


def _noise_block(coefs, diffusion: LipschitzMap, u, dW, zeta):
    """Noise contributions of every step of a window for the frozen path ``u``."""
    m = len(coefs)
    out = np.zeros(u[:, :m].shape, dtype=complex)
    if diffusion.is_zero:
        return out
    for i, c in enumerate(coefs):
        out[:, i] = noise_term(c, diffusion(u[:, i]), dW[:, i], zeta[:, i], diffusion.diagonal)
    return out


def _sweep(coefs, x0, f, noise):
    """March one window; ``f`` holds drift values at the window's grid points."""
    m = len(coefs)
    X = np.empty((x0.shape[0], m + 1, x0.shape[-1]), dtype=complex)
    X[:, 0] = x0
    for i, c in enumerate(coefs):
        if f is None:
            X[:, i + 1] = advance(c, X[:, i], None, None, noise[:, i])
        else:
            X[:, i + 1] = advance(c, X[:, i], f[:, i], f[:, i + 1], noise[:, i])
    return X


def _inner(coefs, obs, drift: LipschitzMap, x0, noise, tol, max_iter):
    """Picard iteration for the drift equation with fixed noise contributions.

    Returns the iterate and the history of squared increments
    ``E sum_j h_j ||C(X_n - X_{n-1})(t_j)||^2``.
    """
    h = np.array([c.h for c in coefs])
    X = _sweep(coefs, x0, None, noise)
    history = []
    if drift.is_zero:
        return X, history
    for _ in range(max_iter):
        CX = obs.apply(X)
        Xn = _sweep(coefs, x0, drift(CX), noise)
        per_path = np.sum(_sq(obs.apply(Xn[:, 1:] - X[:, 1:])) * h, axis=-1)
        est, se = _mean_se(per_path)
        history.append(float(est))
        X = Xn
        if np.sqrt(est + 3 * se) <= tol:
            return X, history
    raise ConvergenceError(f"inner Picard iteration did not reach tol={tol} in {max_iter} steps", history)


def _window_noise(wiener: WienerEnsemble, j0: int, j1: int):
    return wiener.increments[:, j0:j1], wiener.residuals[:, j0:j1]


def picard_inner(gen: DiagonalGenerator, obs: ObservationOperator, drift: LipschitzMap,
                 diffusion: LipschitzMap, x0, u, wiener: WienerEnsemble, tol: float = 1e-8,
                 max_iter: int = 200) -> SolutionPath:
    """X(. ; u): the mild solution with the diffusion argument frozen at ``u``.

    ``u`` has shape ``(P, J + 1, N)`` on ``wiener.grid``.  The increment
    history is in ``diagnostics['increments']``.
    """
    P = wiener.n_paths
    x0 = _as_batch(x0, P, gen.mode_count)
    u = np.asarray(u, dtype=complex)
    if u.shape != (P, wiener.grid.size, gen.mode_count):
        raise ValueError("u must have shape (P, J + 1, N) on the noise grid")
    cache = StepCache(gen.eigenvalues)
    coefs = [cache[float(h)] for h in wiener.steps]
    dW, zeta = _window_noise(wiener, 0, wiener.n_steps)
    noise = _noise_block(coefs, diffusion, u, dW, zeta)
    X, history = _inner(coefs, obs, drift, x0, noise, tol, max_iter)
    return SolutionPath(wiener.grid, X, obs.apply(X), {"increments": history, "iterations": len(history)})


def mild_residual(gen: DiagonalGenerator, obs: ObservationOperator, drift: LipschitzMap,
                  diffusion: LipschitzMap, X, wiener: WienerEnsemble) -> float:
    """Relative L^2(Omega x [0,T]) distance between X and the right-hand side
    of the mild equation evaluated on X."""
    cache = StepCache(gen.eigenvalues)
    coefs = [cache[float(h)] for h in wiener.steps]
    noise = _noise_block(coefs, diffusion, X, wiener.increments, wiener.residuals)
    f = None if drift.is_zero else drift(obs.apply(X))
    R = _sweep(coefs, X[:, 0], f, noise)
    h = wiener.steps
    num = float(np.mean(np.sum(_sq(X[:, 1:] - R[:, 1:]) * h, axis=-1)))
    den = float(np.mean(np.sum(_sq(X[:, 1:]) * h, axis=-1)))
    return float(np.sqrt(num / den)) if den > 0 else float(np.sqrt(num))


def solve_semilinear(gen: DiagonalGenerator, obs: ObservationOperator, drift: LipschitzMap,
                     diffusion: LipschitzMap, xi, wiener: WienerEnsemble, tol: float = 1e-8,
                     plan: WindowPlan | None = None, initial_guess: str = "zero",
                     inner_tol: float | None = None, max_inner: int = 200, max_outer: int = 500,
                     check_residual: bool = True) -> SolutionPath:
    """Mild solution of dX = (AX + F(CX)) dt + M(X) dW, X(0) = xi.

    Parameters
    ----------
    xi : array, shape (N,) or (P, N)
    wiener : sampled noise; its grid is the time grid
    tol : outer stopping tolerance on ``sup_t E||u_{m+1}(t) - u_m(t)||^2``
        (compared as its square root, with three standard errors added)
    initial_guess : ``"zero"`` or ``"noise"`` (semigroup plus the stochastic
        convolution of M(0))

    The returned path carries ``diagnostics`` with the window plan, the
    outer and inner increment histories and the mild-equation residual.
    """
    if initial_guess not in ("zero", "noise"):
        raise ValueError("initial_guess must be 'zero' or 'noise'")
    if tol < 0:
        raise ValueError("tol must be non-negative")
    inner_tol = 0.1 * tol if inner_tol is None else inner_tol
    N, P = gen.mode_count, wiener.n_paths
    if obs.mode_count != N:
        raise ValueError("observer and generator disagree on the number of modes")
    k = drift.lipschitz + diffusion.lipschitz
    grid = wiener.grid
    T = float(grid[-1])
    if plan is None:
        plan = plan_windows(gen, obs, k, T)
    cache = StepCache(gen.eigenvalues)
    all_coefs = [cache[float(h)] for h in wiener.steps]

    states = np.empty((P, grid.size, N), dtype=complex)
    states[:, 0] = _as_batch(xi, P, N)
    windows = _split_windows(grid, plan.window)
    outer_hist, inner_hist = [], []
    for j0, j1 in windows:
        coefs = all_coefs[j0:j1]
        dW, zeta = _window_noise(wiener, j0, j1)
        x0 = states[:, j0]
        if initial_guess == "zero":
            u = np.zeros((P, j1 - j0 + 1, N), dtype=complex)
        else:
            u0 = np.zeros((P, j1 - j0 + 1, N), dtype=complex)
            u = _sweep(coefs, x0, None, _noise_block(coefs, diffusion, u0, dW, zeta))
        w_outer, w_inner = [], []
        for it in range(max_outer):
            noise = _noise_block(coefs, diffusion, u, dW, zeta)
            X, hist = _inner(coefs, obs, drift, x0, noise, inner_tol, max_inner)
            w_inner.append(hist)
            est, se = _mean_se(_sq(X - u))
            delta = float(np.max(est + 3 * se))
            w_outer.append(float(np.max(est)))
            u = X
            if np.sqrt(delta) <= tol:
                break
        else:
            raise ConvergenceError(f"outer Picard iteration on window [{grid[j0]}, {grid[j1]}] "
                                   f"did not reach tol={tol} in {max_outer} steps", w_outer)
        states[:, j0: j1 + 1] = u
        outer_hist.append(w_outer)
        inner_hist.append(w_inner)

    diagnostics = {
        "plan": plan,
        "windows": windows,
        "outer_increments": outer_hist,
        "inner_increments": inner_hist,
    }
    if check_residual:
        res = mild_residual(gen, obs, drift, diffusion, states, wiener)
        diagnostics["residual"] = res
        if res >= max(10 * tol, 1e-12):
            raise ConvergenceError(f"mild-equation residual {res:.3e} exceeds 10*tol", [res])
    return SolutionPath(grid, states, obs.apply(states), diagnostics)


def solve_multiplicative_unbounded(gen: DiagonalGenerator, obs_b: ObservationOperator,
                                   outer: LipschitzMap, xi, wiener: WienerEnsemble,
                                   tol: float = 1e-8, levels=None, depth: int = 20,
                                   max_iter: int = 500) -> SolutionPath:
    """Mild solution of dX = AX dt + M(BX) dW with B unbounded but of zero class.

    Iterates ``u -> B X(. ; u)`` on windows of length ``alpha0``, the largest
    dyadic with ``gamma_B(alpha0) * Lip(M) < 1``.  Raises
    :class:`NotZeroClassError` before any stepping if B is not of zero class.
    """
    N, P = gen.mode_count, wiener.n_paths
    grid = wiener.grid
    T = float(grid[-1])
    alphas = dyadic_alphas(T, depth)
    if levels is None:
        levels = tuple(n for n in (N // 4, N // 2, N) if n >= 1)
        levels = tuple(sorted(set(levels)))
    report = admissibility_constant(gen, obs_b, alphas, levels=levels)
    if not report.zero_class_flag:
        raise NotZeroClassError("B is not of zero class: gamma_B(alpha) does not vanish as alpha -> 0"
                                + (" and diverges with the truncation" if report.divergence_flag else ""),
                                report)
    k = outer.lipschitz
    gam = report.gamma_values[-1]
    ok = np.nonzero(gam * k < 1)[0]
    if ok.size == 0:
        raise ConvergenceError("no dyadic window gives a contraction", list(gam))
    alpha0 = float(alphas[ok[-1]])
    rate = float(gam[ok[-1]] * k)

    cache = StepCache(gen.eigenvalues)
    all_coefs = [cache[float(h)] for h in wiener.steps]
    states = np.empty((P, grid.size, N), dtype=complex)
    states[:, 0] = _as_batch(xi, P, N)
    windows = _split_windows(grid, alpha0)
    history = []
    for j0, j1 in windows:
        coefs = all_coefs[j0:j1]
        dW, zeta = _window_noise(wiener, j0, j1)
        h = np.array([c.h for c in coefs])
        x0 = states[:, j0]
        u = np.zeros((P, j1 - j0 + 1, N), dtype=complex)
        w_hist = []
        for _ in range(max_iter):
            X = _sweep(coefs, x0, None, _noise_block(coefs, outer, u, dW, zeta))
            un = obs_b.apply(X)
            est, se = _mean_se(np.sum(_sq(un[:, 1:] - u[:, 1:]) * h, axis=-1))
            w_hist.append(float(est))
            u = un
            if np.sqrt(est + 3 * se) <= tol:
                break
        else:
            raise ConvergenceError(f"Gamma iteration did not reach tol={tol}", w_hist)
        states[:, j0: j1 + 1] = X
        history.append(w_hist)
    diagnostics = {"alpha0": alpha0, "rate": rate, "report": report, "increments": history,
                   "windows": windows}
    return SolutionPath(grid, states, obs_b.apply(states), diagnostics)
