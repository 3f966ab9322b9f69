"""Q-Wiener noise, Hilbert-Schmidt maps and the two convolution operators.

Noise is stored in the eigenbasis ``e_k`` of the covariance ``Q``: the
increment over a step of length ``h`` has independent coordinates
``N(0, lambda_k h)``.  Alongside every increment a second, independent
coordinate ``zeta_k ~ N(0, lambda_k)`` is kept; it carries the part of the
stochastic integral of ``exp(mu (h - s))`` that is orthogonal to the
increment, so the exponential step has the correct second moment per mode.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

from .rng import path_generator
from .spectral import (DiagonalGenerator, ObservationOperator, admissibility_constant, mode_norm,
                       phi1, phi2)

__all__ = [
    "TraceClassCovariance",
    "WienerPath",
    "WienerEnsemble",
    "HilbertSchmidtMap",
    "SolutionPath",
    "StepCoefficients",
    "DetConvolutionReport",
    "RegMaxReport",
    "validate_grid",
    "sample_wiener",
    "sample_ensemble",
    "hs_norm",
    "apply_table",
    "det_convolution",
    "observed_det_convolution",
    "stochastic_convolution",
    "observed_stoch_convolution",
]

DEFAULT_CHUNK = 256


@dataclass(frozen=True)
class TraceClassCovariance:
    """Covariance ``Q`` with eigenvalues ``lambda_k >= 0`` and finite trace."""

    eigenvalues: np.ndarray

    def __post_init__(self):
        lam = np.atleast_1d(np.asarray(self.eigenvalues, dtype=float)).copy()
        if lam.ndim != 1 or lam.size == 0:
            raise ValueError("covariance eigenvalues must be a non-empty 1-D sequence")
        if np.any(lam < 0) or not np.all(np.isfinite(lam)):
            raise ValueError("covariance eigenvalues must be finite and non-negative")
        lam.setflags(write=False)
        object.__setattr__(self, "eigenvalues", lam)

    @property
    def noise_dim(self) -> int:
        return self.eigenvalues.size

    @property
    def trace(self) -> float:
        return float(self.eigenvalues.sum())

    @classmethod
    def power(cls, k: int, decay: float = 2.0, scale: float = 1.0) -> "TraceClassCovariance":
        """lambda_k = scale * k**-decay."""
        return cls(scale * np.arange(1, k + 1, dtype=float) ** -decay)


def validate_grid(grid) -> np.ndarray:
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size < 2:
        raise ValueError("time grid needs at least two points")
    if grid[0] != 0.0:
        raise ValueError("time grid must start at 0")
    if np.any(np.diff(grid) <= 0):
        raise ValueError("time grid must be strictly increasing")
    return grid


@dataclass(frozen=True)
class WienerPath:
    """One sampled Q-Wiener path: ``increments`` and ``residuals`` are ``(J, K)``."""

    grid: np.ndarray
    increments: np.ndarray
    residuals: np.ndarray
    seed: int
    path_index: int

    def values(self) -> np.ndarray:
        """W(t_j) in the e_k coordinates, shape ``(J + 1, K)``."""
        out = np.zeros((self.grid.size, self.increments.shape[-1]))
        np.cumsum(self.increments, axis=0, out=out[1:])
        return out


@dataclass(frozen=True)
class WienerEnsemble:
    """Paths ``first_index .. first_index + P - 1`` of a seeded family.

    ``increments`` and ``residuals`` have shape ``(P, J, K)``.
    """

    grid: np.ndarray
    increments: np.ndarray
    residuals: np.ndarray
    covariance: TraceClassCovariance
    seed: int
    first_index: int = 0

    @property
    def n_paths(self) -> int:
        return self.increments.shape[0]

    @property
    def n_steps(self) -> int:
        return self.grid.size - 1

    @property
    def steps(self) -> np.ndarray:
        return np.diff(self.grid)

    def path(self, i: int) -> WienerPath:
        return WienerPath(self.grid, self.increments[i], self.residuals[i], self.seed,
                          self.first_index + i)

    def restrict(self, t_end: float) -> "WienerEnsemble":
        """Ensemble on the grid prefix ending at ``t_end`` (a grid point)."""
        j = int(np.searchsorted(self.grid, t_end))
        if j >= self.grid.size or not np.isclose(self.grid[j], t_end, rtol=1e-12, atol=1e-15):
            raise ValueError(f"t={t_end} is not a grid point")
        if j == 0:
            raise ValueError("restriction needs at least one step")
        return WienerEnsemble(self.grid[: j + 1], self.increments[:, :j], self.residuals[:, :j],
                              self.covariance, self.seed, self.first_index)

    def coarsen(self, factor: int) -> "WienerEnsemble":
        """Same Brownian paths observed on every ``factor``-th grid point.

        Increments add up.  The residual coordinate of a coarse step of
        length H is ``sqrt(12/H^3) int (H/2 - s) dbeta`` scaled by
        ``sqrt(lambda_k)``; it is assembled from the fine increments and the
        fine residuals, which carry the within-step part of that integral.
        """
        if factor < 1 or self.n_steps % factor:
            raise ValueError("factor must divide the number of steps")
        if factor == 1:
            return self
        h = self.steps
        if not np.allclose(h, h[0], rtol=1e-12, atol=0):
            raise ValueError("coarsening requires a uniform grid")
        d = h[0]
        H = factor * d
        P, J, K = self.increments.shape
        dW = self.increments.reshape(P, J // factor, factor, K)
        fine_zeta = self.residuals.reshape(P, J // factor, factor, K)
        centres = (np.arange(factor) + 0.5) * d
        weights = (H / 2 - centres)[None, None, :, None]
        integral = np.sum(weights * dW, axis=2) + np.sqrt(d**3 / 12) * np.sum(fine_zeta, axis=2)
        zeta = np.sqrt(12 / H**3) * integral
        return WienerEnsemble(self.grid[::factor].copy(), dW.sum(axis=2), zeta, self.covariance,
                              self.seed, self.first_index)


def _draw(cov: TraceClassCovariance, steps: np.ndarray, seed: int, index: int):
    rng = path_generator(seed, index)
    z = rng.standard_normal((steps.size, 2, cov.noise_dim))
    root = np.sqrt(cov.eigenvalues)
    return z[:, 0, :] * root * np.sqrt(steps)[:, None], z[:, 1, :] * root


def sample_wiener(cov: TraceClassCovariance, grid, seed: int, path_index: int = 0) -> WienerPath:
    grid = validate_grid(grid)
    inc, res = _draw(cov, np.diff(grid), seed, path_index)
    return WienerPath(grid, inc, res, seed, path_index)


def sample_ensemble(cov: TraceClassCovariance, grid, seed: int, n_paths: int, first_index: int = 0,
                    threads: int = 1) -> WienerEnsemble:
    """Sample paths ``first_index .. first_index + n_paths - 1``.

    Each path has its own counter-based stream, so the result is identical
    for any thread count.
    """
    grid = validate_grid(grid)
    if n_paths < 1:
        raise ValueError("n_paths must be positive")
    steps = np.diff(grid)
    inc = np.empty((n_paths, steps.size, cov.noise_dim))
    res = np.empty_like(inc)

    def fill(i):
        inc[i], res[i] = _draw(cov, steps, seed, first_index + i)

    if threads > 1 and n_paths > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(fill, range(n_paths)))
    else:
        for i in range(n_paths):
            fill(i)
    return WienerEnsemble(grid, inc, res, cov, seed, first_index)


@dataclass(frozen=True)
class HilbertSchmidtMap:
    """Map U -> H as a table ``(N, K)`` of images of ``e_k``, or a
    step-indexed table ``(J, N, K)``."""

    table: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.table, dtype=complex)
        if t.ndim not in (2, 3):
            raise ValueError("table must have shape (N, K) or (J, N, K)")
        object.__setattr__(self, "table", t)

    @property
    def step_indexed(self) -> bool:
        return self.table.ndim == 3

    def at_step(self, j: int) -> np.ndarray:
        return self.table[j] if self.step_indexed else self.table


def hs_norm(phi: HilbertSchmidtMap | np.ndarray, cov: TraceClassCovariance):
    """||Phi||_{L_2^0} = sqrt(sum |Phi_nk|^2 lambda_k); per step for indexed tables."""
    t = phi.table if isinstance(phi, HilbertSchmidtMap) else np.asarray(phi)
    if t.shape[-1] != cov.noise_dim:
        raise ValueError("table and covariance disagree on the noise dimension")
    sq = np.sum((t.real**2 + t.imag**2) * cov.eigenvalues, axis=(-2, -1))
    return np.sqrt(sq) if np.ndim(sq) else float(np.sqrt(sq))


def residual_scale(mu: np.ndarray, h: float) -> np.ndarray:
    """Coefficient of the orthogonal residual in the exponential noise step."""
    z = mu * h
    small = np.abs(z) < 1e-3
    v = np.empty(mu.shape)
    zs = z[small]
    v[small] = h * np.abs(zs) ** 2 / 12 * (1 + zs.real)
    zb = z[~small]
    v[~small] = h * (phi1(2 * zb.real).real - np.abs(phi1(zb)) ** 2)
    v = np.sqrt(np.maximum(v, 0.0))
    mag = np.abs(mu)
    phase = np.where(mag > 0, mu / np.where(mag > 0, mag, 1.0), 1.0)
    return v * phase


@dataclass(frozen=True)
class StepCoefficients:
    """Per-mode coefficients of one exponential step of length ``h``.

    ``y_next = E y + P1 f0 + P2 (f1 - f0) + mean (Phi dW) + resid (Phi zeta)``.
    """

    h: float
    E: np.ndarray
    P1: np.ndarray
    P2: np.ndarray
    mean: np.ndarray
    resid: np.ndarray

    @classmethod
    def build(cls, mu: np.ndarray, h: float) -> "StepCoefficients":
        z = mu * h
        return cls(h, np.exp(z), h * phi1(z), h * phi2(z), phi1(z), residual_scale(mu, h))


class StepCache(dict):
    """StepCoefficients keyed by step length."""

    def __init__(self, mu: np.ndarray):
        super().__init__()
        self.mu = mu

    def __missing__(self, h):
        coef = StepCoefficients.build(self.mu, h)
        self[h] = coef
        return coef


def apply_table(table: np.ndarray, w: np.ndarray, diagonal: bool = False) -> np.ndarray:
    """Phi w for a table ``(N, K)`` or a batch ``(P, N, K)``; diagonal tables
    are ``(..., N)`` and act on the first N noise coordinates."""
    if diagonal:
        n = table.shape[-1]
        if w.shape[-1] < n:
            w = np.concatenate([w, np.zeros(w.shape[:-1] + (n - w.shape[-1],))], axis=-1)
        return table * w[..., :n]
    if table.ndim == 2:
        return w @ table.T
    return np.einsum("pnk,pk->pn", table, w)


def advance(coef: StepCoefficients, y, f0, f1, noise):
    """One exponential step; shared by every solver so that reductions agree bitwise."""
    out = coef.E * y
    if f0 is not None:
        out = out + (coef.P1 * f0 + coef.P2 * (f1 - f0))
    if noise is not None:
        out = out + noise
    return out


def noise_term(coef: StepCoefficients, table, dW, zeta, diagonal: bool = False):
    return coef.mean * apply_table(table, dW, diagonal) + coef.resid * apply_table(table, zeta, diagonal)


@dataclass
class SolutionPath:
    """States on a time grid: ``states`` is ``(P, J + 1, N)`` (or ``(J + 1, N)``)."""

    grid: np.ndarray
    states: np.ndarray
    observed: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def final(self) -> np.ndarray:
        return self.states[..., -1, :]

    def index_of(self, t: float) -> int:
        j = int(np.argmin(np.abs(self.grid - t)))
        if not np.isclose(self.grid[j], t, rtol=1e-12, atol=1e-15):
            raise ValueError(f"t={t} is not a grid point")
        return j

    def at(self, t: float) -> np.ndarray:
        return self.states[..., self.index_of(t), :]


def _steps_or_uniform(grid):
    return [float(h) for h in np.diff(grid)]


def det_convolution(gen: DiagonalGenerator, f, grid, x0=None) -> SolutionPath:
    """(T * f)(t_j) for ``f`` piecewise constant on the grid steps.

    ``f`` has shape ``(J, N)`` or ``(P, J, N)``; the update is exact.
    """
    grid = validate_grid(grid)
    f = np.asarray(f, dtype=complex)
    J = grid.size - 1
    if f.shape[-2:] != (J, gen.mode_count):
        raise ValueError(f"f must have trailing shape ({J}, {gen.mode_count})")
    cache = StepCache(gen.eigenvalues)
    out = np.zeros(f.shape[:-2] + (J + 1, gen.mode_count), dtype=complex)
    if x0 is not None:
        out[..., 0, :] = x0
    for j, h in enumerate(_steps_or_uniform(grid)):
        c = cache[h]
        out[..., j + 1, :] = c.E * out[..., j, :] + c.P1 * f[..., j, :]
    return SolutionPath(grid, out)


def _panel_rule(h: float, decay: float, freq: float, order: int = 12):
    """Gauss-Legendre nodes on [0, h], graded towards 0 for fast decay and
    subdivided for oscillation."""
    x, w = np.polynomial.legendre.leggauss(order)
    cuts = [h]
    b = h
    while decay * b > 1e-2 and len(cuts) < 80:
        b /= 2
        cuts.append(b)
    cuts.append(0.0)
    cuts = cuts[::-1]
    nodes, weights = [], []
    for a, b in zip(cuts[:-1], cuts[1:]):
        pieces = max(1, int(np.ceil(freq * (b - a))))
        edges = np.linspace(a, b, pieces + 1)
        for lo, hi in zip(edges[:-1], edges[1:]):
            nodes.append(lo + (hi - lo) * (x + 1) / 2)
            weights.append((hi - lo) / 2 * w)
    return np.concatenate(nodes), np.concatenate(weights)


@dataclass(frozen=True)
class DetConvolutionReport:
    """Observed deterministic convolution and its regularity check at ``alpha``."""

    alpha: float
    observed: np.ndarray
    lhs: float
    rhs: float
    c_alpha: float
    ratio: float


def observed_det_convolution(gen: DiagonalGenerator, obs: ObservationOperator, f, grid,
                             alpha: float | None = None) -> DetConvolutionReport:
    """C(T * f) on the grid together with
    ``||C(T * f)||_{L^2(0,alpha)} / (c(alpha) ||f||_{L^2(0,alpha)})``.

    ``f`` has shape ``(J, N)``, piecewise constant on the steps.  The
    left-hand norm integrates the closed-form convolution between grid
    points by graded Gauss-Legendre quadrature.
    """
    grid = validate_grid(grid)
    f = np.asarray(f, dtype=complex)
    if f.ndim != 2:
        raise ValueError("f must have shape (J, N)")
    conv = det_convolution(gen, f, grid)
    alpha = float(grid[-1]) if alpha is None else float(alpha)
    jend = conv.index_of(alpha)
    mu = gen.eigenvalues
    decay = 2 * max(0.0, float(-mu.real.min()))
    freq = 2 * float(np.abs(mu.imag).max())
    lhs_sq = 0.0
    rhs_sq = 0.0
    rules: dict[float, tuple] = {}
    for j in range(jend):
        h = float(grid[j + 1] - grid[j])
        if h not in rules:
            tau, wts = _panel_rule(h, decay, freq)
            z = mu[None, :] * tau[:, None]
            rules[h] = (wts, np.exp(z), tau[:, None] * phi1(z))
        wts, Et, Pt = rules[h]
        y = Et * conv.states[j] + Pt * f[j]
        cy = obs.apply(y)
        lhs_sq += float(np.dot(wts, np.sum(cy.real**2 + cy.imag**2, axis=-1)))
        rhs_sq += h * float(mode_norm(f[j]) ** 2)
    lhs, rhs = np.sqrt(lhs_sq), np.sqrt(rhs_sq)
    c_alpha = admissibility_constant(gen, obs, alpha).c()
    denom = c_alpha * rhs
    ratio = lhs / denom if denom > 0 else (0.0 if lhs == 0 else np.inf)
    return DetConvolutionReport(alpha, obs.apply(conv.states), lhs, rhs, c_alpha, ratio)


PhiArg = Union[HilbertSchmidtMap, Callable[[int, np.ndarray], np.ndarray]]


def _table_source(phi: PhiArg, n_steps: int):
    if isinstance(phi, HilbertSchmidtMap):
        if phi.step_indexed:
            if phi.table.shape[0] == n_steps + 1:
                raise ValueError("non-adapted integrand: the table has an entry at the final "
                                 "grid point; step j must use the left endpoint t_j only")
            if phi.table.shape[0] != n_steps:
                raise ValueError(f"step-indexed table needs {n_steps} entries")
        return lambda j, state: phi.at_step(j)
    if callable(phi):
        return phi
    raise TypeError("phi must be a HilbertSchmidtMap or a callable (step, state) -> table")


def stochastic_convolution(gen: DiagonalGenerator, phi: PhiArg, wiener: WienerEnsemble | WienerPath,
                           x0=None) -> SolutionPath:
    """(T <> Phi)(t_j) = int_0^t T(t - s) Phi(s) dW(s) on the noise grid.

    ``phi`` is a fixed or step-indexed table, or a callable
    ``(step, state) -> table`` evaluated at the left endpoint of each step.
    """
    single = isinstance(wiener, WienerPath)
    dW = wiener.increments[None] if single else wiener.increments
    zeta = wiener.residuals[None] if single else wiener.residuals
    P, J, K = dW.shape
    source = _table_source(phi, J)
    cache = StepCache(gen.eigenvalues)
    out = np.zeros((P, J + 1, gen.mode_count), dtype=complex)
    if x0 is not None:
        out[:, 0, :] = x0
    for j, h in enumerate(_steps_or_uniform(wiener.grid)):
        table = np.asarray(source(j, out[:, j, :]))
        if table.shape[-1] != K or table.shape[-2] != gen.mode_count:
            raise ValueError(f"table must map {K} noise coordinates to {gen.mode_count} modes")
        c = cache[h]
        out[:, j + 1, :] = advance(c, out[:, j, :], None, None, noise_term(c, table, dW[:, j], zeta[:, j]))
    return SolutionPath(wiener.grid, out[0] if single else out)


@dataclass(frozen=True)
class RegMaxReport:
    """Monte-Carlo check of E int_0^alpha ||C (T <> Phi)||^2 against
    gamma(alpha)^2 E int_0^alpha ||Phi||^2."""

    alpha: float
    n_paths: int
    lhs: float
    lhs_stderr: float
    rhs: float
    ratio: float
    ratio_stderr: float
    degenerate: bool
    per_path: np.ndarray


def observed_stoch_convolution(gen: DiagonalGenerator, obs: ObservationOperator, phi: HilbertSchmidtMap,
                               cov: TraceClassCovariance, grid, seed: int, n_paths: int,
                               alpha: float | None = None, chunk_size: int = DEFAULT_CHUNK,
                               threads: int = 1) -> RegMaxReport:
    """Stream paths in fixed chunks and estimate the observed stochastic
    convolution's mean-square L^2(0, alpha) norm (trapezoidal in time).

    Chunks are fixed by ``chunk_size`` alone, so results do not depend on
    ``threads``.
    """
    grid = validate_grid(grid)
    alpha = float(grid[-1]) if alpha is None else float(alpha)
    jend = int(np.argmin(np.abs(grid - alpha)))
    if not np.isclose(grid[jend], alpha, rtol=1e-12, atol=1e-15) or jend == 0:
        raise ValueError(f"alpha={alpha} must be a positive grid point")
    grid = grid[: jend + 1]
    J = jend
    _table_source(phi, J)
    h = np.diff(grid)
    trap = np.zeros(J + 1)
    trap[:-1] += h / 2
    trap[1:] += h / 2

    def run(start):
        stop = min(start + chunk_size, n_paths)
        ens = sample_ensemble(cov, grid, seed, stop - start, first_index=start)
        path = stochastic_convolution(gen, phi, ens)
        cx = obs.apply(path.states)
        return np.sum((cx.real**2 + cx.imag**2).sum(axis=-1) * trap, axis=-1)

    starts = list(range(0, n_paths, chunk_size))
    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    per_path = np.concatenate(parts)
    lhs = float(per_path.mean())
    se = float(per_path.std(ddof=1) / np.sqrt(n_paths)) if n_paths > 1 else float("inf")

    hs_sq = hs_norm(phi, cov) ** 2
    hs_int = float(np.sum(h * hs_sq[:J])) if np.ndim(hs_sq) else float(hs_sq * alpha)
    gamma = admissibility_constant(gen, obs, alpha).gamma()
    rhs = gamma**2 * hs_int
    degenerate = rhs == 0.0
    ratio = lhs / rhs if rhs > 0 else 0.0
    ratio_se = se / rhs if rhs > 0 else 0.0
    return RegMaxReport(alpha, n_paths, lhs, se, rhs, ratio, ratio_se, degenerate, per_path)
