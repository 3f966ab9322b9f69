"""Diagonal (spectral) model of generators, semigroups and observation operators.

The state space is realised as an N-mode truncation of a separable Hilbert
space: a state is a complex numpy array of mode coefficients with shape
``(..., N)``.  A generator is diagonal in that basis, so the semigroup, the
resolvent and the Yosida approximants act mode by mode.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "DomainError",
    "DiagonalGenerator",
    "ObservationOperator",
    "AdmissibilityReport",
    "YosidaResult",
    "phi1",
    "phi2",
    "mode_norm",
    "semigroup_apply",
    "resolvent_apply",
    "yosida_approximant",
    "default_yosida_schedule",
    "yosida_extension",
    "gram_operator",
    "admissibility_constant",
    "dyadic_alphas",
]

_SERIES_CUTOFF = 1.0
_SERIES_TERMS = 20


class DomainError(Exception):
    """A state is not in the domain of a Yosida extension at the resolved precision.

    This is a verdict, not a failure: ``diagnostics`` records why the limit
    was rejected.
    """

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


def _readonly(a, dtype=complex) -> np.ndarray:
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


def _phi_series(z, shift):
    """sum_k z^k / (k + shift)! by Horner; 20 terms reach full precision for |z| < 1."""
    out = np.ones_like(z)
    for k in range(_SERIES_TERMS, 0, -1):
        out = 1 + z / (k + shift) * out
    return out / math.factorial(shift)


def phi1(z):
    """(e^z - 1)/z, evaluated stably near z = 0."""
    z = np.asarray(z, dtype=complex)
    out = np.empty_like(z)
    small = np.abs(z) < _SERIES_CUTOFF
    out[small] = _phi_series(z[small], 1)
    zb = z[~small]
    out[~small] = np.expm1(zb) / zb
    return out


def phi2(z):
    """(e^z - 1 - z)/z^2, evaluated stably near z = 0."""
    z = np.asarray(z, dtype=complex)
    out = np.empty_like(z)
    small = np.abs(z) < _SERIES_CUTOFF
    out[small] = _phi_series(z[small], 2)
    zb = z[~small]
    out[~small] = (np.expm1(zb) / zb - 1) / zb
    return out


def mode_norm(x, axis=-1):
    """Euclidean norm over the mode axis, summed in a fixed order."""
    x = np.asarray(x)
    return np.sqrt(np.sum(x.real**2 + x.imag**2, axis=axis))


@dataclass(frozen=True)
class DiagonalGenerator:
    """Generator ``A`` with eigenvalues ``mu_n`` in the mode basis.

    ``growth_bound`` is ``(M, beta)`` with ``||T(t)|| <= M exp(beta t)``.
    When omitted it is ``(1, max(0, max Re mu))``, the admissible choice
    with the smallest ``|beta|``.
    """

    eigenvalues: np.ndarray
    growth_bound: tuple[float, float] | None = None

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.eigenvalues, dtype=complex))
        if mu.ndim != 1 or mu.size == 0:
            raise ValueError("eigenvalues must be a non-empty 1-D sequence")
        if not np.all(np.isfinite(mu)):
            raise ValueError("eigenvalues must be finite")
        top = float(mu.real.max())
        if self.growth_bound is None:
            bound = (1.0, max(0.0, top))
        else:
            M, beta = (float(v) for v in self.growth_bound)
            if M < 1:
                raise ValueError("growth bound requires M >= 1")
            if beta < top - 1e-12 * max(1.0, abs(top)):
                raise ValueError(f"beta={beta} is below max Re mu={top}")
            bound = (M, beta)
        object.__setattr__(self, "eigenvalues", _readonly(mu))
        object.__setattr__(self, "growth_bound", bound)

    @property
    def mode_count(self) -> int:
        return self.eigenvalues.size

    @property
    def M(self) -> float:
        return self.growth_bound[0]

    @property
    def beta(self) -> float:
        return self.growth_bound[1]

    @property
    def spectral_radius(self) -> float:
        return float(np.abs(self.eigenvalues).max())

    def truncate(self, n: int) -> "DiagonalGenerator":
        if not 1 <= n <= self.mode_count:
            raise ValueError(f"truncation {n} outside 1..{self.mode_count}")
        return DiagonalGenerator(self.eigenvalues[:n], self.growth_bound)

    @classmethod
    def heat(cls, n: int, growth_bound=None) -> "DiagonalGenerator":
        """Dirichlet Laplacian on (0, pi): mu_n = -n^2."""
        k = np.arange(1, n + 1, dtype=float)
        return cls(-(k**2), growth_bound)

    @classmethod
    def schrodinger(cls, n: int, growth_bound=None) -> "DiagonalGenerator":
        """Unitary group generated by i*Laplacian: mu_n = -i n^2."""
        k = np.arange(1, n + 1, dtype=float)
        return cls(-1j * k**2, growth_bound)


@dataclass(frozen=True)
class ObservationOperator:
    """Linear map on mode coefficients, diagonal or given by a dense kernel.

    Exactly one of ``multipliers`` (shape ``(N,)``) and ``kernel``
    (shape ``(N, N)``, image coefficients ``y = K x``) must be set.
    """

    multipliers: np.ndarray | None = None
    kernel: np.ndarray | None = None
    domain_exponent_hint: float | None = None
    label: str = ""

    def __post_init__(self):
        if (self.multipliers is None) == (self.kernel is None):
            raise ValueError("give exactly one of multipliers or kernel")
        if self.multipliers is not None:
            c = np.atleast_1d(np.asarray(self.multipliers, dtype=complex))
            if c.ndim != 1:
                raise ValueError("multipliers must be 1-D")
            object.__setattr__(self, "multipliers", _readonly(c))
        else:
            K = np.asarray(self.kernel, dtype=complex)
            if K.ndim != 2 or K.shape[0] != K.shape[1]:
                raise ValueError("kernel must be a square matrix")
            object.__setattr__(self, "kernel", _readonly(K))

    @property
    def is_diagonal(self) -> bool:
        return self.multipliers is not None

    @property
    def mode_count(self) -> int:
        return self.multipliers.size if self.is_diagonal else self.kernel.shape[0]

    def apply(self, x):
        x = np.asarray(x)
        if x.shape[-1] != self.mode_count:
            raise ValueError(f"state has {x.shape[-1]} modes, operator has {self.mode_count}")
        if self.is_diagonal:
            return self.multipliers * x
        return x @ self.kernel.T

    __call__ = apply

    def matrix(self) -> np.ndarray:
        return np.diag(self.multipliers) if self.is_diagonal else np.array(self.kernel)

    def truncate(self, n: int) -> "ObservationOperator":
        if self.is_diagonal:
            return ObservationOperator(self.multipliers[:n], None, self.domain_exponent_hint, self.label)
        return ObservationOperator(None, self.kernel[:n, :n], self.domain_exponent_hint, self.label)

    @classmethod
    def identity(cls, n: int) -> "ObservationOperator":
        return cls(np.ones(n), label="identity")

    @classmethod
    def zero(cls, n: int) -> "ObservationOperator":
        return cls(np.zeros(n), label="zero")

    @classmethod
    def fractional(cls, gen: DiagonalGenerator, theta: float) -> "ObservationOperator":
        """(-A)^theta for a generator with eigenvalues on the negative axis;
        for other spectra the multipliers are |mu_n|^theta."""
        c = np.abs(gen.eigenvalues) ** theta
        return cls(c, domain_exponent_hint=theta, label=f"fractional({theta:g})")

    @classmethod
    def derivative(cls, n: int) -> "ObservationOperator":
        """Spectral analogue of d/dx on the sine basis: c_n = n."""
        return cls(np.arange(1, n + 1, dtype=float), domain_exponent_hint=0.5, label="derivative")


def _check_time(t):
    if t < 0:
        raise ValueError(f"time must be non-negative, got {t}")


def _check_lambda(gen: DiagonalGenerator, lam):
    if np.iscomplexobj(lam) or not np.isfinite(lam):
        raise ValueError("lambda must be a finite real number")
    if lam <= gen.beta:
        raise ValueError(f"lambda={lam} is not above the growth bound beta={gen.beta}")


def semigroup_apply(gen: DiagonalGenerator, t: float, x):
    """T(t)x, i.e. ``exp(mu_n t) x_n`` per mode."""
    _check_time(t)
    return np.exp(gen.eigenvalues * t) * np.asarray(x)


def resolvent_apply(gen: DiagonalGenerator, lam: float, x):
    """R(lam, A)x = x_n / (lam - mu_n), for real ``lam > beta``."""
    _check_lambda(gen, lam)
    return np.asarray(x) / (lam - gen.eigenvalues)


def yosida_approximant(gen: DiagonalGenerator, obs: ObservationOperator, lam: float, x):
    """C lam R(lam, A) x."""
    _check_lambda(gen, lam)
    return obs.apply(lam / (lam - gen.eigenvalues) * np.asarray(x))


def default_yosida_schedule(gen: DiagonalGenerator, steps: int = 8, ratio: float = 4.0):
    """Geometric schedule ``beta + lam0 * ratio**j`` with ``lam0`` ten times
    the spectral radius of the truncation (at least 10)."""
    lam0 = 10.0 * max(1.0, gen.spectral_radius)
    return gen.beta + lam0 * ratio ** np.arange(steps)


@dataclass(frozen=True)
class YosidaResult:
    limit: np.ndarray
    approximants: np.ndarray
    schedule: np.ndarray
    diagnostics: dict = field(default_factory=dict)


def _extrapolate_to_zero(h, values):
    """Neville interpolation of values(h) evaluated at h = 0."""
    p = [np.array(v) for v in values]
    n = len(h)
    for level in range(1, n):
        for i in range(n - level):
            j = i + level
            p[i] = (h[j] * p[i] - h[i] * p[i + 1]) / (h[j] - h[i])
    return p[0]


def _dyadic_tails(v):
    """Norms of v restricted to (N/4, N/2] and (N/2, N]."""
    n = v.shape[-1]
    q, hlf = n // 4, n // 2
    return float(mode_norm(v[q:hlf])), float(mode_norm(v[hlf:]))


def yosida_extension(gen: DiagonalGenerator, obs: ObservationOperator, x, lam_schedule=None,
                     tol: float = 1e-6) -> YosidaResult:
    """Detect ``lim C lam R(lam, A) x`` as lam -> infinity.

    Three checks must pass, otherwise :class:`DomainError` is raised:

    * Cauchy: the last two approximants differ by at most ``tol * (1 + |prev|)``;
    * residual model: Richardson extrapolation (in ``1/lam``) over the last
      three schedule points changes by at most ``tol * (1 + |limit|)`` when
      the triple is shifted by one;
    * truncation: the candidate limit's mass on the top dyadic mode block
      ``(N/2, N]`` is smaller than on ``(N/4, N/2]`` (or negligible), i.e.
      the limits of the nested truncations N/4, N/2, N form a Cauchy
      sequence.

    The returned limit is the extrapolated value.
    """
    x = np.asarray(x, dtype=complex)
    if lam_schedule is None:
        lam_schedule = default_yosida_schedule(gen)
    lams = np.asarray(lam_schedule, dtype=float)
    if lams.ndim != 1 or lams.size < 3:
        raise ValueError("lambda schedule needs at least 3 points")
    if np.any(np.diff(lams) <= 0):
        raise ValueError("lambda schedule must be strictly increasing")
    for lam in lams:
        _check_lambda(gen, lam)
    if tol <= 0:
        raise ValueError("tol must be positive")

    approx = np.stack([yosida_approximant(gen, obs, lam, x) for lam in lams])
    steps = mode_norm(np.diff(approx, axis=0))
    prev_norm = float(mode_norm(approx[-2]))
    cauchy_ok = steps[-1] <= tol * (1 + prev_norm)

    h = 1.0 / lams
    limit = _extrapolate_to_zero(h[-3:], approx[-3:])
    if lams.size >= 4:
        earlier = _extrapolate_to_zero(h[-4:-1], approx[-4:-1])
        residual = float(mode_norm(limit - earlier))
    else:
        residual = float(steps[-1])
    limit_norm = float(mode_norm(limit))
    residual_ok = residual <= tol * (1 + limit_norm)

    mid_tail, top_tail = _dyadic_tails(limit) if limit.shape[-1] >= 4 else (0.0, 0.0)
    tail_ok = top_tail <= tol * (1 + limit_norm) or mid_tail == 0.0 or top_tail < mid_tail

    diagnostics = {
        "step_norms": steps.tolist(),
        "cauchy_ok": bool(cauchy_ok),
        "residual": residual,
        "residual_ok": bool(residual_ok),
        "tail_norms": (mid_tail, top_tail),
        "tail_ok": bool(tail_ok),
        "tol": tol,
    }
    if not (cauchy_ok and residual_ok and tail_ok):
        failed = [name for name, ok in (("Cauchy", cauchy_ok), ("residual", residual_ok),
                                         ("truncation-Cauchy", tail_ok)) if not ok]
        raise DomainError(
            "approximants C lam R(lam,A)x are not Cauchy at the resolved precision "
            f"(failed: {', '.join(failed)}; last step {steps[-1]:.3e}, "
            f"tails {mid_tail:.3e} -> {top_tail:.3e})",
            diagnostics,
        )
    return YosidaResult(limit, approx, lams, diagnostics)


def gram_operator(gen: DiagonalGenerator, obs: ObservationOperator, alpha: float) -> np.ndarray:
    """int_0^alpha T(t)* C* C T(t) dt, exact entrywise for a diagonal generator."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    mu = gen.eigenvalues[: obs.mode_count]
    CC = obs.matrix().conj().T @ obs.matrix()
    rates = np.conj(mu)[:, None] + mu[None, :]
    return CC * (alpha * phi1(rates * alpha))


def _diag_gamma_sq(mu, c, alpha):
    r = mu.real
    w = np.abs(c) ** 2
    # written so that each term is monotone in alpha under rounding
    with np.errstate(divide="ignore", invalid="ignore"):
        per_mode = np.where(r == 0, w * alpha, w * (-np.expm1(2 * r * alpha) / (-2 * r)))
    return np.maximum.accumulate(per_mode)


@dataclass(frozen=True)
class AdmissibilityReport:
    """gamma_N(alpha) over an alpha grid and nested truncation levels.

    ``gamma_values[i, j]`` belongs to ``levels[i]`` and ``alpha_grid[j]``.
    ``small_alpha_slope`` is the least-squares slope of log gamma against
    log alpha on the resolved part of the grid (alphas at which the last
    two truncation levels agree), which starts at ``resolved_from``.
    """

    alpha_grid: np.ndarray
    levels: tuple[int, ...]
    gamma_values: np.ndarray
    zero_class_flag: bool
    divergence_flag: bool
    small_alpha_slope: float = float("nan")
    resolved_from: float = float("nan")
    divergence_ratio: float = 1.2
    zero_class_slope: float = 0.1

    def gamma(self, alpha: float | None = None, level: int | None = None) -> float:
        i = self.levels.index(level) if level is not None else len(self.levels) - 1
        if alpha is None:
            return float(self.gamma_values[i, -1])
        j = int(np.argmin(np.abs(self.alpha_grid - alpha)))
        if not np.isclose(self.alpha_grid[j], alpha, rtol=1e-12, atol=0):
            raise KeyError(f"alpha={alpha} not on the report grid")
        return float(self.gamma_values[i, j])

    def c(self, alpha: float | None = None, level: int | None = None) -> float:
        a = self.alpha_grid[-1] if alpha is None else alpha
        return float(np.sqrt(a) * self.gamma(alpha, level))

    @property
    def c_values(self) -> np.ndarray:
        return np.sqrt(self.alpha_grid)[None, :] * self.gamma_values

    def level_growth(self) -> np.ndarray:
        """Ratios gamma_{N_{i+1}} / gamma_{N_i} at the largest alpha."""
        g = self.gamma_values[:, -1]
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(g[:-1] > 0, g[1:] / g[:-1], np.where(g[1:] > 0, np.inf, 1.0))


def _small_alpha_slope(alphas, gam, resolve_ratio):
    last = gam[-1]
    if gam.shape[0] >= 2:
        prev = gam[-2]
        resolved = (last > 0) & (last <= resolve_ratio * prev)
    else:
        resolved = last > 0
    # the resolved set is taken as the contiguous run ending at the largest alpha
    if not resolved[-1]:
        return float("nan"), float("nan")
    start = alphas.size - 1
    while start > 0 and resolved[start - 1]:
        start -= 1
    if alphas.size - start < 2:
        return float("nan"), float(alphas[start])
    x, y = np.log(alphas[start:]), np.log(last[start:])
    return float(np.polyfit(x, y, 1)[0]), float(alphas[start])


def dyadic_alphas(top: float, depth: int = 20) -> np.ndarray:
    """Increasing grid top * 2**-m, m = depth..0."""
    return top * 2.0 ** -np.arange(depth, -1, -1, dtype=float)


def admissibility_constant(gen: DiagonalGenerator, obs: ObservationOperator, alpha,
                           levels: Sequence[int] | None = None, divergence_ratio: float = 1.2,
                           zero_class_slope: float = 0.1, resolve_ratio: float = 1.01) -> AdmissibilityReport:
    """Admissibility constants gamma_N(alpha) of ``obs`` for ``gen``.

    Diagonal observers use the per-mode closed form
    ``|c_n|^2 (1 - exp(2 Re mu_n alpha)) / (-2 Re mu_n)``; kernel observers
    use the largest eigenvalue of the exact Gram operator.

    ``divergence_flag`` is set when gamma at the largest alpha grows by more
    than ``divergence_ratio`` between the last two truncation levels.

    Any finite truncation has gamma_N(alpha) -> 0, so vanishing at small
    alpha is judged only where the truncation has converged: alphas at
    which the last two levels agree within ``resolve_ratio``.
    ``zero_class_flag`` is set when the report is not divergent, that
    resolved range spans at least a decade and the log-log slope of gamma
    there is at least ``zero_class_slope`` (or gamma vanishes identically).
    """
    alphas = np.atleast_1d(np.asarray(alpha, dtype=float))
    if np.any(alphas <= 0):
        raise ValueError("alpha must be positive")
    alphas = np.unique(alphas)
    n_max = min(gen.mode_count, obs.mode_count)
    if levels is None:
        levels = (n_max,)
    levels = tuple(int(n) for n in levels)
    if any(n < 1 or n > n_max for n in levels) or list(levels) != sorted(set(levels)):
        raise ValueError(f"levels must be increasing within 1..{n_max}")

    gam = np.empty((len(levels), alphas.size))
    if obs.is_diagonal:
        mu = gen.eigenvalues[:n_max]
        c = obs.multipliers[:n_max]
        for j, a in enumerate(alphas):
            running = _diag_gamma_sq(mu, c, a)
            gam[:, j] = np.sqrt(np.maximum(running[np.array(levels) - 1], 0.0))
    else:
        for i, n in enumerate(levels):
            g, o = gen.truncate(n), obs.truncate(n)
            for j, a in enumerate(alphas):
                top = np.linalg.eigvalsh(gram_operator(g, o, a))[-1]
                gam[i, j] = np.sqrt(max(top, 0.0))
        # eigenvalue rounding must not break the exact monotonicity invariants
        gam = np.maximum.accumulate(np.maximum.accumulate(gam, axis=1), axis=0)

    top_col = gam[:, -1]
    divergence = False
    if len(levels) >= 2:
        prev, last = top_col[-2], top_col[-1]
        divergence = bool(last > divergence_ratio * prev) if prev > 0 else bool(last > 0)

    slope, resolved_from = _small_alpha_slope(alphas, gam, resolve_ratio)
    if np.all(gam[-1] == 0):
        zero_class = alphas.size >= 2
    else:
        zero_class = (not divergence and np.isfinite(slope) and slope >= zero_class_slope
                      and alphas[-1] / resolved_from >= 10)

    return AdmissibilityReport(alphas, levels, gam, bool(zero_class), divergence, slope, resolved_from,
                               divergence_ratio, zero_class_slope)
