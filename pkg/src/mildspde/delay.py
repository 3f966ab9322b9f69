"""Neutral stochastic delay equations on the product space H x L^2([-r, 0], H).

Segments are stored on a dense grid ``theta_i = -r + i * dtheta``
(``i = 0..R``, ``R = r / dtheta``), so the left shift and the lift of a
trajectory into a segment are index arithmetic.  The neutral equation

    X(t) = D X_t + T(t) xi + int T(t-s) F(L X_s) ds + int T(t-s) B(X_s) dW(s)

is marched through Z(t) = X(t) - D X_t: with every atom of D and L at lag
at least ``dtheta``, the delayed arguments of a step are already known.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .solvers import LipschitzMap, _as_batch
from .spectral import DiagonalGenerator, mode_norm
from .stochastics import StepCache, WienerEnsemble, advance, apply_table, noise_term

__all__ = [
    "DelayMeasure",
    "SegmentState",
    "ProductState",
    "NeutralSolution",
    "shift_semigroup_apply",
    "delay_apply",
    "history_lift",
    "solve_neutral",
    "product_semigroup_apply",
    "euler_maruyama_delay",
]

_GRID_RTOL = 1e-9


def _grid_count(length: float, step: float, what: str) -> int:
    q = length / step
    n = int(round(q))
    if abs(q - n) > _GRID_RTOL * max(1.0, abs(q)):
        raise ValueError(f"{what}={length} is not a multiple of the grid step {step}")
    return n


def _apply_weight(w, x):
    w = np.asarray(w)
    if w.ndim <= 1:
        return w * x
    return x @ w.T


def _weight_norm(w) -> float:
    w = np.asarray(w)
    if w.ndim == 0:
        return float(abs(w))
    if w.ndim == 1:
        return float(np.abs(w).max())
    return float(np.linalg.norm(w, 2))


@dataclass(frozen=True)
class DelayMeasure:
    """Finitely many atoms ``(theta_i, weight_i)`` with ``-r <= theta_i <= -min_lag``.

    A weight is a scalar, per-mode multipliers ``(N,)`` or a matrix ``(N, N)``.
    When ``grid_step`` is given every atom must sit on that grid.
    """

    atoms: tuple = ()
    horizon: float = 1.0
    min_lag: float = 1.0
    grid_step: float | None = None

    def __post_init__(self):
        if self.horizon <= 0 or self.min_lag <= 0:
            raise ValueError("delay horizon and minimal lag must be positive")
        if self.min_lag > self.horizon:
            raise ValueError("minimal lag exceeds the delay horizon")
        atoms = tuple((float(theta), np.asarray(w, dtype=complex)) for theta, w in self.atoms)
        for theta, w in atoms:
            if not -self.horizon - 1e-12 <= theta <= -self.min_lag + 1e-12:
                raise ValueError(f"atom at {theta} outside [-r, -min_lag] = "
                                 f"[{-self.horizon}, {-self.min_lag}]")
            if not np.all(np.isfinite(w)):
                raise ValueError("atom weights must be finite")
        object.__setattr__(self, "atoms", atoms)
        if self.grid_step is not None:
            self.slots(self.grid_step)

    @classmethod
    def zero(cls, horizon: float, min_lag: float | None = None, grid_step: float | None = None):
        return cls((), horizon, horizon if min_lag is None else min_lag, grid_step)

    @property
    def total_variation(self) -> float:
        return sum(_weight_norm(w) for _, w in self.atoms)

    def slots(self, step: float) -> list[int]:
        """Segment indices of the atoms on a grid of the given step."""
        R = _grid_count(self.horizon, step, "delay horizon")
        return [R + (-_grid_count(-theta, step, "atom position")) for theta, _ in self.atoms]


@dataclass(frozen=True)
class SegmentState:
    """Values on ``theta_i = -r + i * step``; ``values`` has shape ``(..., R + 1, N)``."""

    values: np.ndarray
    step: float
    horizon: float

    def __post_init__(self):
        v = np.asarray(self.values, dtype=complex)
        R = _grid_count(self.horizon, self.step, "delay horizon")
        if v.ndim < 2 or v.shape[-2] != R + 1:
            raise ValueError(f"segment needs {R + 1} grid values on [-r, 0]")
        object.__setattr__(self, "values", v)

    @property
    def slots(self) -> int:
        return self.values.shape[-2] - 1

    @property
    def thetas(self) -> np.ndarray:
        return -self.horizon + self.step * np.arange(self.slots + 1)

    @classmethod
    def constant(cls, value, step: float, horizon: float) -> "SegmentState":
        value = np.atleast_1d(np.asarray(value, dtype=complex))
        R = _grid_count(horizon, step, "delay horizon")
        return cls(np.broadcast_to(value[..., None, :], value.shape[:-1] + (R + 1, value.shape[-1])).copy(),
                   step, horizon)


@dataclass(frozen=True)
class ProductState:
    """(Z, X_t): head component and history segment."""

    head: np.ndarray
    segment: SegmentState


def shift_semigroup_apply(seg: SegmentState, t: float) -> SegmentState:
    """(S(t)g)(theta) = g(t + theta) for t + theta <= 0, else 0."""
    if t < 0:
        raise ValueError("t must be non-negative")
    s = _grid_count(t, seg.step, "shift time")
    out = np.zeros_like(seg.values)
    R = seg.slots
    if s <= R:
        out[..., : R + 1 - s, :] = seg.values[..., s:, :]
    return SegmentState(out, seg.step, seg.horizon)


def delay_apply(meas: DelayMeasure, seg: SegmentState) -> np.ndarray:
    """sum_i weight_i seg(theta_i)."""
    if abs(meas.horizon - seg.horizon) > 1e-12 * seg.horizon:
        raise ValueError("measure and segment have different delay horizons")
    out = np.zeros(seg.values.shape[:-2] + seg.values.shape[-1:], dtype=complex)
    for idx, (_, w) in zip(meas.slots(seg.step), meas.atoms):
        out = out + _apply_weight(w, seg.values[..., idx, :])
    return out


def history_lift(u, phi: SegmentState, t: float) -> SegmentState:
    """The segment X_t from the initial history and the trajectory.

    ``u`` holds the trajectory at ``0, step, ..., t`` (shape ``(..., m + 1, N)``).
    Slot ``theta`` takes ``u(t + theta)`` when ``t + theta > 0`` and
    ``phi(t + theta)`` otherwise.
    """
    u = np.asarray(u, dtype=complex)
    m = _grid_count(t, phi.step, "lift time")
    if u.shape[-2] != m + 1:
        raise ValueError(f"trajectory must have {m + 1} samples on the segment grid up to t")
    R = phi.slots
    lead = np.broadcast_shapes(u.shape[:-2], phi.values.shape[:-2])
    out = np.empty(lead + (R + 1, phi.values.shape[-1]), dtype=complex)
    keep = max(0, R + 1 - m)
    out[..., :keep, :] = phi.values[..., m: m + keep, :] if keep else 0
    take = R + 1 - keep
    if take:
        out[..., keep:, :] = u[..., m + 1 - take: m + 1, :]
    return SegmentState(out, phi.step, phi.horizon)


@dataclass
class NeutralSolution:
    grid: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    step: float
    horizon: float
    history: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    def segment(self, j: int) -> SegmentState:
        """X_{t_j} assembled from the stored history buffer."""
        R = _grid_count(self.horizon, self.step, "delay horizon")
        return SegmentState(self.history[..., j: j + R + 1, :], self.step, self.horizon)


def _check_march(meas_list, step):
    for meas in meas_list:
        if meas.atoms and meas.min_lag < step * (1 - 1e-12):
            raise ValueError(f"minimal lag {meas.min_lag} < step {step}: the explicit march would be implicit")
        meas.slots(step)


def _uniform_step(grid) -> float:
    h = np.diff(grid)
    if not np.allclose(h, h[0], rtol=1e-12, atol=0):
        raise ValueError("delay equations need a uniform time grid")
    return float(h[0])


def solve_neutral(gen: DiagonalGenerator, lag_meas: DelayMeasure, neutral_meas: DelayMeasure,
                  drift: LipschitzMap, diffusion: LipschitzMap, xi, phi: SegmentState,
                  wiener: WienerEnsemble, compat_tol: float = 1e-12) -> NeutralSolution:
    """March the neutral equation with Z(t) = X(t) - D X_t.

    ``lag_meas`` realises L (argument of the drift ``F``), ``neutral_meas``
    realises D.  ``diffusion`` maps segments ``(P, R + 1, N)`` to tables.
    The time step must equal the segment step.  The stored
    ``diagnostics['compatibility']`` is ``max |X - Z - D X_t| / (1 + |X|)``
    recomputed from the stored components.
    """
    step = _uniform_step(wiener.grid)
    if abs(step - phi.step) > 1e-12 * step:
        raise ValueError("time step must equal the segment step")
    r = phi.horizon
    for meas in (lag_meas, neutral_meas):
        if abs(meas.horizon - r) > 1e-12 * r:
            raise ValueError("measures and segment must share the delay horizon")
    _check_march((lag_meas, neutral_meas), step)
    P, N, J = wiener.n_paths, gen.mode_count, wiener.n_steps
    R = phi.slots

    buf = np.empty((P, R + J + 1, N), dtype=complex)
    buf[:, : R + 1] = np.broadcast_to(phi.values, (P, R + 1, N))
    X = np.empty((P, J + 1, N), dtype=complex)
    Z = np.empty_like(X)
    X[:, 0] = _as_batch(xi, P, N)

    def seg(j):
        return SegmentState(buf[:, j: j + R + 1], step, r)

    def F_at(j):
        return None if drift.is_zero else drift(delay_apply(lag_meas, seg(j)))

    Z[:, 0] = X[:, 0] - delay_apply(neutral_meas, seg(0))
    coef = StepCache(gen.eigenvalues)[step]
    f_now = F_at(0)
    for j in range(J):
        noise = None
        if not diffusion.is_zero:
            noise = noise_term(coef, diffusion(buf[:, j: j + R + 1]), wiener.increments[:, j],
                               wiener.residuals[:, j], diffusion.diagonal)
        f_next = F_at(j + 1)
        Z[:, j + 1] = advance(coef, Z[:, j], f_now, f_next, noise)
        # slot R of the next segment is not read by D (no atom at 0)
        X[:, j + 1] = Z[:, j + 1] + delay_apply(neutral_meas, seg(j + 1))
        buf[:, R + j + 1] = X[:, j + 1]
        f_now = f_next

    sol = NeutralSolution(wiener.grid, X, Z, step, r, buf)
    gap = 0.0
    for j in range(1, J + 1):
        d = delay_apply(neutral_meas, sol.segment(j))
        gap = max(gap, float(np.max(mode_norm(X[:, j] - Z[:, j] - d) / (1 + mode_norm(X[:, j])))))
    sol.diagnostics["compatibility"] = gap
    if gap > compat_tol:
        raise RuntimeError(f"compatibility X = Z + D X_t violated by {gap:.3e}")
    return sol


def product_semigroup_apply(gen: DiagonalGenerator, neutral_meas: DelayMeasure, state: ProductState,
                            t: float) -> ProductState:
    """Evolve (Z, X_t) under the linear part (F = B = 0) for time ``t``."""
    seg0 = state.segment
    step, r, R = seg0.step, seg0.horizon, seg0.slots
    m = _grid_count(t, step, "time")
    _check_march((neutral_meas,), step)
    head = np.asarray(state.head, dtype=complex)
    if m == 0:
        return ProductState(head.copy(), SegmentState(seg0.values.copy(), step, r))
    lead = np.broadcast_shapes(head.shape[:-1], seg0.values.shape[:-2])
    N = head.shape[-1]
    buf = np.empty(lead + (R + m + 1, N), dtype=complex)
    buf[..., : R + 1, :] = seg0.values
    E = StepCache(gen.eigenvalues)[step].E
    z = np.broadcast_to(head, lead + (N,))
    for j in range(m):
        z = E * z
        d = delay_apply(neutral_meas, SegmentState(buf[..., j + 1: j + R + 2, :], step, r))
        buf[..., R + j + 1, :] = z + d
    return ProductState(z, SegmentState(buf[..., m: m + R + 1, :].copy(), step, r))


def euler_maruyama_delay(gen: DiagonalGenerator, lag_meas: DelayMeasure, drift: LipschitzMap,
                         diffusion: LipschitzMap, xi, phi: SegmentState,
                         wiener: WienerEnsemble) -> np.ndarray:
    """Explicit Euler-Maruyama method of steps for the retarded case (D = 0).

    X_{j+1} = X_j + h (mu X_j + F(L X_{t_j})) + B(X_{t_j}) dW_j; returns ``(P, J + 1, N)``.
    """
    step = _uniform_step(wiener.grid)
    if abs(step - phi.step) > 1e-12 * step:
        raise ValueError("time step must equal the segment step")
    _check_march((lag_meas,), step)
    P, N, J = wiener.n_paths, gen.mode_count, wiener.n_steps
    R, r = phi.slots, phi.horizon
    buf = np.empty((P, R + J + 1, N), dtype=complex)
    buf[:, : R + 1] = np.broadcast_to(phi.values, (P, R + 1, N))
    X = np.empty((P, J + 1, N), dtype=complex)
    X[:, 0] = _as_batch(xi, P, N)
    mu = gen.eigenvalues
    for j in range(J):
        rate = mu * X[:, j]
        if not drift.is_zero:
            rate = rate + drift(delay_apply(lag_meas, SegmentState(buf[:, j: j + R + 1], step, r)))
        nxt = X[:, j] + step * rate
        if not diffusion.is_zero:
            nxt = nxt + apply_table(diffusion(buf[:, j: j + R + 1]), wiener.increments[:, j],
                                    diffusion.diagonal)
        X[:, j + 1] = nxt
        buf[:, R + j + 1] = nxt
    return X
