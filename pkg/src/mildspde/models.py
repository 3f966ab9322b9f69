"""Factories for the generators, observers, noises and nonlinearities used by
the experiments."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .solvers import LipschitzMap
from .spectral import DiagonalGenerator, ObservationOperator
from .stochastics import HilbertSchmidtMap, TraceClassCovariance

__all__ = [
    "make_generator",
    "make_observer",
    "make_covariance",
    "zero_drift",
    "linear_drift",
    "sine_drift",
    "constant_drift",
    "zero_diffusion",
    "additive_diffusion",
    "multiplicative_diffusion",
    "make_drift",
    "make_diffusion",
    "load_kernel",
]


def make_generator(kind: str, modes: int, eigenvalues=None, growth_bound=None) -> DiagonalGenerator:
    if kind == "heat":
        return DiagonalGenerator.heat(modes, growth_bound)
    if kind == "schrodinger":
        return DiagonalGenerator.schrodinger(modes, growth_bound)
    if kind == "explicit":
        if eigenvalues is None:
            raise ValueError("explicit generator needs eigenvalues")
        mu = np.asarray([complex(v) if not isinstance(v, (list, tuple)) else complex(*v)
                         for v in eigenvalues])
        if mu.size != modes:
            raise ValueError(f"got {mu.size} eigenvalues for {modes} modes")
        return DiagonalGenerator(mu, growth_bound)
    raise ValueError(f"unknown generator kind {kind!r}")


def load_kernel(path: str | Path, modes: int) -> np.ndarray:
    """Dense observation kernel from ``.npy`` or a comma-separated text file."""
    path = Path(path)
    K = np.load(path) if path.suffix == ".npy" else np.loadtxt(path, delimiter=",", dtype=complex)
    K = np.atleast_2d(np.asarray(K, dtype=complex))
    if K.shape != (modes, modes):
        raise ValueError(f"kernel in {path} has shape {K.shape}, expected ({modes}, {modes})")
    return K


def make_observer(kind: str, gen: DiagonalGenerator, theta: float | None = None, multipliers=None,
                  kernel=None, kernel_file=None, scale: float = 1.0) -> ObservationOperator:
    n = gen.mode_count
    if kind == "fractional":
        if theta is None:
            raise ValueError("fractional observer needs theta")
        base = ObservationOperator.fractional(gen, theta)
        return ObservationOperator(scale * base.multipliers, None, theta, base.label)
    if kind == "derivative":
        return ObservationOperator(scale * np.arange(1, n + 1, dtype=float), None, 0.5, "derivative")
    if kind == "identity":
        return ObservationOperator(scale * np.ones(n), label="identity")
    if kind == "zero":
        return ObservationOperator.zero(n)
    if kind == "explicit":
        if multipliers is not None:
            c = np.asarray(multipliers, dtype=complex)
            if c.size != n:
                raise ValueError(f"got {c.size} multipliers for {n} modes")
            return ObservationOperator(scale * c, label="explicit")
        K = load_kernel(kernel_file, n) if kernel_file is not None else np.asarray(kernel, dtype=complex)
        if K is None or K.shape != (n, n):
            raise ValueError("explicit observer needs multipliers, a kernel or a kernel file")
        return ObservationOperator(None, scale * K, label="kernel")
    raise ValueError(f"unknown observer kind {kind!r}")


def make_covariance(kind: str, noise_modes: int, decay: float = 2.0, scale: float = 1.0,
                    eigenvalues=None) -> TraceClassCovariance:
    if kind == "power":
        return TraceClassCovariance.power(noise_modes, decay, scale)
    if kind == "explicit":
        lam = np.asarray(eigenvalues, dtype=float)
        if lam.size != noise_modes:
            raise ValueError(f"got {lam.size} covariance eigenvalues for {noise_modes} noise modes")
        return TraceClassCovariance(scale * lam)
    if kind == "unit":
        return TraceClassCovariance(scale * np.ones(noise_modes))
    raise ValueError(f"unknown covariance kind {kind!r}")


def zero_drift() -> LipschitzMap:
    return LipschitzMap(np.zeros_like, 0.0, "drift", is_zero=True, label="zero")


def linear_drift(k: float) -> LipschitzMap:
    return LipschitzMap(lambda y: k * y, abs(k), "drift", label=f"linear({k:g})")


def sine_drift(k: float) -> LipschitzMap:
    """F(y) = k sin(Re y), applied per mode."""
    return LipschitzMap(lambda y: (k * np.sin(y.real)).astype(complex), abs(k), "drift",
                        label=f"sine({k:g})")


def constant_drift(value) -> LipschitzMap:
    value = np.asarray(value, dtype=complex)
    return LipschitzMap(lambda y: np.broadcast_to(value, y.shape).copy(), 0.0, "drift",
                        label="constant")


def zero_diffusion(modes: int) -> LipschitzMap:
    return LipschitzMap(lambda x: np.zeros(x.shape[:-1] + (modes,)), 0.0, "diffusion",
                        diagonal=True, is_zero=True, label="zero")


def additive_diffusion(table) -> LipschitzMap:
    """State-independent Phi, given as an (N, K) table."""
    table = HilbertSchmidtMap(table).table
    return LipschitzMap(lambda x: table, 0.0, "diffusion", label="additive")


def multiplicative_diffusion(sigma: float, cov: TraceClassCovariance, modes: int) -> LipschitzMap:
    """M(x) e_k = sigma x_k e_k for k <= N; Lipschitz constant sigma sqrt(max lambda_k)."""
    lam = cov.eigenvalues[: min(modes, cov.noise_dim)]
    lip = abs(sigma) * float(np.sqrt(lam.max()))
    return LipschitzMap(lambda x: sigma * x, lip, "diffusion", diagonal=True,
                        label=f"multiplicative({sigma:g})")


def make_drift(kind: str, k: float = 0.0) -> LipschitzMap:
    if kind == "zero":
        return zero_drift()
    if kind == "linear":
        return linear_drift(k)
    if kind == "sine":
        return sine_drift(k)
    raise ValueError(f"unknown drift kind {kind!r}")


def make_diffusion(kind: str, cov: TraceClassCovariance, modes: int, sigma: float = 0.0) -> LipschitzMap:
    if kind == "zero":
        return zero_diffusion(modes)
    if kind == "additive":
        table = np.zeros((modes, cov.noise_dim))
        d = min(modes, cov.noise_dim)
        table[np.arange(d), np.arange(d)] = sigma
        return additive_diffusion(table)
    if kind == "multiplicative":
        return multiplicative_diffusion(sigma, cov, modes)
    raise ValueError(f"unknown diffusion kind {kind!r}")
