"""Experiment configuration: a TOML file with ``[problem]``, ``[run]`` and an
optional ``[delay]`` table.  Unknown keys are rejected."""

from __future__ import annotations

import sys
from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

import tomli_w

__all__ = ["ProblemConfig", "RunConfig", "DelayConfig", "ExperimentConfig", "ConfigError", "load_config",
           "dump_config", "parse_complex_list"]

Number = Union[float, list[float]]


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


def parse_complex_list(values) -> np.ndarray:
    """Numbers, or ``[re, im]`` pairs, as a complex array."""
    out = []
    for v in values:
        if isinstance(v, (list, tuple)):
            if len(v) != 2:
                raise ValueError("complex entries are written as [re, im]")
            out.append(complex(float(v[0]), float(v[1])))
        else:
            out.append(complex(float(v)))
    return np.asarray(out, dtype=complex)


class ProblemConfig(_Strict):
    generator: Literal["heat", "schrodinger", "explicit"] = "heat"
    modes: int = Field(32, ge=1, le=4096)
    eigenvalues: Optional[list[Number]] = None
    growth_bound: Optional[tuple[float, float]] = None

    observer: Literal["fractional", "derivative", "identity", "zero", "explicit", "kernel-file"] = "fractional"
    theta: Optional[float] = Field(None, ge=0)
    multipliers: Optional[list[Number]] = None
    kernel_file: Optional[str] = None
    observer_scale: float = 1.0

    covariance: Literal["power", "explicit", "unit"] = "power"
    noise_modes: int = Field(32, ge=1, le=4096)
    covariance_decay: float = Field(2.0, ge=0)
    covariance_scale: float = Field(1.0, ge=0)
    covariance_eigenvalues: Optional[list[float]] = None

    drift: Literal["zero", "linear", "sine"] = "zero"
    drift_lipschitz: float = 0.0
    diffusion: Literal["zero", "additive", "multiplicative"] = "zero"
    sigma: float = 0.0

    initial_state: list[Number] = Field(default_factory=lambda: [1.0])
    alternative_state: Optional[list[Number]] = None

    @model_validator(mode="after")
    def _consistent(self):
        if self.generator == "explicit":
            if self.eigenvalues is None or len(self.eigenvalues) != self.modes:
                raise ValueError("explicit generator needs exactly `modes` eigenvalues")
        elif self.eigenvalues is not None:
            raise ValueError("eigenvalues are only allowed with generator = 'explicit'")
        if self.observer == "fractional" and self.theta is None:
            raise ValueError("fractional observer needs theta")
        if self.observer == "explicit" and (self.multipliers is None or len(self.multipliers) != self.modes):
            raise ValueError("explicit observer needs exactly `modes` multipliers")
        if self.observer == "kernel-file" and not self.kernel_file:
            raise ValueError("kernel-file observer needs kernel_file")
        if self.covariance == "explicit":
            if self.covariance_eigenvalues is None or len(self.covariance_eigenvalues) != self.noise_modes:
                raise ValueError("explicit covariance needs exactly `noise_modes` eigenvalues")
            if any(v < 0 for v in self.covariance_eigenvalues):
                raise ValueError("covariance eigenvalues must be non-negative")
        for name in ("initial_state", "alternative_state", "eigenvalues", "multipliers"):
            vals = getattr(self, name)
            if vals is not None:
                parse_complex_list(vals)
        if len(self.initial_state) > self.modes:
            raise ValueError("initial_state has more entries than modes")
        if self.alternative_state is not None and len(self.alternative_state) > self.modes:
            raise ValueError("alternative_state has more entries than modes")
        return self


class RunConfig(_Strict):
    horizon: float = Field(1.0, gt=0)
    dt: float = Field(1 / 128, gt=0)
    paths: int = Field(100, ge=1)
    seed: int = Field(0, ge=0, lt=2**64)
    tol: float = Field(1e-6, ge=0)
    threads: Optional[int] = Field(None, ge=1)
    chunk: int = Field(256, ge=1)
    alphas: list[float] = Field(default_factory=lambda: [0.1, 1.0])
    levels: Optional[list[int]] = None
    forcings: int = Field(100, ge=1)
    yosida_exponent: float = 2.0
    expect: Literal["converge", "domain-error", "any"] = "any"
    check_halving: bool = False
    phi: Literal["identity", "zero"] = "identity"
    radii_depth: int = Field(8, ge=0, le=30)

    @field_validator("alphas")
    @classmethod
    def _positive(cls, v):
        if not v or any(a <= 0 for a in v):
            raise ValueError("alphas must be a non-empty list of positive numbers")
        return v

    @model_validator(mode="after")
    def _grid(self):
        steps = self.horizon / self.dt
        if abs(steps - round(steps)) > 1e-9 * steps:
            raise ValueError("dt must divide the horizon")
        return self

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt))


class DelayConfig(_Strict):
    horizon: float = Field(1.0, gt=0)
    lag_atoms: list[tuple[float, float]] = Field(default_factory=list)
    neutral_atoms: list[tuple[float, float]] = Field(default_factory=list)
    history_value: float = 1.0


class ExperimentConfig(_Strict):
    name: str = Field("experiment", pattern=r"^[A-Za-z0-9_.-]+$")
    problem: ProblemConfig = Field(default_factory=ProblemConfig)
    run: RunConfig = Field(default_factory=RunConfig)
    delay: Optional[DelayConfig] = None


def load_config(path: str | Path) -> ExperimentConfig:
    """Read and validate; every failure is a :class:`ConfigError`."""
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path} is not valid TOML: {exc}") from exc
    try:
        return ExperimentConfig.model_validate(raw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def dump_config(cfg: ExperimentConfig) -> str:
    """TOML text that loads back to an equal config."""
    data = cfg.model_dump(mode="json", exclude_none=True)
    return tomli_w.dumps(data)
