"""Spectral simulation of semilinear stochastic evolution equations with
unbounded observation operators in the nonlinearity."""

from .analysis import (Problem, estimate_dependence, feller_modulus, gronwall_constant,
                       oracle_coupled_picard, oracle_euler_maruyama, transition_semigroup)
from .delay import (DelayMeasure, ProductState, SegmentState, delay_apply, history_lift,
                    product_semigroup_apply, shift_semigroup_apply, solve_neutral)
from .solvers import (ConvergenceError, LipschitzMap, NotZeroClassError, WindowPlan, picard_inner,
                      plan_windows, solve_multiplicative_unbounded, solve_semilinear)
from .spectral import (AdmissibilityReport, DiagonalGenerator, DomainError, ObservationOperator,
                       admissibility_constant, resolvent_apply, semigroup_apply, yosida_approximant,
                       yosida_extension)
from .stochastics import (HilbertSchmidtMap, SolutionPath, TraceClassCovariance, WienerEnsemble,
                          WienerPath, det_convolution, hs_norm, observed_det_convolution,
                          observed_stoch_convolution, sample_ensemble, sample_wiener,
                          stochastic_convolution)

__version__ = "0.1.0"
