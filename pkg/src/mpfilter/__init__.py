"""Mapping particle filter: kernelized KL gradient-flow data assimilation.

Subpackages:

* :mod:`mpfilter.core` -- ensembles, covariances, basic linear algebra
* :mod:`mpfilter.kernels` -- Gaussian RBF kernel and its derivatives
* :mod:`mpfilter.models` -- Lorenz-63/96 and cholera SI3R dynamics
* :mod:`mpfilter.ssm` -- state-space model layer (mixture prior, posterior gradient)
* :mod:`mpfilter.mpf` -- the mapping (gradient-flow) filter engine
* :mod:`mpfilter.baselines` -- SIR and stochastic EnKF reference filters
* :mod:`mpfilter.diagnostics` -- importance weights, ESS, RMSE/spread scoring
* :mod:`mpfilter.experiment` -- twin-experiment harness
* :mod:`mpfilter.cli` -- command line entry point
"""

from mpfilter.core import Covariance, Ensemble
from mpfilter.kernels import GaussianKernel
from mpfilter.mpf import MappingConfig, kl_gradient_field, mapping_cycle
from mpfilter.ssm import PriorMixture, StateSpaceModel

__all__ = [
    "Covariance",
    "Ensemble",
    "GaussianKernel",
    "MappingConfig",
    "PriorMixture",
    "StateSpaceModel",
    "kl_gradient_field",
    "mapping_cycle",
]

__version__ = "0.1.0"
