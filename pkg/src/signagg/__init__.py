"""Stochastic sign-output networks trained by direct PAC-Bayes bound
optimisation, with closed-form final-layer aggregation for low-variance
output and gradient estimates."""

__version__ = "0.1.0"

from .bounds import (  # noqa: F401
    BoundConfig,
    BoundReport,
    bound,
    lambda_gradient,
    min_bound_over_lambda,
    penalty,
    phi_inverse,
)
from .forward import (  # noqa: F401
    EstimatorOutput,
    aggregate_erf,
    aggregated_forward,
    exact_aggregate,
    layer_conditional,
    naive_forward,
)
from .network import (  # noqa: F401
    GaussianPosterior,
    NetworkSpec,
    init_posterior,
    kl_divergence,
    load_posterior,
    save_posterior,
)
from .training import TrainConfig, train_run, evaluate  # noqa: F401
