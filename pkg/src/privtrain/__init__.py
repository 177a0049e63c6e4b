"""Differentially private, data-oblivious training over remote data providers."""
from .accountant import (
    InfeasibleBudgetError,
    MomentLedger,
    accumulate,
    calibrate_sigma,
    delta_for_eps,
    eps_for_delta,
    epsilon_spent,
    step_log_moment,
    strong_composition,
)
from .dp import ClipSumAccumulator, PrivacyParams, clip_grad, dp_sgd_step, gaussian_sigma_for, lot_sample
from .oblivious import AccessTrace, oargmax, omax, omaxpool2d, oonehot, oselect, scrub_subnormals, with_trace
from .tensor import (
    ModelSpec,
    ParamSet,
    backward,
    backward_per_example,
    init_params,
    matmul,
    mlp,
    model_forward,
    numeric_gradient,
)

__version__ = "0.1.0"
