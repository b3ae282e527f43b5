"""Tail-robust meta training and evaluation of a probabilistic in-context
learner for a class of synthetic nonlinear dynamical systems."""

__version__ = "0.1.0"

from .metamodel import (  # noqa: F401
    ModelConfig,
    PredictiveOutput,
    forward,
    init_params,
    loss_and_grad,
    param_count,
)
from .risk import (  # noqa: F401
    RiskVector,
    TailSpec,
    empirical_cvar,
    empirical_var,
    gaussian_nll_risk,
    rmse_risk,
    select_tail,
)
from .sysgen import (  # noqa: F401
    ExcitationSpec,
    LtiSystem,
    StaticNonlinearity,
    TaskDataset,
    TaskStreamConfig,
    WhSystem,
    gen_signal,
    sample_lti,
    sample_nonlinearity,
    sample_task,
    sample_wh_system,
    simulate_lti,
    simulate_wh,
    task_stream,
)
from .trainer import TrainConfig, adamw_update, run_training  # noqa: F401
