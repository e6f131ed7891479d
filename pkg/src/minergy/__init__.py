"""minergy: desk-scale energy-based sequence models.

A model here assigns a scalar energy to (context, candidate-prediction)
pairs; prediction is gradient descent on that energy, and training
differentiates through the descent.  Everything runs on a small from-scratch
autodiff engine over numpy arrays (`minergy.autodiff`).
"""

__version__ = "0.1.0"

from .autodiff import ContractViolation, Value, make_rng, set_precision
from .model import (
    EnergyModel,
    InstabilityError,
    ModelConfig,
    load_model,
    s1_config,
    s2_config,
    save_model,
)
from .training import TrainConfig, Trainer, lr_at
from .thinking import EnergyTrace, ImprovementReport, self_verify, think, thinking_gain
from .baseline import BaselineConfig, BaselineTrainer, baseline_ff_transformer
from .harness import (
    FlopReport,
    RunConfig,
    fit_power_law,
    flops_ebt_per_token,
    flops_ff_per_token,
    load_run_config,
    parse_run_config,
    run_eval,
    run_sweep,
    run_train,
    serialize_run_config,
)

__all__ = [
    "BaselineConfig", "BaselineTrainer", "ContractViolation", "EnergyModel",
    "EnergyTrace", "FlopReport", "ImprovementReport", "InstabilityError",
    "ModelConfig", "RunConfig", "TrainConfig", "Trainer", "Value",
    "baseline_ff_transformer", "fit_power_law", "flops_ebt_per_token",
    "flops_ff_per_token", "load_model", "load_run_config", "lr_at", "make_rng",
    "parse_run_config", "run_eval", "run_sweep", "run_train", "s1_config",
    "s2_config", "save_model", "self_verify", "serialize_run_config",
    "set_precision", "think", "thinking_gain",
]
