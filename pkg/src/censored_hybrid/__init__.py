"""Censored hybrid sentencing model: mechanism times network bias, fitted in two stages."""

from .asg import ASGConfig, ASGState, RegretTracker, asg_init, asg_step
from .datagen import Dataset, GeneratorConfig, generate, split
from .evaluation import EvalReport, compare, rad
from .expansion import DegenerateLeadingEntry, IndexMap, build_phi, build_theta, recover_params
from .model import (
    BiasNetworkParams,
    CaseRecord,
    HybridModel,
    MechanismParams,
    NoiseModel,
    SaturationBounds,
    censored_mean,
    censored_mean_deriv,
    hybrid_predict,
    saturate,
)
from .trainer import AdamState, TrainConfig, adam_step, stage1_run, stage2_run, tsl_train

__version__ = "0.1.0"
