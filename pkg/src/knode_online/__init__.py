"""Quadrotor trajectory tracking with a residual neural ODE learned online.

The nominal rigid-body model is corrected by a queue of small MLPs whose
contributions fade with age. An MPC tracks the reference with the current
snapshot while new members are fitted on recent flight data.
"""
from .dynamics import NU, NX, NZ, NumericalError, QuadParams, hover_state, nominal_derivative, state_derivative
from .ensemble import DiscreteModel, EnsembleModel, forgetting_weight, hybrid_derivative, push_member
from .mlp import DEFAULT_LAYER_DIMS, Mlp
from .data import DataBatch
from .trainer import LossReport, TrainConfig, TrainingError, knode_loss, one_step_predict, train_member
from .mpc import ConfigError, OcpConfig, OcpSolution, control_step, solve_ocp
from .orchestrator import CollectorState, OnlineLearner, TrainerMailbox, collector_step, trainer_loop_step
from .sim import EpisodeLog, EpisodeSettings, MassSchedule, ReferenceTrajectory, Scenario, mse, run_episode
from .config import ExperimentConfig, load_config
from .estimator import KnodeRegressor

__version__ = "0.1.0"
