"""Attention-based heart-failure prediction: autodiff core, attention and LSTM
models, optimizers, clinical-record ingestion and an experiment sweep harness."""

from .attention import AttentionModel, ModelConfig, init_parameters
from .data import PatientRecord, aggregate_death_counts, generate_synthetic, load_csv, windowize
from .harness import RunReport, SweepConfig, evaluate, rank_configs, run_sweep, train
from .lstm import LstmConfig, LstmModel, init_lstm
from .optim import Optimizer, OptimizerSpec
from .tensor import Tape, Tensor, backward, grad_check

__version__ = "0.1.0"
