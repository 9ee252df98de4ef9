"""Federated learning with collaborative spurious-feature masking."""

from .datasets import DatasetSpec, Environment, gen_synthetic, partition_clients, strip_spurious
from .estimators import FederatedClassifier
from .fedcore import ALGORITHMS, RunConfig, RunResult, TrainingAborted, run_training
from .masking import MaskState, init_mask, mask_update
from .model import ModelParams, fedgen_loss, init_params

__all__ = [
    "ALGORITHMS", "DatasetSpec", "Environment", "FederatedClassifier", "MaskState",
    "ModelParams", "RunConfig", "RunResult", "TrainingAborted", "fedgen_loss", "gen_synthetic",
    "init_mask", "init_params", "mask_update", "partition_clients", "run_training",
    "strip_spurious",
]
