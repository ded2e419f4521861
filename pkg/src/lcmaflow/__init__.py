"""Normalizing flows with per-dimension log-det bookkeeping and log-det-ranked multi-scale factorization."""

from .data import Dataset, generate_blobs, load_dataset, save_dataset
from .flow import FlowModel, build_flow, flow_forward, flow_inverse, load_model, log_likelihood, save_model
from .plan import FactorizationPlan, derive_plan_baseline, derive_plan_lcma, load_plan, save_plan
from .train import TrainConfig, evaluate_bpd, pretrain, train_with_plan

__version__ = "0.1.0"

__all__ = [
    "Dataset", "generate_blobs", "load_dataset", "save_dataset",
    "FlowModel", "build_flow", "flow_forward", "flow_inverse", "load_model", "log_likelihood", "save_model",
    "FactorizationPlan", "derive_plan_baseline", "derive_plan_lcma", "load_plan", "save_plan",
    "TrainConfig", "evaluate_bpd", "pretrain", "train_with_plan",
]
