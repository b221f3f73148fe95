"""Built-in MLP classifier, training losses and flat-minima optimizers."""

from .data import DATASET_KINDS, Dataset, make_dataset
from .losses import (
    LOSS_KINDS,
    CrlHistory,
    LossSpec,
    crl_loss,
    loss_and_grad,
    margin_confidence,
    mixup,
)
from .mlp import MlpModel, backward, forward
from .optim import SwaState, sam_perturb, sam_step, sgd_step, swa_update
from .train import METHODS, TrainConfig, TrainResult, learning_rate, model_evalset, train

__all__ = [
    "DATASET_KINDS", "Dataset", "make_dataset", "LOSS_KINDS", "CrlHistory", "LossSpec",
    "crl_loss", "loss_and_grad", "margin_confidence", "mixup", "MlpModel", "backward",
    "forward", "SwaState", "sam_perturb", "sam_step", "sgd_step", "swa_update", "METHODS",
    "TrainConfig", "TrainResult", "learning_rate", "model_evalset", "train",
]
