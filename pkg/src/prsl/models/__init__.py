"""Desk-scale differentiable models, training and checkpoints."""

from .captioner import captioner_forward, captioner_loss, greedy_decode, teacher_forcing
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .classifier import LossResult, classifier_forward, classifier_loss, predict
from .specs import (
    BOS,
    EOS,
    PAD,
    CaptionerSpec,
    ClassifierSpec,
    init_params,
    spec_from_dict,
    zero_params,
)
from .training import TrainConfig, config_hash, model_loss, sgd_step, train

__all__ = [
    "BOS", "EOS", "PAD",
    "CaptionerSpec", "Checkpoint", "ClassifierSpec", "LossResult", "TrainConfig",
    "captioner_forward", "captioner_loss", "classifier_forward", "classifier_loss",
    "config_hash", "greedy_decode", "init_params", "load_checkpoint", "model_loss",
    "predict", "save_checkpoint", "sgd_step", "spec_from_dict", "teacher_forcing",
    "train", "zero_params",
]
