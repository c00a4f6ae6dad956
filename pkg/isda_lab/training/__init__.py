"""Feature extractor, optimizer and the supervised / semi-supervised training loops."""

from isda_lab.training.mlp import ForwardCache, Mlp, backward, forward
from isda_lab.training.sgd import NesterovSGD, SgdConfig, SgdState
from isda_lab.training.trainer import (
    EpochHook,
    EpochRecord,
    Objective,
    TrainConfig,
    TrainingState,
    TrainResult,
    build_model,
    evaluate,
    last_k_average,
    load_checkpoint,
    new_state,
    parameters,
    save_checkpoint,
    stream_positions,
    train_semi,
    train_supervised,
)

__all__ = [
    "EpochHook",
    "EpochRecord",
    "ForwardCache",
    "Mlp",
    "NesterovSGD",
    "Objective",
    "SgdConfig",
    "SgdState",
    "TrainConfig",
    "TrainResult",
    "TrainingState",
    "backward",
    "build_model",
    "evaluate",
    "forward",
    "last_k_average",
    "load_checkpoint",
    "new_state",
    "parameters",
    "save_checkpoint",
    "stream_positions",
    "train_semi",
    "train_supervised",
]
