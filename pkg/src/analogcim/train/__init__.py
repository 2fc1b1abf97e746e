"""Hardware-aware training: autodiff engine, quantizer nodes, trainer, datasets."""

from .data import Dataset, gaussian_blobs, load_dataset, pattern_images, save_dataset, separable_pair, toy_cnn, toy_mlp
from .trainer import (
    TrainConfig,
    TrainResult,
    TrainableState,
    accuracy,
    grad_S,
    grad_check,
    noisy_forward,
    quantized_op,
    stage1_train,
    stage2_train,
    train_two_stage,
)

__all__ = [
    "Dataset", "TrainConfig", "TrainResult", "TrainableState", "accuracy", "gaussian_blobs", "grad_S",
    "grad_check", "load_dataset", "noisy_forward", "pattern_images", "quantized_op", "save_dataset",
    "separable_pair", "stage1_train", "stage2_train", "toy_cnn", "toy_mlp", "train_two_stage",
]
