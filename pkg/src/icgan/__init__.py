"""Workbench for an information-compensated conditional GAN: dataset
synthesis, training, disentanglement metrics, and the gradient-score
ablation probe."""

__version__ = "0.1.0"

from . import ablation, colormnist, losses, metrics, models, nn_core, trainer  # noqa: F401
