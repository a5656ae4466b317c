"""Koopman variational autoencoder for regular and irregular time series."""
from .data import (PendulumParams, SeriesBatch, denormalize, drop_observations, generate_pendulum,
                   generate_sines, load_csv_dataset, normalize)
from .koopman import EigTargets, KoopmanOperator, eig_penalty, fit_operator, rollout, spectral_report
from .model import KoVAE, LatentSequence, LossBreakdown, ModelConfig, compute_loss, generate
from .ncde import ControlPath, NCDEConfig, build_path, embed

__version__ = "0.1.0"
