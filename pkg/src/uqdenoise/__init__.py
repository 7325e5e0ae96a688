"""Ensemble denoising with calibrated quantile intervals and latent tokenization."""

from . import autodiff, conformal, ensembles, graphs, latent, optim, synthetic, tensorio, tiling
from .autodiff import Tensor
from .graphs import GraphHyperparams, NetworkSpec, sample_graph
from .model import Model, QuantileField, TrainConfig, train
from .synthetic import SynthConfig, make_dataset

__version__ = "0.1.0"
