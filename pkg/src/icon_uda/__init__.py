"""Invariant consistency learning for unsupervised domain adaptation, at desk scale.

A small numpy reverse-mode engine drives an MLP backbone with two softmax
heads: ``f`` (classifier) and ``g`` (target cluster head). Training combines
source cross-entropy, pairwise consistency with target clusters, self-training
and a variance penalty across domains.
"""

from .autodiff import DiffValue, grad_check
from .datagen import (DOMINATION, DomainDataset, SpuriousShiftConfig, generate,
                      load_dataset, save_dataset)
from .evaluation import accuracy, probe_g_vs_f
from .models import ConfigError, HyperbolicLayerSpec, ModelState, init_model
from .trainer import PRESETS, TrainConfig, TrainLog, preset, train, train_step

__all__ = [
    "DiffValue", "grad_check",
    "DOMINATION", "DomainDataset", "SpuriousShiftConfig", "generate", "load_dataset", "save_dataset",
    "accuracy", "probe_g_vs_f",
    "ConfigError", "HyperbolicLayerSpec", "ModelState", "init_model",
    "PRESETS", "TrainConfig", "TrainLog", "preset", "train", "train_step",
]

__version__ = "0.1.0"
