"""Hebbian fast-weight transformers for episodic few-shot character
recognition, on a small numpy autodiff engine."""

from .backbones import (FlatBackboneConfig, HierBackboneConfig, Model, build_model, count_parameters,
                        preset_config, PRESETS)
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig, desk_config, load_config
from .data import CharacterDataset, PreprocessConfig, augment_classes, load_omniglot, synth_glyphs
from .fewshot import EpisodeConfig, run_episode, sample_episode, split_classes
from .gradcheck import grad_check
from .hfw import FastMemory, HfwConfig, HfwParams, hfw_forward, memory_lifetime
from .tensor import Tensor, no_grad
from .train import OptimConfig, ScheduleConfig, evaluate, train_loop

__version__ = "0.1.0"

__all__ = [
    "CharacterDataset", "EpisodeConfig", "augment_classes", "ExperimentConfig", "FastMemory", "FlatBackboneConfig",
    "HfwConfig", "HfwParams", "HierBackboneConfig", "Model", "OptimConfig", "PRESETS", "PreprocessConfig",
    "ScheduleConfig", "Tensor", "build_model", "count_parameters", "desk_config", "evaluate", "grad_check",
    "hfw_forward", "load_checkpoint", "load_config", "load_omniglot", "memory_lifetime", "no_grad",
    "preset_config", "run_episode", "sample_episode", "save_checkpoint", "split_classes", "synth_glyphs",
    "train_loop",
]
