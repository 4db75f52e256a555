"""Rectified-flow toy lab for comparing noise-level samplers in style fine-tuning."""

from .generate import GenerationConfig, euler_sample, switched_sample
from .lora import LoraAdapter, attach, merge
from .net import Architecture, Cond, DenoiserParams, init_params
from .samplers import EdmLogNormal, LogitNormal, StyleFriendly, UniformTime, sampler_from_dict
from .train import LoraConfig, TrainConfig, finetune, pretrain

__all__ = [
    "Architecture",
    "Cond",
    "DenoiserParams",
    "EdmLogNormal",
    "GenerationConfig",
    "LogitNormal",
    "LoraAdapter",
    "LoraConfig",
    "StyleFriendly",
    "TrainConfig",
    "UniformTime",
    "attach",
    "euler_sample",
    "finetune",
    "init_params",
    "merge",
    "pretrain",
    "sampler_from_dict",
    "switched_sample",
]
