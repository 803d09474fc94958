"""Incomplete-multimodal conversation emotion recognition with spectral-domain graph reconstruction."""

from .data import Conversation, Dataset, MaskPlan, SynthConfig, apply_missing, load_dataset, missing_rate
from .model import ModelConfig, SDRGNN
from .training import TrainConfig, train, evaluate

__all__ = ["Conversation", "Dataset", "MaskPlan", "SynthConfig", "apply_missing", "load_dataset",
           "missing_rate", "ModelConfig", "SDRGNN", "TrainConfig", "train", "evaluate"]
