"""TIM-Net speech emotion recognition: MFCC front end, numpy autodiff core, training and evaluation."""

from .diffcore import DiffValue, RngStream
from .dsp import AudioClip, FeatureConfig, FeatureMatrix, mfcc
from .model import ModelConfig, TimNetParams, checkpoint_load, checkpoint_save, forward, init_timnet
from .train import Dataset, TrainConfig, train

__all__ = [
    "DiffValue",
    "RngStream",
    "AudioClip",
    "FeatureConfig",
    "FeatureMatrix",
    "mfcc",
    "ModelConfig",
    "TimNetParams",
    "init_timnet",
    "forward",
    "checkpoint_save",
    "checkpoint_load",
    "Dataset",
    "TrainConfig",
    "train",
]
__version__ = "0.1.0"
