"""Visually guided audio-visual predictive coding for sound source separation."""
from .dsp import AudioClip, SeparationMask, SpectrogramConfig
from .estimator import AVPCSeparator, SpectrogramTransformer
from .model import AVPCModel, load_checkpoint, save_checkpoint
from .pcnet import PCNet, PCNetArch, run_inference

__all__ = [
    "AudioClip",
    "AVPCModel",
    "AVPCSeparator",
    "PCNet",
    "PCNetArch",
    "SeparationMask",
    "SpectrogramConfig",
    "SpectrogramTransformer",
    "load_checkpoint",
    "run_inference",
    "save_checkpoint",
]

__version__ = "0.1.0"
