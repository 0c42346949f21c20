"""Overhead-to-ground conditional GAN: synthesis, feature extraction and evaluation."""
from ._accel import BACKEND
from .core_types import PairedSample, denormalize, normalize
from .discriminator import (
    discriminate,
    extract_features,
    extract_features_from_pair,
    init_discriminator,
)
from .generator import (
    GeneratorConfig,
    condition_block,
    crop_center,
    decode,
    encode,
    generate,
    init_generator,
)
from .training import TrainConfig, TrainState, train, train_step

__version__ = "0.1.0"
