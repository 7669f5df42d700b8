"""Quantization-aware low-rank fine-tuning for small diffusion models, built on numpy."""

from .diffusion import Denoiser, SamplerConfig, make_schedule, sample, train_teacher
from .distill import DistillConfig, calibrate, eval_trajectory_mse, finetune
from .errors import (CheckpointError, ConfigurationError, DimensionError, DomainError,
                     EncodingError, TrainingDiverged)
from .quant import QuantSpec, fake_quant, init_scale

__version__ = "0.1.0"
