from .model import (
    SAMPLERS,
    DenoiserModel,
    DiffusionConfig,
    GuidanceConfig,
    NumericalError,
    build_denoiser,
    diffusion_loss,
    ema_update,
    generate_for_condition,
    generated_count,
    load_denoiser,
    predict_noise,
    reverse_mean,
    sample,
    save_denoiser,
    train_diffusion,
)
from .schedule import NoiseSchedule, build_schedule, forward_noise
from .unet import FiLM, UNet1d, sinusoidal_embedding

__all__ = [
    "SAMPLERS",
    "DenoiserModel",
    "DiffusionConfig",
    "FiLM",
    "GuidanceConfig",
    "NoiseSchedule",
    "NumericalError",
    "UNet1d",
    "build_denoiser",
    "build_schedule",
    "diffusion_loss",
    "ema_update",
    "forward_noise",
    "generate_for_condition",
    "generated_count",
    "load_denoiser",
    "predict_noise",
    "reverse_mean",
    "sample",
    "save_denoiser",
    "sinusoidal_embedding",
    "train_diffusion",
]
