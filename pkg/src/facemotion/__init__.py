"""Diffusion-based synthesis and editing of speech-driven 3D facial vertex motion.

The library covers the full desk-scale pipeline: a tape-based autodiff
engine (`autodiff`), the convolutional denoiser (`net`), the diffusion
schedule and guided/keyframed samplers (`diffusion`), sequence containers
and the synthetic dataset (`data`), training and personalization
(`train`), and the evaluation metric suite (`metrics`). The `facemotion`
command exposes the end-to-end workflow.
"""

from .data import (
    AudioFeatureSequence,
    DatasetManifest,
    MotionSequence,
    TemplateMesh,
    random_crop,
    read_afea,
    read_mseq,
    resample_features,
    synth_generate,
    write_afea,
    write_mseq,
)
from .diffusion import (
    DiffusionSchedule,
    KeyframeConstraint,
    SamplerConfig,
    StepVariant,
    cfg_predict,
    inpaint_sample,
    make_schedule,
    sample,
    sample_many,
    unconditional_sample,
)
from .errors import (
    ConfigError,
    ContractError,
    DataFormatError,
    DimensionError,
    FaceMotionError,
    NumericalError,
    SequenceTooShortError,
)
from .net import Condition, Denoiser, NetworkConfig, sinusoidal_embedding
from .train import TrainConfig, finetune_personal, l_simple, l_total, l_vel, train_loop

__version__ = "0.1.0"

__all__ = [
    "AudioFeatureSequence", "Condition", "ConfigError", "ContractError",
    "DataFormatError", "DatasetManifest", "Denoiser", "DiffusionSchedule",
    "DimensionError", "FaceMotionError", "KeyframeConstraint", "MotionSequence",
    "NetworkConfig", "NumericalError", "SamplerConfig", "SequenceTooShortError",
    "StepVariant", "TemplateMesh", "TrainConfig", "cfg_predict",
    "finetune_personal", "inpaint_sample", "l_simple", "l_total", "l_vel",
    "make_schedule", "random_crop", "read_afea", "read_mseq",
    "resample_features", "sample", "sample_many", "sinusoidal_embedding",
    "synth_generate", "train_loop", "unconditional_sample", "write_afea",
    "write_mseq",
]
