"""Desk-scale pose-conditioned video diffusion transformer.

Modules: ``numerics`` (primitives), ``codec`` (causal block latent codec),
``synth`` (procedural scenes), ``dit`` (transformer with LoRA adapters),
``kv_share`` (background key/value sharing), ``sampler`` (rectified-flow Euler
sampling), ``long_video`` (segment planning and assembly), ``trainer`` and
``cli``.
"""
from .codec import CodecConfig, decode, encode, latent_shape
from .dit import ConditionBundle, DiT, DitConfig
from .errors import CacheMissError, ConfigError, DivergenceError, PoseGenError, ShapeError, UsageError
from .kv_share import GateConfig, KvCache, SharingController
from .long_video import LongVideoInputs, generate_long, plan_segments
from .sampler import SamplerConfig, build_frame_mask, sample
from .synth import DataConfig, generate_scene, make_dataset
from .trainer import Checkpoint, TrainConfig, train

__version__ = "0.1.0"
