"""Toy latent-diffusion engine with QKV-level guidance processors.

Shared-KV condition guidance and thresholded attention-map mask guidance on
top of decoupled text+image cross-attention, with deterministic kernels,
DDIM sampling, attention capture and a CLI.
"""

from .attention import (
    AttentionMap,
    AttentionWeights,
    DecoupledWeights,
    decoupled_cross_attention,
    multi_head_attention,
    scaled_dot_attention,
)
from .config import RunConfig, build_config, load_config
from .errors import ConfigError, InputError, LogicError, NumericalError, QKVError, ShapeError
from .guidance import (
    ConditionPair,
    GuidanceConfig,
    ThresholdMask,
    apply_mask,
    build_batch,
    guided_cross_attention,
    share_kv,
    threshold_map,
)
from .inspection import CaptureRecord, CaptureSink, ConsistencyReport, consistency_metrics, export_map_image
from .model import GeneratedImage, ModelConfig, StyleImage, ToyDenoiser, tokenize
from .sampler import LatentState, NoiseSchedule, ddim_step, generate, make_schedule
from .tensor import BACKEND, SeededRng, seeded_normal

__version__ = "0.1.0"
