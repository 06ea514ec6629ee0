"""Fine-grained prompt tuning of a frozen vision transformer, desk scale.

A frozen high-resolution encoder supplies per-layer key/value features; a small
learnable side network consumes a low-resolution copy of the image and absorbs
the frozen features through per-layer prompt cross-attention. Attention-ranked
token selection and an on-disk feature cache keep training cost flat, and the
metrics module reproduces the efficiency arithmetic of the published tables.
"""

from .backbone import FrozenBackbone, FreezeViolationError, LayerTap, interpolate_pos_embed
from .cache import (
    CacheIOError,
    FeatureCache,
    FeatureCacheEntry,
    StaleCacheError,
    build_cache,
    config_hash,
)
from .config import (
    BackboneConfig,
    ConfigError,
    DataConfig,
    FptConfig,
    SelectionConfig,
    SideConfig,
    SynthSpec,
    TrainRunConfig,
    vit_b_config,
)
from .data import (
    DatasetSplits,
    Sample,
    augment_low,
    build_dataset,
    resize_bilinear,
    synth_generate,
)
from .fusion import (
    FptModel,
    FusionLayer,
    SideNetwork,
    build_model,
    ffm_forward,
    load_checkpoint,
    save_checkpoint,
)
from .metrics import (
    EfficiencyReport,
    activation_breakdown,
    count_params,
    estimate_activation_memory,
    param_counts,
    pme,
    ppe,
)
from .numerics import AdamW, Tensor, finite_diff_check
from .selection import (
    LayerFusionFeatures,
    TokenSelection,
    gather_selected,
    select_topk,
    token_scores,
)
from .trainer import (
    CachedFeatures,
    LiveFeatures,
    NanLossError,
    TrainReport,
    UndefinedAUCError,
    evaluate,
    freeze_check,
    macro_auc,
    train,
)

__version__ = "0.1.0"
