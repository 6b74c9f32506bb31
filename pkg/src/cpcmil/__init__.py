"""Semi-supervised patch representation learning with attention-based
multiple-instance bag classification.

Two stages: contrastive pretraining of a patch encoder against spatially
adjacent patches (masked-convolution context network, InfoNCE objective),
then weakly supervised bag classification over patch embeddings with gated
attention pooling, a smooth max-margin loss, and an attention regularizer on
negative bags.
"""

from .config import (
    AugmentConfig,
    CpcTrainConfig,
    MilLossConfig,
    SyntheticSpec,
    TrainConfig,
)
from .contrastive import (
    CpcResult,
    chance_level,
    cpc_pretrain,
    grid_contrastive_loss,
    info_nce_loss,
    load_pretrained,
    save_pretrained,
)
from .data import (
    Bag,
    Patch,
    RawImage,
    build_bags,
    build_cpc_tiles,
    extract_patches,
    generate_synthetic_corpus,
    load_corpus,
    save_corpus,
    segment_tissue,
)
from .encoder import FeatureReducer, PatchEncoder, encode_instances, encode_patch
from .errors import ConfigurationError, NumericError, VerificationError
from .mil import (
    GatedAttention,
    MilModel,
    attention_weights,
    bag_embedding,
    classify_bag,
    kl_uniform,
    load_mil_model,
    mil_loss,
    save_mil_model,
    smooth_svm_loss,
)
from .metrics import (
    accuracy,
    aggregate_folds,
    export_attention_map,
    instance_recovery_score,
    roc_auc,
)
from .profiles import DESK, PAPER, PROFILES, TINY, Profile, get_profile
from .training import (
    SplitPlan,
    check_gradients,
    label_efficiency_sweep,
    make_splits,
    subsample_labels,
    train_mil,
)

__version__ = "0.1.0"

__all__ = [
    "AugmentConfig",
    "Bag",
    "ConfigurationError",
    "CpcResult",
    "CpcTrainConfig",
    "DESK",
    "FeatureReducer",
    "GatedAttention",
    "MilLossConfig",
    "MilModel",
    "NumericError",
    "PAPER",
    "PROFILES",
    "Patch",
    "PatchEncoder",
    "Profile",
    "RawImage",
    "SplitPlan",
    "SyntheticSpec",
    "TINY",
    "TrainConfig",
    "VerificationError",
    "accuracy",
    "aggregate_folds",
    "attention_weights",
    "bag_embedding",
    "build_bags",
    "build_cpc_tiles",
    "chance_level",
    "check_gradients",
    "classify_bag",
    "cpc_pretrain",
    "encode_instances",
    "encode_patch",
    "export_attention_map",
    "extract_patches",
    "generate_synthetic_corpus",
    "get_profile",
    "grid_contrastive_loss",
    "info_nce_loss",
    "instance_recovery_score",
    "kl_uniform",
    "label_efficiency_sweep",
    "load_corpus",
    "load_mil_model",
    "load_pretrained",
    "make_splits",
    "mil_loss",
    "roc_auc",
    "save_corpus",
    "save_mil_model",
    "save_pretrained",
    "segment_tissue",
    "smooth_svm_loss",
    "subsample_labels",
    "train_mil",
]
