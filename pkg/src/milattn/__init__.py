"""Attention-based multiple-instance learning for 4-class HER2 slide scoring.

Bags of patch embeddings flow through a softmax-attention pooling head and
a linear classifier, trained with hand-written backpropagation and Adam.
Slide-level scores and HER2-positivity heatmaps come from Monte-Carlo bag
sampling of a trained model.
"""

__version__ = "0.1.0"

from .embeddings import (
    EmbeddingStore,
    SlideRecord,
    import_csv,
    load_manifest,
    read_store,
    toy_embed,
    write_store,
)
from .estimator import AttentionMILClassifier
from .evaluation import (
    CIResult,
    FoldMetrics,
    FoldPlan,
    confidence_interval,
    confusion,
    cross_evaluate,
    kfold_split,
    prf_macro,
    roc_auc_ovr,
)
from .model import (
    Bag,
    BagOutput,
    Gradients,
    MILParams,
    backward,
    bag_loss,
    forward,
    gradient_check,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .numerics import RngStream, cross_entropy, finite_diff_grad, softmax
from .scoring import Heatmap, SlideScore, heatmap, score_slide
from .slides import (
    AugmentConfig,
    PatchRef,
    SlideImage,
    TissueMask,
    augment_patch,
    extract_patch,
    load_slide,
    rgb_to_hsv,
    tissue_mask,
)
from .training import (
    AdamState,
    GridResult,
    TrainConfig,
    adam_step,
    fixed_bags,
    grid_search,
    sample_bag,
    train_epoch,
)

__all__ = [
    "AdamState",
    "AttentionMILClassifier",
    "AugmentConfig",
    "Bag",
    "BagOutput",
    "CIResult",
    "EmbeddingStore",
    "FoldMetrics",
    "FoldPlan",
    "Gradients",
    "GridResult",
    "Heatmap",
    "MILParams",
    "PatchRef",
    "RngStream",
    "SlideImage",
    "SlideRecord",
    "SlideScore",
    "TissueMask",
    "TrainConfig",
    "adam_step",
    "augment_patch",
    "backward",
    "bag_loss",
    "confidence_interval",
    "confusion",
    "cross_entropy",
    "cross_evaluate",
    "extract_patch",
    "finite_diff_grad",
    "fixed_bags",
    "forward",
    "gradient_check",
    "grid_search",
    "heatmap",
    "import_csv",
    "init_params",
    "kfold_split",
    "load_checkpoint",
    "load_manifest",
    "load_slide",
    "prf_macro",
    "read_store",
    "rgb_to_hsv",
    "roc_auc_ovr",
    "sample_bag",
    "save_checkpoint",
    "score_slide",
    "softmax",
    "tissue_mask",
    "toy_embed",
    "train_epoch",
    "write_store",
]
