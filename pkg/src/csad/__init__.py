"""Two-modality lesion segmentation with cross-modal attention distillation and spatially correlated fusion."""
from .attention import DistillPair, DistillPlan, Scheme, amgb, build_distill_plan, l_ad, l_csad
from .errors import ConfigError, CSADError, DataError, NumericError, ParameterError, ShapeError
from .net import (
    LossBreakdown,
    Model,
    NetConfig,
    TrainConfig,
    backward_and_step,
    forward,
    init_model,
    load_checkpoint,
    load_config,
    predict_mask,
    save_checkpoint,
)
from .objectives import LossConfig, MetricsReport, dice_loss, evaluate, total_loss, wbce_loss
from .phantom import Dataset, PhantomSample, augment, generate, make_dataset
from .scff import project_general, scff_fuse, spatial_correlation

__version__ = "0.1.0"

__all__ = [
    "CSADError",
    "ConfigError",
    "DataError",
    "Dataset",
    "DistillPair",
    "DistillPlan",
    "LossBreakdown",
    "LossConfig",
    "MetricsReport",
    "Model",
    "NetConfig",
    "NumericError",
    "ParameterError",
    "PhantomSample",
    "Scheme",
    "ShapeError",
    "TrainConfig",
    "amgb",
    "augment",
    "backward_and_step",
    "build_distill_plan",
    "dice_loss",
    "evaluate",
    "forward",
    "generate",
    "init_model",
    "l_ad",
    "l_csad",
    "load_checkpoint",
    "load_config",
    "make_dataset",
    "predict_mask",
    "project_general",
    "save_checkpoint",
    "scff_fuse",
    "spatial_correlation",
    "total_loss",
    "wbce_loss",
]
