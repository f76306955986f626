"""Multi-label softmax loss, two-stream bilinear models, synthetic data, and
the AUC evaluation suite, built on explicitly differentiated numpy kernels.
"""

from .errors import (
    ConfigError,
    DataError,
    DimensionError,
    FormatError,
    MsmlError,
    NumericalError,
    ParameterError,
    UndefinedMetricError,
)
from .losses import LossWeights, msml, sigmoid_bce, total_loss
from .metrics import MetricsReport, ScoreMatrix, build_report, macro_auc, roc_auc, weighted_auc
from .model import (
    Adam,
    BackboneConfig,
    BaselineModel,
    ModelConfig,
    TwoStreamModel,
    build_baseline,
    build_two_stream,
    ensemble_fuse,
    lr_schedule,
    model_from_checkpoint,
    predict,
    save_checkpoint,
)
from .dataset import Dataset, GeneratorSpec, SplitSpec, generate, split

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "BackboneConfig",
    "BaselineModel",
    "ConfigError",
    "DataError",
    "Dataset",
    "DimensionError",
    "FormatError",
    "GeneratorSpec",
    "LossWeights",
    "MetricsReport",
    "ModelConfig",
    "MsmlError",
    "NumericalError",
    "ParameterError",
    "ScoreMatrix",
    "SplitSpec",
    "TwoStreamModel",
    "UndefinedMetricError",
    "build_baseline",
    "build_report",
    "build_two_stream",
    "ensemble_fuse",
    "generate",
    "lr_schedule",
    "macro_auc",
    "model_from_checkpoint",
    "msml",
    "predict",
    "roc_auc",
    "save_checkpoint",
    "sigmoid_bce",
    "split",
    "total_loss",
    "weighted_auc",
]
