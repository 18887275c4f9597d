"""Multi-class anomaly score distribution alignment toolkit."""

from .align import (
    ClassStats,
    DegenerateScaleWarning,
    ScoreMap,
    apply_oracle_alignment,
    fit_class_stats,
    normalize_meanmax,
    normalize_meanstd,
)
from .heads import (
    HeadConfig,
    HeadModel,
    TrainConfig,
    calibrate,
    calibrate_with_classifier,
    calibrate_with_regressor,
    compute_image_stats,
    predict_class,
    predict_stats,
    train_classifier,
    train_regressor,
)
from .metrics import (
    MetricsReport,
    UndefinedMetricError,
    auroc,
    average_precision,
    evaluate,
    image_score,
)
from .synth import Coreset, SynthConfig, fit_coreset, generate, score_knn
from .tensorio import (
    DatasetManifest,
    ImageEntry,
    ManifestError,
    TensorFormatError,
    read_manifest,
    read_tensor,
    write_manifest,
    write_tensor,
)

__version__ = "0.1.0"
