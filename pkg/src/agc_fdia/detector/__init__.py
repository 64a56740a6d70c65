"""Tree-ensemble attack detector."""

from .ensemble import (
    DetectionResult,
    EnsembleModel,
    ModelFormatError,
    load_model,
    predict,
    predict_batch,
    save_model,
    train_gbdt,
    train_rf,
)
from .metrics import ClassifierMetrics, evaluate_classifier
from .tuning import tune_random_search
