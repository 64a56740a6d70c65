"""Seeded random hyperparameter search.

Search spaces (boosted):
    n_trees           integer in [50, 300]
    max_depth         integer in [2, 6]
    learning_rate     log-uniform in [0.03, 0.3]
    subsample         uniform in [0.6, 1.0]
    min_samples_leaf  integer in [1, 20]

Search spaces (forest):
    n_trees           integer in [50, 300]
    max_depth         None or integer in [4, 16]
    max_features      one of "sqrt", "log2", 0.5
    min_samples_leaf  integer in [1, 10]
"""

from __future__ import annotations

import logging
import math

import numpy as np

from .ensemble import train_gbdt, train_rf
from .metrics import evaluate_classifier

logger = logging.getLogger(__name__)


def draw_gbdt(rng: np.random.Generator) -> dict:
    return {
        "n_trees": int(rng.integers(50, 301)),
        "max_depth": int(rng.integers(2, 7)),
        "learning_rate": float(math.exp(rng.uniform(math.log(0.03), math.log(0.3)))),
        "subsample": float(rng.uniform(0.6, 1.0)),
        "min_samples_leaf": int(rng.integers(1, 21)),
    }


def draw_rf(rng: np.random.Generator) -> dict:
    depth = int(rng.integers(3, 17))
    return {
        "n_trees": int(rng.integers(50, 301)),
        "max_depth": None if depth == 3 else depth,  # 3 stands for unlimited
        "max_features": ["sqrt", "log2", 0.5][int(rng.integers(3))],
        "min_samples_leaf": int(rng.integers(1, 11)),
        "bootstrap": True,
    }


def tune_random_search(train, valid, trials: int, seed: int = 0, kind: str = "gradient_boosted",
                       train_seed: int = 0) -> dict:
    """Best hyperparameters by validation F1; earlier trials win ties."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    draw, fit = (draw_gbdt, train_gbdt) if kind == "gradient_boosted" else (draw_rf, train_rf)
    best_hp, best_f1 = None, -1.0
    for trial in range(trials):
        hp = draw(rng)
        f1 = evaluate_classifier(fit(train, hp, seed=train_seed), valid, latency_repeats=0).f1
        logger.info("trial %d: f1=%.4f %s", trial, f1, hp)
        if f1 > best_f1:
            best_hp, best_f1 = hp, f1
    return best_hp
