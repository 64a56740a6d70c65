"""Gradient-boosted and random-forest tree ensembles for attack detection."""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..features import N_FEATURES
from .trees import FlatTree, TreeNode, grow

FORMAT_NAME = "agc-fdia-model"
FORMAT_VERSION = 1
KINDS = ("gradient_boosted", "random_forest")

GBDT_DEFAULTS = {"n_trees": 200, "max_depth": 4, "learning_rate": 0.1, "subsample": 0.8, "min_samples_leaf": 5}
RF_DEFAULTS = {"n_trees": 200, "max_depth": None, "max_features": "sqrt", "min_samples_leaf": 1, "bootstrap": True}


class ModelFormatError(ValueError):
    """Model file is malformed, tampered with, or of an unsupported version."""


@dataclass
class DetectionResult:
    label: str
    confidence: float
    prob_normal: float
    prob_attack: float
    inference_latency: float = 0.0

    def as_dict(self) -> dict:
        return {
            "label": self.label,
            "confidence": self.confidence,
            "prob_normal": self.prob_normal,
            "prob_attack": self.prob_attack,
        }


@dataclass
class EnsembleModel:
    kind: str
    trees: list
    learning_rate: float = 1.0
    base_score: float = 0.0
    hyperparams: dict = field(default_factory=dict)
    training_seed: int = 0
    n_features: int = N_FEATURES
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        self._flat = [FlatTree(t) for t in self.trees]

    def _check(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {X.shape[1]}")
        return X

    def decision_function(self, X) -> np.ndarray:
        """Raw log-odds for boosted models."""
        X = self._check(X)
        total = np.zeros(X.shape[0])
        for t in self._flat:
            total = total + t.predict(X)
        return self.base_score + self.learning_rate * total

    def predict_proba(self, X) -> np.ndarray:
        """Probability of the attack class for each row."""
        X = self._check(X)
        if self.kind == "gradient_boosted":
            return _sigmoid(self.decision_function(X))
        if not self._flat:
            return np.full(X.shape[0], 0.5)
        total = np.zeros(X.shape[0])
        for t in self._flat:
            total = total + t.predict(X)
        return total / len(self._flat)

    def proba_one(self, x) -> float:
        if len(x) != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {len(x)}")
        x = [float(v) for v in x]
        s = 0.0
        for t in self._flat:
            s = s + t.predict_one(x)
        if self.kind == "gradient_boosted":
            return float(_sigmoid(np.array([self.base_score + self.learning_rate * s]))[0])
        return s / len(self._flat) if self._flat else 0.5

    # -- serialization --------------------------------------------------

    def _payload(self) -> dict:
        return {
            "format": FORMAT_NAME,
            "format_version": self.format_version,
            "kind": self.kind,
            "n_features": self.n_features,
            "hyperparams": self.hyperparams,
            "base_score": self.base_score,
            "learning_rate": self.learning_rate,
            "training_seed": self.training_seed,
            "trees": [t.to_dict() for t in self.trees],
        }

    def dumps(self) -> str:
        payload = self._payload()
        body = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        payload["digest"] = "sha256:" + hashlib.sha256(body.encode()).hexdigest()
        return json.dumps(payload, sort_keys=True, separators=(",", ":")) + "\n"

    @classmethod
    def loads(cls, text: str) -> "EnsembleModel":
        try:
            payload = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ModelFormatError(f"model file is not valid JSON: {exc}") from exc
        if not isinstance(payload, dict) or payload.get("format") != FORMAT_NAME:
            raise ModelFormatError("not a model file")
        if payload.get("format_version") != FORMAT_VERSION:
            raise ModelFormatError(f"unsupported model version {payload.get('format_version')!r}")
        digest = payload.pop("digest", None)
        body = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        if digest != "sha256:" + hashlib.sha256(body.encode()).hexdigest():
            raise ModelFormatError("model digest mismatch")
        try:
            n_features = int(payload["n_features"])
            return cls(
                kind=payload["kind"],
                trees=[TreeNode.from_dict(t, n_features) for t in payload["trees"]],
                learning_rate=float(payload["learning_rate"]),
                base_score=float(payload["base_score"]),
                hyperparams=payload["hyperparams"],
                training_seed=int(payload["training_seed"]),
                n_features=n_features,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ModelFormatError(f"malformed model file: {exc}") from exc


def save_model(model: EnsembleModel, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(model.dumps())


def load_model(path) -> EnsembleModel:
    with open(path, encoding="utf-8") as fh:
        return EnsembleModel.loads(fh.read())


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=float)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def log_loss(y: np.ndarray, raw: np.ndarray) -> float:
    """Mean logistic loss of log-odds ``raw`` against 0/1 labels."""
    # log(1 + e^z) - y z, written stably
    return float(np.mean(np.logaddexp(0.0, raw) - y * raw))


def as_xy(data):
    """Accept a list of samples (with ``features`` and ``y``) or an ``(X, y)`` pair."""
    if isinstance(data, tuple) and len(data) == 2:
        X, y = data
    else:
        X = np.array([s.features for s in data], dtype=float)
        y = np.array([s.y for s in data])
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or X.shape[0] != y.shape[0] or X.shape[0] == 0:
        raise ValueError("need a non-empty 2-D feature matrix aligned with labels")
    return X, y


def _require_both_classes(y):
    if np.all(y == y[0]):
        raise ValueError("training set contains a single class")


def train_gbdt(train, hp: Optional[dict] = None, seed: int = 0, loss_history: Optional[list] = None) -> EnsembleModel:
    """Stagewise logistic boosting of exact-split regression trees.

    Each stage fits the negative gradient (y - p) by sum-of-squares splits on
    a seeded row subsample and sets leaf values with one Newton step
    (sum of residuals / sum of p(1-p)). A stage whose shrunk step would raise
    the training loss has its leaf values halved until it does not.
    """
    hp = {**GBDT_DEFAULTS, **(hp or {})}
    X, y = as_xy(train)
    _require_both_classes(y)
    n, n_feat = X.shape
    rng = np.random.default_rng(seed)
    lr = float(hp["learning_rate"])
    prior = float(np.clip(y.mean(), 1e-12, 1 - 1e-12))
    base = math.log(prior / (1.0 - prior))
    raw = np.full(n, base)
    trees = []
    all_features = list(range(n_feat))
    n_sub = max(1, int(round(hp["subsample"] * n)))
    loss = log_loss(y, raw)
    if loss_history is not None:
        loss_history.append(loss)

    for _ in range(int(hp["n_trees"])):
        p = _sigmoid(raw)
        resid = y - p
        hess = p * (1.0 - p)
        if n_sub < n:
            rows = np.sort(rng.choice(n, size=n_sub, replace=False))
        else:
            rows = np.arange(n)

        def newton_leaf(idx):
            return float(resid[idx].sum() / max(hess[idx].sum(), 1e-12))

        tree = grow(X, resid, rows, 0, int(hp["max_depth"]), int(hp["min_samples_leaf"]),
                    "sse", newton_leaf, lambda: all_features)
        step = FlatTree(tree).predict(X)
        new_raw = raw + lr * step
        new_loss = log_loss(y, new_raw)
        shrink = 0
        while new_loss > loss and shrink < 40:
            for leaf in tree.leaves():
                leaf.value = leaf.value * 0.5
            step = step * 0.5
            new_raw = raw + lr * step
            new_loss = log_loss(y, new_raw)
            shrink += 1
        if new_loss > loss:
            for leaf in tree.leaves():
                leaf.value = 0.0
            new_raw, new_loss = raw, loss
        trees.append(tree)
        raw, loss = new_raw, new_loss
        if loss_history is not None:
            loss_history.append(loss)

    return EnsembleModel("gradient_boosted", trees, learning_rate=lr, base_score=base,
                         hyperparams=hp, training_seed=seed, n_features=n_feat)


def _n_max_features(spec, n_feat: int) -> int:
    if spec in (None, "all"):
        return n_feat
    if spec == "sqrt":
        return max(1, int(math.sqrt(n_feat)))
    if spec == "log2":
        return max(1, int(math.log2(n_feat)))
    if isinstance(spec, float):
        return max(1, min(n_feat, int(round(spec * n_feat))))
    return max(1, min(n_feat, int(spec)))


def train_rf(train, hp: Optional[dict] = None, seed: int = 0) -> EnsembleModel:
    """Random forest of Gini trees; leaves store (normal, attack) counts."""
    hp = {**RF_DEFAULTS, **(hp or {})}
    X, y = as_xy(train)
    _require_both_classes(y)
    n, n_feat = X.shape
    rng = np.random.default_rng(seed)
    m = _n_max_features(hp["max_features"], n_feat)
    max_depth = None if hp["max_depth"] is None else int(hp["max_depth"])
    yi = y.astype(int)

    def feature_subset():
        if m >= n_feat:
            return range(n_feat)
        return np.sort(rng.choice(n_feat, size=m, replace=False))

    def count_leaf(idx):
        pos = int(yi[idx].sum())
        return (len(idx) - pos, pos)

    trees = []
    for _ in range(int(hp["n_trees"])):
        rows = rng.integers(0, n, size=n) if hp["bootstrap"] else np.arange(n)
        trees.append(grow(X, y, rows, 0, max_depth, int(hp["min_samples_leaf"]),
                          "gini", count_leaf, feature_subset))
    return EnsembleModel("random_forest", trees, hyperparams=hp, training_seed=seed, n_features=n_feat)


def predict(model: EnsembleModel, features) -> DetectionResult:
    """Classify one feature vector; ties go to the attack class."""
    t0 = time.perf_counter()
    p_attack = model.proba_one(features)
    latency = time.perf_counter() - t0
    p_normal = 1.0 - p_attack
    label = "attack" if p_attack >= p_normal else "normal"
    return DetectionResult(label, max(p_attack, p_normal), p_normal, p_attack, latency)


def predict_batch(model: EnsembleModel, X) -> list:
    probs = model.predict_proba(X)
    out = []
    for p in probs:
        p = float(p)
        q = 1.0 - p
        out.append(DetectionResult("attack" if p >= q else "normal", max(p, q), q, p, 0.0))
    return out
