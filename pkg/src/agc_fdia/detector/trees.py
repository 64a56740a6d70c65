"""Exact greedy binary trees.

Two split criteria share the same search: sum-of-squares reduction for
regression on boosting residuals, and weighted Gini impurity for the forest.
Candidate thresholds are midpoints between consecutive distinct values of a
feature; samples with ``x[f] <= threshold`` go left. Ties in gain go to the
lowest feature index, then the lowest threshold.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np

LeafValue = Union[float, tuple]


@dataclass
class TreeNode:
    feature: int = -1
    threshold: float = 0.0
    left: Optional["TreeNode"] = None
    right: Optional["TreeNode"] = None
    value: Optional[LeafValue] = None

    @property
    def is_leaf(self) -> bool:
        return self.left is None

    def to_dict(self) -> dict:
        if self.is_leaf:
            v = self.value
            return {"leaf": list(v) if isinstance(v, tuple) else v}
        return {
            "feature": self.feature,
            "threshold": self.threshold,
            "left": self.left.to_dict(),
            "right": self.right.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict, n_features: int) -> "TreeNode":
        if "leaf" in d:
            v = d["leaf"]
            if isinstance(v, list):
                if len(v) != 2:
                    raise ValueError("class-count leaf needs two entries")
                v = (int(v[0]), int(v[1]))
            else:
                v = float(v)
            return cls(value=v)
        f = int(d["feature"])
        if not 0 <= f < n_features:
            raise ValueError(f"feature index {f} out of range")
        return cls(
            feature=f,
            threshold=float(d["threshold"]),
            left=cls.from_dict(d["left"], n_features),
            right=cls.from_dict(d["right"], n_features),
        )

    def leaves(self):
        if self.is_leaf:
            yield self
        else:
            yield from self.left.leaves()
            yield from self.right.leaves()

    def depth(self) -> int:
        return 0 if self.is_leaf else 1 + max(self.left.depth(), self.right.depth())


@dataclass
class Split:
    feature: int
    threshold: float
    gain: float


def _sse_gain(r_sorted: np.ndarray):
    """Sum-of-squares reduction at every cut position of one sorted feature."""
    n = r_sorted.size
    csum = np.cumsum(r_sorted)
    total = csum[-1]
    n_left = np.arange(1, n)
    s_left = csum[:-1]
    s_right = total - s_left
    gain = s_left**2 / n_left + s_right**2 / (n - n_left) - total**2 / n
    return gain, n_left


def _gini_gain(y_sorted: np.ndarray):
    n = y_sorted.size
    cpos = np.cumsum(y_sorted)
    pos = cpos[-1]
    n_left = np.arange(1, n)
    pl = cpos[:-1] / n_left
    pr = (pos - cpos[:-1]) / (n - n_left)
    p = pos / n
    parent = n * 2.0 * p * (1.0 - p)
    child = n_left * 2.0 * pl * (1.0 - pl) + (n - n_left) * 2.0 * pr * (1.0 - pr)
    return (parent - child) / n, n_left


CRITERIA = {"sse": _sse_gain, "gini": _gini_gain}


def best_split(X: np.ndarray, target: np.ndarray, features: Sequence[int], min_leaf: int,
               criterion: str = "sse") -> Optional[Split]:
    """Exhaustive search over ``features`` for the highest-gain split (None if no valid cut)."""
    gain_fn = CRITERIA[criterion]
    n = target.size
    best: Optional[Split] = None
    if n < 2 * min_leaf or n < 2:
        return None
    for f in features:
        col = X[:, f]
        order = np.argsort(col, kind="stable")
        xs = col[order]
        gain, n_left = gain_fn(target[order])
        valid = (xs[:-1] < xs[1:]) & (n_left >= min_leaf) & (n - n_left >= min_leaf)
        if not valid.any():
            continue
        gain = np.where(valid, gain, -np.inf)
        i = int(np.argmax(gain))
        g = float(gain[i])
        if g > 0 and (best is None or g > best.gain):
            best = Split(int(f), float((xs[i] + xs[i + 1]) / 2.0), g)
    return best


def grow(X: np.ndarray, target: np.ndarray, idx: np.ndarray, depth: int, max_depth: Optional[int],
         min_leaf: int, criterion: str, leaf_fn: Callable[[np.ndarray], LeafValue],
         feature_fn: Callable[[], Sequence[int]]) -> TreeNode:
    """Recursively grow a tree on rows ``idx``; ``feature_fn`` picks candidate features per node."""
    if max_depth is None or depth < max_depth:
        split = best_split(X[idx], target[idx], feature_fn(), min_leaf, criterion)
    else:
        split = None
    if split is None:
        return TreeNode(value=leaf_fn(idx))
    go_left = X[idx, split.feature] <= split.threshold
    return TreeNode(
        feature=split.feature,
        threshold=split.threshold,
        left=grow(X, target, idx[go_left], depth + 1, max_depth, min_leaf, criterion, leaf_fn, feature_fn),
        right=grow(X, target, idx[~go_left], depth + 1, max_depth, min_leaf, criterion, leaf_fn, feature_fn),
    )


class FlatTree:
    """Array form of a tree for vectorised prediction."""

    def __init__(self, root: TreeNode):
        feats, thr, left, right, vals = [], [], [], [], []

        def visit(node):
            i = len(feats)
            feats.append(node.feature)
            thr.append(node.threshold)
            left.append(-1)
            right.append(-1)
            v = node.value
            if isinstance(v, tuple):
                v = v[1] / (v[0] + v[1])
            vals.append(0.0 if v is None else float(v))
            if not node.is_leaf:
                left[i] = visit(node.left)
                right[i] = visit(node.right)
            return i

        visit(root)
        self.feature = np.array(feats)
        self.threshold = np.array(thr)
        self.left = np.array(left)
        self.right = np.array(right)
        self.value = np.array(vals)
        self._nodes = list(zip(feats, thr, left, right, vals))

    def predict(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=int)
        rows = np.arange(X.shape[0])
        while True:
            internal = self.left[node] >= 0
            if not internal.any():
                return self.value[node]
            ni = node[internal]
            go_left = X[rows[internal], self.feature[ni]] <= self.threshold[ni]
            node[internal] = np.where(go_left, self.left[ni], self.right[ni])

    def predict_one(self, x) -> float:
        nodes = self._nodes
        f, thr, lo, hi, v = nodes[0]
        while lo >= 0:
            f, thr, lo, hi, v = nodes[lo if x[f] <= thr else hi]
        return v
