"""Per-signal summary statistics used by the detector and in prompts.

Order is fixed: (delta_f1, delta_f2, delta_p_tie) x (mean, std, skewness,
slope, min, max). Moments are population (biased) moments.
"""

from __future__ import annotations

import numpy as np

from .plant import SIGNALS, SignalTrace

STATS = ("mean", "std", "skewness", "slope", "min", "max")
FEATURE_NAMES = tuple(f"{s}.{stat}" for s in SIGNALS for stat in STATS)
N_FEATURES = len(FEATURE_NAMES)

_DEGENERATE_M2 = 1e-12


def _as_series(series) -> np.ndarray:
    x = np.asarray(series, dtype=float)
    if x.ndim != 1 or x.size < 2:
        raise ValueError("series needs at least 2 values")
    return x


def skewness(series) -> float:
    """Fisher-Pearson coefficient m3 / m2**1.5 (0 for near-constant series)."""
    x = _as_series(series)
    d = x - x.mean()
    m2 = np.mean(d * d)
    if m2 < _DEGENERATE_M2:
        return 0.0
    m3 = np.mean(d * d * d)
    return float(m3 / m2**1.5)


def slope(series, dt: float) -> float:
    """Least-squares slope of the series against t_k = k * dt."""
    x = _as_series(series)
    if not dt > 0:
        raise ValueError("dt must be positive")
    t = np.arange(x.size) * dt
    tc = t - t.mean()
    return float(np.dot(tc, x - x.mean()) / np.dot(tc, tc))


def signal_stats(series, dt: float) -> list[float]:
    x = _as_series(series)
    return [
        float(x.mean()),
        float(x.std()),
        skewness(x),
        slope(x, dt),
        float(x.min()),
        float(x.max()),
    ]


def extract(trace: SignalTrace) -> np.ndarray:
    """18-element feature vector of a trace."""
    dt = float(trace.t[1] - trace.t[0]) if len(trace.t) > 1 else 1.0
    out = []
    for name in SIGNALS:
        out.extend(signal_stats(trace.signal(name), dt))
    return np.array(out)


def extract_series(t, series_by_signal: dict) -> np.ndarray:
    """Same as :func:`extract` for raw arrays keyed by signal name."""
    t = np.asarray(t, dtype=float)
    dt = float(t[1] - t[0])
    out = []
    for name in SIGNALS:
        out.extend(signal_stats(series_by_signal[name], dt))
    return np.array(out)


def as_dict(features) -> dict:
    return dict(zip(FEATURE_NAMES, (float(v) for v in features)))


def from_dict(d: dict) -> np.ndarray:
    return np.array([d[name] for name in FEATURE_NAMES], dtype=float)
