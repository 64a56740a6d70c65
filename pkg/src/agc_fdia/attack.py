"""False data injection on one AGC measurement, with ACE-limit rescaling."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .plant import SIGNALS, AdditiveRamp, ScenarioConfig, SignalTrace, simulate

logger = logging.getLogger(__name__)

TARGETS = SIGNALS
SUBTLETIES = ("subtle", "noticeable")

FI_MEAN = -0.11
FI_STD = 0.02
ONSET_LATEST = 30.0
MAX_RESCALE_ITER = 8


class RescaleError(RuntimeError):
    """The ACE limit could not be met within the iteration cap."""


@dataclass(frozen=True)
class AceLimitPolicy:
    subtle_limit: float = 0.5
    noticeable_limit: float = 1.0
    tolerance: float = 1e-3

    def __post_init__(self):
        if not (0 < self.subtle_limit < self.noticeable_limit):
            raise ValueError("need 0 < subtle_limit < noticeable_limit")

    def limit(self, subtlety: str) -> float:
        return self.subtle_limit if subtlety == "subtle" else self.noticeable_limit


@dataclass(frozen=True)
class AttackSpec:
    target: str
    t_start: float
    f_i: float
    f_f: float
    scale: float = 1.0
    subtlety: str = "subtle"
    magnitude: float = math.nan

    def __post_init__(self):
        if self.target not in TARGETS:
            raise ValueError(f"unknown attack target {self.target!r}")
        if self.subtlety not in SUBTLETIES:
            raise ValueError(f"unknown subtlety {self.subtlety!r}")
        if not 0.0 <= self.t_start <= ONSET_LATEST:
            raise ValueError("t_start must lie in [0, 30] s")
        if math.isnan(self.magnitude):
            object.__setattr__(self, "magnitude", _magnitude(self.scale, self.f_i, self.f_f))

    def rescaled(self, scale: float) -> "AttackSpec":
        return replace(self, scale=scale, magnitude=_magnitude(scale, self.f_i, self.f_f))

    def hook(self, window_end: float) -> AdditiveRamp:
        return AdditiveRamp(self.target, self.t_start, window_end, self.f_i, self.f_f, self.scale)

    def to_dict(self) -> dict:
        return {
            "target": self.target,
            "t_start_s": self.t_start,
            "f_i_pu": self.f_i,
            "f_f_pu": self.f_f,
            "scale": self.scale,
            "subtlety": self.subtlety,
            "magnitude_pu": self.magnitude,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AttackSpec":
        return cls(
            target=d["target"], t_start=d["t_start_s"], f_i=d["f_i_pu"], f_f=d["f_f_pu"],
            scale=d["scale"], subtlety=d["subtlety"], magnitude=d["magnitude_pu"],
        )


def _magnitude(scale: float, f_i: float, f_f: float) -> float:
    # the ramp is monotone, so its largest |value| sits at an endpoint
    return abs(scale) * max(abs(f_i), abs(f_f))


def sample_attack(rng: np.random.Generator, disturbance_time: float) -> AttackSpec:
    if not 0.0 <= disturbance_time <= ONSET_LATEST:
        raise ValueError("disturbance_time must lie in [0, 30] s")
    target = TARGETS[int(rng.integers(len(TARGETS)))]
    t_start = float(rng.uniform(disturbance_time, ONSET_LATEST))
    f_i = float(rng.normal(FI_MEAN, FI_STD))
    f_f = float(rng.normal(FI_MEAN, FI_STD))
    subtlety = SUBTLETIES[int(rng.integers(2))]
    return AttackSpec(target=target, t_start=t_start, f_i=f_i, f_f=f_f, scale=1.0, subtlety=subtlety)


def injection_value(spec: AttackSpec, t: float, window_end: float) -> float:
    if not window_end > spec.t_start:
        raise ValueError("window_end must be after t_start")
    return spec.hook(window_end).injection(t)


def corrupt(signal_id: str, true_value: float, t: float, spec: AttackSpec, window_end: float = 60.0) -> float:
    return spec.hook(window_end)(signal_id, true_value, t)


def max_post_onset_ace(trace: SignalTrace, t_start: float) -> float:
    mask = trace.t >= t_start
    if not mask.any():
        return 0.0
    return float(max(np.abs(trace.ace1[mask]).max(), np.abs(trace.ace2[mask]).max()))


def simulate_attacked(scenario: ScenarioConfig, spec: Optional[AttackSpec]) -> SignalTrace:
    if spec is None:
        return simulate(scenario)
    return simulate(scenario, spec.hook(scenario.window))


def enforce_ace_limit(
    scenario: ScenarioConfig,
    spec: AttackSpec,
    policy: AceLimitPolicy = AceLimitPolicy(),
    return_trace: bool = False,
):
    """Shrink ``spec.scale`` until the post-onset |ACE| respects the subtlety limit.

    Returns the final spec (and its trace when ``return_trace`` is set).
    """
    limit = policy.limit(spec.subtlety)
    bound = limit * (1.0 + policy.tolerance)
    trace = simulate_attacked(scenario, spec)
    peak = max_post_onset_ace(trace, spec.t_start)
    n_iter = 0
    while peak > bound:
        if n_iter == MAX_RESCALE_ITER:
            raise RescaleError(
                f"max|ACE| = {peak:.6g} still above {bound:.6g} after {MAX_RESCALE_ITER} rescales"
            )
        spec = spec.rescaled(spec.scale * limit / peak)
        trace = simulate_attacked(scenario, spec)
        peak = max_post_onset_ace(trace, spec.t_start)
        n_iter += 1
    logger.debug("ACE limit %.2f met after %d rescales (peak %.6g)", limit, n_iter, peak)
    return (spec, trace) if return_trace else spec
