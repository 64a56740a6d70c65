"""System prompt, query and few-shot construction.

The query carries only per-signal statistics, noise settings and the
detector's verdict. Attack ground truth (onset, injection endpoints, scale,
subtlety, magnitude, target) never appears in it; it is used only for the
gold answers of few-shot examples, which come from outside the evaluation
holdout.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from ..attack import TARGETS
from ..detector import DetectionResult
from ..features import STATS, as_dict
from ..plant import SIGNALS, SystemParams

DEFAULT_TOKEN_BUDGET = 16000

SIGNAL_LABELS = {
    "delta_f1": "frequency deviation of area 1 (pu)",
    "delta_f2": "frequency deviation of area 2 (pu)",
    "delta_p_tie": "tie-line power flow deviation, positive from area 1 to area 2 (pu)",
}

# keys a query may contain, besides the signal names under "signals"
QUERY_KEYS = frozenset(
    {"sample_id", "signals", "noise", "process_noise_std", "measurement_noise_std",
     "classifier", "label", "confidence", "prob_normal", "prob_attack", "decimated_series",
     "t_s", *SIGNALS, *STATS}
)
# ground-truth names that must never reach a query
FORBIDDEN_QUERY_TOKENS = ("t_start", "f_i", "f_f", "magnitude", "target", "scale", "subtlety", "subtle", "noticeable")

ANSWER_SCHEMA = {
    "attack_target": "one of " + ", ".join(TARGETS),
    "attack_magnitude_pu": "number, largest absolute injected value in pu",
    "attack_start_time_s": "number, attack onset in seconds from the start of the window (0 to 60)",
    "justification": "string, short operator-facing reasoning that cites the statistics",
}


class QueryMisuseError(ValueError):
    """Queries are only built for samples the detector flagged as attacks."""


class BudgetError(ValueError):
    pass


@dataclass(frozen=True)
class FewShotExample:
    sample_id: int
    metadata: dict
    answer: dict


@dataclass(frozen=True)
class PromptBundle:
    system_text: str
    query_text: str
    shot_count: int
    estimated_tokens: int
    sample_id: int = -1


def estimate_tokens(text: str) -> int:
    """Roughly four characters per token."""
    return math.ceil(len(text) / 4)


def _fmt_json(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=False)


def query_metadata(sample, detection: DetectionResult, decimate: Optional[int] = None) -> dict:
    stats = as_dict(sample.features)
    signals = {s: {st: stats[f"{s}.{st}"] for st in STATS} for s in SIGNALS}
    meta = {
        "sample_id": sample.id,
        "signals": signals,
        "noise": {
            "process_noise_std": sample.scenario.process_noise_std,
            "measurement_noise_std": sample.scenario.measurement_noise_std,
        },
        "classifier": detection.as_dict(),
    }
    if decimate:
        tr = sample.trace
        meta["decimated_series"] = {
            "t_s": tr.t[::decimate].tolist(),
            **{s: tr.signal(s)[::decimate].tolist() for s in SIGNALS},
        }
    return meta


def gold_answer(spec) -> dict:
    return {
        "attack_target": spec.target,
        "attack_magnitude_pu": spec.magnitude,
        "attack_start_time_s": spec.t_start,
    }


def build_query(sample, detection: DetectionResult, decimate: Optional[int] = None) -> str:
    if detection.label != "attack":
        raise QueryMisuseError("explanations are only requested for attack-labelled detections")
    meta = query_metadata(sample, detection, decimate)
    return (
        "The detector raised an alarm for the sample below. Infer which measurement was "
        "falsified, how large the false offset is and when it began, and justify your answer.\n"
        "Sample metadata:\n" + _fmt_json(meta) + "\n"
    )


def _parameter_listing(system: SystemParams) -> str:
    a1, a2 = system.area1, system.area2
    rows = [
        ("H1, H2", f"{a1.inertia_H}, {a2.inertia_H}", "inertia constants (s)"),
        ("D1, D2", f"{a1.damping_D}, {a2.damping_D}", "load damping (pu power / pu frequency)"),
        ("B1, B2", f"{a1.bias_B}, {a2.bias_B}", "frequency bias (pu power / pu frequency)"),
        ("Tg1, Tg2", f"{a1.governor_Tg}, {a2.governor_Tg}", "governor time constants (s)"),
        ("Tt1, Tt2", f"{a1.turbine_Tt}, {a2.turbine_Tt}", "turbine time constants (s)"),
        ("R1, R2", f"{a1.droop_R}, {a2.droop_R}", "speed regulation (pu)"),
        ("T12", f"{system.tie_sync_T12}", "synchronizing coefficient (pu)"),
        ("GDB", f"{system.deadband_width}", "governor deadband, total width (pu frequency)"),
        ("GRC", f"+/-{system.grc_limit:g}", "generation rate limit (pu/s)"),
        ("Ki1, Ki2", f"{a1.agc_gain_Ki}, {a2.agc_gain_Ki}", "AGC integral gains"),
    ]
    return "\n".join(f"- {name} = {val}: {desc}" for name, val, desc in rows)


def _shot_block(i: int, shot: FewShotExample) -> str:
    return (
        f"### Example {i}\n"
        f"Input:\n{_fmt_json(shot.metadata)}\n"
        f"Output:\n{json.dumps(shot.answer)}\n"
    )


def build_system_prompt(system: SystemParams, shots: Sequence[FewShotExample] = ()) -> str:
    feature_list = ", ".join(STATS)
    signal_list = "\n".join(f"- {s}: {SIGNAL_LABELS[s]}" for s in SIGNALS)
    schema = "\n".join(f'  "{k}": {v}' for k, v in ANSWER_SCHEMA.items())
    parts = [
        "You are a cybersecurity analyst for a power system control room. A machine-learning "
        "detector monitors the Automatic Generation Control (AGC) of a two-area interconnected "
        "power system and has flagged a possible false data injection attack. Your job is to "
        "explain the alarm to an operator.",
        "## System\n"
        "Two control areas, each with a governor, a turbine and a load, are connected by a "
        "tie-line. Each area's AGC integrates its Area Control Error, ACE1 = B1*delta_f1 + "
        "delta_p_tie and ACE2 = B2*delta_f2 - delta_p_tie, to return frequency and scheduled "
        "interchange to nominal after a load step. The simulation may include governor "
        "deadband and generation rate constraints.\n" + _parameter_listing(system),
        "## Signals\n"
        "Each sample covers 60 s recorded every 0.3 s (200 points) of three measurements:\n"
        + signal_list + "\n"
        "An attacker adds a false offset to exactly one of these measurements from some onset "
        "time onwards; the corrupted value feeds the AGC loop, so the other signals react too.",
        "## Metadata\n"
        f"For every signal you receive: {feature_list}. 'slope' is the least-squares trend in "
        "pu/s; 'std' and 'skewness' are population moments. You also receive the noise "
        "settings and the detector output (label, confidence, class probabilities).",
        "## Output format\n"
        "Reply with a single JSON object and nothing else:\n{\n" + schema + "\n}",
    ]
    if shots:
        parts.append("## Worked examples\n" + "\n".join(_shot_block(i + 1, s) for i, s in enumerate(shots)))
    return "\n\n".join(parts) + "\n"


def select_few_shots(pool: Sequence, k: int, seed: int = 0,
                     detect: Optional[Callable] = None, holdout_ids=()) -> list:
    """Seeded draw of ``k`` attacked samples, balanced across the three targets.

    Each target gets ``k // 3`` examples and the remainder goes round-robin in
    target order. ``detect`` maps a sample to its DetectionResult; without it
    the example shows a confident attack verdict.
    """
    pool = [s for s in pool if s.attack is not None]
    if k > len(pool):
        raise ValueError(f"cannot draw {k} examples from a pool of {len(pool)}")
    held = set(holdout_ids)
    if any(s.id in held for s in pool):
        raise ValueError("few-shot pool overlaps the evaluation holdout")
    if k == 0:
        return []
    rng = np.random.default_rng(seed)
    groups = []
    for target in TARGETS:
        members = sorted((s for s in pool if s.attack.target == target), key=lambda s: s.id)
        groups.append([members[i] for i in rng.permutation(len(members))])

    quota = [k // 3 + (1 if i < k % 3 else 0) for i in range(3)]
    # move quota away from targets that run short, round-robin
    short = sum(max(0, q - len(g)) for q, g in zip(quota, groups))
    quota = [min(q, len(g)) for q, g in zip(quota, groups)]
    while short:
        for i, g in enumerate(groups):
            if short and quota[i] < len(g):
                quota[i] += 1
                short -= 1

    chosen = []
    for r in range(max(quota)):
        for i, g in enumerate(groups):
            if r < quota[i]:
                chosen.append(g[r])

    shots = []
    for s in chosen:
        det = detect(s) if detect else DetectionResult("attack", 1.0, 0.0, 1.0)
        meta = query_metadata(s, DetectionResult(det.label, det.confidence, det.prob_normal, det.prob_attack))
        shots.append(FewShotExample(s.id, meta, gold_answer(s.attack)))
    return shots


def build_bundle(system_text: str, sample, detection: DetectionResult, shot_count: int,
                 budget: int = DEFAULT_TOKEN_BUDGET, decimate: Optional[int] = None) -> PromptBundle:
    query = build_query(sample, detection, decimate)
    tokens = estimate_tokens(system_text) + estimate_tokens(query)
    if tokens > budget:
        raise BudgetError(f"prompt needs ~{tokens} tokens, budget is {budget}")
    return PromptBundle(system_text, query, shot_count, tokens, sample.id)


def query_keys(query_text: str) -> set:
    """All object keys in the JSON block of a query (for leakage scans)."""
    start = query_text.index("{")
    keys = set()

    def walk(o):
        if isinstance(o, dict):
            for k, v in o.items():
                keys.add(k)
                walk(v)
        elif isinstance(o, list):
            for v in o:
                walk(v)

    walk(json.loads(query_text[start:]))
    return keys
