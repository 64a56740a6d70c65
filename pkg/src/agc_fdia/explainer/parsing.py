"""Extraction and validation of the structured explanation in an LLM reply."""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass
from typing import Callable, Optional

from ..attack import TARGETS

REPAIR_INSTRUCTION = (
    "Your previous reply could not be parsed. Reply again with only one JSON object containing "
    "the keys attack_target, attack_magnitude_pu, attack_start_time_s and justification."
)

# normalised spelling -> canonical target; normalisation lowercases and drops
# whitespace, '_', '-', '\\', '{', '}', '$' and '.'
TARGET_ALIASES = {
    **{a: "delta_f1" for a in (
        "deltaf1", "δf1", "df1", "f1", "frequency1", "freq1", "area1frequency",
        "frequencydeviationarea1", "frequencydeviation1", "deltaomega1",
    )},
    **{a: "delta_f2" for a in (
        "deltaf2", "δf2", "df2", "f2", "frequency2", "freq2", "area2frequency",
        "frequencydeviationarea2", "frequencydeviation2", "deltaomega2",
    )},
    **{a: "delta_p_tie" for a in (
        "deltaptie", "δptie", "dptie", "ptie", "tieline", "tielinepower", "tielineflow",
        "tielinepowerflow", "tie", "deltaptieline",
    )},
}
_STRIP = re.compile(r"[\s_\-\\{}$.]")


class ExplanationParseError(ValueError):
    """The reply (and its single repair) held no valid explanation object."""

    def __init__(self, message: str, raw: str, repaired_raw: Optional[str] = None):
        super().__init__(message)
        self.raw = raw
        self.repaired_raw = repaired_raw


@dataclass
class ExplanationReport:
    attack_target: str
    attack_magnitude: float
    attack_start_time: float
    justification: str
    raw_response: str = ""
    latency: float = 0.0
    sample_id: int = -1
    repaired: bool = False

    def as_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "attack_target": self.attack_target,
            "attack_magnitude_pu": self.attack_magnitude,
            "attack_start_time_s": self.attack_start_time,
            "justification": self.justification,
            "latency_s": self.latency,
            "repaired": self.repaired,
            "raw_response": self.raw_response,
        }


def canonical_target(name) -> Optional[str]:
    if not isinstance(name, str):
        return None
    if name in TARGETS:
        return name
    return TARGET_ALIASES.get(_STRIP.sub("", name.lower()))


def _balanced_objects(text: str):
    """Yield every brace-balanced ``{...}`` substring, outermost first, in order."""
    i = text.find("{")
    while i != -1:
        depth, in_str, esc = 0, False, False
        for j in range(i, len(text)):
            c = text[j]
            if in_str:
                if esc:
                    esc = False
                elif c == "\\":
                    esc = True
                elif c == '"':
                    in_str = False
            elif c == '"':
                in_str = True
            elif c == "{":
                depth += 1
            elif c == "}":
                depth -= 1
                if depth == 0:
                    yield text[i:j + 1]
                    break
        i = text.find("{", i + 1)


def extract_object(text: str) -> Optional[dict]:
    for candidate in _balanced_objects(text):
        try:
            obj = json.loads(candidate)
        except json.JSONDecodeError:
            continue
        if isinstance(obj, dict):
            return obj
    return None


def _number(v) -> Optional[float]:
    if isinstance(v, bool):
        return None
    if isinstance(v, (int, float)):
        return float(v)
    if isinstance(v, str):
        try:
            return float(v.strip().rstrip("s").replace("pu", "").strip())
        except ValueError:
            return None
    return None


def validate(obj: dict) -> tuple:
    """Return (target, magnitude, onset, justification) or raise ValueError."""
    target = canonical_target(obj.get("attack_target"))
    if target is None:
        raise ValueError(f"unknown attack_target {obj.get('attack_target')!r}")
    mag = _number(obj.get("attack_magnitude_pu"))
    if mag is None or not math.isfinite(mag):
        raise ValueError("attack_magnitude_pu must be a finite number")
    onset = _number(obj.get("attack_start_time_s"))
    if onset is None or not 0.0 <= onset <= 60.0:
        raise ValueError("attack_start_time_s must be a number in [0, 60]")
    just = obj.get("justification", "")
    if not isinstance(just, str):
        raise ValueError("justification must be a string")
    return target, mag, onset, just


def _try_parse(raw: str):
    obj = extract_object(raw)
    if obj is None:
        raise ValueError("no JSON object found")
    return validate(obj)


def parse_explanation(raw: str, repair: Optional[Callable[[str], str]] = None) -> ExplanationReport:
    """Parse a reply; on failure ask ``repair(raw)`` for exactly one corrected reply."""
    try:
        fields = _try_parse(raw)
        return ExplanationReport(*fields, raw_response=raw)
    except ValueError as first:
        if repair is None:
            raise ExplanationParseError(f"unparseable explanation: {first}", raw) from None
    fixed = repair(raw)
    try:
        fields = _try_parse(fixed)
    except ValueError as second:
        raise ExplanationParseError(f"unparseable explanation after repair: {second}", raw, fixed) from None
    return ExplanationReport(*fields, raw_response=fixed, repaired=True)
