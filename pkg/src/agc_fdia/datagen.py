"""Scenario sampling, labeled sample generation, dataset I/O and splitting.

Per-sample randomness comes from ``numpy.random.SeedSequence([master_seed,
index, stream])`` where stream 0 drives the scenario (disturbance, mode,
noise seed) and stream 1 drives the attack. A normal sample and an attacked
sample with the same (master_seed, index) therefore share scenario and noise,
and generation order never matters.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Iterator, Optional

import numpy as np

from . import features as feat
from .attack import AceLimitPolicy, AttackSpec, RescaleError, enforce_ace_limit, sample_attack
from .plant import (
    DisturbanceSpec,
    ScenarioConfig,
    SignalTrace,
    SystemParams,
    ace_values,
    default_system,
    simulate,
)

logger = logging.getLogger(__name__)

FORMAT_NAME = "agc-fdia-dataset"
FORMAT_VERSION = 1
SEED_MIXING = "numpy.random.SeedSequence([master_seed, index, stream]); stream 0 = scenario, 1 = attack"
DISTURBANCE_STD = 0.02
ATTACK_RETRIES = 16
LABELS = ("normal", "attack")


@dataclass
class Sample:
    id: int
    label: str
    trace: SignalTrace
    attack: Optional[AttackSpec]
    scenario: ScenarioConfig
    features: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if self.label not in LABELS:
            raise ValueError(f"bad label {self.label!r}")
        if (self.label == "attack") != (self.attack is not None):
            raise ValueError("label 'attack' iff an attack spec is present")

    @property
    def y(self) -> int:
        return 1 if self.label == "attack" else 0

    def to_json(self) -> str:
        obj = {
            "id": self.id,
            "label": self.label,
            "scenario": self.scenario.to_dict(),
            "attack": None if self.attack is None else self.attack.to_dict(),
            "trace": {
                "t_s": self.trace.t.tolist(),
                "delta_f1_pu": self.trace.delta_f1.tolist(),
                "delta_f2_pu": self.trace.delta_f2.tolist(),
                "delta_p_tie_pu": self.trace.delta_p_tie.tolist(),
            },
            "features": feat.as_dict(self.features),
        }
        return json.dumps(obj, separators=(",", ":"))

    @classmethod
    def from_json(cls, line: str) -> "Sample":
        obj = json.loads(line)
        scenario = ScenarioConfig.from_dict(obj["scenario"])
        tr = obj["trace"]
        f1, f2, pt = (np.array(tr[k], dtype=float) for k in ("delta_f1_pu", "delta_f2_pu", "delta_p_tie_pu"))
        ace1, ace2 = ace_values(scenario.system, f1, f2, pt)
        trace = SignalTrace(np.array(tr["t_s"], dtype=float), f1, f2, pt, ace1, ace2)
        attack = None if obj["attack"] is None else AttackSpec.from_dict(obj["attack"])
        return cls(obj["id"], obj["label"], trace, attack, scenario, feat.from_dict(obj["features"]))


@dataclass
class DatasetSplit:
    train: list
    test: list
    llm_eval: list


def _stream(master_seed: int, index: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([master_seed, index, stream]))


def sample_scenario(rng: np.random.Generator, nonlinear_fraction: float = 0.5,
                    system: Optional[SystemParams] = None) -> ScenarioConfig:
    area = int(rng.integers(1, 3))
    magnitude = float(rng.normal(0.0, DISTURBANCE_STD))
    start = float(rng.uniform(0.0, 30.0))
    nonlinear = bool(rng.random() < nonlinear_fraction)
    seed = int(rng.integers(0, 2**64, dtype=np.uint64))
    if system is None:
        system = default_system(nonlinear_mode=nonlinear)
    else:
        system = SystemParams.from_dict({**system.to_dict(), "nonlinear_mode": nonlinear})
    return ScenarioConfig(system=system, disturbance=DisturbanceSpec(area, magnitude, start), seed=seed)


def generate_sample(index: int, master_seed: int, attacked: bool,
                    policy: AceLimitPolicy = AceLimitPolicy(),
                    nonlinear_fraction: float = 0.5) -> Sample:
    scenario = sample_scenario(_stream(master_seed, index, 0), nonlinear_fraction)
    if not attacked:
        trace = simulate(scenario)
        return Sample(index, "normal", trace, None, scenario, feat.extract(trace))

    rng = _stream(master_seed, index, 1)
    for attempt in range(ATTACK_RETRIES):
        spec = sample_attack(rng, scenario.disturbance.start_time)
        try:
            spec, trace = enforce_ace_limit(scenario, spec, policy, return_trace=True)
        except RescaleError as exc:
            logger.info("sample %d: attack draw %d rejected (%s)", index, attempt, exc)
            continue
        return Sample(index, "attack", trace, spec, scenario, feat.extract(trace))
    raise RescaleError(f"sample {index}: no admissible attack after {ATTACK_RETRIES} draws")


def is_attacked_index(index: int) -> bool:
    # odd ids are attacked, so any even n is balanced
    return index % 2 == 1


def _sample_line(args) -> str:
    index, master_seed, nonlinear_fraction = args
    return generate_sample(index, master_seed, is_attacked_index(index),
                           nonlinear_fraction=nonlinear_fraction).to_json()


def dataset_header(n: int, master_seed: int, nonlinear_fraction: float) -> dict:
    return {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "master_seed": master_seed,
        "n": n,
        "seed_mixing": SEED_MIXING,
        "attacked_ids": "odd",
        "generator": {
            "window_s": 60.0,
            "record_dt_s": 0.3,
            "internal_dt_s": 0.01,
            "disturbance_std_pu": DISTURBANCE_STD,
            "nonlinear_fraction": nonlinear_fraction,
            "ace_limit_policy": vars(AceLimitPolicy()).copy(),
            "attack_retries": ATTACK_RETRIES,
            "features": list(feat.FEATURE_NAMES),
        },
    }


def generate_dataset(path, n: int = 10000, master_seed: int = 0, workers: int = 1,
                     nonlinear_fraction: float = 0.5, progress=None) -> Path:
    """Write ``n`` samples (half attacked) as JSON lines after a header line."""
    if n <= 0 or n % 2:
        raise ValueError("n must be a positive even number")
    path = Path(path)
    header = dataset_header(n, master_seed, nonlinear_fraction)
    jobs = ((i, master_seed, nonlinear_fraction) for i in range(n))
    tmp = path.with_name(path.name + ".partial")
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, separators=(",", ":")) + "\n")
        if workers <= 1:
            lines: Iterable[str] = map(_sample_line, jobs)
            _write_lines(fh, lines, progress)
        else:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                # map() yields in submission order, so output is index-ordered
                _write_lines(fh, pool.map(_sample_line, jobs, chunksize=32), progress)
    os.replace(tmp, path)
    return path


def _write_lines(fh, lines, progress):
    for i, line in enumerate(lines):
        try:
            fh.write(line + "\n")
        except OSError as exc:
            raise OSError(f"failed writing sample {i}: {exc}") from exc
        if progress is not None:
            progress(i)


def read_header(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
    if header.get("format") != FORMAT_NAME:
        raise ValueError(f"{path}: not a {FORMAT_NAME} file")
    if header.get("version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported dataset version {header.get('version')}")
    return header


def iter_dataset(path) -> Iterator[Sample]:
    read_header(path)
    with open(path, encoding="utf-8") as fh:
        fh.readline()
        for line in fh:
            if line.strip():
                yield Sample.from_json(line)


def read_dataset(path) -> list:
    return list(iter_dataset(path))


def split_dataset(samples: list, split_seed: int = 0, holdout_per_class: int = 200,
                  train_fraction: float = 0.7) -> DatasetSplit:
    """Hold out ``holdout_per_class`` samples per label, then a stratified train/test split."""
    rng = np.random.default_rng(split_seed)
    train, test, llm_eval = [], [], []
    for label in LABELS:
        members = sorted((s for s in samples if s.label == label), key=lambda s: s.id)
        if len(members) < holdout_per_class:
            raise ValueError(
                f"need at least {holdout_per_class} '{label}' samples, have {len(members)}"
            )
        order = rng.permutation(len(members))
        held = [members[i] for i in order[:holdout_per_class]]
        rest = [members[i] for i in order[holdout_per_class:]]
        n_train = int(round(train_fraction * len(rest)))
        llm_eval.extend(held)
        train.extend(rest[:n_train])
        test.extend(rest[n_train:])
    by_id = lambda s: s.id  # noqa: E731
    return DatasetSplit(sorted(train, key=by_id), sorted(test, key=by_id), sorted(llm_eval, key=by_id))


# --------------------------------------------------------------------------
# golden scenario: tie-line attack of 0.2138 pu starting at 15 s
# --------------------------------------------------------------------------

GOLDEN_ID = "golden"


def golden_config() -> tuple[ScenarioConfig, AttackSpec]:
    raw = json.loads(resources.files("agc_fdia.data").joinpath("golden_tieline.json").read_text())
    return ScenarioConfig.from_dict(raw["scenario"]), AttackSpec.from_dict(raw["attack"])


def golden_trace() -> dict:
    raw = json.loads(resources.files("agc_fdia.data").joinpath("golden_tieline.json").read_text())
    return raw["trace"]


def golden_sample() -> tuple[Sample, Sample]:
    """(attack-free twin, attacked sample) for the golden configuration."""
    scenario, spec = golden_config()
    normal = simulate(scenario)
    attacked = simulate(scenario, spec.hook(scenario.window))
    return (
        Sample(-1, "normal", normal, None, scenario, feat.extract(normal)),
        Sample(-1, "attack", attacked, spec, scenario, feat.extract(attacked)),
    )
