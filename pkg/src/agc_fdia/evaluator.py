"""Explanation scoring, shot sweeps and Markdown/CSV reports."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

from .detector import ClassifierMetrics
from .explainer import (
    ExplanationFailure,
    ExplanationReport,
    LlmClient,
    build_bundle,
    build_system_prompt,
    explain_many,
    select_few_shots,
)
from .explainer.prompts import DEFAULT_TOKEN_BUDGET

logger = logging.getLogger(__name__)


class AlignmentError(ValueError):
    pass


@dataclass
class ExplanationMetrics:
    model: str
    shots: int
    target_accuracy: float
    mae_magnitude: float
    mae_onset: float
    mean_latency: float
    n_evaluated: int
    # every sample without a parsed report, transport failures included
    n_parse_failures: int

    def as_dict(self) -> dict:
        return asdict(self)


def score(outcomes: Sequence, truths: Mapping, model: str = "", shots: int = 0) -> ExplanationMetrics:
    """Compare reports with ground-truth attacks keyed by sample id.

    Failed samples are counted but excluded from accuracy and the MAEs.
    """
    ids = [o.sample_id for o in outcomes]
    if len(set(ids)) != len(ids) or set(ids) != set(truths):
        raise AlignmentError("reports and ground truth cover different sample ids")
    # id order makes the float sums independent of input order
    ordered = sorted(outcomes, key=lambda o: o.sample_id)
    reports = [o for o in ordered if isinstance(o, ExplanationReport)]
    n = len(reports)
    failures = len(ordered) - n
    if n == 0:
        return ExplanationMetrics(model, shots, 0.0, math.nan, math.nan, math.nan, 0, failures)
    hits = sum(r.attack_target == truths[r.sample_id].target for r in reports)
    mae_mag = sum(abs(r.attack_magnitude - truths[r.sample_id].magnitude) for r in reports) / n
    mae_t = sum(abs(r.attack_start_time - truths[r.sample_id].t_start) for r in reports) / n
    latency = sum(r.latency for r in reports) / n
    return ExplanationMetrics(model, shots, 100.0 * hits / n, mae_mag, mae_t, latency, n, failures)


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------

CSV_COLUMNS = [
    "table", "model", "shots", "accuracy", "recall", "precision", "f1", "latency_s",
    "target_accuracy_pct", "mae_magnitude_pu", "mae_time_s", "n_evaluated", "n_parse_failures",
]


def _sorted_cls(rows):
    return sorted(rows, key=lambda m: m.model)


def _sorted_exp(rows):
    return sorted(rows, key=lambda m: (m.model, m.shots))


def render_markdown(classifier: Sequence[ClassifierMetrics], explanation: Sequence[ExplanationMetrics],
                    metadata: Optional[dict] = None) -> str:
    out = ["# AGC attack detection and explanation report", ""]
    for k, v in (metadata or {}).items():
        out.append(f"- **{k}**: {v}")
    if metadata:
        out.append("")
    if classifier:
        out += [
            "## Performance of ML models in attack detection",
            "",
            "| Model | Accuracy | Recall | Precision | F1 Score | Latency (s) |",
            "|---|---|---|---|---|---|",
        ]
        for m in _sorted_cls(classifier):
            out.append(f"| {m.model} | {m.accuracy:.4f} | {m.recall:.4f} | {m.precision:.4f} "
                       f"| {m.f1:.4f} | {m.mean_latency:.3f} |")
        out.append("")
    if explanation:
        out += [
            "## Performance of LLM models in attack explanation",
            "",
            "| Model | Shots | Accuracy of Attack Target (%) | MAE of Attack Magnitude "
            "| MAE of Attack Time | Latency (s) | Evaluated | Failures |",
            "|---|---|---|---|---|---|---|---|",
        ]
        for m in _sorted_exp(explanation):
            out.append(f"| {m.model} | {m.shots} | {m.target_accuracy:.2f} | {m.mae_magnitude:.5f} "
                       f"| {m.mae_onset:.2f} | {m.mean_latency:.3f} | {m.n_evaluated} | {m.n_parse_failures} |")
        out.append("")
    return "\n".join(out)


def render_csv(classifier: Sequence[ClassifierMetrics], explanation: Sequence[ExplanationMetrics],
               metadata: Optional[dict] = None) -> str:
    buf = io.StringIO()
    for k, v in (metadata or {}).items():
        buf.write(f"# {k}={json.dumps(v, sort_keys=True)}\n")
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    for m in _sorted_cls(classifier):
        w.writerow({"table": "detection", "model": m.model, "accuracy": repr(m.accuracy),
                    "recall": repr(m.recall), "precision": repr(m.precision), "f1": repr(m.f1),
                    "latency_s": repr(m.mean_latency)})
    for m in _sorted_exp(explanation):
        w.writerow({"table": "explanation", "model": m.model, "shots": m.shots,
                    "latency_s": repr(m.mean_latency), "target_accuracy_pct": repr(m.target_accuracy),
                    "mae_magnitude_pu": repr(m.mae_magnitude), "mae_time_s": repr(m.mae_onset),
                    "n_evaluated": m.n_evaluated, "n_parse_failures": m.n_parse_failures})
    return buf.getvalue()


def parse_csv(text: str):
    """Inverse of :func:`render_csv`: (classifier rows, explanation rows, metadata)."""
    metadata, body = {}, []
    for line in text.splitlines(keepends=True):
        if line.startswith("# "):
            key, _, value = line[2:].rstrip("\n").partition("=")
            metadata[key] = json.loads(value)
        else:
            body.append(line)
    classifier, explanation = [], []
    for row in csv.DictReader(body):
        if row["table"] == "detection":
            classifier.append(ClassifierMetrics(
                accuracy=float(row["accuracy"]), recall=float(row["recall"]),
                precision=float(row["precision"]), f1=float(row["f1"]),
                mean_latency=float(row["latency_s"]), model=row["model"],
            ))
        elif row["table"] == "explanation":
            explanation.append(ExplanationMetrics(
                model=row["model"], shots=int(row["shots"]),
                target_accuracy=float(row["target_accuracy_pct"]),
                mae_magnitude=float(row["mae_magnitude_pu"]), mae_onset=float(row["mae_time_s"]),
                mean_latency=float(row["latency_s"]), n_evaluated=int(row["n_evaluated"]),
                n_parse_failures=int(row["n_parse_failures"]),
            ))
        else:
            raise ValueError(f"unknown table {row['table']!r}")
    return classifier, explanation, metadata


def render_report(classifier: Sequence[ClassifierMetrics], explanation: Sequence[ExplanationMetrics],
                  metadata: Optional[dict], out_dir) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    md, cs = out_dir / "report.md", out_dir / "report.csv"
    md.write_text(render_markdown(classifier, explanation, metadata), encoding="utf-8")
    cs.write_text(render_csv(classifier, explanation, metadata), encoding="utf-8")
    return md, cs


# --------------------------------------------------------------------------
# shot sweep
# --------------------------------------------------------------------------

@dataclass
class SweepResult:
    metrics: list
    outcomes: dict  # shots -> list of reports/failures


def run_shot_sweep(eval_samples: Sequence, pool: Sequence, system, client: LlmClient,
                   shot_list: Sequence[int], detect: Callable, model_name: str = "",
                   shot_seed: int = 0, budget: int = DEFAULT_TOKEN_BUDGET,
                   decimate: Optional[int] = None) -> SweepResult:
    """Explain every attack-flagged eval sample at each shot count and score it.

    Samples the detector labels normal are skipped, mirroring the alarm-only
    explanation policy.
    """
    holdout = {s.id for s in eval_samples}
    detections = {s.id: detect(s) for s in eval_samples}
    flagged = [s for s in eval_samples if s.attack is not None and detections[s.id].label == "attack"]
    truths = {s.id: s.attack for s in flagged}
    metrics, outcomes = [], {}
    for k in shot_list:
        shots = select_few_shots(pool, k, shot_seed, detect, holdout_ids=holdout)
        system_text = build_system_prompt(system, shots)
        bundles = [build_bundle(system_text, s, detections[s.id], k, budget, decimate) for s in flagged]
        results = explain_many(client, bundles)
        m = score(results, truths, model=model_name or client.config.model_name, shots=k)
        logger.info("shots=%d: %s", k, m)
        metrics.append(m)
        outcomes[k] = results
    return SweepResult(metrics, outcomes)


def outcome_record(o) -> dict:
    if isinstance(o, ExplanationFailure):
        return {"status": "failed", **o.as_dict()}
    return {"status": "ok", **o.as_dict()}
