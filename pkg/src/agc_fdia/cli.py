"""Command-line entry point: ``agc-fdia <subcommand>``.

Settings come from (highest first) command-line flags, a JSON run config
(``--config``), then built-in defaults. Unknown config keys are rejected.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .attack import AttackSpec
from .datagen import (
    GOLDEN_ID,
    Sample,
    generate_dataset,
    golden_sample,
    read_dataset,
    read_header,
    split_dataset,
)
from .detector import (
    ClassifierMetrics,
    evaluate_classifier,
    load_model,
    predict,
    save_model,
    train_gbdt,
    train_rf,
    tune_random_search,
)
from .detector.ensemble import GBDT_DEFAULTS, RF_DEFAULTS
from .evaluator import (
    ExplanationMetrics,
    outcome_record,
    render_report,
    run_shot_sweep,
    score,
)
from .explainer import (
    ExplanationFailure,
    ExplanationReport,
    LlmClient,
    LlmClientConfig,
    MockBackend,
    RetryPolicy,
    build_bundle,
    build_system_prompt,
    explain_many,
    gold_answer,
    select_few_shots,
)
from .plant import DisturbanceSpec, ScenarioConfig, SystemParams, default_system, simulate

logger = logging.getLogger("agc_fdia")

BACKENDS = ("live", "mock-echo", "mock-fault", "mock-fixed")


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# run configuration
# --------------------------------------------------------------------------

@dataclass
class Paths:
    dataset: str = "data/dataset.jsonl"
    model: str = "data/model.json"
    metrics: str = "data/metrics.json"
    explanations: str = "data/explanations.jsonl"
    reports: str = "reports"
    plots: str = "plots"


@dataclass
class Seeds:
    master: int = 0
    split: int = 0
    tuning: int = 0
    training: int = 0
    shots: int = 0


@dataclass
class DetectorSettings:
    kind: str = "gradient_boosted"
    hyperparams: dict = field(default_factory=dict)
    tune_trials: int = 0


@dataclass
class ExplainerSettings:
    backend: str = "mock-echo"
    base_url: str = "https://api.openai.com"
    model_name: str = "gpt-4o-mini"
    request_seed: int = 0
    max_in_flight: int = 4
    max_attempts: int = 3
    backoff_base: float = 0.5
    token_budget: int = 16000
    decimate: Optional[int] = None
    fixed_response: str = ""
    garbage_rate: float = 0.1


@dataclass
class RunConfig:
    paths: Paths = field(default_factory=Paths)
    seeds: Seeds = field(default_factory=Seeds)
    plant: dict = field(default_factory=dict)
    detector: DetectorSettings = field(default_factory=DetectorSettings)
    explainer: ExplainerSettings = field(default_factory=ExplainerSettings)
    shots: list = field(default_factory=lambda: [0, 5, 10, 20])
    limit: int = 100
    n: int = 10000
    workers: int = 1
    nonlinear_fraction: float = 0.5


_SECTIONS = {"paths": Paths, "seeds": Seeds, "detector": DetectorSettings, "explainer": ExplainerSettings}


def load_config(path: Optional[str]) -> RunConfig:
    cfg = RunConfig()
    if not path:
        return cfg
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    known = {f.name for f in fields(RunConfig)}
    for key, value in raw.items():
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        if key in _SECTIONS:
            section_cls = _SECTIONS[key]
            allowed = {f.name for f in fields(section_cls)}
            if not isinstance(value, dict):
                raise ConfigError(f"config section {key!r} must be an object")
            bad = set(value) - allowed
            if bad:
                raise ConfigError(f"unknown key(s) in {key!r}: {sorted(bad)}")
            setattr(cfg, key, replace(getattr(cfg, key), **value))
        elif key == "plant":
            allowed = {f.name for f in fields(SystemParams)} - {"area1", "area2", "nonlinear_mode"}
            bad = set(value) - allowed
            if bad:
                raise ConfigError(f"unknown plant override(s): {sorted(bad)}")
            cfg.plant = dict(value)
        else:
            setattr(cfg, key, value)
    return cfg


def _pick(flag, default):
    return default if flag is None else flag


def _system(cfg: RunConfig, nonlinear: bool = False) -> SystemParams:
    return default_system(nonlinear_mode=nonlinear, **cfg.plant)


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def _write_svg(fig, path: Path):
    import matplotlib

    matplotlib.rcParams["svg.hashsalt"] = "agc-fdia"
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})


def _figure():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _client(cfg: RunConfig, gold: dict, args) -> tuple:
    ex = cfg.explainer
    backend = _pick(getattr(args, "backend", None), ex.backend)
    if backend not in BACKENDS:
        raise ConfigError(f"unknown backend {backend!r}")
    client_cfg = LlmClientConfig(
        base_url=_pick(getattr(args, "base_url", None), ex.base_url),
        model_name=_pick(getattr(args, "llm_model", None), ex.model_name),
        request_seed=ex.request_seed,
        max_in_flight=ex.max_in_flight,
        retry=RetryPolicy(max_attempts=ex.max_attempts, backoff_base=ex.backoff_base),
        token_budget=ex.token_budget,
    )
    if backend == "live":
        return LlmClient(client_cfg), backend
    mode = backend.split("-", 1)[1]
    mock = MockBackend(mode=mode, gold=gold, fixed_response=ex.fixed_response,
                       garbage_rate=ex.garbage_rate, seed=cfg.seeds.shots)
    # offline runs record zero latency so their outputs are byte-reproducible
    client = LlmClient(replace(client_cfg, model_name=f"{client_cfg.model_name} ({backend})"),
                       transport=mock.transport(), clock=lambda: 0.0, sleep=lambda s: None)
    return client, backend


def _detector_fn(model):
    cache = {}

    def detect(sample):
        if sample.id not in cache:
            cache[sample.id] = predict(model, sample.features)
        return cache[sample.id]

    return detect


def _eval_subset(split, limit: int) -> list:
    attacked = [s for s in split.llm_eval if s.attack is not None]
    return attacked[:limit] if limit else attacked


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_simulate(args, cfg: RunConfig) -> int:
    system = _system(cfg, args.nonlinear)
    if args.ki is not None:
        system = system.with_agc_gain(args.ki)
    noise = 0.0 if args.no_noise else 1e-6
    scenario = ScenarioConfig(
        system=system,
        disturbance=DisturbanceSpec(args.area, args.magnitude, args.start),
        process_noise_std=noise, measurement_noise_std=noise,
        window=args.window, seed=_pick(args.seed, cfg.seeds.master),
    )
    spec = None
    if args.attack_target:
        spec = AttackSpec(args.attack_target, args.attack_start, args.f_i,
                          args.f_i if args.f_f is None else args.f_f)
    trace = simulate(scenario, None if spec is None else spec.hook(scenario.window))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps({
        "scenario": scenario.to_dict(),
        "attack": None if spec is None else spec.to_dict(),
        "trace": {
            "t_s": trace.t.tolist(),
            "delta_f1_pu": trace.delta_f1.tolist(),
            "delta_f2_pu": trace.delta_f2.tolist(),
            "delta_p_tie_pu": trace.delta_p_tie.tolist(),
            "ace1_pu": trace.ace1.tolist(),
            "ace2_pu": trace.ace2.tolist(),
        },
    }) + "\n")
    plt = _figure()
    fig, axes = plt.subplots(3, 1, sharex=True, figsize=(7, 6))
    for ax, name in zip(axes, ("delta_f1", "delta_f2", "delta_p_tie")):
        ax.plot(trace.t, trace.signal(name), lw=1)
        ax.set_ylabel(name + " (pu)")
        if spec is not None:
            ax.axvline(spec.t_start, color="k", ls="--", lw=0.8)
    axes[-1].set_xlabel("time (s)")
    _write_svg(fig, Path(args.svg) if args.svg else out.with_suffix(".svg"))
    plt.close(fig)
    print(f"wrote {out}")
    return 0


def cmd_gen(args, cfg: RunConfig) -> int:
    out = Path(_pick(args.out, cfg.paths.dataset))
    out.parent.mkdir(parents=True, exist_ok=True)
    n = _pick(args.n, cfg.n)
    generate_dataset(out, n=n, master_seed=_pick(args.seed, cfg.seeds.master),
                     workers=_pick(args.workers, cfg.workers),
                     nonlinear_fraction=cfg.nonlinear_fraction)
    print(f"wrote {n} samples to {out}")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    samples = read_dataset(_pick(args.dataset, cfg.paths.dataset))
    split = split_dataset(samples, _pick(args.split_seed, cfg.seeds.split))
    kind = _pick(args.kind, cfg.detector.kind)
    kind = {"gbdt": "gradient_boosted", "rf": "random_forest"}.get(kind, kind)
    seed = _pick(args.seed, cfg.seeds.training)
    hp = dict(cfg.detector.hyperparams)
    if args.n_trees is not None:
        hp["n_trees"] = args.n_trees
    if args.max_depth is not None:
        hp["max_depth"] = args.max_depth
    trials = _pick(args.tune_trials, cfg.detector.tune_trials)
    if trials:
        # tune on a stratified 80/20 carve-out of the training split
        inner = split_dataset(split.train, cfg.seeds.tuning, holdout_per_class=0, train_fraction=0.8)
        hp = tune_random_search(inner.train, inner.test, trials, seed=cfg.seeds.tuning, kind=kind,
                                train_seed=seed)
    fit = train_gbdt if kind == "gradient_boosted" else train_rf
    model = fit(split.train, hp, seed=seed)
    model_path = Path(_pick(args.model_out, cfg.paths.model))
    model_path.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, model_path)
    metrics = evaluate_classifier(model, split.test, name=args.name or kind)
    metrics_path = Path(_pick(args.metrics_out, cfg.paths.metrics))
    metrics_path.write_text(json.dumps(metrics.as_dict(), indent=1) + "\n")
    print(f"{kind}: accuracy={metrics.accuracy:.4f} recall={metrics.recall:.4f} "
          f"precision={metrics.precision:.4f} f1={metrics.f1:.4f} latency={metrics.mean_latency:.6f}s")
    return 0


def cmd_detect(args, cfg: RunConfig) -> int:
    model = load_model(_pick(args.model, cfg.paths.model))
    samples = read_dataset(_pick(args.dataset, cfg.paths.dataset))
    if args.sample is not None:
        samples = [s for s in samples if s.id == args.sample]
        if not samples:
            raise ConfigError(f"sample {args.sample} not in dataset")
    lines = []
    for s in samples:
        det = predict(model, s.features)
        lines.append(json.dumps({"sample_id": s.id, "true_label": s.label, **det.as_dict()}))
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def _explain_setup(args, cfg):
    samples = read_dataset(_pick(args.dataset, cfg.paths.dataset))
    split = split_dataset(samples, _pick(args.split_seed, cfg.seeds.split))
    model = load_model(_pick(args.model, cfg.paths.model))
    eval_set = _eval_subset(split, _pick(args.limit, cfg.limit))
    pool = [s for s in split.train if s.attack is not None]
    gold = {s.id: gold_answer(s.attack) for s in eval_set}
    return split, model, eval_set, pool, gold


def cmd_explain(args, cfg: RunConfig) -> int:
    split, model, eval_set, pool, gold = _explain_setup(args, cfg)
    client, backend = _client(cfg, gold, args)
    k = _pick(args.shots, cfg.shots[-1] if cfg.shots else 0)
    detect = _detector_fn(model)
    shots = select_few_shots(pool, k, cfg.seeds.shots, detect, holdout_ids={s.id for s in split.llm_eval})
    system_text = build_system_prompt(_system(cfg), shots)
    flagged = [s for s in eval_set if detect(s).label == "attack"]
    bundles = [build_bundle(system_text, s, detect(s), k, cfg.explainer.token_budget, cfg.explainer.decimate)
               for s in flagged]
    with client:
        results = explain_many(client, bundles)
    out = Path(_pick(args.out, cfg.paths.explanations))
    out.parent.mkdir(parents=True, exist_ok=True)
    header = {"model": client.config.model_name, "backend": backend, "shots": k,
              "n_alarms": len(flagged), "n_eval": len(eval_set)}
    with open(out, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for r in results:
            fh.write(json.dumps(outcome_record(r)) + "\n")
    ok = sum(isinstance(r, ExplanationReport) for r in results)
    print(f"explained {ok}/{len(results)} alarms -> {out}")
    return 0


def _read_outcomes(path):
    with open(path) as fh:
        header = json.loads(fh.readline())
        outcomes = []
        for line in fh:
            rec = json.loads(line)
            if rec["status"] == "ok":
                outcomes.append(ExplanationReport(
                    rec["attack_target"], rec["attack_magnitude_pu"], rec["attack_start_time_s"],
                    rec["justification"], rec["raw_response"], rec["latency_s"], rec["sample_id"],
                    rec["repaired"]))
            else:
                outcomes.append(ExplanationFailure(rec["sample_id"], rec["error"], rec.get("raw_response")))
    return header, outcomes


def _classifier_rows(paths) -> list:
    rows = []
    for p in paths or []:
        d = json.loads(Path(p).read_text())
        rows.append(ClassifierMetrics(**d))
    return rows


def cmd_evaluate(args, cfg: RunConfig) -> int:
    samples = {s.id: s for s in read_dataset(_pick(args.dataset, cfg.paths.dataset))}
    explanation = []
    for path in args.explanations or [cfg.paths.explanations]:
        header, outcomes = _read_outcomes(path)
        truths = {o.sample_id: samples[o.sample_id].attack for o in outcomes}
        explanation.append(score(outcomes, truths, header["model"], header["shots"]))
    classifier = _classifier_rows(args.metrics)
    out_dir = _pick(args.reports, cfg.paths.reports)
    md, cs = render_report(classifier, explanation, {"version": __version__}, out_dir)
    for m in explanation:
        print(f"{m.model} shots={m.shots}: target={m.target_accuracy:.2f}% "
              f"mae_mag={m.mae_magnitude:.5f} mae_t={m.mae_onset:.3f} "
              f"evaluated={m.n_evaluated} failed={m.n_parse_failures}")
    print(f"wrote {md} and {cs}")
    return 0


def cmd_sweep(args, cfg: RunConfig) -> int:
    split, model, eval_set, pool, gold = _explain_setup(args, cfg)
    client, backend = _client(cfg, gold, args)
    shot_list = [int(x) for x in args.shots.split(",")] if args.shots else list(cfg.shots)
    with client:
        result = run_shot_sweep(eval_set, pool, _system(cfg), client, shot_list, _detector_fn(model),
                                shot_seed=cfg.seeds.shots, budget=cfg.explainer.token_budget,
                                decimate=cfg.explainer.decimate)
    out_dir = Path(_pick(args.reports, cfg.paths.reports))
    meta = {"backend": backend, "dataset": read_header(_pick(args.dataset, cfg.paths.dataset))["master_seed"],
            "eval_samples": len(eval_set), "shots": shot_list, "version": __version__}
    render_report(_classifier_rows(args.metrics), result.metrics, meta, out_dir)
    for k, outs in result.outcomes.items():
        with open(out_dir / f"explanations_k{k}.jsonl", "w") as fh:
            for o in outs:
                fh.write(json.dumps(outcome_record(o)) + "\n")
    for m in result.metrics:
        print(f"shots={m.shots}: target={m.target_accuracy:.2f}% mae_mag={m.mae_magnitude:.5f} "
              f"mae_t={m.mae_onset:.3f} evaluated={m.n_evaluated} failed={m.n_parse_failures}")
    return 0


def cmd_plot(args, cfg: RunConfig) -> int:
    if args.sample == GOLDEN_ID:
        normal, attacked = golden_sample()
        label = GOLDEN_ID
    else:
        try:
            sid = int(args.sample)
        except ValueError:
            raise ConfigError(f"--sample must be {GOLDEN_ID!r} or an integer id") from None
        by_id = {s.id: s for s in read_dataset(_pick(args.dataset, cfg.paths.dataset))}
        if sid not in by_id:
            raise ConfigError(f"sample {sid} not in dataset")
        attacked = by_id[sid]
        twin = simulate(attacked.scenario)
        normal = Sample(sid, "normal", twin, None, attacked.scenario)
        label = str(sid)
    signal = args.signal or (attacked.attack.target if attacked.attack else "delta_p_tie")
    t = attacked.trace.t
    plt = _figure()
    fig, ax = plt.subplots(figsize=(7, 3.5))
    ax.plot(t, normal.trace.signal(signal), color="tab:blue", lw=1.2, label="normal")
    if attacked.attack is not None:
        ax.plot(t, attacked.trace.signal(signal), color="tab:red", lw=1.2, label="under FDIA")
        ax.axvline(attacked.attack.t_start, color="k", ls="--", lw=0.8,
                   label=f"attack onset ({attacked.attack.t_start:g} s)", gid="onset-marker")
    ax.set_xlabel("time (s)")
    ax.set_ylabel(f"{signal} (pu)")
    ax.legend(loc="best", fontsize=8)
    out = Path(args.out) if args.out else Path(cfg.paths.plots) / f"sample_{label}_{signal}.svg"
    _write_svg(fig, out)
    plt.close(fig)
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t_s", f"{signal}_normal_pu", f"{signal}_attacked_pu"])
            for row in zip(t, normal.trace.signal(signal), attacked.trace.signal(signal)):
                w.writerow([repr(float(v)) for v in row])
    print(f"wrote {out}")
    return 0


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="agc-fdia", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--config", help="JSON run config")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("simulate", help="run one scenario, write trace JSON and SVG")
    s.add_argument("--area", type=int, default=1, choices=(1, 2), help="disturbed area")
    s.add_argument("--magnitude", type=float, default=0.02, help="load step (pu)")
    s.add_argument("--start", type=float, default=0.0, help="load step time (s)")
    s.add_argument("--nonlinear", action="store_true", help="enable deadband, GRC and delay")
    s.add_argument("--ki", type=float, help="override both AGC integral gains")
    s.add_argument("--window", type=float, default=60.0, help="recorded window (s)")
    s.add_argument("--seed", type=int, help="noise seed")
    s.add_argument("--no-noise", action="store_true", help="disable process and measurement noise")
    s.add_argument("--attack-target", choices=("delta_f1", "delta_f2", "delta_p_tie"))
    s.add_argument("--attack-start", type=float, default=15.0, help="attack onset (s)")
    s.add_argument("--f-i", type=float, default=-0.11, help="injection at onset (pu)")
    s.add_argument("--f-f", type=float, help="injection at window end (pu), default = --f-i")
    s.add_argument("--out", default="trace.json", help="trace JSON path")
    s.add_argument("--svg", help="SVG path (default: next to --out)")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("gen", help="generate the labelled dataset")
    s.add_argument("--n", type=int, help="number of samples (even)")
    s.add_argument("--seed", type=int, help="master seed")
    s.add_argument("--workers", type=int, help="worker processes")
    s.add_argument("--out", help="dataset path")
    s.set_defaults(func=cmd_gen)

    s = sub.add_parser("train", help="fit a detector and report test metrics")
    s.add_argument("--dataset", help="dataset path")
    s.add_argument("--kind", choices=("gbdt", "rf", "gradient_boosted", "random_forest"))
    s.add_argument("--name", help="model name in reports")
    s.add_argument("--seed", type=int, help="training seed")
    s.add_argument("--split-seed", type=int, help="split seed")
    s.add_argument("--n-trees", type=int, help="number of trees")
    s.add_argument("--max-depth", type=int, help="maximum tree depth")
    s.add_argument("--tune-trials", type=int, help="random-search trials (0 = defaults)")
    s.add_argument("--model-out", help="model path")
    s.add_argument("--metrics-out", help="classifier metrics JSON path")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("detect", help="classify dataset samples")
    s.add_argument("--model", help="model path")
    s.add_argument("--dataset", help="dataset path")
    s.add_argument("--sample", type=int, help="single sample id")
    s.add_argument("--out", help="output JSONL (default stdout)")
    s.set_defaults(func=cmd_detect)

    for name, func, hlp in (("explain", cmd_explain, "explain alarms on the evaluation subset"),
                            ("sweep", cmd_sweep, "explain and score at several shot counts")):
        s = sub.add_parser(name, help=hlp)
        s.add_argument("--dataset", help="dataset path")
        s.add_argument("--model", help="model path")
        s.add_argument("--backend", choices=BACKENDS, help="LLM backend")
        s.add_argument("--base-url", help="OpenAI-compatible endpoint base URL")
        s.add_argument("--llm-model", help="LLM model name")
        s.add_argument("--limit", type=int, help="number of held-out attack samples (0 = all)")
        s.add_argument("--split-seed", type=int, help="split seed")
        if name == "explain":
            s.add_argument("--shots", type=int, help="few-shot examples")
            s.add_argument("--out", help="explanations JSONL path")
        else:
            s.add_argument("--shots", help="comma-separated shot counts, e.g. 0,5,10,20")
            s.add_argument("--metrics", nargs="*", help="classifier metrics JSON files to include")
            s.add_argument("--reports", help="report directory")
        s.set_defaults(func=func)

    s = sub.add_parser("evaluate", help="score explanation files and write reports")
    s.add_argument("--dataset", help="dataset path")
    s.add_argument("--explanations", nargs="*", help="explanation JSONL files")
    s.add_argument("--metrics", nargs="*", help="classifier metrics JSON files")
    s.add_argument("--reports", help="report directory")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("plot", help="normal vs attacked overlay with onset marker")
    s.add_argument("--sample", required=True, help=f"sample id or {GOLDEN_ID!r}")
    s.add_argument("--dataset", help="dataset path (for integer ids)")
    s.add_argument("--signal", choices=("delta_f1", "delta_f2", "delta_p_tie"), help="signal to plot")
    s.add_argument("--out", help="SVG path")
    s.add_argument("--csv", help="also write the plotted series as CSV")
    s.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except Exception as exc:  # noqa: BLE001 - surface every failure as a diagnostic
        if args.verbose:
            raise
        print(f"agc-fdia {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
