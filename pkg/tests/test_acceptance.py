"""Acceptance gate; each test records a PASS/FAIL line shown in the terminal summary."""

import json
import time
from contextlib import contextmanager

import numpy as np
import pytest

import conftest
from conftest import quiet_scenario
from test_detector import oracle_tree, same_structure, sse, toy

from agc_fdia import features as feat
from agc_fdia.attack import max_post_onset_ace, sample_attack
from agc_fdia.cli import main
from agc_fdia.datagen import read_dataset, sample_scenario, split_dataset
from agc_fdia.detector import DetectionResult, evaluate_classifier, predict, save_model, train_gbdt
from agc_fdia.evaluator import run_shot_sweep
from agc_fdia.explainer import (
    ExplanationFailure,
    ExplanationReport,
    LlmClient,
    LlmClientConfig,
    MockBackend,
    RetryPolicy,
    build_bundle,
    build_query,
    build_system_prompt,
    explain_many,
    gold_answer,
)
from agc_fdia.explainer.prompts import FORBIDDEN_QUERY_TOKENS
from agc_fdia.plant import default_system, simulate

DF_SS = -5.420e-4
PTIE_SS = -8.835e-3


@contextmanager
def criterion(n, text):
    note = {}
    try:
        yield note
    except BaseException:
        conftest.ACCEPTANCE[n] = (False, text + _fmt(note))
        raise
    conftest.ACCEPTANCE[n] = (True, text + _fmt(note))


def _fmt(note):
    return "" if not note else "  [" + ", ".join(f"{k}={v}" for k, v in note.items()) + "]"


def timed(fn, *a, **kw):
    t0 = time.perf_counter()
    out = fn(*a, **kw)
    return out, time.perf_counter() - t0


# -- plant --------------------------------------------------------------------

def test_c01_equilibrium():
    with criterion(1, "zero disturbance, noise off -> all recorded signals exactly zero, < 1 s") as note:
        simulate(quiet_scenario(0.0))  # compile / cache warm-up
        tr, dt = timed(simulate, quiet_scenario(0.0))
        note["runtime_s"] = f"{dt:.3f}"
        for a in (tr.delta_f1, tr.delta_f2, tr.delta_p_tie, tr.ace1, tr.ace2):
            assert np.all(a == 0.0)
        assert dt < 1.0


def test_c02_droop_steady_state():
    with criterion(2, "Ki=0, 0.02 pu step, 120 s -> droop steady state within 2%, < 1 s") as note:
        tr, dt = timed(simulate, quiet_scenario(0.02, ki=0.0, window=120.3))
        note.update(df1=f"{tr.delta_f1[-1]:.4e}", ptie=f"{tr.delta_p_tie[-1]:.4e}", runtime_s=f"{dt:.3f}")
        assert tr.t[-1] == pytest.approx(120.0)
        assert tr.delta_f1[-1] == pytest.approx(DF_SS, rel=0.02)
        assert tr.delta_f2[-1] == pytest.approx(DF_SS, rel=0.02)
        assert tr.delta_p_tie[-1] == pytest.approx(PTIE_SS, rel=0.02)
        assert dt < 1.0


def test_c03_secondary_regulation():
    with criterion(3, "Ki=0.3 -> terminal deviations below 1e-4 pu by 120 s, < 1 s") as note:
        tr, dt = timed(simulate, quiet_scenario(0.02, ki=0.3, window=120.3))
        worst = max(abs(tr.delta_f1[-1]), abs(tr.delta_f2[-1]), abs(tr.delta_p_tie[-1]))
        note.update(max_abs=f"{worst:.2e}", runtime_s=f"{dt:.3f}")
        assert worst < 1e-4 and dt < 1.0


# -- dataset ------------------------------------------------------------------

@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    d = tmp_path_factory.mktemp("corpus")
    a, b, smoke = d / "a.jsonl", d / "b.jsonl", d / "smoke.jsonl"
    rc_smoke, t_smoke = timed(main, ["gen", "--n", "1000", "--seed", "0", "--out", str(smoke)])
    rc_a, t_a = timed(main, ["gen", "--n", "10000", "--seed", "0", "--workers", "1", "--out", str(a)])
    rc_b, t_b = timed(main, ["gen", "--n", "10000", "--seed", "0", "--workers", "2", "--out", str(b)])
    return {"path": a, "other": b, "smoke_s": t_smoke, "full_s": t_a, "rc": (rc_smoke, rc_a, rc_b),
            "samples": read_dataset(a)}


def test_c04_dataset_contract(corpus):
    with criterion(4, "gen --n 10000: 5000/5000, 200 points, byte-identical across runs and workers, "
                      "< 10 min (1000-sample smoke < 1 min)") as note:
        note.update(full_s=f"{corpus['full_s']:.1f}", smoke_s=f"{corpus['smoke_s']:.1f}")
        assert corpus["rc"] == (0, 0, 0)
        samples = corpus["samples"]
        assert len(samples) == 10000
        assert sum(s.label == "attack" for s in samples) == 5000
        for s in samples:
            for name in ("delta_f1", "delta_f2", "delta_p_tie"):
                assert s.trace.signal(name).shape == (200,)
        assert corpus["path"].read_bytes() == corpus["other"].read_bytes()
        assert corpus["full_s"] < 600 and corpus["smoke_s"] < 60


def test_c05_ace_limit(corpus):
    with criterion(5, "recorded max|ACE| <= limit*(1+1e-3) on every attacked sample") as note:
        attacked = [s for s in corpus["samples"] if s.attack is not None]
        limits = {"subtle": 0.5, "noticeable": 1.0}
        ratio = max(max_post_onset_ace(s.trace, s.attack.t_start) / limits[s.attack.subtlety] for s in attacked)
        note.update(n=len(attacked), worst_ratio=f"{ratio:.6f}")
        assert len(attacked) >= 100 and ratio <= 1 + 1e-3


def test_c06_pre_onset_identity(corpus):
    with criterion(6, "attacked trace equals its attack-free twin before onset") as note:
        attacked = [s for s in corpus["samples"] if s.attack is not None][:200]
        for s in attacked:
            twin = simulate(s.scenario)
            pre = s.trace.t < s.attack.t_start
            assert np.array_equal(s.trace.stacked()[:, pre], twin.stacked()[:, pre])
        note["n"] = len(attacked)


def test_c07_grc_invariant():
    with criterion(7, "nonlinear runs keep internal mechanical-power rate <= 0.05 pu/s + 1e-9") as note:
        rng = np.random.default_rng(2024)
        worst = 0.0
        for i in range(120):
            sc = sample_scenario(rng, nonlinear_fraction=1.0)
            assert sc.system.nonlinear_mode
            hook = None
            if i % 2:
                hook = sample_attack(rng, sc.disturbance.start_time).hook(sc.window)
            tr = simulate(sc, hook)
            rate = np.abs(np.diff(tr.pm_internal, axis=0)).max() / sc.internal_dt
            worst = max(worst, rate)
        note.update(n=120, worst_rate=f"{worst:.6f}")
        assert worst <= 0.05 + 1e-9


# -- detector -----------------------------------------------------------------

@pytest.fixture(scope="module")
def trained(corpus):
    split = split_dataset(corpus["samples"], 0)
    model, dt = timed(train_gbdt, split.train, None, 0)
    return split, model, dt


def test_c08_detector_quality(trained):
    with criterion(8, "boosted detector: accuracy >= 0.90, F1 >= 0.89, latency < 10 ms, training < 5 min") as note:
        split, model, train_s = trained
        assert (len(split.llm_eval), len(split.train), len(split.test)) == (400, 6720, 2880)
        m = evaluate_classifier(model, split.test, name="gbdt")
        note.update(accuracy=f"{m.accuracy:.4f}", f1=f"{m.f1:.4f}", latency_ms=f"{1e3 * m.mean_latency:.3f}",
                    train_s=f"{train_s:.1f}")
        assert m.accuracy >= 0.90 and m.f1 >= 0.89
        assert m.mean_latency < 0.010
        assert train_s < 300


def test_c09_detector_determinism_and_oracle(trained, tmp_path):
    with criterion(9, "repeated seeded training gives identical files; depth-2 splits match exhaustive oracle"):
        split, *_ = trained
        sub = split.train[:800]
        hp = {"n_trees": 40, "subsample": 0.8}
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        save_model(train_gbdt(sub, hp, seed=3), a)
        save_model(train_gbdt(sub, hp, seed=3), b)
        assert a.read_bytes() == b.read_bytes()
        X, y = toy(50, 3, 7)
        m = train_gbdt((X, y), {"n_trees": 1, "max_depth": 2, "subsample": 1.0, "min_samples_leaf": 1}, seed=0)
        same_structure(m.trees[0], oracle_tree(X, y - y.mean(), np.arange(50), sse, 0, 2))


# -- explanation --------------------------------------------------------------

def _mock_client(backend):
    return LlmClient(LlmClientConfig(retry=RetryPolicy(backoff_base=0.0)), transport=backend.transport(),
                     clock=lambda: 0.0, sleep=lambda s: None)


@pytest.fixture(scope="module")
def explain_inputs(trained):
    split, model, _ = trained
    evals = [s for s in split.llm_eval if s.attack is not None][:100]
    pool = [s for s in split.train if s.attack is not None]
    gold = {s.id: gold_answer(s.attack) for s in evals}
    cache = {}

    def detect(s):
        if s.id not in cache:
            cache[s.id] = predict(model, s.features)
        return cache[s.id]

    return evals, pool, gold, detect


def test_c10_echo_round_trip(explain_inputs):
    with criterion(10, "echo mock over the 100-sample eval subset: 100% target, zero MAEs, zero failures") as note:
        evals, pool, gold, detect = explain_inputs
        assert len(evals) == 100
        res = run_shot_sweep(evals, pool, default_system(), _mock_client(MockBackend("echo", gold)),
                             [0, 5, 10, 20], detect)
        for m in res.metrics:
            assert m.target_accuracy == 100.0 and m.mae_magnitude == 0.0 and m.mae_onset == 0.0
            assert m.n_parse_failures == 0
        note["evaluated"] = "/".join(str(m.n_evaluated) for m in res.metrics)
        assert all(m.n_evaluated == 100 for m in res.metrics)


def test_c11_robust_parsing(explain_inputs):
    with criterion(11, "fault mock: wrapped objects parsed, garbage fails after exactly one repair, "
                       "sweep completes") as note:
        evals, pool, gold, detect = explain_inputs
        backend = MockBackend("fault", gold, garbage_rate=0.1, seed=0)
        text = build_system_prompt(default_system())
        with _mock_client(backend) as client:
            out = explain_many(client, [build_bundle(text, s, detect(s), 0) for s in evals])
        n_garbage = 0
        for s, o in zip(evals, out):
            if backend.is_garbage(s.id):
                n_garbage += 1
                assert isinstance(o, ExplanationFailure)
                assert backend.repairs[s.id] == 1
            else:
                assert isinstance(o, ExplanationReport) and not o.repaired
                assert o.attack_target == s.attack.target
        assert n_garbage > 0
        sweep = run_shot_sweep(evals, pool, default_system(),
                               _mock_client(MockBackend("fault", gold, garbage_rate=0.1, seed=0)), [0, 5, 10, 20],
                               detect)
        assert all(m.n_evaluated + m.n_parse_failures == 100 for m in sweep.metrics)
        note.update(garbage=n_garbage, wrapped_ok=len(evals) - n_garbage)


def test_c12_no_leakage(corpus):
    with criterion(12, "1000 generated queries contain no ground-truth attack keys or values") as note:
        alarm = DetectionResult("attack", 0.9, 0.1, 0.9)
        attacked = [s for s in corpus["samples"] if s.attack is not None][:1000]
        hits = 0
        for s in attacked:
            for decimate in (None, 10):
                q = build_query(s, alarm, decimate)
                low = q.lower()
                hits += sum(tok in low for tok in FORBIDDEN_QUERY_TOKENS)
                a = s.attack
                hits += sum(repr(v) in q for v in (a.t_start, a.f_i, a.f_f, a.magnitude, a.scale)
                            if v not in (0.0, 1.0))
                hits += json.dumps(a.to_dict()) in q
        note.update(queries=2 * len(attacked), hits=hits)
        assert len(attacked) == 1000 and hits == 0


# -- features -----------------------------------------------------------------

def _skew_bruteforce(x):
    n = len(x)
    mean = sum(x) / n
    m2 = sum((v - mean) ** 2 for v in x) / n
    m3 = sum((v - mean) ** 3 for v in x) / n
    return 0.0 if m2 < 1e-12 else m3 / m2 ** 1.5


def _slope_bruteforce(x, dt):
    n = len(x)
    t = [k * dt for k in range(n)]
    tm, xm = sum(t) / n, sum(x) / n
    return sum((a - tm) * (b - xm) for a, b in zip(t, x)) / sum((a - tm) ** 2 for a in t)


def test_c13_feature_oracle(corpus):
    with criterion(13, "persisted features bit-exact on 1000 samples; skewness/slope within 1e-9 of brute force"):
        for s in corpus["samples"][:1000]:
            assert np.array_equal(feat.extract(s.trace), s.features)
        rng = np.random.default_rng(13)
        for _ in range(100):
            x = rng.normal(size=200) * 10 ** rng.uniform(-4, 0) + rng.uniform(-0.1, 0.1)
            xs = x.tolist()
            assert abs(feat.skewness(x) - _skew_bruteforce(xs)) <= 1e-9
            assert abs(feat.slope(x, 0.3) - _slope_bruteforce(xs, 0.3)) <= 1e-9
