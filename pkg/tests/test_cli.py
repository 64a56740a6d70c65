import csv
import json

import pytest

from agc_fdia.cli import build_parser, load_config, ConfigError, main


@pytest.fixture(scope="module")
def trained(small_dataset, tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    model, metrics = d / "model.json", d / "metrics.json"
    rc = main(["train", "--dataset", str(small_dataset), "--kind", "gbdt", "--n-trees", "30",
               "--model-out", str(model), "--metrics-out", str(metrics)])
    assert rc == 0
    return small_dataset, model, metrics, d


def test_help_lists_flags(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["gen", "--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    for flag in ("--n", "--seed", "--workers", "--out"):
        assert flag in out


def test_unknown_flag_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["gen", "--bogus"])
    assert exc.value.code == 2


def test_gen_reproducible(tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    assert main(["gen", "--n", "10", "--seed", "7", "--out", str(a)]) == 0
    assert main(["gen", "--n", "10", "--seed", "7", "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_gen_odd_count_fails(tmp_path, capsys):
    assert main(["gen", "--n", "3", "--out", str(tmp_path / "x")]) == 1
    assert "agc-fdia gen: error" in capsys.readouterr().err


def test_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"seeds": {"master": 1, "nope": 2}}))
    assert main(["--config", str(cfg), "gen", "--out", str(tmp_path / "x")]) == 1
    assert "nope" in capsys.readouterr().err
    cfg.write_text(json.dumps({"colour": "red"}))
    with pytest.raises(ConfigError):
        load_config(str(cfg))
    cfg.write_text(json.dumps({"plant": {"area1": {}}}))
    with pytest.raises(ConfigError):
        load_config(str(cfg))


def test_config_precedence(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"seeds": {"master": 5}, "n": 4, "paths": {"dataset": str(tmp_path / "f.jsonl")}}))
    # file over defaults
    assert main(["--config", str(cfg), "gen"]) == 0
    header = json.loads((tmp_path / "f.jsonl").read_text().splitlines()[0])
    assert header["n"] == 4 and header["master_seed"] == 5
    # flags over file
    out = tmp_path / "g.jsonl"
    assert main(["--config", str(cfg), "gen", "--seed", "6", "--out", str(out)]) == 0
    assert json.loads(out.read_text().splitlines()[0])["master_seed"] == 6
    # defaults when absent
    c = load_config(None)
    assert c.seeds.master == 0 and c.shots == [0, 5, 10, 20] and c.limit == 100


def test_simulate_writes_trace_and_svg(tmp_path):
    out = tmp_path / "tr.json"
    rc = main(["simulate", "--magnitude", "0.02", "--no-noise", "--attack-target", "delta_f1",
               "--attack-start", "20", "--out", str(out)])
    assert rc == 0
    d = json.loads(out.read_text())
    assert len(d["trace"]["t_s"]) == 200
    assert d["attack"]["target"] == "delta_f1"
    assert out.with_suffix(".svg").read_text().lstrip().startswith("<?xml")


def test_plot_golden(tmp_path):
    svg, csv_path = tmp_path / "fig.svg", tmp_path / "fig.csv"
    assert main(["plot", "--sample", "golden", "--out", str(svg), "--csv", str(csv_path)]) == 0
    text = svg.read_text()
    assert 'id="onset-marker"' in text
    rows = list(csv.reader(csv_path.open()))
    assert rows[0] == ["t_s", "delta_p_tie_normal_pu", "delta_p_tie_attacked_pu"]
    assert len(rows) == 201
    # byte-reproducible figure
    svg2 = tmp_path / "fig2.svg"
    main(["plot", "--sample", "golden", "--out", str(svg2)])
    assert svg2.read_bytes() == svg.read_bytes()


def test_plot_dataset_sample(trained, tmp_path):
    dataset, *_ = trained
    svg = tmp_path / "s.svg"
    assert main(["plot", "--sample", "1", "--dataset", str(dataset), "--out", str(svg)]) == 0
    assert "onset-marker" in svg.read_text()
    assert main(["plot", "--sample", "abc", "--out", str(svg)]) == 1


def test_train_and_detect(trained, tmp_path):
    dataset, model, metrics, _ = trained
    m = json.loads(metrics.read_text())
    assert m["accuracy"] > 0.8
    out = tmp_path / "det.jsonl"
    assert main(["detect", "--model", str(model), "--dataset", str(dataset), "--sample", "3",
                 "--out", str(out)]) == 0
    rec = json.loads(out.read_text())
    assert rec["sample_id"] == 3 and rec["label"] in ("attack", "normal")
    assert main(["detect", "--model", str(model), "--dataset", str(dataset), "--sample", "99999"]) == 1


def test_explain_echo_then_evaluate(trained, capsys):
    dataset, model, metrics, d = trained
    exp = d / "exp.jsonl"
    rc = main(["explain", "--dataset", str(dataset), "--model", str(model), "--backend", "mock-echo",
               "--shots", "20", "--limit", "100", "--out", str(exp)])
    assert rc == 0
    header = json.loads(exp.read_text().splitlines()[0])
    assert header["backend"] == "mock-echo" and header["shots"] == 20 and header["n_eval"] == 100
    reports = d / "reports"
    assert main(["evaluate", "--dataset", str(dataset), "--explanations", str(exp),
                 "--metrics", str(metrics), "--reports", str(reports)]) == 0
    out = capsys.readouterr().out
    assert "target=100.00%" in out and "mae_mag=0.00000" in out and "mae_t=0.000" in out
    md = (reports / "report.md").read_text()
    assert "gradient_boosted" in md and "| 20 | 100.00 |" in md


def test_explain_live_without_key(trained, monkeypatch, capsys):
    dataset, model, _, d = trained
    monkeypatch.delenv("AGC_LLM_API_KEY", raising=False)
    rc = main(["explain", "--dataset", str(dataset), "--model", str(model), "--backend", "live",
               "--limit", "2", "--out", str(d / "live.jsonl")])
    assert rc == 1
    assert "AGC_LLM_API_KEY" in capsys.readouterr().err


def test_sweep_fault_reproducible(trained, tmp_path):
    dataset, model, *_ = trained

    def run(name):
        reports = tmp_path / name
        rc = main(["sweep", "--dataset", str(dataset), "--model", str(model), "--backend", "mock-fault",
                   "--shots", "0,5", "--limit", "40", "--reports", str(reports)])
        assert rc == 0
        return [(reports / f).read_bytes() for f in
                ("report.md", "report.csv", "explanations_k0.jsonl", "explanations_k5.jsonl")]

    a = run("a")
    assert a == run("b")
    recs = [json.loads(line) for line in a[2].decode().splitlines()]
    assert len(recs) > 0 and {r["status"] for r in recs} <= {"ok", "failed"}


def test_parser_has_all_subcommands():
    p = build_parser()
    sub = next(a for a in p._actions if a.dest == "command")
    assert set(sub.choices) == {"simulate", "gen", "train", "detect", "explain", "sweep", "evaluate", "plot"}
