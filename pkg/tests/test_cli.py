import json

import pytest

from ltri.cli import EXIT_CONFIG, EXIT_GATE, EXIT_OK, EXIT_TRACE, main

TRACE = {"total_tokens": 2048, "window": 512, "head_dim": 16, "decode_steps": 3}
WEAK = {
    "trace": {"total_tokens": 8192, "head_dim": 16, "decode_steps": 2, "needle_cos": 0.35, "rho_hi": 0.31,
              "background_cos": 0.3, "needle_salience": 0.0},
    "engine": {"top_k": 1, "early_layers": 0, "retrieval_heads": [[1, 0, 0.45], [2, 1, 0.3], [3, 0, 0.9]]},
}


@pytest.fixture
def cfg(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps({"trace": TRACE}))
    return str(p)


@pytest.fixture
def trace_file(tmp_path, cfg):
    out = tmp_path / "t.ltri"
    assert main(["gen-trace", "--config", cfg, "--seed", "5", "--out", str(out)]) == EXIT_OK
    return out


def test_gen_trace_writes_sidecar(trace_file):
    side = json.loads(trace_file.with_name("t.ltri.json").read_text())
    assert side["seed"] == 5 and side["total_tokens"] == 2048


def test_run_twice_byte_identical(tmp_path, trace_file):
    outs = []
    for name in ("a", "b"):
        d = tmp_path / name
        assert main(["run", str(trace_file), "--out", str(d)]) == EXIT_OK
        outs.append({p.name: p.read_bytes() for p in sorted(d.iterdir())})
    assert outs[0] == outs[1]
    assert set(outs[0]) == {"steps.jsonl", "summary.json", "recall.json", "heatmap.csv", "accounting.csv"}


def test_run_flags_reach_config(tmp_path, cfg):
    d = tmp_path / "r"
    assert main(["run", "--config", cfg, "--ablate", "V", "--persistent", "off", "--ratio-mode", "col",
                 "--inject-evidence", "--out", str(d)]) == EXIT_OK
    echo = json.loads((d / "summary.json").read_text())["config_echo"]
    assert (echo["voting"], echo["persistent"], echo["ratio_mode"], echo["inject_evidence"]) == (
        False, False, "col", True)
    assert json.loads((d / "recall.json").read_text())["aggregate_recall"] == 1.0


def test_report_rebuilds_views(tmp_path, trace_file):
    run = tmp_path / "run"
    main(["run", str(trace_file), "--out", str(run)])
    rep = tmp_path / "rep"
    assert main(["report", str(run), "--out", str(rep), "--trace", str(trace_file), "--blocks", "3"]) == EXIT_OK
    for name in ("recall.json", "heatmap.csv", "accounting.csv"):
        assert (rep / name).read_bytes() == (run / name).read_bytes()
    assert (rep / "lambda_sweep.csv").read_text().startswith("layer,lambda,avg_vectors_per_block")


def test_calibrate_and_tune(tmp_path, cfg, trace_file, capsys):
    out = tmp_path / "cal.json"
    assert main(["calibrate", "--trace", str(trace_file), "--target", "11", "--layers", "1",
                 "--blocks", "4", "--ratio-mode", "rowcol", "--out", str(out)]) == EXIT_OK
    assert set(json.loads(out.read_text())["lambdas"]) == {"1"}
    assert main(["tune", "--config", cfg, "--trials", "2", "--blocks", "2"]) == EXIT_OK
    assert "theta_quantile" in capsys.readouterr().out


def test_niah_gate_pass_and_fail(tmp_path, cfg, capsys):
    assert main(["niah", "--config", cfg, "--seeds", "2", "--inject-evidence", "--gate", "--workers", "1"]) == EXIT_OK
    res = json.loads(capsys.readouterr().out)
    assert res["inject_aggregate_recall"] == 1.0
    weak = tmp_path / "weak.json"
    weak.write_text(json.dumps(WEAK))
    assert main(["niah", "--config", str(weak), "--seeds", "3", "--gate", "--workers", "1"]) == EXIT_GATE
    assert main(["niah", "--config", str(weak), "--seeds", "3", "--workers", "1"]) == EXIT_OK


def test_niah_grid(cfg, capsys):
    assert main(["niah", "--config", cfg, "--positions", "0.2,0.8", "--lengths", "2048"]) == EXIT_OK
    grid = json.loads(capsys.readouterr().out)["grid"]
    assert [g["position"] for g in grid] == [0.2, 0.8]


def test_config_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["run", "--config", str(bad), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    bad.write_text(json.dumps({"trace": TRACE, "extra": {}}))
    assert main(["run", "--config", str(bad), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert main(["run", "--config", str(tmp_path / "missing.json")]) == EXIT_CONFIG
    assert main(["niah", "--ablate", "Q", "--seeds", "1"]) == EXIT_CONFIG
    assert main(["report", str(tmp_path)]) == EXIT_CONFIG


def test_trace_errors(tmp_path):
    bad = tmp_path / "bad.ltri"
    bad.write_bytes(b"JUNK" + bytes(60))
    assert main(["run", str(bad), "--out", str(tmp_path / "o")]) == EXIT_TRACE
    weak = tmp_path / "w.json"
    weak.write_text(json.dumps({"trace": {**TRACE, "needle_cos": 0.31, "rho_hi": 0.31, "query_noise": 3.0}}))
    assert main(["run", "--config", str(weak), "--out", str(tmp_path / "o")]) == EXIT_TRACE


def test_unknown_subcommand():
    with pytest.raises(SystemExit):
        main(["explode"])
