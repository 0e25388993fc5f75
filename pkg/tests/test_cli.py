"""Config parsing, subcommand artifacts, and exit codes."""

import json
from pathlib import Path

import numpy as np
import pytest

from fedspectra.cli import (
    EXIT_CONFIG,
    EXIT_DIVERGED,
    EXIT_OK,
    EXIT_VERIFY_FAILED,
    ConfigError,
    main,
    parse_config,
    serialize_config,
)
from fedspectra.data import save_idx


def _write(tmp_path, name, obj) -> str:
    p = tmp_path / name
    p.write_text(json.dumps(obj))
    return str(p)


SMALL_LINEAR = {
    "model": {"kind": "deep-linear", "depth": 2, "width": 32, "d_in": 4, "d_out": 2},
    "data": {"kind": "synthetic", "n": 12},
    "federation": {"n_clients": 3, "local_steps": 2, "rounds": 5, "eta": 0.01, "seed": 0},
}


# ----------------------------------------------------------------- parsing ----


def test_empty_config_takes_documented_defaults():
    cfg = parse_config("")
    assert cfg.model.kind == "deep-linear"
    assert (cfg.model.depth, cfg.model.width) == (3, 500)
    assert (cfg.model.d_in, cfg.model.d_out) == (10, 5)
    assert cfg.federation.eta == 0.0005
    assert (cfg.federation.n_clients, cfg.federation.local_steps) == (20, 5)
    assert cfg.federation.rate == 1.0
    assert cfg.data.classes_per_client == 3
    assert cfg.sweep.rates == (0.1, 0.5, 1.0)


def test_unknown_key_reported_with_dotted_path():
    with pytest.raises(ConfigError, match="model.depht"):
        parse_config(json.dumps({"model": {"depht": 3}}))


def test_rate_out_of_range_rejected():
    with pytest.raises(ConfigError, match="federation.rate"):
        parse_config(json.dumps({"federation": {"rate": 1.5}}))


def test_bool_is_not_an_int():
    with pytest.raises(ConfigError, match="federation.rounds"):
        parse_config(json.dumps({"federation": {"rounds": True}}))


def test_verify_rounds_must_lie_in_range():
    doc = {"federation": {"rounds": 10}, "verify": {"rounds": [0, 10]}}
    with pytest.raises(ConfigError, match="verify.rounds"):
        parse_config(json.dumps(doc))


def test_unknown_check_name_lists_choices():
    with pytest.raises(ConfigError, match="ntk-trace"):
        parse_config(json.dumps({"verify": {"checks": ["ntk-trace"]}}))


def test_serialize_round_trips():
    docs = [
        "",
        json.dumps(SMALL_LINEAR),
        json.dumps(
            {
                "model": {"kind": "two-layer-relu", "width": 64, "dim": 6},
                "data": {"kind": "synthetic", "n": 20},
                "federation": {"schedule": [[0, 1], [1]], "rounds": 2, "n_clients": 2},
                "verify": {"checks": ["ntk-trace"], "rounds": [0]},
            }
        ),
    ]
    for doc in docs:
        cfg = parse_config(doc)
        assert parse_config(serialize_config(cfg)) == cfg


def test_schedule_must_match_round_count():
    doc = {"federation": {"schedule": [[0]], "rounds": 3, "n_clients": 2}}
    with pytest.raises(ConfigError, match="schedule"):
        parse_config(json.dumps(doc))


# ------------------------------------------------------------------- train ----


def test_train_writes_trace_artifacts(tmp_path):
    cfg = _write(tmp_path, "c.json", SMALL_LINEAR)
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "out")]) == EXIT_OK
    out = tmp_path / "out"
    lines = (out / "trace.csv").read_text().splitlines()
    assert lines[0] == "t,participants,loss,ratio,rho_theory,bound_cum"
    assert len(lines) == 1 + 5
    first = lines[1].split(",")
    assert first[0] == "0"
    assert set(first[1].split(";")) == {"0", "1", "2"}
    assert float(first[3]) < 1.0  # contraction from round 0 at this eta
    doc = json.loads((out / "trace.json").read_text())
    assert doc["config"]["federation"]["rounds"] == 5
    assert len(doc["rows"]) == 5
    assert len(doc["losses"]) == 6  # includes the final loss
    assert (out / "loss.svg").read_text().startswith("<svg")


def test_train_zero_rounds_leaves_header_only(tmp_path):
    cfg = _write(tmp_path, "c.json", SMALL_LINEAR)
    out = tmp_path / "out"
    assert main(["train", "--config", cfg, "--out", str(out), "--rounds", "0"]) == EXIT_OK
    assert (out / "trace.csv").read_text().splitlines() == [
        "t,participants,loss,ratio,rho_theory,bound_cum"
    ]


def test_train_trace_is_byte_identical_across_runs_and_workers(tmp_path):
    base = dict(SMALL_LINEAR)
    cfg1 = _write(tmp_path, "w1.json", base)
    par = json.loads(json.dumps(base))
    par["federation"]["workers"] = 4
    cfg4 = _write(tmp_path, "w4.json", par)
    outs = []
    for name, cfg in (("a", cfg1), ("b", cfg1), ("c", cfg4)):
        assert main(["train", "--config", cfg, "--out", str(tmp_path / name)]) == EXIT_OK
        outs.append((tmp_path / name / "trace.csv").read_bytes())
    assert outs[0] == outs[1] == outs[2]


def test_train_seed_override_changes_participants_not_format(tmp_path):
    doc = json.loads(json.dumps(SMALL_LINEAR))
    doc["federation"]["rate"] = 0.5
    cfg = _write(tmp_path, "c.json", doc)
    for seed, name in ((0, "s0"), (7, "s7")):
        code = main(
            ["train", "--config", cfg, "--out", str(tmp_path / name), "--seed", str(seed)]
        )
        assert code == EXIT_OK
    a = (tmp_path / "s0" / "trace.csv").read_text()
    b = (tmp_path / "s7" / "trace.csv").read_text()
    assert a != b
    assert a.splitlines()[0] == b.splitlines()[0]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_divergence_exits_2(tmp_path):
    doc = json.loads(json.dumps(SMALL_LINEAR))
    doc["federation"]["eta"] = 5.0
    doc["federation"]["rounds"] = 50
    cfg = _write(tmp_path, "c.json", doc)
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "out")]) == EXIT_DIVERGED


def test_missing_config_file_exits_3(tmp_path):
    assert main(["train", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == EXIT_CONFIG


def test_bad_config_exits_3(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    assert main(["train", "--config", str(p), "--out", str(tmp_path)]) == EXIT_CONFIG
    q = _write(tmp_path, "unknown.json", {"model": {"bogus": 1}})
    assert main(["train", "--config", q, "--out", str(tmp_path)]) == EXIT_CONFIG


def test_rate_override_conflicts_with_schedule(tmp_path):
    doc = {"federation": {"schedule": [[0], [1]], "rounds": 2, "n_clients": 2}}
    cfg = _write(tmp_path, "c.json", doc)
    code = main(["train", "--config", cfg, "--out", str(tmp_path), "--rounds", "5"])
    assert code == EXIT_CONFIG


# ------------------------------------------------------------------- sweep ----


def test_sweep_grid_summary_envelope(tmp_path):
    doc = json.loads(json.dumps(SMALL_LINEAR))
    doc["federation"]["n_clients"] = 4
    doc["sweep"] = {"rates": [0.5, 1.0], "seeds": [0, 1]}
    cfg = _write(tmp_path, "c.json", doc)
    out = tmp_path / "out"
    assert main(["sweep", "--config", cfg, "--out", str(out)]) == EXIT_OK
    lines = (out / "sweep.csv").read_text().splitlines()
    assert lines[0] == "rate,t,mean_loss,min_loss,max_loss"
    rates = set()
    for line in lines[1:]:
        rate, t, mean, lo, hi = line.split(",")
        rates.add(rate)
        assert float(lo) <= float(mean) <= float(hi)
    assert len(rates) == 2
    assert (out / "sweep.svg").exists()


def test_sweep_single_cell_matches_train(tmp_path):
    cfg = _write(tmp_path, "c.json", SMALL_LINEAR)
    assert (
        main(
            ["sweep", "--config", cfg, "--out", str(tmp_path / "sw"), "--rate", "1.0", "--seed", "0"]
        )
        == EXIT_OK
    )
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "tr")]) == EXIT_OK
    train_losses = [
        float(line.split(",")[2])
        for line in (tmp_path / "tr" / "trace.csv").read_text().splitlines()[1:]
    ]
    rows = (tmp_path / "sw" / "sweep.csv").read_text().splitlines()[1:]
    sweep_losses = [float(r.split(",")[2]) for r in rows][: len(train_losses)]
    np.testing.assert_array_equal(sweep_losses, train_losses)


# ------------------------------------------------------------------ verify ----


def test_verify_all_checks_pass_on_wide_linear_model(tmp_path, capsys):
    doc = {
        "model": {"kind": "deep-linear", "depth": 3, "width": 1000, "d_in": 10, "d_out": 5},
        "data": {"kind": "synthetic", "n": 32},
        "federation": {"n_clients": 4, "local_steps": 3, "rounds": 4, "eta": 2e-05, "seed": 1},
        "verify": {"rounds": [0, 2]},
    }
    cfg = _write(tmp_path, "c.json", doc)
    out = tmp_path / "out"
    assert main(["verify", "--config", cfg, "--out", str(out)]) == EXIT_OK
    report = json.loads((out / "verify.json").read_text())
    assert report["passed"] is True
    names = [c["name"] for c in report["checks"]]
    assert any(n.startswith("init-suffix") for n in names)
    assert "gram-floor" in names
    assert "first-order:relative-error" in names
    printed = capsys.readouterr().out
    assert printed.count("PASS") == len(names)


def test_verify_detects_violated_width_bound(tmp_path):
    doc = {
        "model": {"kind": "deep-linear", "depth": 3, "width": 48, "d_in": 10, "d_out": 5},
        "data": {"kind": "synthetic", "n": 32},
        "federation": {"n_clients": 4, "local_steps": 2, "rounds": 2, "eta": 1e-05},
        "verify": {"checks": ["init-spectra"]},
    }
    cfg = _write(tmp_path, "c.json", doc)
    out = tmp_path / "out"
    assert main(["verify", "--config", cfg, "--out", str(out)]) == EXIT_VERIFY_FAILED
    report = json.loads((out / "verify.json").read_text())
    assert report["passed"] is False
    assert any(not c["passed"] for c in report["checks"])


def test_verify_empty_check_list_passes_vacuously(tmp_path):
    doc = json.loads(json.dumps(SMALL_LINEAR))
    doc["verify"] = {"checks": []}
    cfg = _write(tmp_path, "c.json", doc)
    out = tmp_path / "out"
    assert main(["verify", "--config", cfg, "--out", str(out)]) == EXIT_OK
    assert json.loads((out / "verify.json").read_text())["checks"] == []


def test_verify_two_layer_trace_and_descent(tmp_path):
    doc = {
        "model": {"kind": "two-layer-relu", "width": 256, "dim": 6},
        "data": {"kind": "synthetic", "n": 24},
        "federation": {"n_clients": 3, "local_steps": 2, "rounds": 3, "eta": 0.05, "seed": 0},
        "verify": {"checks": ["ntk-trace", "local-deviation", "global-drift"]},
    }
    cfg = _write(tmp_path, "c.json", doc)
    out = tmp_path / "out"
    assert main(["verify", "--config", cfg, "--out", str(out)]) == EXIT_OK
    report = json.loads((out / "verify.json").read_text())
    assert report["lambda_min"] is not None and report["lambda_min"] > 0.0
    names = {c["name"] for c in report["checks"]}
    assert "ntk-trace" in names and "local-deviation-crude" in names


# ----------------------------------------------------------------- idx data ----


def test_idx_pipeline_end_to_end(tmp_path):
    rng = np.random.default_rng(0)
    n, rows, cols = 12, 3, 3
    X = rng.uniform(0.1, 1.0, size=(rows * cols, n))
    labels = np.array([0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 1, 2])
    save_idx(tmp_path / "imgs.idx", tmp_path / "labs.idx", X, labels, (rows, cols))
    doc = {
        "model": {"kind": "two-layer-relu", "width": 64, "dim": rows * cols},
        "data": {
            "kind": "idx",
            "images": str(tmp_path / "imgs.idx"),
            "labels": str(tmp_path / "labs.idx"),
            "classes_per_client": 2,
            "preprocess": True,
        },
        "federation": {"n_clients": 2, "local_steps": 2, "rounds": 3, "eta": 0.01, "seed": 0},
    }
    cfg = _write(tmp_path, "c.json", doc)
    out = tmp_path / "out"
    assert main(["train", "--config", cfg, "--out", str(out)]) == EXIT_OK
    doc2 = json.loads((out / "trace.json").read_text())
    assert len(doc2["rows"]) == 3
    losses = [r["loss"] for r in doc2["rows"]]
    assert all(np.isfinite(losses))
