"""Experiment harness: config parsing, tables, runs, determinism."""

import json
from pathlib import Path

import numpy as np
import pytest

from liftlab.experiments import (
    AccuracyTable,
    ConfigError,
    CoverTable,
    DESK_ITERS,
    ExperimentConfig,
    PAPER_ITERS,
    QuantileTable,
    emit_results,
    load_plan_ref,
    run_experiment,
    train_one,
)
from liftlab.mnist_io import write_idx


def sine_doc(out_dir, widths=(3, 5), seeds=2, iters=10):
    return {
        "kind": "sine-quantiles",
        "widths": list(widths),
        "seeds": seeds,
        "optimizer": {"step": 1e-2, "batch": 10, "iters": iters},
        "out_dir": str(out_dir),
    }


@pytest.fixture
def mnist_dir(tmp_path):
    d = tmp_path / "mnist"
    d.mkdir()
    rng = np.random.default_rng(7)
    write_idx(d / "train-images-idx3-ubyte", rng.integers(0, 256, size=(60, 28, 28)).astype(np.uint8))
    write_idx(d / "train-labels-idx1-ubyte", rng.integers(0, 10, size=60).astype(np.uint8))
    write_idx(d / "t10k-images-idx3-ubyte", rng.integers(0, 256, size=(30, 28, 28)).astype(np.uint8))
    write_idx(d / "t10k-labels-idx1-ubyte", rng.integers(0, 10, size=30).astype(np.uint8))
    return d


# ------------------------------------------------------------- config


def test_config_defaults_per_kind(tmp_path):
    cfg = ExperimentConfig.from_dict({"kind": "sine-quantiles", "out_dir": str(tmp_path)})
    assert cfg.widths == (20, 100)
    assert cfg.seeds == 20
    assert cfg.optimizer.method == "adam"
    assert cfg.optimizer.step == pytest.approx(1e-2)
    assert cfg.optimizer.iters == DESK_ITERS

    cfg = ExperimentConfig.from_dict({"kind": "mnist-compare"})
    assert cfg.widths == (128,)
    assert cfg.lambdas == (10.0,)
    assert cfg.optimizer.step == pytest.approx(1e-3)
    assert cfg.optimizer.batch == 100


def test_config_paper_scale_defaults():
    cfg = ExperimentConfig.from_dict({"kind": "sine-quantiles"}, paper_scale=True)
    assert cfg.optimizer.iters == PAPER_ITERS


def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="unknown config keys"):
        ExperimentConfig.from_dict({"kind": "sine-quantiles", "wdths": [3]})


def test_config_rejects_bad_kind():
    with pytest.raises(ConfigError, match="kind"):
        ExperimentConfig.from_dict({"kind": "sinequantiles"})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({})


def test_config_rejects_bad_fields():
    base = {"kind": "sine-quantiles"}
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({**base, "seeds": 0})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({**base, "widths": []})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({**base, "widths": [0, 3]})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({**base, "lambdas": [0.0]})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({**base, "delta": 1.5})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({**base, "optimizer": {"method": "rmsprop", "step": 1e-2, "batch": 4, "iters": 1}})


def test_config_sorts_and_dedupes_widths():
    cfg = ExperimentConfig.from_dict({"kind": "sine-quantiles", "widths": [8, 3, 8, 5]})
    assert cfg.widths == (3, 5, 8)


def test_config_desk_width_cap():
    with pytest.raises(ConfigError, match="paper-scale"):
        ExperimentConfig.from_dict({"kind": "theory-report", "widths": [2048]})
    cfg = ExperimentConfig.from_dict(
        {"kind": "theory-report", "widths": [2048]}, paper_scale=True
    )
    assert cfg.widths == (2048,)


def test_config_file_and_dict_round_trip(tmp_path):
    doc = sine_doc(tmp_path / "out", iters=7)
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(doc))
    cfg = ExperimentConfig.from_file(p)
    assert cfg == ExperimentConfig.from_dict(doc)
    assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg


def test_config_file_errors(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        ExperimentConfig.from_file(tmp_path / "absent.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{nope")
    with pytest.raises(ConfigError, match="not valid JSON"):
        ExperimentConfig.from_file(bad)


def test_load_plan_ref_bundled_and_path(tmp_path):
    plan = load_plan_ref("sine")
    assert plan.symbols() == ("h",)
    with pytest.raises(ConfigError):
        load_plan_ref(str(tmp_path / "nothing.json"))
    with pytest.raises(ConfigError):
        load_plan_ref("no-such-bundle")


# ------------------------------------------------------------- tables


def test_quantile_table_from_samples_matches_numpy():
    vals = [5.0, 1.0, 4.0, 2.0, 3.0, 9.0, 7.0]
    t = QuantileTable.from_samples({4: vals, 2: [1.0, 1.0]})
    assert t.widths == (2, 4)
    expect = np.quantile(vals, [0.1, 0.25, 0.5, 0.75, 0.9])
    assert t.rows[1] == pytest.approx(tuple(expect))
    assert t.median(4) == pytest.approx(np.median(vals))


def test_quantile_table_invariants():
    with pytest.raises(ValueError, match="nondecreasing"):
        QuantileTable((3,), ((1.0, 0.5, 2.0, 3.0, 4.0),))
    with pytest.raises(ValueError, match="ascending"):
        QuantileTable((5, 3), ((1, 2, 3, 4, 5), (1, 2, 3, 4, 5)))
    with pytest.raises(ValueError, match="one quantile row"):
        QuantileTable((3, 5), ((1, 2, 3, 4, 5),))


def test_quantile_table_csv_header_and_rows():
    t = QuantileTable((3,), ((0.125, 0.25, 0.5, 1.0, 2.0),))
    text = t.to_csv_text()
    lines = text.splitlines()
    assert lines[0] == "width,p10,p25,p50,p75,p90"
    assert lines[1] == "3,0.125,0.25,0.5,1.0,2.0"
    assert text.endswith("\n")


def test_accuracy_table_csv_blank_lambda_for_dense():
    t = AccuracyTable((("dense", 8, None, 100, 0.5), ("sparse", 8, 2.0, 40, 0.25)))
    lines = t.to_csv_text().splitlines()
    assert lines[0] == "family,width,lambda,parameters,accuracy"
    assert lines[1] == "dense,8,,100,0.5"
    assert lines[2] == "sparse,8,2.0,40,0.25"


def test_cover_table_csv():
    t = CoverTable(((50, 9, 10, 0.9, 0.25),))
    lines = t.to_csv_text().splitlines()
    assert lines[0] == "n,successes,trials,frequency,lower_bound"
    assert lines[1] == "50,9,10,0.9,0.25"


def test_plot_svg_well_formed_and_log_fallback():
    t = QuantileTable((3, 5), ((0.0, 0.0, 0.1, 0.2, 0.3), (0.0, 0.1, 0.2, 0.3, 0.4)))
    svg = t.plot_svg()
    assert svg.startswith("<svg ")
    assert svg.rstrip().endswith("</svg>")
    assert 'xmlns="http://www.w3.org/2000/svg"' in svg


# --------------------------------------------------------- emit_results


def test_emit_results_empty_warns_and_writes_nothing(tmp_path):
    with pytest.warns(UserWarning, match="no results"):
        out = emit_results([], tmp_path)
    assert out == []
    assert list(tmp_path.iterdir()) == []


def test_emit_results_writes_csv_and_svg(tmp_path):
    t = QuantileTable((3,), ((1.0, 2.0, 3.0, 4.0, 5.0),))
    paths = emit_results([t], tmp_path, plots=True)
    assert [p.name for p in paths] == ["quantiles.csv", "quantiles.svg"]
    assert (tmp_path / "quantiles.csv").read_text() == t.to_csv_text()
    assert "</svg>" in (tmp_path / "quantiles.svg").read_text()


def test_emit_results_io_error_propagates(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    t = QuantileTable((3,), ((1.0, 2.0, 3.0, 4.0, 5.0),))
    with pytest.raises(OSError):
        emit_results([t], blocker / "sub")


def test_emit_results_rejects_unknown_payload(tmp_path):
    with pytest.raises(TypeError):
        emit_results([object()], tmp_path)


# ------------------------------------------------------------- sine run


def test_sine_experiment_end_to_end(tmp_path):
    cfg = ExperimentConfig.from_dict(sine_doc(tmp_path / "out", widths=(3, 5), seeds=3))
    files = run_experiment(cfg, plots=True)
    names = [f.name for f in files]
    assert names == ["config.json", "trials.csv", "quantiles.csv", "quantiles.svg"]
    lines = (tmp_path / "out" / "quantiles.csv").read_text().splitlines()
    assert lines[0] == "width,p10,p25,p50,p75,p90"
    assert len(lines) == 3
    widths = [int(l.split(",")[0]) for l in lines[1:]]
    assert widths == sorted(widths)
    for l in lines[1:]:
        q = [float(x) for x in l.split(",")[1:]]
        assert q == sorted(q)
    trials = (tmp_path / "out" / "trials.csv").read_text().splitlines()
    assert trials[0] == "width,trial,final_loss,dist_from_init"
    assert len(trials) == 1 + 2 * 3


def test_sine_identical_config_identical_bytes(tmp_path):
    out1, out2 = tmp_path / "a", tmp_path / "b"
    run_experiment(ExperimentConfig.from_dict(sine_doc(out1)))
    run_experiment(ExperimentConfig.from_dict(sine_doc(out2)), threads=3)
    assert (out1 / "quantiles.csv").read_bytes() == (out2 / "quantiles.csv").read_bytes()
    assert (out1 / "trials.csv").read_bytes() == (out2 / "trials.csv").read_bytes()


def test_sine_seed_changes_results(tmp_path):
    out1, out2 = tmp_path / "a", tmp_path / "b"
    run_experiment(ExperimentConfig.from_dict(sine_doc(out1)))
    run_experiment(ExperimentConfig.from_dict({**sine_doc(out2), "seed": 1}))
    assert (out1 / "quantiles.csv").read_bytes() != (out2 / "quantiles.csv").read_bytes()


def test_sine_zero_iters_reports_initial_losses(tmp_path):
    cfg = ExperimentConfig.from_dict(sine_doc(tmp_path / "out", widths=(4,), seeds=1, iters=0))
    run_experiment(cfg)
    lines = (tmp_path / "out" / "quantiles.csv").read_text().splitlines()
    q = [float(x) for x in lines[1].split(",")[1:]]
    assert len(set(q)) == 1  # a single trial: all deciles collapse to its loss
    tr = train_one(cfg)
    assert tr.times == (0.0,)
    assert q[0] == tr.final_loss


def test_train_one_reproduces_first_trial(tmp_path):
    cfg = ExperimentConfig.from_dict(sine_doc(tmp_path / "out", widths=(4, 6), seeds=2))
    run_experiment(cfg)
    rows = (tmp_path / "out" / "trials.csv").read_text().splitlines()[1:]
    first = {int(r.split(",")[0]): float(r.split(",")[2]) for r in rows if r.split(",")[1] == "0"}
    assert train_one(cfg).final_loss == first[4]
    assert train_one(cfg, width=6).final_loss == first[6]
    with pytest.raises(ConfigError, match="not in the config widths"):
        train_one(cfg, width=7)


# ------------------------------------------------------------ mnist run


def test_mnist_missing_data_is_config_error(tmp_path):
    cfg = ExperimentConfig.from_dict({
        "kind": "mnist-compare", "widths": [4], "mnist_dir": str(tmp_path / "nope"),
        "out_dir": str(tmp_path / "out"),
    })
    with pytest.raises(ConfigError, match="MNIST"):
        run_experiment(cfg)


def test_mnist_compare_end_to_end(tmp_path, mnist_dir):
    cfg = ExperimentConfig.from_dict({
        "kind": "mnist-compare", "widths": [4], "lambdas": [2.0], "seeds": 2,
        "optimizer": {"step": 1e-3, "batch": 10, "iters": 3},
        "out_dir": str(tmp_path / "out"), "mnist_dir": str(mnist_dir),
    })
    run_experiment(cfg)
    lines = (tmp_path / "out" / "accuracy.csv").read_text().splitlines()
    assert lines[0] == "family,width,lambda,parameters,accuracy"
    assert len(lines) == 1 + 2 * 2  # dense and sparse, two trials each
    w = 4
    dense_params = 784 * w + w * w + w * 10 + (w + w + 10)
    for line in lines[1:]:
        family, width, lam, params, acc = line.split(",")
        assert int(width) == w
        assert 0.0 <= float(acc) <= 1.0
        if family == "dense":
            assert lam == ""
            assert int(params) == dense_params
        else:
            assert float(lam) == 2.0
            # realized edge count near lam*h + h + lam*h + h + 10*h + 10
            assert abs(int(params) - 74) < 35


def test_mnist_determinism_across_threads(tmp_path, mnist_dir):
    def doc(out):
        return {
            "kind": "mnist-compare", "widths": [4], "lambdas": [2.0], "seeds": 1,
            "optimizer": {"step": 1e-3, "batch": 10, "iters": 3},
            "out_dir": str(out), "mnist_dir": str(mnist_dir),
        }
    run_experiment(ExperimentConfig.from_dict(doc(tmp_path / "a")), threads=1)
    run_experiment(ExperimentConfig.from_dict(doc(tmp_path / "b")), threads=2)
    assert (tmp_path / "a" / "accuracy.csv").read_bytes() == (tmp_path / "b" / "accuracy.csv").read_bytes()


# ------------------------------------------------------------ cover run


def test_witness_cover_end_to_end(tmp_path):
    cfg = ExperimentConfig.from_dict({
        "kind": "witness-cover", "widths": [20, 40], "seeds": 8,
        "witness_width": 3, "out_dir": str(tmp_path / "out"),
    })
    files = run_experiment(cfg)
    assert (tmp_path / "out" / "cover.csv") in files
    lines = (tmp_path / "out" / "cover.csv").read_text().splitlines()
    assert lines[0] == "n,successes,trials,frequency,lower_bound"
    assert len(lines) == 3
    for line in lines[1:]:
        n, succ, trials, freq, bound = line.split(",")
        assert int(trials) == 8
        assert 0 <= int(succ) <= 8
        assert float(freq) == pytest.approx(int(succ) / 8)
        assert 0.0 <= float(bound) <= 1.0
    trials_lines = (tmp_path / "out" / "trials.csv").read_text().splitlines()
    assert trials_lines[0] == "n,trial,matched,success"
    assert len(trials_lines) == 1 + 2 * 8


def test_witness_cover_deterministic(tmp_path):
    def doc(out):
        return {
            "kind": "witness-cover", "widths": [15], "seeds": 5,
            "witness_width": 2, "out_dir": str(out),
        }
    run_experiment(ExperimentConfig.from_dict(doc(tmp_path / "a")))
    run_experiment(ExperimentConfig.from_dict(doc(tmp_path / "b")), threads=2)
    assert (tmp_path / "a" / "cover.csv").read_bytes() == (tmp_path / "b" / "cover.csv").read_bytes()


# ----------------------------------------------------------- theory run


def test_theory_report_end_to_end(tmp_path):
    cfg = ExperimentConfig.from_dict({
        "kind": "theory-report", "widths": [30, 60], "witness_width": 2,
        "epsilon": 0.05, "out_dir": str(tmp_path / "out"),
    })
    files = run_experiment(cfg)
    path = tmp_path / "out" / "theory_report.json"
    assert path in files
    doc = json.loads(path.read_text())
    assert [d["width"] for d in doc] == [30, 60]
    for d in doc:
        assert d["epsilon"] == 0.05
        assert d["witness_loss"] == 0.0
        assert d["matching_tolerance"] > 0
        assert set(d["flags"]) == {"input_lambda_ok", "growth_ok", "poisson_ok"}
        assert len(d["min_widths"]) == 5  # one per base vertex of the sine plan
