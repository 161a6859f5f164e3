import csv
import glob
import json
import logging
import os

import pytest

import deprl_runner

from .conftest import MINIMAL_SPEC


def _read(path):
    with open(path, "rb") as f:
        return f.read()


def _run(*argv):
    return deprl_runner.main(list(argv))


def test_run_writes_metrics_and_summary(tmp_path, write_spec):
    spec = write_spec(MINIMAL_SPEC)
    out = os.path.join(tmp_path, "out")
    assert _run("run", "--spec", spec, "--out", out) == 0

    with open(os.path.join(out, "metrics_seed1.csv"), newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 10
    assert [int(r["k"]) for r in rows] == list(range(10))
    assert all(r["schema_version"] == "1" for r in rows)

    with open(os.path.join(out, "summary.json"), encoding="utf-8") as f:
        summary = json.load(f)
    assert summary["schema_version"] == 1
    assert len(summary["per_seed"]) == len(summary["seeds"]) == 1
    block = summary["per_seed"][0]
    assert set(block["mixing"]) == {"p", "q", "C"}
    assert len(block["consensus_weights"]) == 16
    assert summary["across_seeds"]["running_avg_m"]["stdev"] is None


def test_rerun_gives_identical_csv_bytes_across_thread_counts(tmp_path, write_spec):
    spec = write_spec(MINIMAL_SPEC)
    a, b = os.path.join(tmp_path, "a"), os.path.join(tmp_path, "b")
    assert _run("run", "--spec", spec, "--out", a) == 0
    assert _run("run", "--spec", spec, "--out", b, "--threads", "8") == 0
    assert _read(os.path.join(a, "metrics_seed1.csv")) == _read(os.path.join(b, "metrics_seed1.csv"))


def test_several_seeds_in_parallel(tmp_path, write_spec):
    spec = write_spec(MINIMAL_SPEC.replace("seeds = 1", "seeds = 1, 2, 3"))
    out = os.path.join(tmp_path, "out")
    assert _run("run", "--spec", spec, "--out", out, "--seed-workers", "3") == 0
    assert sorted(os.path.basename(p) for p in glob.glob(os.path.join(out, "metrics_seed*.csv"))) == [
        "metrics_seed1.csv",
        "metrics_seed2.csv",
        "metrics_seed3.csv",
    ]
    with open(os.path.join(out, "summary.json"), encoding="utf-8") as f:
        summary = json.load(f)
    assert [b["seed"] for b in summary["per_seed"]] == [1, 2, 3]
    assert summary["across_seeds"]["final_avg_train_loss"]["stdev"] is not None


def test_unknown_field_exits_2(tmp_path, write_spec, capsys):
    spec = write_spec(MINIMAL_SPEC + "run.momentum = 0.9\n")
    assert _run("run", "--spec", spec, "--out", str(tmp_path)) == 2
    assert "run.momentum" in capsys.readouterr().out


def test_divergent_run_exits_3(tmp_path, write_spec):
    text = MINIMAL_SPEC.replace("run.alpha = 0.05", "run.alpha = 1e150").replace("run.beta = 0.05", "run.beta = 1e150")
    spec = write_spec(text)
    assert _run("run", "--spec", spec, "--out", str(tmp_path)) == 3


def test_checkpoints_and_resume(tmp_path, write_spec):
    spec = write_spec(MINIMAL_SPEC)
    full = os.path.join(tmp_path, "full")
    assert _run("run", "--spec", spec, "--out", full, "--checkpoint-every", "4") == 0
    ck = os.path.join(full, "checkpoint_seed1_round4.json")
    assert os.path.exists(ck)
    assert os.path.exists(os.path.join(full, "checkpoint_seed1_round8.json"))

    part = os.path.join(tmp_path, "part")
    os.makedirs(part)
    with open(os.path.join(full, "metrics_seed1.csv"), encoding="utf-8") as f:
        head = f.read().splitlines()[:5]
    with open(os.path.join(part, "metrics_seed1.csv"), "w", encoding="utf-8") as f:
        f.write("\n".join(head) + "\n")
    assert _run("run", "--spec", spec, "--out", part, "--resume", ck) == 0
    assert _read(os.path.join(part, "metrics_seed1.csv")) == _read(os.path.join(full, "metrics_seed1.csv"))


def test_gradcheck_default_passes(capsys):
    assert _run("gradcheck", "--instances", "20") == 0
    assert "worst relative error" in capsys.readouterr().out


def test_gradcheck_is_reproducible(capsys):
    _run("gradcheck", "--instances", "1", "--seed", "5")
    first = capsys.readouterr().out.splitlines()[0]
    _run("gradcheck", "--instances", "1", "--seed", "5")
    assert capsys.readouterr().out.splitlines()[0] == first


def test_gradcheck_impossible_tolerance_exits_1(capsys):
    assert _run("gradcheck", "--instances", "4", "--tolerance", "1e-12") == 1
    assert "failing seeds" in capsys.readouterr().out


def test_sweep_needs_worker_counts(tmp_path, write_spec):
    spec = write_spec(MINIMAL_SPEC)
    assert _run("sweep-speedup", "--spec", spec, "--out", str(tmp_path), "--counts", "", "--epsilon", "1.0") == 2


def test_sweep_single_count_is_its_own_base(tmp_path, write_spec):
    spec = write_spec(MINIMAL_SPEC)
    assert _run("sweep-speedup", "--spec", spec, "--out", str(tmp_path), "--counts", "4", "--epsilon", "1e6") == 0
    with open(os.path.join(tmp_path, "speedup.csv"), newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 1
    assert rows[0]["n_workers"] == "4"
    assert float(rows[0]["speedup"]) == 1.0
    assert float(rows[0]["rounds_to_threshold"]) == 1.0


def test_sweep_unreached_threshold_is_absent(tmp_path, write_spec):
    spec = write_spec(MINIMAL_SPEC)
    assert _run("sweep-speedup", "--spec", spec, "--out", str(tmp_path), "--counts", "2,4", "--epsilon", "1e-30") == 0
    with open(os.path.join(tmp_path, "speedup.csv"), newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    assert [r["rounds_to_threshold"] for r in rows] == ["", ""]
    assert rows[0]["speedup"] == "1.0" and rows[1]["speedup"] == ""


def test_generalize_writes_report(tmp_path, write_spec):
    text = MINIMAL_SPEC + "generalize.new_workers = 2\ngeneralize.head_steps = 20\n"
    spec = write_spec(text)
    assert _run("generalize", "--spec", spec, "--out", str(tmp_path)) == 0
    with open(os.path.join(tmp_path, "generalization.json"), encoding="utf-8") as f:
        doc = json.load(f)
    row = doc["per_seed"][0]
    assert len(row["learned"]["test_losses"]) == 2
    assert row["learned"]["mean_accuracy"] is None
    assert len(row["training_similarity"]["heads"]) == 4
    assert row["training_similarity"]["data"] is None


def test_missing_subcommand_is_an_error():
    assert _run() == 2


@pytest.mark.parametrize("flag", ["--threads", "--checkpoint-every"])
def test_non_positive_counts_rejected(tmp_path, write_spec, flag):
    spec = write_spec(MINIMAL_SPEC)
    assert _run("run", "--spec", spec, "--out", str(tmp_path), flag, "0") == 2


def test_each_failed_seed_is_logged_once(tmp_path, write_spec, caplog):
    text = MINIMAL_SPEC.replace("run.alpha = 0.05", "run.alpha = 1e150").replace("run.beta = 0.05", "run.beta = 1e150")
    spec = write_spec(text.replace("seeds = 1", "seeds = 1, 2"))
    with caplog.at_level(logging.INFO):
        assert _run("run", "--spec", spec, "--out", str(tmp_path), "--seed-workers", "2") == 3
    errors = [r for r in caplog.records if r.levelno >= logging.ERROR]
    assert [r.name for r in errors] == ["handlers.run", "deprl_runner"]


def test_partial_theory_constants_rejected(tmp_path, write_spec, capsys):
    spec = write_spec(MINIMAL_SPEC + "theory.lipschitz_l = 1.0\n")
    assert _run("run", "--spec", spec, "--out", str(tmp_path)) == 2
    out = capsys.readouterr().out
    assert "theory.sigma" in out and "theory.varsigma" in out


def test_large_complete_graph_reports_vacuous_mixing(tmp_path, write_spec):
    text = (
        MINIMAL_SPEC.replace("topology.kind = ring", "topology.kind = complete")
        .replace("task.n_workers = 4", "task.n_workers = 200")
        .replace("task.samples_per_worker = 20", "task.samples_per_worker = 4")
        .replace("run.rounds = 10", "run.rounds = 2")
    )
    spec = write_spec(text + "theory.lipschitz_l = 1.0\ntheory.sigma = 1.0\ntheory.varsigma = 1.0\n")
    assert _run("run", "--spec", spec, "--out", str(tmp_path)) == 0
    with open(os.path.join(tmp_path, "summary.json"), encoding="utf-8") as f:
        block = json.load(f)["per_seed"][0]
    assert block["mixing"]["C"] is None
    assert block["corollary_k_floor"] is None
    assert "vacuous" in block["mixing_unavailable"]
    assert any("vacuous" in w for w in block["feasibility_warnings"])


def test_run_summary_carries_similarity(tmp_path, write_spec):
    text = MINIMAL_SPEC + "task.output = classification\ntask.n_classes = 3\n"
    spec = write_spec(text)
    assert _run("run", "--spec", spec, "--out", str(tmp_path)) == 0
    with open(os.path.join(tmp_path, "summary.json"), encoding="utf-8") as f:
        sim = json.load(f)["per_seed"][0]["similarity"]
    assert [len(sim[key]) for key in ("data", "heads", "representations")] == [4, 4, 4]
    assert all(len(row) == 4 for row in sim["data"])


def test_regression_run_has_no_data_similarity(tmp_path, write_spec):
    spec = write_spec(MINIMAL_SPEC)
    assert _run("run", "--spec", spec, "--out", str(tmp_path)) == 0
    with open(os.path.join(tmp_path, "summary.json"), encoding="utf-8") as f:
        sim = json.load(f)["per_seed"][0]["similarity"]
    assert sim["data"] is None
    assert len(sim["representations"]) == 4
