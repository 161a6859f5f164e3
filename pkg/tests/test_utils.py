import logging
import os
import threading

import pytest

import metrics
from errors import InvalidArgumentError
from utils import io_utils
from utils.job_queue import JobQueue
from utils.rng import substream


def test_output_path_stays_inside(tmp_path):
    inside = io_utils.output_path(str(tmp_path), "metrics_seed1.csv")
    assert os.path.dirname(inside) == os.path.realpath(tmp_path)
    with pytest.raises(InvalidArgumentError):
        io_utils.output_path(str(tmp_path), "../escape.csv")
    with pytest.raises(InvalidArgumentError):
        io_utils.output_path(str(tmp_path), "/etc/passwd")


def test_fmt_real():
    assert io_utils.fmt_real(None) == ""
    assert io_utils.fmt_real(3) == "3"
    assert io_utils.fmt_real(0.1 + 0.2) == "0.30000000000000004"


def test_metrics_csv_layout(tmp_path):
    rec = metrics.MetricsRecord(k=0, grad_phi_sq=1.5, grad_theta_sq=0.25, consensus_err=0.0, m_k=2.0, avg_train_loss=0.5, running_avg_m=2.0)
    path = os.path.join(tmp_path, "m.csv")
    io_utils.write_metrics_csv(path, [rec])
    with open(path, encoding="utf-8") as f:
        lines = f.read().splitlines()
    assert lines[0] == ",".join(io_utils.CSV_COLUMNS)
    assert lines[1] == "1,0,1.5,0.25,0.0,2.0,2.0,0.5,,"

    io_utils.write_metrics_csv(path, [rec], append=True)
    rows = io_utils.read_metrics_csv(path)
    assert len(rows) == 2
    assert rows[1]["avg_test_accuracy"] is None


def test_substreams_are_keyed():
    a = substream(1, 0, 0, 1).random(3)
    b = substream(1, 0, 0, 1).random(3)
    c = substream(1, 1, 0, 1).random(3)
    assert (a == b).all() and not (a == c).all()
    with pytest.raises(ValueError):
        substream(-1, 0)


def test_job_queue_runs_jobs_in_submission_order():
    seen = []
    lock = threading.Lock()

    def work(payload):
        with lock:
            seen.append(payload["seed"])
        return payload["seed"] * 2

    with JobQueue(work, workers=3) as q:
        ids = [q.create_job({"seed": s}) for s in (5, 1, 7, 3)]
        jobs = q.wait()
    assert [j["id"] for j in jobs] == ids
    assert [j["result"] for j in jobs] == [10, 2, 14, 6]
    assert all(j["status"] == "done" for j in jobs)
    assert sorted(seen) == [1, 3, 5, 7]


def test_job_queue_keeps_errors():
    def work(payload):
        if payload["seed"] == 2:
            raise InvalidArgumentError("bad seed")
        return payload["seed"]

    with JobQueue(work) as q:
        ok = q.create_job({"seed": 1})
        bad = q.create_job({"seed": 2})
        q.wait()
        assert q.get_job(ok)["status"] == "done"
        assert q.get_job(bad)["status"] == "error"
        assert isinstance(q.get_job(bad)["error"], InvalidArgumentError)


def test_job_queue_leaves_error_reporting_to_the_reader(caplog):
    def work(payload):
        raise InvalidArgumentError("bad seed")

    with caplog.at_level(logging.DEBUG, logger="utils.job_queue"):
        with JobQueue(work) as q:
            q.create_job({"seed": 1})
            jobs = q.wait()
    assert jobs[0]["status"] == "error"
    assert [r for r in caplog.records if r.name == "utils.job_queue" and r.levelno >= logging.WARNING] == []
