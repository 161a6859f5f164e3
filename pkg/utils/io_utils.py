"""
utils/io_utils.py

Result files: metrics CSV, JSON documents, checkpoints.
Every path is resolved through output_path(), which refuses to leave the
configured output directory.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from datetime import datetime
from typing import Iterable, Optional

from pytz import timezone

from errors import InvalidArgumentError, MalformedShardFileError, ShardIOError

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

CSV_COLUMNS = [
    "schema_version",
    "k",
    "grad_phi_sq",
    "grad_theta_sq",
    "consensus_err",
    "m_k",
    "running_avg_m",
    "avg_train_loss",
    "avg_test_accuracy",
    "avg_test_loss",
]


def get_utc_time() -> str:
    return datetime.now(timezone("UTC")).strftime("%Y-%m-%d %H:%M:%S")


def output_path(out_dir: str, name: str) -> str:
    """Path of `name` inside out_dir; names that would escape it are rejected."""
    root = os.path.realpath(out_dir)
    target = os.path.realpath(os.path.join(root, name))
    if os.path.commonpath([root, target]) != root:
        raise InvalidArgumentError(f"refusing to write outside {out_dir}: {name}")
    return target


def ensure_dir(path: str) -> None:
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as e:
        raise ShardIOError(path, e.strerror or str(e)) from e


def fmt_real(x) -> str:
    """Shortest round-trip decimal; empty for missing values."""
    if x is None:
        return ""
    if isinstance(x, int):
        return str(x)
    return repr(float(x))


def write_metrics_csv(path: str, records: Iterable, append: bool = False) -> None:
    exists = append and os.path.exists(path)
    try:
        with open(path, "a" if append else "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            if not exists:
                w.writerow(CSV_COLUMNS)
            for r in records:
                w.writerow(
                    [
                        SCHEMA_VERSION,
                        r.k,
                        fmt_real(r.grad_phi_sq),
                        fmt_real(r.grad_theta_sq),
                        fmt_real(r.consensus_err),
                        fmt_real(r.m_k),
                        fmt_real(r.running_avg_m),
                        fmt_real(r.avg_train_loss),
                        fmt_real(r.avg_test_accuracy),
                        fmt_real(r.avg_test_loss),
                    ]
                )
    except OSError as e:
        raise ShardIOError(path, e.strerror or str(e)) from e


def read_metrics_csv(path: str) -> list:
    """Rows as dicts of floats (None for empty fields)."""
    with open(path, newline="", encoding="utf-8") as f:
        rows = []
        for row in csv.DictReader(f):
            rows.append({k: (float(v) if v != "" else None) for k, v in row.items()})
        return rows


def write_json(path: str, doc: dict) -> None:
    try:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(doc, f, indent=2)
            f.write("\n")
    except OSError as e:
        raise ShardIOError(path, e.strerror or str(e)) from e


def read_json(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise ShardIOError(path, e.strerror or str(e)) from e
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise MalformedShardFileError(path, f"invalid JSON ({e.msg} at line {e.lineno})") from e
    if not isinstance(doc, dict):
        raise MalformedShardFileError(path, "top level is not an object")
    return doc


def save_checkpoint(out_dir: str, checkpoint) -> str:
    path = output_path(out_dir, f"checkpoint_seed{checkpoint.seed}_round{checkpoint.round_index}.json")
    write_json(path, checkpoint.to_json())
    logger.info("checkpoint written: %s", path)
    return path


def load_checkpoint(path: str):
    from engine import Checkpoint

    return Checkpoint.from_json(read_json(path), path)


def write_table_csv(path: str, header: list, rows: list) -> None:
    try:
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([fmt_real(v) if isinstance(v, float) or v is None else v for v in row])
    except OSError as e:
        raise ShardIOError(path, e.strerror or str(e)) from e


def print_status(text: str, ok: Optional[bool] = None) -> None:
    prefix = "" if ok is None else ("✅ " if ok else "❌ ")
    print(prefix + text)
