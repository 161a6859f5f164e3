"""
errors.py
Exception vocabulary shared by the library modules and the command handlers.
"""

from __future__ import annotations

from typing import Optional


class DeprlError(Exception):
    """Root of every error raised on purpose by this project."""


class InvalidArgumentError(DeprlError, ValueError):
    pass


class ConstructionError(DeprlError):
    """A randomized construction gave up after its retry cap."""


class ShardFileError(DeprlError):
    pass


class ShardIOError(ShardFileError):
    def __init__(self, path: str, reason: str):
        super().__init__(f"I/O failure on {path}: {reason}")
        self.path = path


class MalformedShardFileError(ShardFileError):
    def __init__(self, path: str, reason: str):
        super().__init__(f"Malformed file {path}: {reason}")
        self.path = path


class RunAbortedError(DeprlError):
    """Non-finite parameters showed up during training."""

    def __init__(self, worker: int, round_index: int, what: str):
        super().__init__(f"Run aborted at round {round_index}: worker {worker} has non-finite {what}")
        self.worker = worker
        self.round_index = round_index


class SpecError(DeprlError):
    def __init__(self, message: str, line: Optional[int] = None, field: Optional[str] = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field '{field}'")
        prefix = f"[{', '.join(where)}] " if where else ""
        super().__init__(prefix + message)
        self.line = line
        self.field = field
