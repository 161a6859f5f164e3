"""
utils/job_queue.py

In-memory job queue for running experiment seeds on worker threads.

- JobQueue(process_fn, workers) -> starts the worker threads
- create_job(payload) -> job_id
- get_job(job_id) -> job dict (status: queued | running | done | error)
- wait() -> blocks until every queued job finished
"""

from __future__ import annotations

import logging
import queue
import threading
import time
import uuid
from typing import Any, Callable, Dict, List, Optional

logger = logging.getLogger(__name__)

MAX_WORKERS = 16


class JobQueue:
    def __init__(self, process_fn: Callable[[dict], Any], workers: int = 1):
        if not isinstance(workers, int) or workers < 1:
            workers = 1
        if workers > MAX_WORKERS:
            workers = MAX_WORKERS

        self._process_fn = process_fn
        self._jobs: Dict[str, Dict[str, Any]] = {}
        self._order: List[str] = []
        self._queue: "queue.Queue[Optional[str]]" = queue.Queue()
        self._lock = threading.Lock()
        self._threads = []
        for i in range(workers):
            t = threading.Thread(target=self._worker_loop, daemon=True, name=f"seed-worker-{i+1}")
            t.start()
            self._threads.append(t)

    def create_job(self, payload: dict) -> str:
        """Enqueue a job and return its id."""
        job_id = str(uuid.uuid4())
        with self._lock:
            self._jobs[job_id] = {
                "id": job_id,
                "status": "queued",
                "payload": payload,
                "result": None,
                "error": None,
                "created_at": time.time(),
            }
            self._order.append(job_id)
        self._queue.put(job_id)
        return job_id

    def get_job(self, job_id: str) -> Optional[dict]:
        return self._jobs.get(job_id)

    def jobs(self) -> List[dict]:
        """All jobs in submission order."""
        return [self._jobs[j] for j in self._order]

    def wait(self) -> List[dict]:
        self._queue.join()
        return self.jobs()

    def close(self) -> None:
        for _ in self._threads:
            self._queue.put(None)
        for t in self._threads:
            t.join()

    def __enter__(self) -> "JobQueue":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def _worker_loop(self):
        while True:
            job_id = self._queue.get()
            if job_id is None:
                self._queue.task_done()
                return
            job = self._jobs.get(job_id)
            if not job:
                self._queue.task_done()
                continue

            job["status"] = "running"
            try:
                job["result"] = self._process_fn(job["payload"])
                job["status"] = "done"
                logger.debug("job %s done", job_id)
            except Exception as e:
                # kept on the job; whoever reads the result reports it
                job["error"] = e
                job["status"] = "error"
            finally:
                self._queue.task_done()
