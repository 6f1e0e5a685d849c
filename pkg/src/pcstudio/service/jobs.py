"""Asynchronous job execution with a persisted, monotone state machine.

One worker thread executes jobs serially (deterministic on the toy backend);
every state transition is appended to a per-job event log so the machine is
auditable after the fact.
"""

from __future__ import annotations

import json
import os
import queue
import threading
import time
import uuid
from dataclasses import dataclass, field
from typing import Callable

VALID_TRANSITIONS = {
    "queued": {"running"},
    "running": {"done", "failed"},
    "done": set(),
    "failed": set(),
}

JOB_KINDS = ("embed", "tune", "generate", "edit", "compose", "eval")


class JobStateError(RuntimeError):
    pass


@dataclass
class JobRecord:
    job_id: str
    kind: str
    state: str = "queued"
    progress: float = 0.0
    result_ref: dict | None = None
    error: str | None = None

    def to_json(self) -> dict:
        return {
            "job_id": self.job_id,
            "kind": self.kind,
            "state": self.state,
            "progress": self.progress,
            "result_ref": self.result_ref,
            "error": self.error,
        }


class JobManager:
    def __init__(self, log_dir: str):
        self._log_dir = log_dir
        os.makedirs(log_dir, exist_ok=True)
        self._jobs: dict[str, JobRecord] = {}
        self._fns: dict[str, Callable[[JobRecord], dict]] = {}
        self._lock = threading.Lock()
        self._queue: queue.Queue[str] = queue.Queue()
        self._worker = threading.Thread(target=self._run, daemon=True)
        self._worker.start()

    def _log_event(self, job: JobRecord, event: str) -> None:
        path = os.path.join(self._log_dir, f"{job.job_id}.jsonl")
        with open(path, "a") as f:
            f.write(json.dumps({"ts": time.time(), "event": event, **job.to_json()}) + "\n")

    def _transition(self, job: JobRecord, state: str) -> None:
        if state not in VALID_TRANSITIONS[job.state]:
            raise JobStateError(f"illegal transition {job.state} -> {state}")
        job.state = state
        self._log_event(job, state)

    def set_progress(self, job: JobRecord, progress: float) -> None:
        with self._lock:
            job.progress = max(job.progress, float(progress))

    def submit(self, kind: str, fn: Callable[[JobRecord], dict]) -> JobRecord:
        if kind not in JOB_KINDS:
            raise ValueError(f"unknown job kind {kind!r}")
        job = JobRecord(job_id=uuid.uuid4().hex[:16], kind=kind)
        with self._lock:
            self._jobs[job.job_id] = job
            self._fns[job.job_id] = fn
        self._log_event(job, "queued")
        self._queue.put(job.job_id)
        return job

    def get(self, job_id: str) -> JobRecord | None:
        with self._lock:
            return self._jobs.get(job_id)

    def wait(self, job_id: str, timeout: float = 120.0) -> JobRecord:
        deadline = time.time() + timeout
        while time.time() < deadline:
            job = self.get(job_id)
            if job and job.state in ("done", "failed"):
                return job
            time.sleep(0.01)
        raise TimeoutError(f"job {job_id} did not finish in {timeout}s")

    def _run(self) -> None:
        while True:
            job_id = self._queue.get()
            with self._lock:
                job = self._jobs[job_id]
                fn = self._fns.pop(job_id)
            self._transition(job, "running")
            try:
                result = fn(job)
                with self._lock:
                    job.result_ref = result
                    job.progress = 1.0
                self._transition(job, "done")
            except Exception as e:  # job failures are data, not crashes
                with self._lock:
                    job.error = f"{type(e).__name__}: {e}"
                self._transition(job, "failed")

    def event_log(self, job_id: str) -> list[dict]:
        path = os.path.join(self._log_dir, f"{job_id}.jsonl")
        if not os.path.exists(path):
            return []
        with open(path) as f:
            return [json.loads(line) for line in f if line.strip()]
