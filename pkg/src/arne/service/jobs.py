"""Single-worker job queue.

Jobs run one at a time on a daemon thread, which keeps heavy numeric
work off the request path and preserves the single-threaded-kernel
determinism contract of training runs.
"""

import itertools
import queue
import threading
import traceback


class Job:
    def __init__(self, job_id, kind, fn):
        self.job_id = job_id
        self.kind = kind
        self.fn = fn
        self.state = "queued"
        self.result = None
        self.error = None
        self.done = threading.Event()

    def status(self):
        return {
            "job_id": self.job_id,
            "kind": self.kind,
            "state": self.state,
            "error": self.error,
            "result": self.result,
        }


class JobManager:
    def __init__(self):
        self._jobs = {}
        self._order = []
        self._queue = queue.Queue()
        self._lock = threading.Lock()
        self._counter = itertools.count(1)
        self._worker = threading.Thread(target=self._run, daemon=True)
        self._worker.start()

    def submit(self, kind, fn):
        with self._lock:
            job = Job(f"{kind}-{next(self._counter):04d}", kind, fn)
            self._jobs[job.job_id] = job
            self._order.append(job.job_id)
        self._queue.put(job)
        return job

    def get(self, job_id):
        with self._lock:
            return self._jobs.get(job_id)

    def list(self):
        with self._lock:
            return [self._jobs[i] for i in self._order]

    def _run(self):
        while True:
            job = self._queue.get()
            job.state = "running"
            try:
                job.result = job.fn()
                job.state = "done"
            except Exception as exc:  # surfaced through the job status
                job.error = f"{type(exc).__name__}: {exc}"
                job.state = "error"
                traceback.print_exc()
            finally:
                job.done.set()
                self._queue.task_done()
