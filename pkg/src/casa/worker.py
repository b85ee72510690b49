"""Worker process: dials back to the scheduler and runs one task at a time.

In simulated-clock mode the facility drives the worker explicitly: results
are held until :meth:`Worker.flush` and heartbeats are sent by
:meth:`Worker.beat`, which keeps whole runs reproducible.  With
``auto_flush`` the worker reports as soon as a task finishes and heartbeats
on its own timer.
"""

import argparse
import logging
import os
import sys
import threading

from . import wire
from .cache import CacheClient
from .errors import BadRequest, CasaError, Conflict
from .mlserve import MLClient
from .pipeline.task import AnalysisSpec, run_task

log = logging.getLogger(__name__)


class Worker:
    def __init__(self, worker_id, token, scheduler, cache, ml=None, auto_flush=True, heartbeat_interval=None):
        self.worker_id = worker_id
        self.token = token
        self.addresses = {"scheduler": scheduler, "cache": cache, "ml": ml}
        self.auto_flush = auto_flush
        self.heartbeat_interval = heartbeat_interval
        self.tasks_run = 0
        self._alive = False
        self._stopping = threading.Event()
        self._lock = threading.Lock()
        self._task_thread = None
        self._outbox = None
        self._conns = []
        self.sched = None

    # -- lifecycle -----------------------------------------------------------

    def start(self):
        router = wire.Router()
        router.update({"sched.task": self._on_task, "worker.shutdown": self._on_shutdown})
        try:
            self.sched = wire.connect(self.addresses["scheduler"], router, name=f"{self.worker_id}-sched")
            self._conns.append(self.sched)
            self.cache = CacheClient(self._connect("cache"))
            self.ml = MLClient(self._connect("ml")) if self.addresses["ml"] else None
            self._alive = True
            self.sched.request("sched.register", {"worker_id": self.worker_id, "token": self.token})
        except CasaError as exc:
            log.warning("worker %s failed to start: %s", self.worker_id, exc)
            self.stop()
            return self
        self.sched.on_close(lambda conn: self._lost())
        if self.heartbeat_interval:
            threading.Thread(target=self._beat_loop, name=f"{self.worker_id}-beat", daemon=True).start()
        return self

    def _connect(self, service):
        conn = wire.connect(self.addresses[service], name=f"{self.worker_id}-{service}")
        self._conns.append(conn)
        return conn

    def alive(self):
        return self._alive

    def stop(self):
        self._alive = False
        self._stopping.set()
        for conn in self._conns:
            conn.close()

    def crash(self):
        """Fault injection: die immediately, dropping any task in hand."""
        with self._lock:
            self._outbox = None
        self.stop()

    def _lost(self):
        if self._alive:
            self.stop()

    def _beat_loop(self):
        while not self._stopping.wait(self.heartbeat_interval):
            try:
                self.beat()
            except CasaError:
                pass

    # -- scheduler-driven ----------------------------------------------------

    def _on_task(self, payload, conn):
        with self._lock:
            if self._task_thread is not None and self._task_thread.is_alive() or self._outbox is not None:
                raise Conflict(f"{self.worker_id} is busy")
            try:
                spec = AnalysisSpec.from_doc(payload["spec"])
                task = (payload["graph_id"], payload["partition"], payload["token"])
            except KeyError as exc:
                raise BadRequest(f"task missing {exc.args[0]!r}") from None
            self._task_thread = threading.Thread(target=self._run, args=(spec, task),
                                                 name=f"{self.worker_id}-task", daemon=True)
            self._task_thread.start()
        return {}

    def _run(self, spec, task):
        graph_id, partition, token = task
        message = {"worker_id": self.worker_id, "graph_id": graph_id, "partition": partition}
        try:
            message["result"] = run_task(spec, partition, self.cache, self.ml, token).to_doc()
        except CasaError as exc:
            message["error"] = f"{exc.code}: {exc.message}"
        except Exception as exc:  # noqa: BLE001
            log.exception("task %s[%s] crashed", graph_id, partition)
            message["error"] = f"internal: {type(exc).__name__}: {exc}"
        if not self._alive:
            return
        with self._lock:
            self._outbox = message
            self.tasks_run += 1
        if self.auto_flush:
            self._send()

    def _on_shutdown(self, payload, conn):
        self._alive = False
        self._stopping.set()
        threading.Thread(target=self.stop, daemon=True).start()
        return {}

    # -- facility-driven -----------------------------------------------------

    def beat(self):
        if self._alive:
            self.sched.request("sched.heartbeat", {"worker_id": self.worker_id})

    def settle(self, timeout=120.0):
        thread = self._task_thread
        if thread is not None:
            thread.join(timeout)

    def flush(self):
        """Wait for the task in hand (if any) and report its result."""
        self.settle()
        if self._alive:
            self._send()

    def _send(self):
        with self._lock:
            message, self._outbox = self._outbox, None
        if message is None:
            return
        try:
            self.sched.request("sched.complete", message)
        except CasaError as exc:
            log.warning("%s could not report %s[%s]: %s", self.worker_id, message["graph_id"],
                        message["partition"], exc)


class ThreadLauncher:
    """Runs worker jobs as in-process workers (harness mode)."""

    def __init__(self, auto_flush=False, heartbeat_interval=None):
        self.auto_flush = auto_flush
        self.heartbeat_interval = heartbeat_interval
        self.workers = {}

    def start(self, record):
        args = record.spec.args
        worker = Worker(args["worker_id"], args["token"], args["scheduler"], args["cache"], args.get("ml"),
                        auto_flush=self.auto_flush, heartbeat_interval=self.heartbeat_interval)
        self.workers[worker.worker_id] = worker
        return worker.start()

    def live(self):
        return [w for _, w in sorted(self.workers.items()) if w.alive()]


class _ProcessHandle:
    def __init__(self, proc):
        self.proc = proc

    def alive(self):
        return self.proc.poll() is None

    def stop(self):
        if self.alive():
            self.proc.terminate()
            try:
                self.proc.wait(5)
            except Exception:  # noqa: BLE001
                self.proc.kill()


class ProcessLauncher:
    """Runs worker jobs as child processes that dial back over TCP."""

    def __init__(self, heartbeat_interval=1.0):
        self.heartbeat_interval = heartbeat_interval

    def start(self, record):
        import subprocess

        args = record.spec.args
        cmd = [sys.executable, "-m", "casa.worker", "--worker-id", args["worker_id"],
               "--scheduler", args["scheduler"], "--cache", args["cache"],
               "--heartbeat", str(self.heartbeat_interval)]
        if args.get("ml"):
            cmd += ["--ml", args["ml"]]
        env = dict(os.environ, CASA_WORKER_TOKEN=args["token"])
        return _ProcessHandle(subprocess.Popen(cmd, env=env))


def main(argv=None):
    parser = argparse.ArgumentParser(prog="casa-worker")
    parser.add_argument("--worker-id", required=True)
    parser.add_argument("--scheduler", required=True)
    parser.add_argument("--cache", required=True)
    parser.add_argument("--ml")
    parser.add_argument("--heartbeat", type=float, default=1.0)
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO)
    worker = Worker(args.worker_id, os.environ["CASA_WORKER_TOKEN"], args.scheduler, args.cache, args.ml,
                    auto_flush=True, heartbeat_interval=args.heartbeat).start()
    while worker.alive():
        worker._stopping.wait(1.0)
    return 0


if __name__ == "__main__":
    sys.exit(main())
