"""Map-reduce task scheduler with dial-back workers and adaptive scale-out.

The scheduler never starts workers itself: it submits ``worker`` jobs to the
batch queue, and the workers those jobs launch connect back and register.
All state changes happen under one lock, driven by the facility clock
(``advance``/``tick``/``assign``) and by worker messages.
"""

import enum
import itertools
import logging
import math
import threading
from dataclasses import dataclass, field

from .batchsim import JobSpec
from .errors import BadRequest, CasaError, Conflict, NotFound, Unauthorized
from .pipeline.hist import Histogram, fold
from .pipeline.task import AnalysisSpec

log = logging.getLogger(__name__)

HEARTBEAT_MISSES = 3
REDUCERS = ("histogram_merge",)


class WorkerState(str, enum.Enum):
    REGISTERED = "Registered"
    IDLE = "Idle"
    BUSY = "Busy"
    DRAINING = "Draining"
    GONE = "Gone"


class GraphState(str, enum.Enum):
    PENDING = "Pending"
    RUNNING = "Running"
    DONE = "Done"
    FAILED = "Failed"


@dataclass(frozen=True)
class ScalerPolicy:
    tasks_per_worker: int = 2
    min_workers: int = 0
    max_workers: int = 8
    idle_timeout: int = 10

    def __post_init__(self):
        for name in ("tasks_per_worker", "min_workers", "max_workers", "idle_timeout"):
            if type(getattr(self, name)) is not int:
                raise BadRequest(f"scaler.{name} must be an integer")
        if not 0 <= self.min_workers <= self.max_workers:
            raise BadRequest("scaler needs 0 <= min_workers <= max_workers")
        if self.tasks_per_worker < 1:
            raise BadRequest("scaler.tasks_per_worker must be >= 1")
        if self.idle_timeout < 1:
            raise BadRequest("scaler.idle_timeout must be >= 1")

    def desired(self, outstanding):
        return min(max(math.ceil(outstanding / self.tasks_per_worker), self.min_workers), self.max_workers)


@dataclass(frozen=True)
class TaskGraph:
    graph_id: str
    dataset: str
    n_partitions: int
    map_spec: AnalysisSpec
    reduce: str = "histogram_merge"

    def validate(self):
        if type(self.n_partitions) is not int or self.n_partitions < 1:
            raise BadRequest("n_partitions must be an integer >= 1")
        if self.reduce not in REDUCERS:
            raise BadRequest(f"unknown reduce {self.reduce!r}")
        if self.dataset != self.map_spec.dataset:
            raise BadRequest("graph dataset differs from map_spec.dataset")
        return self

    def to_doc(self):
        return {"graph_id": self.graph_id, "dataset": self.dataset, "n_partitions": self.n_partitions,
                "map_spec": self.map_spec.to_doc(), "reduce": self.reduce}

    @classmethod
    def from_doc(cls, doc):
        if not isinstance(doc, dict):
            raise BadRequest("graph must be an object")
        try:
            spec = AnalysisSpec.from_doc(doc["map_spec"])
            return cls(doc.get("graph_id") or "", doc.get("dataset", spec.dataset), doc["n_partitions"], spec,
                       doc.get("reduce", "histogram_merge")).validate()
        except KeyError as exc:
            raise BadRequest(f"graph missing {exc.args[0]!r}") from None


@dataclass
class WorkerInfo:
    worker_id: str
    job_id: int = None
    state: WorkerState = WorkerState.REGISTERED
    idle_since: int = 0
    completed: int = 0
    task: tuple = None
    last_beat: int = 0
    conn: object = field(default=None, repr=False)

    def to_doc(self):
        return {"worker_id": self.worker_id, "job_id": self.job_id, "state": self.state.value,
                "idle_since": self.idle_since, "completed": self.completed,
                "task": list(self.task) if self.task else None}


@dataclass
class _Graph:
    graph: TaskGraph
    token: str
    seq: int
    state: GraphState = GraphState.PENDING
    results: dict = field(default_factory=dict)
    result: Histogram = None
    error: str = None
    t_submit: int = 0
    t_done: int = None


class Scheduler:
    """Dask-like scheduler.

    ``batch`` is anything with ``submit(spec, token)``, ``remove(job_id,
    token)`` and ``query()`` (a :class:`~casa.batchsim.BatchClient` in the
    facility).  ``worker_args`` is merged into every worker job's args; it
    carries the service addresses workers dial.
    """

    def __init__(self, issuer, batch, policy=None, queue="default", worker_args=None, worker_ttl=None):
        self.issuer = issuer
        self.batch = batch
        self.policy = policy or ScalerPolicy()
        self.queue = queue
        self.worker_args = dict(worker_args or {})
        self.worker_ttl = worker_ttl or issuer.max_ttl
        self.now = 0
        self.graphs = {}
        self.pending = []
        self.workers = {}
        self.pending_jobs = {}
        self.trace = []
        self.peak_workers = 0
        self._seq = itertools.count(1)
        self._worker_seq = itertools.count(1)
        self._lock = threading.RLock()

    # -- helpers -------------------------------------------------------------

    def _service_token(self):
        return self.issuer.mint("scheduler", ["submit:queue/" + self.queue], ttl=self.issuer.max_ttl,
                                session=self.issuer.max_ttl)

    def live_workers(self):
        return [w for w in self.workers.values() if w.state is not WorkerState.GONE]

    def _note_peak(self):
        self.peak_workers = max(self.peak_workers, len(self.live_workers()))

    def _requeue(self, task):
        graph_id, partition = task
        g = self.graphs.get(graph_id)
        if g is not None and g.state is not GraphState.FAILED and partition not in g.results:
            self.pending.append((g.seq, partition, graph_id))
            self.pending.sort()

    # -- graphs --------------------------------------------------------------

    def submit_graph(self, graph, token):
        if isinstance(graph, dict):
            graph = TaskGraph.from_doc(graph)
        graph.validate()
        self.issuer.check(token, "submit", "queue/" + self.queue)
        with self._lock:
            seq = next(self._seq)
            graph_id = graph.graph_id or f"g{seq}"
            if graph_id in self.graphs:
                raise Conflict(f"graph {graph_id} already exists")
            if graph_id != graph.graph_id:
                graph = TaskGraph(graph_id, graph.dataset, graph.n_partitions, graph.map_spec, graph.reduce)
            self.graphs[graph_id] = _Graph(graph, token, seq, t_submit=self.now)
            self.pending.extend((seq, p, graph_id) for p in range(graph.n_partitions))
            self.pending.sort()
            self.trace.append(("submit", self.now, graph_id, graph.n_partitions))
            return graph_id

    def graph_status(self, graph_id):
        with self._lock:
            g = self.graphs.get(graph_id)
            if g is None:
                raise NotFound(f"no graph {graph_id!r}")
            n = g.graph.n_partitions
            running = sum(1 for w in self.workers.values() if w.task and w.task[0] == graph_id)
            status = {
                "graph_id": graph_id, "state": g.state.value,
                "progress": {"total": n, "done": len(g.results), "running": running,
                             "pending": sum(1 for _, _, gid in self.pending if gid == graph_id)},
                "t_submit": g.t_submit, "t_done": g.t_done,
            }
            if g.state is GraphState.DONE:
                status["result"] = g.result.to_doc()
            if g.error:
                status["error"] = g.error
            return status

    def result(self, graph_id):
        with self._lock:
            g = self.graphs.get(graph_id)
            if g is None:
                raise NotFound(f"no graph {graph_id!r}")
            return g.result

    # -- workers -------------------------------------------------------------

    def register_worker(self, worker_id, token, conn=None):
        if not isinstance(worker_id, str) or not worker_id:
            raise BadRequest("worker_id must be a non-empty string")
        self.issuer.check(token, "submit", "worker/" + worker_id)
        with self._lock:
            if worker_id in self.workers:
                raise Conflict(f"worker {worker_id} already registered")
            info = WorkerInfo(worker_id, job_id=self.pending_jobs.pop(worker_id, None), last_beat=self.now,
                              conn=conn)
            self.workers[worker_id] = info
            # Registration is immediate; the worker is ready for tasks at once.
            info.state = WorkerState.IDLE
            info.idle_since = self.now
            self.trace.append(("register", self.now, worker_id))
            self._note_peak()
            if conn is not None:
                conn.context["worker_id"] = worker_id
            return {"worker_id": worker_id, "state": info.state.value}

    def heartbeat(self, worker_id):
        with self._lock:
            info = self.workers.get(worker_id)
            if info is None or info.state is WorkerState.GONE:
                raise NotFound(f"no live worker {worker_id!r}")
            info.last_beat = self.now

    def assign(self, now=None):
        with self._lock:
            if now is not None:
                self.now = now
            idle = sorted((w for w in self.workers.values() if w.state is WorkerState.IDLE),
                          key=lambda w: w.worker_id)
            out = []
            for worker, (seq, partition, graph_id) in zip(idle, list(self.pending)):
                self.pending.remove((seq, partition, graph_id))
                worker.state = WorkerState.BUSY
                worker.task = (graph_id, partition)
                g = self.graphs[graph_id]
                if g.state is GraphState.PENDING:
                    g.state = GraphState.RUNNING
                out.append((graph_id, partition, worker.worker_id))
                self.trace.append(("assign", self.now, graph_id, partition, worker.worker_id))
            pushes = [(self.workers[w], self.graphs[gid], p) for gid, p, w in out]
        for worker, g, partition in pushes:
            if worker.conn is None:
                continue
            try:
                worker.conn.request("sched.task", {
                    "graph_id": g.graph.graph_id, "partition": partition,
                    "spec": g.graph.map_spec.to_doc(), "token": g.token,
                })
            except CasaError as exc:
                log.warning("push to %s failed (%s); declaring it gone", worker.worker_id, exc)
                with self._lock:
                    self._gone(worker)
        return out

    def complete_task(self, worker_id, graph_id, partition, result=None, error=None):
        with self._lock:
            info = self.workers.get(worker_id)
            if info is None or info.task != (graph_id, partition) or info.state is WorkerState.GONE:
                raise Conflict(f"worker {worker_id} is not running {graph_id}[{partition}]")
            g = self.graphs[graph_id]
            if error is None:
                if isinstance(result, dict):
                    result = Histogram.from_doc(result)
                if not isinstance(result, Histogram) or result.spec != g.graph.map_spec.histogram:
                    raise BadRequest(f"result for {graph_id}[{partition}] does not match the histogram spec")
            info.task = None
            info.completed += 1
            if info.state is WorkerState.BUSY:
                info.state = WorkerState.IDLE
            info.idle_since = self.now
            if error is not None:
                self._fail(g, f"partition {partition}: {error}")
                return
            if g.state is GraphState.FAILED:
                return
            g.results[partition] = result
            self.trace.append(("complete", self.now, graph_id, partition, worker_id))
            if len(g.results) == g.graph.n_partitions:
                g.result = fold(g.results[i] for i in range(g.graph.n_partitions))
                g.state = GraphState.DONE
                g.t_done = self.now
                self.trace.append(("done", self.now, graph_id, g.result.to_bytes().hex()))

    def _fail(self, g, message):
        g.state = GraphState.FAILED
        g.error = message
        self.pending = [t for t in self.pending if t[2] != g.graph.graph_id]
        self.trace.append(("failed", self.now, g.graph.graph_id))

    def _gone(self, info, event="gone"):
        # "gone" marks a lost worker; a drained worker leaving cleanly is traced as "exit".
        if info.state is WorkerState.GONE:
            return
        info.state = WorkerState.GONE
        self.trace.append((event, self.now, info.worker_id))
        if info.task is not None:
            self._requeue(info.task)
            info.task = None

    # -- clock-driven steps --------------------------------------------------

    def advance(self, now):
        with self._lock:
            self.now = now

    def tick(self, now):
        """Failure detection then autoscaling; returns the scaling actions."""
        with self._lock:
            self.now = now
            for info in sorted(self.live_workers(), key=lambda w: w.worker_id):
                if now - info.last_beat >= HEARTBEAT_MISSES:
                    self._gone(info)
        return self.autoscale(now)

    def _drain(self, info, actions):
        info.state = WorkerState.DRAINING
        actions.append(("drain", info.worker_id))
        if info.task is None:
            self._exit(info, actions)

    def _exit(self, info, actions):
        conn = info.conn
        self._gone(info, "exit")
        actions.append(("exit", info.worker_id))
        if conn is not None:
            try:
                conn.request("worker.shutdown", {}, timeout=10.0)
            except CasaError:
                pass

    def _refresh_pending_jobs(self):
        if not self.pending_jobs:
            return
        try:
            jobs = {j["job_id"]: j["state"] for j in self.batch.query()}
        except CasaError as exc:
            log.warning("batch query failed: %s", exc)
            return
        for worker_id, job_id in list(self.pending_jobs.items()):
            if jobs.get(job_id) in (None, "Completed", "Removed"):
                del self.pending_jobs[worker_id]

    def enforce_cap(self, actions=None):
        """Bring the pool down to max_workers: cancel queued jobs, then drain idle workers."""
        actions = [] if actions is None else actions
        with self._lock:
            excess = len(self.live_workers()) + len(self.pending_jobs) - self.policy.max_workers
            for worker_id in sorted(self.pending_jobs, reverse=True):
                if excess <= 0:
                    break
                try:
                    self.batch.remove(self.pending_jobs[worker_id], self._service_token())
                except CasaError as exc:
                    log.info("could not cancel job for %s: %s", worker_id, exc)
                    continue
                del self.pending_jobs[worker_id]
                actions.append(("cancel", worker_id))
                excess -= 1
            idle = [w for w in self.live_workers() if w.state is WorkerState.IDLE]
            for info in sorted(idle, key=lambda w: w.worker_id, reverse=True):
                if excess <= 0:
                    break
                self._drain(info, actions)
                excess -= 1
        return actions

    def autoscale(self, now=None):
        actions = []
        with self._lock:
            if now is not None:
                self.now = now
            self._refresh_pending_jobs()
            for info in self.live_workers():
                if info.state is WorkerState.DRAINING and info.task is None:
                    self._exit(info, actions)
            self.enforce_cap(actions)
            busy = sum(1 for w in self.live_workers() if w.task is not None)
            outstanding = len(self.pending) + busy
            desired = self.policy.desired(outstanding)
            alive = len(self.live_workers()) + len(self.pending_jobs)
            if desired > alive:
                for _ in range(desired - alive):
                    worker_id = f"w{next(self._worker_seq):04d}"
                    token = self.issuer.mint(worker_id, ["submit:worker/" + worker_id], ttl=self.worker_ttl,
                                             session=self.worker_ttl)
                    spec = JobSpec(self.queue, "worker", {**self.worker_args, "worker_id": worker_id,
                                                          "token": token})
                    try:
                        job_id = self.batch.submit(spec, self._service_token())
                    except CasaError as exc:
                        log.warning("worker submit failed (retrying next tick): %s", exc)
                        actions.append(("submit_failed", worker_id))
                        break
                    self.pending_jobs[worker_id] = job_id
                    actions.append(("submit", worker_id, job_id))
            elif desired < alive:
                surplus = alive - desired
                expired = [w for w in self.live_workers()
                           if w.state is WorkerState.IDLE and self.now - w.idle_since >= self.policy.idle_timeout]
                for info in sorted(expired, key=lambda w: w.worker_id, reverse=True)[:surplus]:
                    self._drain(info, actions)
            for action in actions:
                self.trace.append(("scale", self.now) + tuple(action))
            return actions

    def set_policy(self, policy):
        """Hot-reload the scaler policy; shrinking max_workers drains idle workers at once."""
        with self._lock:
            self.policy = policy
            actions = self.enforce_cap()
            for action in actions:
                self.trace.append(("scale", self.now) + tuple(action))
            return actions

    def workers_doc(self):
        with self._lock:
            return [w.to_doc() for w in sorted(self.workers.values(), key=lambda w: w.worker_id)]

    # -- wire ----------------------------------------------------------------

    def _conn_worker(self, payload, conn):
        worker_id = payload.get("worker_id")
        if conn is not None and conn.context.get("worker_id") != worker_id:
            raise Unauthorized(f"connection is not registered as {worker_id!r}")
        return worker_id

    def routes(self):
        def complete(p, c):
            self.complete_task(self._conn_worker(p, c), p.get("graph_id"), p.get("partition"),
                               p.get("result"), p.get("error"))
            return {}

        def heartbeat(p, c):
            self.heartbeat(self._conn_worker(p, c))
            return {}

        def tick(p, c):
            actions = self.tick(_now(p))
            return {"actions": [list(a) for a in actions], "live_workers": len(self.live_workers())}

        def assign(p, c):
            out = self.assign(_now(p))
            return {"assignments": [list(a) for a in out], "live_workers": len(self.live_workers())}

        def clock(p, c):
            self.advance(_now(p))
            return {}

        return {
            "sched.submit_graph": lambda p, c: {"graph_id": self.submit_graph(p.get("graph"), p.get("token"))},
            "sched.register": lambda p, c: self.register_worker(p.get("worker_id"), p.get("token"), c),
            "sched.complete": complete,
            "sched.heartbeat": heartbeat,
            "sched.status": lambda p, c: self.graph_status(p.get("graph_id")),
            "sched.workers": lambda p, c: {"workers": self.workers_doc(), "peak_workers": self.peak_workers,
                                           "pending_jobs": len(self.pending_jobs)},
            "sched.clock": clock,
            "sched.tick": tick,
            "sched.assign": assign,
        }


def _now(payload):
    now = payload.get("now")
    if type(now) is not int:
        raise BadRequest("now must be an integer")
    return now
