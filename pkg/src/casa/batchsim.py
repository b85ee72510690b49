"""Slot-limited FIFO batch queue with a token-gated submit interface.

Time is measured in integer ticks supplied by the caller.  Jobs whose ``cmd``
is ``"worker"`` are handed to a launcher when they start; a job whose launched
process has exited is marked Completed on the next tick.
"""

import enum
import threading
from dataclasses import dataclass, field, replace

from .errors import BadRequest, Conflict, NotFound


class JobState(str, enum.Enum):
    IDLE = "Idle"
    RUNNING = "Running"
    COMPLETED = "Completed"
    REMOVED = "Removed"
    HELD = "Held"


TERMINAL = frozenset({JobState.COMPLETED, JobState.REMOVED})

LEGAL = {
    JobState.IDLE: {JobState.RUNNING, JobState.REMOVED, JobState.HELD},
    JobState.RUNNING: {JobState.COMPLETED, JobState.REMOVED},
    JobState.HELD: {JobState.IDLE, JobState.REMOVED},
    JobState.COMPLETED: set(),
    JobState.REMOVED: set(),
}

JOB_KINDS = ("worker", "noop")


@dataclass(frozen=True)
class JobSpec:
    queue: str = "default"
    cmd: str = "noop"
    args: dict = field(default_factory=dict)
    walltime: int = 0

    def validate(self):
        if not isinstance(self.queue, str) or not self.queue:
            raise BadRequest("job queue must be a non-empty string")
        if self.cmd not in JOB_KINDS:
            raise BadRequest(f"unknown job kind {self.cmd!r}")
        if type(self.walltime) is not int or self.walltime < 0:
            raise BadRequest("walltime must be a non-negative integer")
        if not isinstance(self.args, dict):
            raise BadRequest("job args must be an object")
        return self

    @classmethod
    def from_doc(cls, doc):
        if not isinstance(doc, dict):
            raise BadRequest("job spec must be an object")
        unknown = set(doc) - {"queue", "cmd", "args", "walltime"}
        if unknown:
            raise BadRequest(f"unknown job spec fields {sorted(unknown)}")
        return cls(**doc).validate()

    def to_doc(self):
        return {"queue": self.queue, "cmd": self.cmd, "args": dict(self.args), "walltime": self.walltime}


@dataclass
class JobRecord:
    job_id: int
    spec: JobSpec
    state: JobState = JobState.IDLE
    t_submit: int = 0
    t_start: int = None
    t_end: int = None

    def to_doc(self):
        spec = self.spec.to_doc()
        spec["args"] = {k: v for k, v in spec["args"].items() if k != "token"}
        return {
            "job_id": self.job_id, "spec": spec, "state": self.state.value,
            "t_submit": self.t_submit, "t_start": self.t_start, "t_end": self.t_end,
        }


@dataclass(frozen=True)
class Transition:
    job_id: int
    old: JobState
    new: JobState
    tick: int

    def to_doc(self):
        return {"job_id": self.job_id, "from": self.old.value, "to": self.new.value, "tick": self.tick}


class IllegalTransition(AssertionError):
    pass


class BatchQueue:
    """HTCondor-flavoured queue: FIFO by job id, at most ``slots`` Running jobs.

    ``launcher`` is any object with ``start(record) -> handle``; handles expose
    ``alive()`` and ``stop()``.
    """

    def __init__(self, issuer, slots=8, launcher=None):
        if slots < 1:
            raise BadRequest("slots must be >= 1")
        self.issuer = issuer
        self.launcher = launcher
        self.target_slots = slots
        self.slots = slots
        self.jobs = {}
        self.handles = {}
        self.now = 0
        self._next_id = 1
        self._lock = threading.RLock()

    # -- state machine -------------------------------------------------------

    def _move(self, record, new, tick, out):
        if new not in LEGAL[record.state]:
            raise IllegalTransition(f"job {record.job_id}: {record.state.value} -> {new.value}")
        out.append(Transition(record.job_id, record.state, new, tick))
        record.state = new
        if new is JobState.RUNNING:
            record.t_start = tick
        elif new in TERMINAL:
            record.t_end = tick

    def running_count(self):
        return sum(1 for r in self.jobs.values() if r.state is JobState.RUNNING)

    def _stop(self, job_id):
        handle = self.handles.pop(job_id, None)
        if handle is not None:
            handle.stop()

    # -- operations ----------------------------------------------------------

    def submit(self, spec, token, now_tick=None):
        if isinstance(spec, dict):
            spec = JobSpec.from_doc(spec)
        spec.validate()
        self.issuer.check(token, "submit", "queue/" + spec.queue)
        with self._lock:
            tick = self.now if now_tick is None else now_tick
            job_id = self._next_id
            self._next_id += 1
            self.jobs[job_id] = JobRecord(job_id, spec, JobState.IDLE, t_submit=tick)
            return job_id

    def tick(self, now_tick):
        out = []
        with self._lock:
            self.now = now_tick
            for record in sorted(self.jobs.values(), key=lambda r: r.job_id):
                if record.state is not JobState.RUNNING:
                    continue
                handle = self.handles.get(record.job_id)
                walltime_up = record.spec.walltime and now_tick - record.t_start >= record.spec.walltime
                exited = handle is not None and not handle.alive()
                if walltime_up or exited:
                    self._move(record, JobState.COMPLETED, now_tick, out)
                    self._stop(record.job_id)
            running = self.running_count()
            # Shrunk slot targets take effect as running jobs finish.
            self.slots = max(self.target_slots, min(self.slots, running))
            for record in sorted(self.jobs.values(), key=lambda r: r.job_id):
                if running >= self.slots:
                    break
                if record.state is JobState.IDLE:
                    self._move(record, JobState.RUNNING, now_tick, out)
                    running += 1
                    if record.spec.cmd == "worker" and self.launcher is not None:
                        self.handles[record.job_id] = self.launcher.start(record)
            if self.running_count() > self.slots:
                raise IllegalTransition(f"{self.running_count()} running jobs exceed {self.slots} slots")
        return out

    def remove(self, job_id, token):
        with self._lock:
            record = self.jobs.get(job_id)
            if record is None:
                raise NotFound(f"no job {job_id}")
            self.issuer.check(token, "submit", "queue/" + record.spec.queue)
            if record.state in TERMINAL:
                raise Conflict(f"job {job_id} already {record.state.value}")
            out = []
            self._move(record, JobState.REMOVED, self.now, out)
            self._stop(job_id)
            return replace(record)

    def hold(self, job_id, token):
        return self._admin_move(job_id, token, JobState.HELD)

    def release(self, job_id, token):
        return self._admin_move(job_id, token, JobState.IDLE)

    def _admin_move(self, job_id, token, new):
        with self._lock:
            record = self.jobs.get(job_id)
            if record is None:
                raise NotFound(f"no job {job_id}")
            self.issuer.check(token, "submit", "queue/" + record.spec.queue)
            if new not in LEGAL[record.state]:
                raise Conflict(f"job {job_id}: cannot go {record.state.value} -> {new.value}")
            self._move(record, new, self.now, [])
            return replace(record)

    def query(self, states=None):
        with self._lock:
            wanted = set(JobState) if states is None else {JobState(s) for s in states}
            return [replace(r) for r in sorted(self.jobs.values(), key=lambda r: r.job_id) if r.state in wanted]

    def set_slots(self, slots):
        """Hot-reload the slot count; shrinking never evicts running jobs."""
        if slots < 1:
            raise BadRequest("slots must be >= 1")
        with self._lock:
            self.target_slots = slots
            self.slots = max(slots, min(self.slots, self.running_count()))

    def shutdown(self):
        with self._lock:
            for job_id in list(self.handles):
                self._stop(job_id)

    # -- wire ----------------------------------------------------------------

    def routes(self):
        return {
            "batch.submit": lambda p, c: {"job_id": self.submit(p.get("spec"), p.get("token"), p.get("now"))},
            "batch.remove": lambda p, c: {"job": self.remove(_job_id(p), p.get("token")).to_doc()},
            "batch.hold": lambda p, c: {"job": self.hold(_job_id(p), p.get("token")).to_doc()},
            "batch.release": lambda p, c: {"job": self.release(_job_id(p), p.get("token")).to_doc()},
            "batch.query": lambda p, c: {"jobs": [r.to_doc() for r in self.query(p.get("states"))]},
            "batch.tick": lambda p, c: {"transitions": [t.to_doc() for t in self.tick(_int(p, "now"))]},
        }


def _int(payload, name):
    value = payload.get(name)
    if type(value) is not int:
        raise BadRequest(f"{name} must be an integer")
    return value


def _job_id(payload):
    return _int(payload, "job_id")


class BatchClient:
    def __init__(self, conn):
        self.conn = conn

    def submit(self, spec, token):
        doc = spec.to_doc() if isinstance(spec, JobSpec) else spec
        return self.conn.request("batch.submit", {"spec": doc, "token": token})["job_id"]

    def remove(self, job_id, token):
        return self.conn.request("batch.remove", {"job_id": job_id, "token": token})["job"]

    def query(self, states=None):
        payload = {} if states is None else {"states": [JobState(s).value for s in states]}
        return self.conn.request("batch.query", payload)["jobs"]

    def tick(self, now):
        return self.conn.request("batch.tick", {"now": now})["transitions"]
