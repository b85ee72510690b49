"""Model registry with stage transitions and a micro-batching inference server.

Models are logistic-linear: ``score = 1 / (1 + exp(-(w.x + b)))``.  The dot
product is accumulated feature by feature in index order and ``exp`` is
``math.exp``, so a row scores bit-identically whichever batch it lands in.
"""

import collections
import math
import queue
import threading
import time
from concurrent.futures import Future
from dataclasses import dataclass

import numpy as np

from .errors import BadRequest, Conflict, NotFound, Unavailable

STAGES = ("None", "Staging", "Production")
MAX_BATCH = 64
WINDOW = 0.005


def sigmoid(z):
    try:
        return 1.0 / (1.0 + math.exp(-z))
    except OverflowError:
        return 0.0


def score_row(w, b, x):
    """Reference scorer for one feature vector."""
    z = 0.0
    for wj, xj in zip(w, x):
        z = z + wj * xj
    return sigmoid(z + b)


def score_rows(w, b, rows):
    rows = np.asarray(rows, dtype=np.float64)
    z = np.zeros(len(rows))
    for j, wj in enumerate(w):
        z = z + wj * rows[:, j]
    z = z + b
    return np.array([sigmoid(v) for v in z.tolist()], dtype=np.float64)


@dataclass
class ModelVersion:
    name: str
    version: int
    w: tuple
    b: float
    stage: str = "None"

    @property
    def d(self):
        return len(self.w)

    def to_doc(self):
        return {"name": self.name, "version": self.version, "stage": self.stage,
                "d": self.d, "params": {"w": list(self.w), "b": self.b}}


def _check_params(params):
    if not isinstance(params, dict) or "w" not in params:
        raise BadRequest("model params must be an object {w: [...], b: ...}")
    w, b = params["w"], params.get("b", 0.0)
    if not isinstance(w, (list, tuple)) or not w:
        raise BadRequest("weights must be a non-empty list")
    values = list(w) + [b]
    if any(isinstance(v, bool) or not isinstance(v, (int, float)) for v in values):
        raise BadRequest("weights and bias must be numbers")
    if not all(math.isfinite(v) for v in values):
        raise BadRequest("weights and bias must be finite")
    return tuple(float(v) for v in w), float(b)


class ModelRegistry:
    def __init__(self, issuer):
        self.issuer = issuer
        self.models = {}
        self._lock = threading.Lock()

    def register_model(self, name, params, token):
        if not isinstance(name, str) or not name:
            raise BadRequest("model name must be a non-empty string")
        self.issuer.check(token, "write", "models/" + name)
        w, b = _check_params(params)
        with self._lock:
            versions = self.models.setdefault(name, [])
            number = versions[-1].version + 1 if versions else 1
            versions.append(ModelVersion(name, number, w, b))
            return number

    def get(self, name, version):
        with self._lock:
            versions = self.models.get(name)
            if not versions:
                raise NotFound(f"no model {name!r}")
            if version == "Production":
                for mv in versions:
                    if mv.stage == "Production":
                        return mv
                raise NotFound(f"model {name!r} has no Production version")
            if type(version) is not int:
                raise BadRequest(f"version must be an integer or 'Production', got {version!r}")
            for mv in versions:
                if mv.version == version:
                    return mv
            raise NotFound(f"model {name!r} has no version {version}")

    def transition_stage(self, name, version, stage, token):
        if stage not in STAGES:
            raise BadRequest(f"unknown stage {stage!r}")
        self.issuer.check(token, "write", "models/" + str(name))
        mv = self.get(name, version)
        with self._lock:
            legal = stage == "None" or (mv.stage, stage) in {("None", "Staging"), ("Staging", "Production")}
            if not legal:
                raise Conflict(f"{name} v{mv.version}: {mv.stage} -> {stage} is not allowed")
            if stage == "Production":
                for other in self.models[name]:
                    if other.stage == "Production":
                        other.stage = "Staging"
            mv.stage = stage
            return ModelVersion(mv.name, mv.version, mv.w, mv.b, mv.stage)

    def list(self):
        with self._lock:
            return [mv.to_doc() for versions in self.models.values() for mv in versions]


class _Job:
    def __init__(self, rows):
        self.rows = rows
        self.out = np.empty(len(rows))
        self.taken = 0
        self.filled = 0
        self.future = Future()


class _Batcher:
    """Collector loop for one model version: coalesces queued rows into batches."""

    def __init__(self, model, max_batch, window, on_batch):
        self.model = model
        self.max_batch = max_batch
        self.window = window
        self.on_batch = on_batch
        self.q = queue.SimpleQueue()
        self.thread = threading.Thread(target=self._loop, name=f"batcher-{model.name}-{model.version}",
                                       daemon=True)
        self.thread.start()

    def submit(self, rows):
        job = _Job(rows)
        self.q.put(job)
        return job.future

    def stop(self):
        self.q.put(None)

    def _loop(self):
        backlog = collections.deque()
        while True:
            if not backlog:
                job = self.q.get()
                if job is None:
                    return
                backlog.append(job)
            deadline = time.monotonic() + self.window
            while sum(len(j.rows) - j.taken for j in backlog) < self.max_batch:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    break
                try:
                    job = self.q.get(timeout=remaining)
                except queue.Empty:
                    break
                if job is None:
                    self._fail(backlog)
                    return
                backlog.append(job)
            self._run(backlog)

    def _run(self, backlog):
        pieces = []
        n = 0
        while backlog and n < self.max_batch:
            job = backlog[0]
            take = min(self.max_batch - n, len(job.rows) - job.taken)
            pieces.append((job, job.taken, take))
            job.taken += take
            n += take
            if job.taken == len(job.rows):
                backlog.popleft()
        batch = np.concatenate([job.rows[start:start + take] for job, start, take in pieces])
        try:
            scores = score_rows(self.model.w, self.model.b, batch)
        except Exception as exc:  # noqa: BLE001
            for job, _, _ in pieces:
                if not job.future.done():
                    job.future.set_exception(exc)
            return
        self.on_batch(n)
        pos = 0
        for job, start, take in pieces:
            job.out[start:start + take] = scores[pos:pos + take]
            pos += take
            job.filled += take
            if job.filled == len(job.rows):
                job.future.set_result(job.out)

    def _fail(self, backlog):
        for job in backlog:
            job.future.set_exception(Unavailable("inference server stopped"))


class InferenceServer:
    """Token-checked inference front end over a registry.

    Concurrent requests against the same model version are coalesced into
    batches of at most ``max_batch`` rows, waiting at most ``window`` seconds
    for a partial batch to fill.
    """

    def __init__(self, registry, max_batch=MAX_BATCH, window=WINDOW):
        self.registry = registry
        self.max_batch = max_batch
        self.window = window
        self.executions = 0
        self.rows_scored = 0
        self._batchers = {}
        self._lock = threading.Lock()

    def _count(self, n):
        with self._lock:
            self.executions += 1
            self.rows_scored += n

    def _batcher(self, mv):
        key = (mv.name, mv.version)
        with self._lock:
            batcher = self._batchers.get(key)
            if batcher is None:
                batcher = self._batchers[key] = _Batcher(mv, self.max_batch, self.window, self._count)
            return batcher

    def submit(self, name, version, batch, token):
        self.registry.issuer.check(token, "infer", "models/" + str(name))
        mv = self.registry.get(name, version)
        try:
            rows = np.asarray(batch, dtype=np.float64)
        except (TypeError, ValueError):
            raise BadRequest("batch must be a list of equal-length numeric rows") from None
        if rows.ndim != 2 or len(rows) == 0:
            raise BadRequest("batch must be a non-empty list of feature vectors")
        if rows.shape[1] != mv.d:
            raise BadRequest(f"rows have {rows.shape[1]} features; {name} v{mv.version} expects {mv.d}")
        return self._batcher(mv).submit(rows)

    def infer(self, name, version, batch, token, timeout=60.0):
        return self.submit(name, version, batch, token).result(timeout)

    def close(self):
        with self._lock:
            for batcher in self._batchers.values():
                batcher.stop()
            self._batchers.clear()

    def routes(self):
        reg = self.registry
        return {
            "ml.register": lambda p, c: {"version": reg.register_model(p.get("name"), p.get("params"),
                                                                       p.get("token"))},
            "ml.transition": lambda p, c: {"model": reg.transition_stage(
                p.get("name"), p.get("version"), p.get("stage"), p.get("token")).to_doc()},
            "ml.infer": lambda p, c: {"scores": self.infer(
                p.get("name"), p.get("version", "Production"), p.get("batch"), p.get("token")).tolist()},
            "ml.list": lambda p, c: {"models": reg.list(),
                                     "executions": self.executions, "rows_scored": self.rows_scored},
        }


class MLClient:
    """Wire-side handle with the same ``infer`` shape as :class:`InferenceServer`."""

    def __init__(self, conn):
        self.conn = conn

    def infer(self, name, version, batch, token):
        rows = np.asarray(batch, dtype=np.float64).tolist()
        scores = self.conn.request("ml.infer", {"name": name, "version": version, "batch": rows, "token": token})
        return np.asarray(scores["scores"], dtype=np.float64)

    def register(self, name, params, token):
        return self.conn.request("ml.register", {"name": name, "params": params, "token": token})["version"]

    def transition(self, name, version, stage, token):
        return self.conn.request("ml.transition", {"name": name, "version": version, "stage": stage,
                                                   "token": token})["model"]
