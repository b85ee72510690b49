"""Columnar delivery: turn (dataset, columns, selection) requests into reduced
partition files, computed once per request hash."""

import hashlib
import json
import os
import re
import threading
from concurrent.futures import Future
from dataclasses import asdict, dataclass

import numpy as np

from .errors import BadRequest, NotFound, Unavailable
from .pipeline.expr import BOOL, check_columns, eval_columns, parse
from .pipeline.partition import write_partition
from .pipeline.task import dataset_manifest, load_partition
from .wire import canonical_dumps


@dataclass(frozen=True)
class TransformRequest:
    dataset: str
    columns: tuple
    selection: str

    def __post_init__(self):
        if not isinstance(self.dataset, str) or not self.dataset:
            raise BadRequest("dataset must be a non-empty string")
        if isinstance(self.columns, str) or not all(isinstance(c, str) and c for c in self.columns):
            raise BadRequest("columns must be a list of names")
        columns = tuple(sorted(set(self.columns)))
        if not columns:
            raise BadRequest("at least one column is required")
        object.__setattr__(self, "columns", columns)
        parse(self.selection, BOOL)

    def canonical(self):
        return canonical_dumps({"columns": list(self.columns), "dataset": self.dataset, "selection": self.selection})

    @classmethod
    def from_doc(cls, doc):
        if not isinstance(doc, dict) or not isinstance(doc.get("columns"), (list, tuple)):
            raise BadRequest("transform request needs a columns list")
        try:
            return cls(doc["dataset"], tuple(doc["columns"]), doc["selection"])
        except (KeyError, TypeError) as exc:
            raise BadRequest(f"malformed transform request: {exc}") from None


def request_hash(req):
    return hashlib.sha256(req.canonical()).hexdigest()


@dataclass
class Manifest:
    request_hash: str
    files: list
    rows_in: int
    rows_out: int
    created_at: int
    columns: list = None

    def to_doc(self):
        return asdict(self)


class DeliveryService:
    def __init__(self, issuer, cache, delivery_root, clock=lambda: 0):
        self.issuer = issuer
        self.cache = cache
        self.root = delivery_root
        self.clock = clock
        self.executions = 0
        self._manifests = {}
        self._inflight = {}
        self._lock = threading.Lock()
        os.makedirs(self.root, exist_ok=True)

    def _stored(self, digest):
        path = os.path.join(self.root, digest, "manifest.json")
        try:
            with open(path) as fh:
                return Manifest(**json.load(fh))
        except (OSError, ValueError, TypeError):
            return None

    def transform(self, req, token, wait=True):
        if isinstance(req, dict):
            req = TransformRequest.from_doc(req)
        self.issuer.check(token, "transform", req.dataset)
        self.issuer.check(token, "read", req.dataset)
        digest = request_hash(req)
        with self._lock:
            done = self._manifests.get(digest) or self._stored(digest)
            if done is not None:
                self._manifests[digest] = done
                return done
            pending = self._inflight.get(digest)
            owner = pending is None
            if owner:
                pending = self._inflight[digest] = Future()
                self.executions += 1
        if not owner:
            if not wait:
                raise Unavailable(f"transform {digest} in progress; retry")
            return pending.result()
        try:
            manifest = self._run(req, token, digest)
        except BaseException as exc:
            with self._lock:
                del self._inflight[digest]
            pending.set_exception(exc)
            raise
        with self._lock:
            self._manifests[digest] = manifest
            del self._inflight[digest]
        pending.set_result(manifest)
        return manifest

    def _run(self, req, token, digest):
        source = dataset_manifest(self.cache, req.dataset, token)
        schema = {c["name"]: c for c in source["schema"]}
        missing = [c for c in req.columns if c not in schema]
        if missing:
            raise BadRequest(f"unknown columns {missing} in {req.dataset}")
        selection = parse(req.selection, BOOL)
        check_columns(selection, schema)
        out_dir = os.path.join(self.root, digest)
        os.makedirs(out_dir, exist_ok=True)
        files = []
        rows_in = rows_out = 0
        for i in range(len(source["partitions"])):
            columns = load_partition(self.cache, req.dataset, i, token, source)
            n = len(next(iter(columns.values()))) if columns else 0
            mask = eval_columns(selection, columns, n)
            projected = {name: np.asarray(columns[name])[mask] for name in req.columns}
            path = os.path.join(out_dir, f"part{i}.casa")
            with open(path, "wb") as fh:
                fh.write(write_partition(projected))
            files.append(path)
            rows_in += n
            rows_out += int(mask.sum())
        manifest = Manifest(digest, files, rows_in, rows_out, self.clock(), list(req.columns))
        tmp = os.path.join(out_dir, "manifest.json.tmp")
        with open(tmp, "w") as fh:
            json.dump(manifest.to_doc(), fh, indent=1, sort_keys=True)
        os.replace(tmp, os.path.join(out_dir, "manifest.json"))
        return manifest

    def get_manifest(self, digest):
        with self._lock:
            if digest in self._manifests:
                return self._manifests[digest]
            if digest in self._inflight:
                raise Unavailable(f"transform {digest} in progress; retry")
            valid = isinstance(digest, str) and re.fullmatch(r"[0-9a-f]{64}", digest)
            stored = self._stored(digest) if valid else None
            if stored is None:
                raise NotFound(f"no delivery {digest}")
            self._manifests[digest] = stored
            return stored

    def routes(self):
        def transform(p, c):
            req = TransformRequest.from_doc(p)
            return self.transform(req, p.get("token"), wait=bool(p.get("wait", False))).to_doc()

        return {
            "delivery.transform": transform,
            "delivery.manifest": lambda p, c: self.get_manifest(p.get("request_hash")).to_doc(),
        }
