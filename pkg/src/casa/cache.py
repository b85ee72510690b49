"""Token-authorized read-through block cache over a local origin directory.

Objects are split into fixed-size blocks keyed by ``(path, index)``.  A miss
fetches the whole block from the origin (after an optional injected delay),
inserts it, and evicts least-recently-used blocks beyond capacity.  Concurrent
readers of the same cold block share a single origin fetch; readers that
joined an in-flight fetch are counted as hits.
"""

import base64
import os
import threading
import time
from collections import OrderedDict
from concurrent.futures import Future
from dataclasses import asdict, dataclass

from .authz import b64url_encode
from .errors import BadRequest, NotFound

MiB = 2**20


@dataclass
class CacheConfig:
    origin_root: str
    block_size: int = MiB
    capacity_blocks: int = 256
    origin_latency: float = 0.0  # milliseconds per block fetch

    def __post_init__(self):
        if type(self.block_size) is not int or self.block_size < 4096:
            raise BadRequest("block_size must be an integer >= 4096")
        if type(self.capacity_blocks) is not int or self.capacity_blocks < 1:
            raise BadRequest("capacity_blocks must be an integer >= 1")
        if self.origin_latency < 0:
            raise BadRequest("origin_latency must be >= 0")


@dataclass(frozen=True)
class BlockKey:
    path: str
    index: int


@dataclass
class CacheStats:
    hits: int = 0
    misses: int = 0
    evictions: int = 0
    bytes_from_cache: int = 0
    bytes_from_origin: int = 0

    def to_doc(self):
        return asdict(self)

    def __sub__(self, other):
        return CacheStats(**{k: getattr(self, k) - getattr(other, k) for k in asdict(self)})


def normalize_path(path):
    if not isinstance(path, str) or not path.startswith("/"):
        raise BadRequest(f"object path must be absolute, got {path!r}")
    parts = path[1:].split("/")
    if any(p in ("", ".", "..") for p in parts) or "\x00" in path:
        raise BadRequest(f"object path {path!r} is not normalized")
    return path


class BlockCache:
    def __init__(self, config, issuer):
        self.config = config
        self.issuer = issuer
        self._blocks = OrderedDict()
        self._inflight = {}
        self._stats = CacheStats()
        self._lock = threading.Lock()
        self.origin_fetches = 0

    @property
    def capacity_blocks(self):
        return self.config.capacity_blocks

    def _origin_file(self, path):
        return os.path.join(self.config.origin_root, path.lstrip("/"))

    def _object_size(self, path):
        try:
            st = os.stat(self._origin_file(path))
        except OSError:
            raise NotFound(f"no object {path} at origin") from None
        if not os.path.isfile(self._origin_file(path)):
            raise NotFound(f"{path} is not an object")
        return st.st_size

    def _fetch(self, key):
        if self.config.origin_latency:
            time.sleep(self.config.origin_latency / 1000.0)
        with open(self._origin_file(key.path), "rb") as fh:
            fh.seek(key.index * self.config.block_size)
            return fh.read(self.config.block_size)

    def _block(self, key):
        """Return block bytes and whether this call fetched them from origin."""
        with self._lock:
            data = self._blocks.get(key)
            if data is not None:
                self._blocks.move_to_end(key)
                self._stats.hits += 1
                return data, False
            pending = self._inflight.get(key)
            if pending is None:
                pending = self._inflight[key] = Future()
                owner = True
                self._stats.misses += 1
            else:
                owner = False
                self._stats.hits += 1
        if not owner:
            return pending.result(), False
        try:
            data = self._fetch(key)
        except BaseException as exc:
            with self._lock:
                del self._inflight[key]
            pending.set_exception(exc)
            raise
        with self._lock:
            self.origin_fetches += 1
            self._stats.bytes_from_origin += len(data)
            self._blocks[key] = data
            self._blocks.move_to_end(key)
            del self._inflight[key]
            self._evict_locked()
        pending.set_result(data)
        return data, True

    def read_range(self, path, offset, length, token):
        path = normalize_path(path)
        if type(offset) is not int or offset < 0:
            raise BadRequest("offset must be a non-negative integer")
        if type(length) is not int or length < 1:
            raise BadRequest("length must be a positive integer")
        self.issuer.check(token, "read", path)
        size = self._object_size(path)
        end = min(offset + length, size)
        if offset >= end:
            return b""
        bs = self.config.block_size
        out = []
        for index in range(offset // bs, (end - 1) // bs + 1):
            data, fetched = self._block(BlockKey(path, index))
            lo = max(offset - index * bs, 0)
            hi = min(end - index * bs, len(data))
            out.append(data[lo:hi])
            if not fetched:
                with self._lock:
                    self._stats.bytes_from_cache += hi - lo
        return b"".join(out)

    def _evict_locked(self):
        evicted = []
        while len(self._blocks) > self.config.capacity_blocks:
            key, _ = self._blocks.popitem(last=False)
            evicted.append(key)
        self._stats.evictions += len(evicted)
        return evicted

    def evict_to_capacity(self):
        with self._lock:
            return self._evict_locked()

    def set_capacity(self, capacity_blocks):
        if type(capacity_blocks) is not int or capacity_blocks < 1:
            raise BadRequest("capacity_blocks must be an integer >= 1")
        with self._lock:
            self.config.capacity_blocks = capacity_blocks
            return self._evict_locked()

    def resident(self):
        with self._lock:
            return list(self._blocks)

    def stats(self):
        with self._lock:
            return CacheStats(**asdict(self._stats))

    def purge(self, token):
        self.issuer.check(token, "write", "/")
        with self._lock:
            self._blocks.clear()

    def routes(self):
        def read(p, c):
            data = self.read_range(p.get("path"), p.get("offset"), p.get("length"), p.get("token"))
            return {"data": b64url_encode(data), "length": len(data)}

        def purge(p, c):
            self.purge(p.get("token"))
            return {}

        return {
            "cache.read": read,
            "cache.stats": lambda p, c: {**self.stats().to_doc(), "resident": len(self._blocks),
                                         "capacity_blocks": self.config.capacity_blocks},
            "cache.purge": purge,
        }


class CacheClient:
    """Wire-side handle exposing the same ``read_range`` as :class:`BlockCache`."""

    def __init__(self, conn):
        self.conn = conn

    def read_range(self, path, offset, length, token):
        reply = self.conn.request("cache.read", {"path": path, "offset": offset, "length": length, "token": token})
        data = reply["data"]
        return base64.urlsafe_b64decode(data + "=" * (-len(data) % 4))

    def stats(self):
        doc = self.conn.request("cache.stats")
        return CacheStats(**{k: doc[k] for k in CacheStats.__dataclass_fields__})

    def purge(self, token):
        self.conn.request("cache.purge", {"token": token})
