"""Declarative facility configuration.

The document is YAML (JSON is accepted too)::

    config_version: 1
    facility: casa-dev
    signing_key: <base64url>
    host: 127.0.0.1
    ports: {batch: 7101, sched: 7102, cache: 7103, delivery: 7104, ml: 7105, admin: 7100}
    batch: {slots: 8, queue: default}
    scaler: {tasks_per_worker: 2, min_workers: 0, max_workers: 8, idle_timeout: 10}
    cache: {block_size: 1048576, capacity_blocks: 256, origin_root: ./origin, origin_latency_ms: 0}
    delivery: {root: ./delivery}
    credentials_dir: ./credentials
    tokens: {ttl: 600, session: 28800, skew: 30}
    tick: {mode: simulated, tick_ms: 1000}
    workers: {launch: thread}
    users:
      - {name: alice, caps: ["read:/store/", "submit:queue/default"]}

Relative paths resolve against the config file's directory.  Port 0 asks
the OS for a free port and is exempt from the distinct-ports rule.
"""

import copy
import os
from dataclasses import dataclass, field

import yaml

from ..authz import b64url_decode, parse_capability
from ..errors import BadRequest, NotFound
from ..sched import ScalerPolicy

SERVICES = ("admin", "batch", "sched", "cache", "delivery", "ml")
DEV_KEY = "Y2FzYS1kZXZlbG9wbWVudC1rZXktZG8tbm90LXVzZSE"

DEFAULTS = {
    "config_version": 1,
    "facility": "casa",
    "signing_key": DEV_KEY,
    "host": "127.0.0.1",
    "ports": {"admin": 7100, "batch": 7101, "sched": 7102, "cache": 7103, "delivery": 7104, "ml": 7105},
    "batch": {"slots": 8, "queue": "default"},
    "scaler": {"tasks_per_worker": 2, "min_workers": 0, "max_workers": 8, "idle_timeout": 10},
    "cache": {"block_size": 2**20, "capacity_blocks": 256, "origin_root": "casa-origin", "origin_latency_ms": 0},
    "delivery": {"root": "casa-delivery"},
    "credentials_dir": "casa-credentials",
    "tokens": {"ttl": 600, "session": 8 * 3600, "skew": 30},
    "tick": {"mode": "simulated", "tick_ms": 1000},
    "workers": {"launch": "thread"},
    "users": [],
}

# Fields that can change on a running facility.
HOT_FIELDS = ("scaler", "batch.slots", "cache.capacity_blocks", "cache.origin_latency_ms", "users")


@dataclass(frozen=True)
class UserGrant:
    name: str
    caps: tuple


@dataclass
class FacilityConfig:
    facility: str
    signing_key: str
    host: str
    ports: dict
    slots: int
    queue: str
    scaler: ScalerPolicy
    block_size: int
    capacity_blocks: int
    origin_root: str
    origin_latency_ms: float
    delivery_root: str
    credentials_dir: str
    users: tuple
    token_ttl: int = 600
    session: int = 8 * 3600
    skew: int = 30
    tick_mode: str = "simulated"
    tick_ms: int = 1000
    launch: str = "thread"
    path: str = None
    raw: dict = field(default=None, repr=False)

    @property
    def key(self):
        return b64url_decode(self.signing_key)

    def user(self, name):
        for grant in self.users:
            if grant.name == name:
                return grant
        raise NotFound(f"no user {name!r} in facility config")


def _merge(base, override):
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _resolve(base_dir, path):
    return path if os.path.isabs(path) else os.path.normpath(os.path.join(base_dir, path))


def from_dict(doc, base_dir="."):
    """Validate a config document (defaults applied) or raise BadRequest listing every problem."""
    if not isinstance(doc, dict):
        raise BadRequest("config must be a mapping")
    unknown = set(doc) - set(DEFAULTS)
    problems = [f"{k}: unknown field" for k in sorted(unknown)]
    d = _merge(DEFAULTS, doc)

    def integer(path, value, lo=None):
        if type(value) is not int or (lo is not None and value < lo):
            problems.append(f"{path}: expected integer >= {lo}, got {value!r}")
            return False
        return True

    if d["config_version"] != 1:
        problems.append(f"config_version: unsupported version {d['config_version']!r}")
    if not isinstance(d["facility"], str) or not d["facility"]:
        problems.append("facility: must be a non-empty string")
    try:
        if len(b64url_decode(d["signing_key"])) < 16:
            problems.append("signing_key: must decode to at least 16 bytes")
    except (ValueError, TypeError, AttributeError):
        problems.append("signing_key: not valid unpadded base64url")
    ports = d["ports"]
    if not isinstance(ports, dict) or set(ports) != set(SERVICES):
        problems.append(f"ports: must name exactly {list(SERVICES)}")
    else:
        for name in SERVICES:
            integer(f"ports.{name}", ports[name], 0)
        fixed = [p for p in ports.values() if type(p) is int and p != 0]
        if len(fixed) != len(set(fixed)):
            dup = sorted({p for p in fixed if fixed.count(p) > 1})
            problems.append(f"ports: duplicate port(s) {dup}")
    integer("batch.slots", d["batch"].get("slots"), 1)
    if not isinstance(d["batch"].get("queue"), str) or not d["batch"]["queue"]:
        problems.append("batch.queue: must be a non-empty string")
    scaler = None
    try:
        scaler = ScalerPolicy(**d["scaler"])
    except (BadRequest, TypeError) as exc:
        problems.append(f"scaler: {exc}")
    if scaler is not None and type(d["batch"].get("slots")) is int and scaler.max_workers > d["batch"]["slots"]:
        problems.append(f"scaler.max_workers ({scaler.max_workers}) exceeds batch.slots ({d['batch']['slots']})")
    cache = d["cache"]
    integer("cache.block_size", cache.get("block_size"), 4096)
    integer("cache.capacity_blocks", cache.get("capacity_blocks"), 1)
    latency = cache.get("origin_latency_ms")
    if isinstance(latency, bool) or not isinstance(latency, (int, float)) or latency < 0:
        problems.append("cache.origin_latency_ms: expected number >= 0")
    tokens = d["tokens"]
    for name in ("ttl", "session", "skew"):
        integer(f"tokens.{name}", tokens.get(name), 0 if name == "skew" else 1)
    if type(tokens.get("ttl")) is int and type(tokens.get("session")) is int and tokens["session"] < tokens["ttl"]:
        problems.append("tokens.session: shorter than tokens.ttl")
    if d["tick"].get("mode") not in ("simulated", "realtime"):
        problems.append("tick.mode: must be 'simulated' or 'realtime'")
    integer("tick.tick_ms", d["tick"].get("tick_ms"), 1)
    if d["workers"].get("launch") not in ("thread", "process"):
        problems.append("workers.launch: must be 'thread' or 'process'")
    elif d["workers"]["launch"] == "process" and d["tick"].get("mode") != "realtime":
        problems.append("workers.launch: 'process' requires tick.mode 'realtime'")
    users = []
    if not isinstance(d["users"], list):
        problems.append("users: must be a list")
    else:
        seen = set()
        for i, u in enumerate(d["users"]):
            if not isinstance(u, dict) or not isinstance(u.get("name"), str) or not u.get("name"):
                problems.append(f"users[{i}].name: required")
                continue
            if u["name"] in seen:
                problems.append(f"users[{i}].name: duplicate user {u['name']!r}")
            seen.add(u["name"])
            caps = u.get("caps")
            if not isinstance(caps, list) or not caps:
                problems.append(f"users[{i}].caps: must be a non-empty list")
                continue
            for j, cap in enumerate(caps):
                try:
                    parse_capability(cap)
                except BadRequest as exc:
                    problems.append(f"users[{i}].caps[{j}]: {exc}")
            users.append(UserGrant(u["name"], tuple(caps)))
    for path, value in (("cache.origin_root", cache.get("origin_root")), ("delivery.root", d["delivery"].get("root")),
                        ("credentials_dir", d["credentials_dir"])):
        if not isinstance(value, str) or not value:
            problems.append(f"{path}: must be a directory path")
    if problems:
        raise BadRequest("invalid facility config:\n  " + "\n  ".join(problems))
    return FacilityConfig(
        facility=d["facility"], signing_key=d["signing_key"], host=d["host"], ports=dict(ports),
        slots=d["batch"]["slots"], queue=d["batch"]["queue"], scaler=scaler,
        block_size=cache["block_size"], capacity_blocks=cache["capacity_blocks"],
        origin_root=_resolve(base_dir, cache["origin_root"]), origin_latency_ms=float(latency),
        delivery_root=_resolve(base_dir, d["delivery"]["root"]),
        credentials_dir=_resolve(base_dir, d["credentials_dir"]), users=tuple(users),
        token_ttl=tokens["ttl"], session=tokens["session"], skew=tokens["skew"],
        tick_mode=d["tick"]["mode"], tick_ms=d["tick"]["tick_ms"], launch=d["workers"]["launch"], raw=d,
    )


def load_config(path=None):
    """Load and validate a config file.

    Without an explicit ``path`` the ``CASA_CONFIG`` environment variable is
    used; with neither, the built-in defaults apply.
    """
    path = path or os.environ.get("CASA_CONFIG")
    if path is None:
        return from_dict({})
    try:
        with open(path) as fh:
            doc = yaml.safe_load(fh)
    except FileNotFoundError:
        raise NotFound(f"config file {path} not found") from None
    except yaml.YAMLError as exc:
        raise BadRequest(f"config file {path} is not valid YAML: {exc}") from None
    config = from_dict(doc or {}, os.path.dirname(os.path.abspath(path)))
    config.path = os.path.abspath(path)
    return config
