"""The orchestrator: brings services up, drives the clock, reconciles config,
and benchmarks end-to-end analysis runs.

Services only ever talk to each other through :mod:`casa.wire`.  With
``transport="inproc"`` the connections are in-process pipes; with
``transport="tcp"`` every service listens on its configured port.  The code
path is the same either way.
"""

import dataclasses
import json
import logging
import os
import threading
import time

from .. import wire
from ..authz import TokenIssuer
from ..batchsim import BatchClient, BatchQueue
from ..cache import BlockCache, CacheClient, CacheConfig
from ..delivery import DeliveryService
from ..errors import BadRequest, CasaError
from ..mlserve import InferenceServer, ModelRegistry
from ..pipeline.hist import Histogram
from ..pipeline.task import AnalysisSpec, dataset_manifest
from ..sched import ScalerPolicy, Scheduler
from ..worker import ProcessLauncher, ThreadLauncher
from .config import SERVICES, FacilityConfig, from_dict, load_config

log = logging.getLogger(__name__)

RESTART_FIELDS = (
    "facility", "signing_key", "host", "ports", "queue", "block_size", "origin_root", "delivery_root",
    "credentials_dir", "token_ttl", "session", "skew", "tick_mode", "tick_ms", "launch",
)


@dataclasses.dataclass
class TickReport:
    now: int
    actions: list
    transitions: list
    assignments: list
    live_workers: int
    running_jobs: int


class Facility:
    def __init__(self, config, transport="inproc"):
        if transport not in ("inproc", "tcp"):
            raise BadRequest(f"unknown transport {transport!r}")
        if config.launch == "process" and transport != "tcp":
            raise BadRequest("process workers need the tcp transport")
        self.config = config
        self.transport = transport
        self.now = 0
        self.trace = []
        self.peak_workers = 0
        self.servers = {}
        self.ctl = {}
        self.tokens = {}
        self._lock = threading.RLock()
        self._clock_thread = None
        self._clock_stop = threading.Event()
        self.running = False

    # -- lifecycle -----------------------------------------------------------

    def _address(self, service):
        if self.transport == "inproc":
            return f"inproc://{self.config.facility}/{service}"
        return f"tcp://{self.config.host}:{self.config.ports[service]}"

    def _serve(self, service, routes):
        router = wire.Router()
        router.update(routes)
        server = wire.serve(router, self._address(service), name=service)
        self.servers[service] = server
        return server.address

    def up(self):
        cfg = self.config
        self.issuer = TokenIssuer(cfg.key, audience=cfg.facility, max_ttl=cfg.token_ttl, skew=cfg.skew)
        realtime = cfg.tick_mode == "realtime"
        if cfg.launch == "process":
            self.launcher = ProcessLauncher(heartbeat_interval=cfg.tick_ms / 1000.0)
        else:
            self.launcher = ThreadLauncher(auto_flush=realtime,
                                           heartbeat_interval=cfg.tick_ms / 1000.0 if realtime else None)
        os.makedirs(cfg.origin_root, exist_ok=True)
        self.batch = BatchQueue(self.issuer, cfg.slots, self.launcher)
        self.cache = BlockCache(CacheConfig(cfg.origin_root, cfg.block_size, cfg.capacity_blocks,
                                            cfg.origin_latency_ms), self.issuer)
        self.registry = ModelRegistry(self.issuer)
        self.inference = InferenceServer(self.registry)
        self.addresses = {}
        try:
            self.addresses["batch"] = self._serve("batch", {**self.batch.routes(), "batch.slots": self._set_slots})
            self.addresses["cache"] = self._serve("cache", {**self.cache.routes(), "cache.capacity": self._set_cache})
            self.addresses["ml"] = self._serve("ml", self.inference.routes())
            self.scheduler = Scheduler(self.issuer, BatchClient(self._connect("batch", "sched->batch")),
                                       cfg.scaler, cfg.queue)
            self.addresses["sched"] = self._serve("sched", {**self.scheduler.routes(), "sched.policy": self._set_policy})
            self.scheduler.worker_args = {"scheduler": self.addresses["sched"], "cache": self.addresses["cache"],
                                          "ml": self.addresses["ml"]}
            self.delivery = DeliveryService(self.issuer, CacheClient(self._connect("cache", "delivery->cache")),
                                            cfg.delivery_root, clock=lambda: self.now)
            self.addresses["delivery"] = self._serve("delivery", self.delivery.routes())
            self.addresses["admin"] = self._serve("admin", self._admin_routes())
            for service in SERVICES:
                self.ctl[service] = self._connect(service, f"facility->{service}")
        except BaseException:
            self.down()
            raise
        self.operator_token = self.issuer.mint(
            "facility-operator",
            ["read:/", "transform:/", "submit:queue/" + cfg.queue, "infer:models/", "write:models/"],
            ttl=cfg.token_ttl, session=cfg.session)
        self.write_credentials()
        self.running = True
        return self

    def _connect(self, service, name):
        return wire.connect(self.addresses.get(service) or self._address(service), name=name)

    def down(self):
        self.stop_clock()
        self.running = False
        if hasattr(self, "batch"):
            self.batch.shutdown()
        for conn in self.ctl.values():
            conn.close()
        self.ctl = {}
        for server in self.servers.values():
            server.close()
        self.servers = {}
        if hasattr(self, "inference"):
            self.inference.close()

    def __enter__(self):
        return self.up()

    def __exit__(self, *exc):
        self.down()

    def ping_all(self):
        return {service: "ping.ok" if self.ctl[service].request("ping") == {} else "bad"
                for service in SERVICES}

    # -- credentials ---------------------------------------------------------

    def mint_user_token(self, grant):
        return self.issuer.mint(grant.name, list(grant.caps), ttl=self.config.token_ttl,
                                session=self.config.session)

    def write_credentials(self, users=None):
        cfg = self.config
        os.makedirs(cfg.credentials_dir, mode=0o700, exist_ok=True)
        for grant in cfg.users if users is None else users:
            token = self.tokens[grant.name] = self.mint_user_token(grant)
            self._write_private(os.path.join(cfg.credentials_dir, f"{grant.name}.token"), token + "\n")
            profile = {"user": grant.name, "facility": cfg.facility, "token": token,
                       "capabilities": list(grant.caps), "addresses": self.addresses}
            self._write_private(os.path.join(cfg.credentials_dir, f"{grant.name}.json"),
                                json.dumps(profile, indent=1, sort_keys=True) + "\n")

    @staticmethod
    def _write_private(path, text):
        fd = os.open(path + ".tmp", os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(path + ".tmp", path)

    def _remove_credentials(self, name):
        self.tokens.pop(name, None)
        for suffix in (".token", ".json"):
            try:
                os.remove(os.path.join(self.config.credentials_dir, name + suffix))
            except FileNotFoundError:
                pass

    # -- clock ---------------------------------------------------------------

    def tick(self):
        """Advance the facility clock by one tick and run one control step."""
        with self._lock:
            self.now += 1
            now = self.now
            sched, batch = self.ctl["sched"], self.ctl["batch"]
            sched.request("sched.clock", {"now": now})
            if self.config.tick_mode == "simulated" and isinstance(self.launcher, ThreadLauncher):
                live = self.launcher.live()
                for worker in live:
                    worker.beat()
                for worker in live:
                    worker.flush()
            scaled = sched.request("sched.tick", {"now": now})
            transitions = batch.request("batch.tick", {"now": now})["transitions"]
            assigned = sched.request("sched.assign", {"now": now})
            running = sum(1 for j in batch.request("batch.query", {"states": ["Running"]})["jobs"])
            live_workers = max(scaled["live_workers"], assigned["live_workers"])
            self.peak_workers = max(self.peak_workers, live_workers)
            report = TickReport(now, scaled["actions"], transitions, assigned["assignments"],
                                assigned["live_workers"], running)
            self.trace.append(("tick", now, report.actions, [(t["job_id"], t["to"]) for t in transitions],
                               report.assignments))
            return report

    def start_clock(self, interval=None):
        interval = self.config.tick_ms / 1000.0 if interval is None else interval
        self._clock_stop.clear()

        def loop():
            while not self._clock_stop.wait(interval):
                try:
                    self.tick()
                    self._refresh_credentials()
                except CasaError as exc:
                    log.warning("tick %d failed: %s", self.now, exc)

        self._clock_thread = threading.Thread(target=loop, name="facility-clock", daemon=True)
        self._clock_thread.start()

    def stop_clock(self):
        self._clock_stop.set()
        if self._clock_thread is not None and self._clock_thread is not threading.current_thread():
            self._clock_thread.join(10)
        self._clock_thread = None

    def _refresh_credentials(self):
        # Renew user tokens once half their lifetime has passed.
        for name, token in list(self.tokens.items()):
            claims = self.issuer.verify(token)
            if time.time() >= claims.iat + (claims.exp - claims.iat) / 2 and time.time() < claims.ses_exp:
                self.tokens[name] = self.issuer.renew(token, ttl=self.config.token_ttl)
                self._write_private(os.path.join(self.config.credentials_dir, f"{name}.token"),
                                    self.tokens[name] + "\n")

    # -- analysis ------------------------------------------------------------

    def submit(self, spec, token=None, n_partitions=None, graph_id=None):
        if isinstance(spec, dict):
            spec = AnalysisSpec.from_doc(spec)
        token = token or self.operator_token
        if n_partitions is None:
            manifest = dataset_manifest(CacheClient(self.ctl["cache"]), spec.dataset, token)
            spec.check_schema(manifest["schema"])
            n_partitions = len(manifest["partitions"])
        graph = {"graph_id": graph_id or "", "dataset": spec.dataset, "n_partitions": n_partitions,
                 "map_spec": spec.to_doc(), "reduce": "histogram_merge"}
        return self.ctl["sched"].request("sched.submit_graph", {"graph": graph, "token": token})["graph_id"]

    def status(self, graph_id):
        return self.ctl["sched"].request("sched.status", {"graph_id": graph_id})

    def wait(self, graph_id, max_ticks=100000, on_tick=None, timeout=600.0):
        """Drive (simulated) or await (realtime clock running) a graph to completion."""
        deadline = time.monotonic() + timeout
        ticks = 0
        while True:
            status = self.status(graph_id)
            if status["state"] in ("Done", "Failed"):
                break
            if time.monotonic() > deadline or ticks >= max_ticks:
                raise CasaError(f"graph {graph_id} did not finish (state {status['state']})")
            if self._clock_thread is None:
                report = self.tick()
                ticks += 1
                if on_tick is not None:
                    on_tick(report)
            else:
                time.sleep(min(0.05, self.config.tick_ms / 1000.0))
        if status["state"] == "Failed":
            raise CasaError(f"graph {graph_id} failed: {status.get('error')}")
        status["histogram"] = Histogram.from_doc(status["result"])
        status["ticks"] = ticks
        return status

    def run(self, spec, token=None, **kw):
        return self.wait(self.submit(spec, token), **kw)

    def live_workers(self):
        doc = self.ctl["sched"].request("sched.workers")
        return [w for w in doc["workers"] if w["state"] != "Gone"]

    def cache_stats(self):
        return CacheClient(self.ctl["cache"]).stats()

    def kill_worker(self, worker_id):
        """Fault injection: crash a running in-process worker."""
        self.launcher.workers[worker_id].crash()

    def bench(self, spec, repeats=2, token=None):
        if type(repeats) is not int or repeats < 1:
            raise BadRequest("repeats must be a positive integer")
        if isinstance(spec, dict):
            spec = AnalysisSpec.from_doc(spec)
        token = token or self.operator_token
        manifest = dataset_manifest(CacheClient(self.ctl["cache"]), spec.dataset, token)
        rows = manifest["rows"]
        runs = []
        for i in range(repeats):
            before = self.cache_stats()
            peak = [len(self.live_workers())]
            t0 = time.perf_counter()
            status = self.run(spec, token, on_tick=lambda r: peak.append(r.live_workers))
            wall = time.perf_counter() - t0
            delta = self.cache_stats() - before
            runs.append({
                "run": i + 1, "graph_id": status["graph_id"], "wall_s": wall, "events": rows,
                "events_per_s": rows / wall if wall > 0 else float("inf"), "ticks": status["ticks"],
                "peak_workers": max(peak), "cache": delta.to_doc(),
                "histogram": status["histogram"].summary(),
            })
        report = {"dataset": spec.dataset, "rows": rows, "partitions": len(manifest["partitions"]),
                  "repeats": repeats, "runs": runs}
        if repeats > 1:
            cold, warm = runs[0]["wall_s"], runs[-1]["wall_s"]
            report["cold_vs_warm"] = {"cold_s": cold, "warm_s": warm,
                                      "speedup": cold / warm if warm > 0 else float("inf"),
                                      "warm_origin_bytes": runs[-1]["cache"]["bytes_from_origin"]}
        return report

    # -- reconciliation ------------------------------------------------------

    def reconcile(self, new_config=None):
        """Drive the running facility toward ``new_config`` (default: re-read the config file)."""
        if new_config is None:
            if not self.config.path:
                raise BadRequest("facility has no config file to re-read")
            new_config = load_config(self.config.path)
        elif isinstance(new_config, dict):
            new_config = from_dict(new_config)
        if not isinstance(new_config, FacilityConfig):
            raise BadRequest("reconcile needs a FacilityConfig")
        with self._lock:
            old = self.config
            report = {"applied": [], "restart_required": [], "actions": [], "evicted": 0}
            for name in RESTART_FIELDS:
                if getattr(old, name) != getattr(new_config, name):
                    report["restart_required"].append(name)
            if new_config.slots != old.slots:
                self.ctl["batch"].request("batch.slots", {"slots": new_config.slots})
                report["applied"].append(f"batch.slots {old.slots}->{new_config.slots}")
            if new_config.scaler != old.scaler:
                reply = self.ctl["sched"].request("sched.policy", {"policy": dataclasses.asdict(new_config.scaler)})
                report["actions"].extend(reply["actions"])
                report["applied"].append("scaler")
            if (new_config.capacity_blocks, new_config.origin_latency_ms) != (old.capacity_blocks,
                                                                            old.origin_latency_ms):
                reply = self.ctl["cache"].request("cache.capacity", {
                    "capacity_blocks": new_config.capacity_blocks, "origin_latency_ms": new_config.origin_latency_ms})
                report["evicted"] = reply["evicted"]
                report["applied"].append(f"cache.capacity_blocks {old.capacity_blocks}->{new_config.capacity_blocks}")
            old_users = {u.name: u for u in old.users}
            new_users = {u.name: u for u in new_config.users}
            changed = [u for name, u in new_users.items() if old_users.get(name) != u]
            removed = [name for name in old_users if name not in new_users]
            # Keep restart-only fields as they are; adopt every hot field.
            self.config = dataclasses.replace(
                old, slots=new_config.slots, scaler=new_config.scaler, capacity_blocks=new_config.capacity_blocks,
                origin_latency_ms=new_config.origin_latency_ms, users=new_config.users, raw=new_config.raw)
            if changed:
                self.write_credentials(changed)
                report["applied"].append("users+ " + ",".join(u.name for u in changed))
            for name in removed:
                self._remove_credentials(name)
            if removed:
                report["applied"].append("users- " + ",".join(removed))
            self.trace.append(("reconcile", self.now, report["applied"], report["restart_required"]))
            return report

    # -- hot-reload endpoints ------------------------------------------------

    def _set_slots(self, payload, conn):
        self.batch.set_slots(payload.get("slots"))
        return {"slots": self.batch.slots, "target_slots": self.batch.target_slots}

    def _set_policy(self, payload, conn):
        try:
            policy = ScalerPolicy(**payload.get("policy", {}))
        except TypeError as exc:
            raise BadRequest(f"bad scaler policy: {exc}") from None
        return {"actions": [list(a) for a in self.scheduler.set_policy(policy)]}

    def _set_cache(self, payload, conn):
        latency = payload.get("origin_latency_ms")
        if latency is not None:
            self.cache.config.origin_latency = float(latency)
        evicted = self.cache.set_capacity(payload.get("capacity_blocks"))
        return {"evicted": len(evicted)}

    def _admin_routes(self):
        def status(p, c):
            jobs = self.batch.query()
            return {
                "facility": self.config.facility, "now": self.now, "addresses": self.addresses,
                "workers": self.scheduler.workers_doc(), "peak_workers": self.peak_workers,
                "jobs": {s: sum(1 for j in jobs if j.state.value == s)
                         for s in ("Idle", "Running", "Completed", "Removed", "Held")},
                "slots": self.batch.slots, "cache": self.cache.stats().to_doc(),
                "graphs": {gid: g.state.value for gid, g in self.scheduler.graphs.items()},
            }

        def reconcile(p, c):
            return self.reconcile()

        return {"facility.status": status, "facility.reconcile": reconcile}

