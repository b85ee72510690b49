import os
import stat

import pytest

import oracle
from casa.authz import authorize
from casa.errors import BadRequest, NotFound, Unavailable
from casa.facility import DEFAULTS, Facility, from_dict, load_config
from casa.pipeline.datagen import gen_dataset
from conftest import facility_config

SPEC = {"dataset": "/store/ds", "selection": "pt > 30 && abs(eta) < 2.4",
        "histogram": {"variable": "mass", "n_bins": 25, "lo": 0.0, "hi": 250.0}}


def oracle_for(tmp_path, spec=SPEC):
    parts = oracle.read_dataset(str(tmp_path / "origin" / spec["dataset"].lstrip("/")))
    h = spec["histogram"]
    return oracle.dataset_histogram(parts, spec["selection"], h["variable"], h["n_bins"], h["lo"], h["hi"])


# -- config ------------------------------------------------------------------

def test_defaults_applied():
    cfg = from_dict({})
    assert cfg.slots == DEFAULTS["batch"]["slots"] and cfg.scaler.max_workers == 8
    assert cfg.scaler.tasks_per_worker == 2 and cfg.scaler.idle_timeout == 10
    assert (cfg.token_ttl, cfg.session, cfg.skew) == (600, 8 * 3600, 30)
    assert cfg.tick_mode == "simulated" and cfg.capacity_blocks == 256 and len(cfg.key) >= 16


def test_max_workers_over_slots():
    with pytest.raises(BadRequest) as info:
        from_dict({"scaler": {"max_workers": 16}, "batch": {"slots": 8}})
    assert "scaler.max_workers" in str(info.value) and "batch.slots" in str(info.value)


def test_duplicate_ports():
    with pytest.raises(BadRequest) as info:
        from_dict({"ports": {"admin": 7000, "batch": 7000, "sched": 7002, "cache": 7003, "delivery": 7004,
                             "ml": 7005}})
    assert "duplicate" in str(info.value)


def test_every_problem_reported():
    with pytest.raises(BadRequest) as info:
        from_dict({"colour": "red", "tick": {"mode": "warp"}, "users": [{"name": "x", "caps": ["fly:/"]}]})
    text = str(info.value)
    assert "colour" in text and "tick.mode" in text and "users[0].caps[0]" in text


def test_load_config_file_and_env(tmp_path, monkeypatch):
    path = tmp_path / "casa.yaml"
    path.write_text("config_version: 1\nfacility: desk\ncache: {origin_root: data}\n")
    cfg = load_config(str(path))
    assert cfg.facility == "desk" and cfg.origin_root == str(tmp_path / "data") and cfg.path == str(path)
    monkeypatch.setenv("CASA_CONFIG", str(path))
    assert load_config().facility == "desk"
    with pytest.raises(NotFound):
        load_config(str(tmp_path / "missing.yaml"))
    path.write_text("facility: [unclosed\n")
    with pytest.raises(BadRequest):
        load_config(str(path))


# -- lifecycle ---------------------------------------------------------------

def test_up_and_ping_inproc(make_facility):
    fac = make_facility()
    assert fac.ping_all() == {s: "ping.ok" for s in ("admin", "batch", "sched", "cache", "delivery", "ml")}


def test_up_and_ping_tcp_then_port_conflict(tmp_path, make_facility):
    fac = make_facility(transport="tcp")
    assert set(fac.ping_all().values()) == {"ping.ok"}
    ports = {s: int(a.rsplit(":", 1)[1]) for s, a in fac.addresses.items()}
    clash = Facility(facility_config(tmp_path, ports=ports), transport="tcp")
    with pytest.raises(Unavailable):
        clash.up()
    assert clash.servers == {}  # partial startup was torn down
    assert set(fac.ping_all().values()) == {"ping.ok"}


def test_credentials(make_facility):
    fac = make_facility()
    cdir = fac.config.credentials_dir
    assert sorted(os.listdir(cdir)) == ["alice.json", "alice.token", "bob.json", "bob.token"]
    for grant in fac.config.users:
        path = os.path.join(cdir, grant.name + ".token")
        assert stat.S_IMODE(os.stat(path).st_mode) == 0o600
        with open(path) as fh:
            claims = fac.issuer.verify(fh.read().strip())
        assert claims.sub == grant.name and claims.cap == grant.caps


def test_user_tokens_deny_by_default(make_facility):
    fac = make_facility()
    probes = [(a, r) for a in ("read", "write", "submit", "infer", "transform")
              for r in ("/store/ds", "/store/public/x", "/", "/other", "queue/default", "queue/x", "models/sig",
                        "/store", "/storex")]
    for grant in fac.config.users:
        claims = fac.issuer.verify(fac.tokens[grant.name])
        for action, resource in probes:
            expected = any(cap.split(":", 1)[0] == action and resource.startswith(cap.split(":", 1)[1])
                           for cap in grant.caps)
            assert authorize(claims, action, resource) == expected, (grant.name, action, resource)


# -- end to end --------------------------------------------------------------

def test_run_matches_oracle(tmp_path, make_facility, dataset):
    fac = make_facility()
    status = fac.run(SPEC, fac.tokens["alice"])
    assert status["state"] == "Done" and status["progress"]["done"] == 8
    assert oracle.same_bits(status["histogram"], oracle_for(tmp_path))


def test_bob_cannot_submit(make_facility, dataset):
    fac = make_facility()
    with pytest.raises(Exception) as info:
        fac.submit(SPEC, fac.tokens["bob"])
    assert info.value.code == "unauthorized"


def test_bad_spec_rejected_before_submit(make_facility, dataset):
    fac = make_facility()
    with pytest.raises(BadRequest):
        fac.submit({**SPEC, "selection": "zeta > 1"})
    with pytest.raises(NotFound):
        fac.submit({**SPEC, "dataset": "/store/none"})


def test_pool_scales_out_and_back_to_zero(make_facility, dataset):
    fac = make_facility(scaler={"idle_timeout": 3})
    gid = fac.submit(SPEC)
    fac.wait(gid)
    assert fac.peak_workers == 4  # ceil(8 / 2)
    for _ in range(3 + 2):
        fac.tick()
    assert fac.live_workers() == []


def test_deterministic_traces(tmp_path, dataset):
    traces = []
    for _ in range(2):
        with Facility(facility_config(tmp_path)) as fac:
            status = fac.run(SPEC)
            for _ in range(12):
                fac.tick()
            traces.append((fac.trace, status["histogram"].to_bytes()))
    assert traces[0] == traces[1]


def test_killed_worker_result_still_exact(tmp_path, make_facility, dataset):
    fac = make_facility()
    gid = fac.submit(SPEC)
    fac.tick()
    busy = [w for w in fac.live_workers() if w["state"] == "Busy"]
    assert busy
    fac.kill_worker(busy[0]["worker_id"])
    status = fac.wait(gid)
    assert oracle.same_bits(status["histogram"], oracle_for(tmp_path))
    assert any(w["worker_id"] == busy[0]["worker_id"] for w in fac.ctl["sched"].request("sched.workers")["workers"]
               if w["state"] == "Gone")


def test_delivery_through_facility(make_facility, dataset):
    fac = make_facility()
    alice = fac.tokens["alice"]
    doc = fac.ctl["delivery"].request("delivery.transform", {"dataset": dataset, "columns": ["pt"],
                                                             "selection": "pt > 50", "token": alice, "wait": True})
    assert doc["rows_in"] == 4000 and doc["created_at"] == 0


# -- reconcile ---------------------------------------------------------------

def test_reconcile_shrinks_pool_without_interrupting(tmp_path, make_facility, dataset):
    fac = make_facility(scaler={"idle_timeout": 50})
    first = fac.wait(fac.submit(SPEC))
    # a 12-partition run leaves 6 warm workers; then 2 tasks make 2 of them busy
    gen_dataset(str(tmp_path / "origin" / "store" / "ds12"), 1200, 12, seed=3)
    fac.wait(fac.submit({**SPEC, "dataset": "/store/ds12"}))
    assert len(fac.live_workers()) == 6
    gen_dataset(str(tmp_path / "origin" / "store" / "ds2"), 200, 2, seed=4)
    small = {**SPEC, "dataset": "/store/ds2"}
    gid2 = fac.submit(small)
    fac.tick()
    busy = sorted(w["worker_id"] for w in fac.live_workers() if w["state"] == "Busy")
    assert len(busy) == 2
    new = facility_config(tmp_path, facility=fac.config.facility, scaler={"idle_timeout": 50, "max_workers": 4})
    report = fac.reconcile(new)
    drained = [a[1] for a in report["actions"] if a[0] == "drain"]
    assert len(drained) == 2 and not set(drained) & set(busy)
    live = fac.live_workers()
    assert len(live) == 4 and sorted(w["worker_id"] for w in live if w["state"] == "Busy") == busy
    status = fac.wait(gid2)
    assert oracle.same_bits(status["histogram"], oracle_for(tmp_path, small))
    assert status["progress"]["done"] == 2 and first["state"] == "Done"
    assert len(fac.live_workers()) <= 4


def test_reconcile_cache_capacity(tmp_path, make_facility, admin_token):
    fac = make_facility(cache={"block_size": 4096, "capacity_blocks": 256})
    (tmp_path / "origin" / "store").mkdir(parents=True, exist_ok=True)
    (tmp_path / "origin" / "store" / "blob").write_bytes(os.urandom(100 * 4096))
    fac.cache.read_range("/store/blob", 0, 100 * 4096, fac.operator_token)
    assert len(fac.cache.resident()) == 100
    new = facility_config(tmp_path, facility=fac.config.facility,
                          cache={"block_size": 4096, "capacity_blocks": 64})
    report = fac.reconcile(new)
    assert report["evicted"] == 36 and len(fac.cache.resident()) == 64
    assert report["restart_required"] == []


def test_reconcile_port_change_is_restart_only(tmp_path, make_facility):
    fac = make_facility()
    ports = dict(fac.config.ports, admin=7999)
    report = fac.reconcile(facility_config(tmp_path, facility=fac.config.facility, ports=ports))
    assert report["restart_required"] == ["ports"] and report["applied"] == [] and report["actions"] == []
    assert fac.config.ports["admin"] == 0


def test_reconcile_users(tmp_path, make_facility):
    fac = make_facility()
    users = [{"name": "alice", "caps": ["read:/store/"]}, {"name": "carol", "caps": ["read:/"]}]
    report = fac.reconcile(facility_config(tmp_path, facility=fac.config.facility, users=users))
    cdir = fac.config.credentials_dir
    assert sorted(os.listdir(cdir)) == ["alice.json", "alice.token", "carol.json", "carol.token"]
    assert fac.issuer.verify(fac.tokens["alice"]).cap == ("read:/store/",)
    assert any("carol" in a for a in report["applied"])


def test_reconcile_invalid_leaves_state(tmp_path, make_facility):
    fac = make_facility()
    before = fac.config
    with pytest.raises(BadRequest):
        fac.reconcile({"scaler": {"max_workers": 99}})
    assert fac.config is before


def test_reconcile_rereads_file(tmp_path):
    path = tmp_path / "casa.yaml"
    base = "facility: reread\nports: {admin: 0, batch: 0, sched: 0, cache: 0, delivery: 0, ml: 0}\n"
    path.write_text(base + "batch: {slots: 8}\n")
    with Facility(load_config(str(path))) as fac:
        path.write_text(base + "batch: {slots: 6}\nscaler: {max_workers: 6}\n")
        report = fac.reconcile()
        assert fac.batch.slots == 6 and fac.scheduler.policy.max_workers == 6
        assert "scaler" in report["applied"]


# -- bench -------------------------------------------------------------------

def test_bench_rejects_zero_repeats(make_facility, dataset):
    with pytest.raises(BadRequest):
        make_facility().bench(SPEC, repeats=0)


def test_bench_report(tmp_path, make_facility, dataset):
    report = make_facility().bench(SPEC, repeats=2)
    run1, run2 = report["runs"]
    assert run1["cache"]["bytes_from_origin"] > 0 and run2["cache"]["bytes_from_origin"] == 0
    assert report["cold_vs_warm"]["warm_origin_bytes"] == 0
    assert run1["events"] == 4000 and run1["events_per_s"] > 0 and run1["peak_workers"] == 4
    assert run1["histogram"] == run2["histogram"]


def test_bench_latency_lower_bound(tmp_path, make_facility):
    gen_dataset(str(tmp_path / "origin" / "store" / "lat"), 8000, 8, seed=2)
    fac = make_facility(cache={"block_size": 4096, "origin_latency_ms": 10})
    report = fac.bench({**SPEC, "dataset": "/store/lat"}, repeats=1)
    run = report["runs"][0]
    cold_blocks = run["cache"]["misses"]
    assert run["wall_s"] >= cold_blocks * 0.010 / fac.config.scaler.max_workers


def test_process_workers_realtime(tmp_path, make_facility, dataset):
    fac = make_facility(transport="tcp", tick={"mode": "realtime", "tick_ms": 100}, workers={"launch": "process"})
    fac.start_clock()
    status = fac.run(SPEC, fac.tokens["alice"], timeout=120)
    assert oracle.same_bits(status["histogram"], oracle_for(tmp_path))
    fac.stop_clock()
