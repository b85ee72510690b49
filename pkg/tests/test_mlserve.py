import random
import struct
import threading

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracle
from casa import wire
from casa.authz import TokenIssuer
from casa.errors import BadRequest, Conflict, NotFound, Unauthorized
from casa.mlserve import InferenceServer, MLClient, ModelRegistry, score_row, score_rows, sigmoid
from conftest import KEY


@pytest.fixture
def reg(issuer):
    return ModelRegistry(issuer)


@pytest.fixture
def writer(issuer):
    return issuer.mint("ops", ["write:models/", "infer:models/"])


def production(reg, writer, name, params):
    v = reg.register_model(name, params, writer)
    reg.transition_stage(name, v, "Staging", writer)
    reg.transition_stage(name, v, "Production", writer)
    return v


def test_sigmoid_values():
    assert sigmoid(0.0) == 0.5
    mpmath.mp.dps = 50
    ref = float(1 / (1 + mpmath.exp(-1)))
    assert ref == 0.7310585786300049
    assert score_row([1.0, -1.0], 0.0, [2.0, 1.0]) == ref
    assert score_row([1.0, -1.0], 0.0, [0.0, 0.0]) == 0.5


def test_scores_in_unit_interval():
    assert sigmoid(-1000.0) == 0.0 and sigmoid(1000.0) == 1.0
    rows = np.random.default_rng(1).normal(0, 3, (500, 3))
    s = score_rows([0.4, -1.2, 2.0], 0.3, rows)
    assert ((s > 0) & (s < 1)).all()


def test_register_versions(reg, writer):
    assert reg.register_model("sig", {"w": [1.0, -1.0], "b": 0.0}, writer) == 1
    assert reg.register_model("sig", {"w": [1.0, -1.0], "b": 0.5}, writer) == 2
    assert reg.register_model("bkg", {"w": [1.0]}, writer) == 1


@pytest.mark.parametrize("params", [{"w": [1.0, float("nan")]}, {"w": [float("inf")]}, {"w": [1.0], "b": float("inf")},
                                    {"w": []}, {"w": ["x"]}, {"b": 1.0}, [1.0]])
def test_register_rejects(reg, writer, params):
    with pytest.raises(BadRequest):
        reg.register_model("sig", params, writer)


def test_register_requires_write(reg, issuer):
    with pytest.raises(Unauthorized):
        reg.register_model("sig", {"w": [1.0]}, issuer.mint("u", ["write:models/other"]))


def test_stage_machine(reg, writer):
    production(reg, writer, "sig", {"w": [1.0, -1.0]})
    assert reg.get("sig", "Production").version == 1
    reg.register_model("sig", {"w": [2.0, -1.0]}, writer)
    reg.transition_stage("sig", 2, "Staging", writer)
    reg.transition_stage("sig", 2, "Production", writer)
    assert reg.get("sig", 1).stage == "Staging" and reg.get("sig", 2).stage == "Production"
    reg.register_model("sig", {"w": [3.0, -1.0]}, writer)
    with pytest.raises(Conflict):
        reg.transition_stage("sig", 3, "Production", writer)
    assert reg.transition_stage("sig", 2, "None", writer).stage == "None"
    with pytest.raises(NotFound):
        reg.transition_stage("sig", 9, "Staging", writer)
    with pytest.raises(NotFound):
        reg.get("nope", 1)
    with pytest.raises(BadRequest):
        reg.transition_stage("sig", 1, "Archived", writer)


def test_infer_examples(reg, writer):
    production(reg, writer, "sig", {"w": [1.0, -1.0], "b": 0.0})
    server = InferenceServer(reg)
    try:
        assert server.infer("sig", "Production", [[0.0, 0.0], [2.0, 1.0]], writer).tolist() == [
            0.5, 0.7310585786300049]
        with pytest.raises(BadRequest):
            server.infer("sig", 1, [[1.0, 2.0, 3.0]], writer)
        with pytest.raises(BadRequest):
            server.infer("sig", 1, [], writer)
        with pytest.raises(NotFound):
            server.infer("other", "Production", [[1.0]], writer)
        with pytest.raises(Unauthorized):
            server.infer("sig", 1, [[1.0, 1.0]], "junk")
    finally:
        server.close()


def test_no_production_is_not_found(reg, writer):
    reg.register_model("sig", {"w": [1.0]}, writer)
    server = InferenceServer(reg)
    with pytest.raises(NotFound):
        server.infer("sig", "Production", [[1.0]], writer)
    server.close()


def _bits(a):
    return np.asarray(a, dtype="<f8").tobytes()


def test_batching_transparent_under_concurrency(reg, writer):
    w, b = [0.3, -0.7, 1.1], -0.25
    production(reg, writer, "sig", {"w": w, "b": b})
    server = InferenceServer(reg, max_batch=64, window=0.02)
    rng = random.Random(3)
    rows = [[rng.uniform(-5, 5) for _ in range(3)] for _ in range(1000)]
    ref = [oracle.score(w, b, r) for r in rows]
    # random split into requests, all fired at once
    cuts = sorted(rng.sample(range(1, 1000), 40))
    chunks = [rows[i:j] for i, j in zip([0] + cuts, cuts + [1000])]
    futures = [server.submit("sig", "Production", c, writer) for c in chunks]
    out = np.concatenate([f.result(10) for f in futures])
    assert _bits(out) == struct.pack("<1000d", *ref)
    assert server.rows_scored == 1000
    assert server.executions < len(chunks)  # some requests shared a batch
    server.close()


def test_threaded_clients(reg, writer):
    production(reg, writer, "sig", {"w": [0.5, 0.5], "b": 0.0})
    server = InferenceServer(reg, max_batch=8, window=0.002)
    errors = []

    def client(seed):
        rng = np.random.default_rng(seed)
        for _ in range(20):
            batch = rng.normal(size=(int(rng.integers(1, 20)), 2))
            got = server.infer("sig", "Production", batch, writer)
            if _bits(got) != _bits([score_row([0.5, 0.5], 0.0, r) for r in batch.tolist()]):
                errors.append(seed)

    threads = [threading.Thread(target=client, args=(i,)) for i in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors
    server.close()


@given(st.lists(st.tuples(st.sampled_from(["register", "stage"]), st.sampled_from(["a", "b"]),
                          st.integers(1, 6), st.sampled_from(["None", "Staging", "Production"])), max_size=150))
@settings(max_examples=100, deadline=None)
def test_registry_fuzz(ops):
    issuer = TokenIssuer(KEY, audience="casa")
    token = issuer.mint("ops", ["write:models/"])
    reg = ModelRegistry(issuer)
    last = {}
    for op, name, version, stage in ops:
        try:
            if op == "register":
                v = reg.register_model(name, {"w": [1.0]}, token)
                assert v == last.get(name, 0) + 1
                last[name] = v
            else:
                reg.transition_stage(name, version, stage, token)
        except (NotFound, Conflict):
            pass
        for n in reg.models:
            assert sum(mv.stage == "Production" for mv in reg.models[n]) <= 1
            assert [mv.version for mv in reg.models[n]] == list(range(1, len(reg.models[n]) + 1))


def test_wire_client(reg, writer):
    server = InferenceServer(reg)
    router = wire.Router()
    router.update(server.routes())
    srv = wire.serve(router, "inproc://ml-test")
    client = MLClient(wire.connect(srv.address))
    assert client.register("sig", {"w": [1.0, -1.0], "b": 0.0}, writer) == 1
    client.transition("sig", 1, "Staging", writer)
    assert client.transition("sig", 1, "Production", writer)["stage"] == "Production"
    assert client.infer("sig", "Production", [[2.0, 1.0]], writer).tolist() == [0.7310585786300049]
    with pytest.raises(Conflict):
        client.transition("sig", 1, "Production", writer)
    srv.close()
    server.close()
