import json
import threading
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from casa import wire
from casa.errors import BadRequest, Internal, NotFound, TooLarge
from casa.wire import Envelope, FrameBuffer, Router, decode_frame, encode_frame

json_scalars = st.none() | st.booleans() | st.integers(-2**53, 2**53) | st.floats(allow_nan=False,
                                                                                   allow_infinity=False) | st.text()
json_docs = st.recursive(json_scalars, lambda kids: st.lists(kids, max_size=4)
                         | st.dictionaries(st.text(max_size=8), kids, max_size=4), max_leaves=20)
types = st.from_regex(r"[a-z][a-z0-9_]{0,6}(\.[a-z][a-z0-9_]{0,6}){0,2}", fullmatch=True)
envelopes = st.builds(Envelope, type=types, id=st.text(max_size=12),
                      payload=st.dictionaries(st.text(max_size=8), json_docs, max_size=5))


def test_ping_round_trip():
    env = Envelope("ping", "1", {})
    data = encode_frame(env)
    assert data.endswith(b"\n") and data.count(b"\n") == 1
    assert decode_frame(data) == env


def test_response_id_preserved():
    env = decode_frame(encode_frame(Envelope("cache.read.ok", "7", {"data": "AAEC", "length": 3})))
    assert env.id == "7" and env.type == "cache.read.ok"


def test_canonical_key_order():
    data = encode_frame(Envelope("x", "1", {"b": 1, "a": {"d": 1, "c": 2}}))
    assert data == b'{"id":"1","payload":{"a":{"c":2,"d":1},"b":1},"type":"x","v":1}\n'


def test_oversized_frame_rejected():
    with pytest.raises(TooLarge):
        encode_frame(Envelope("cache.read.ok", "1", {"data": "a" * (17 * 2**20)}))


def test_frame_size_boundary():
    overhead = len(encode_frame(Envelope("x", "1", {"d": ""})))
    exact = Envelope("x", "1", {"d": "a" * (wire.MAX_FRAME - overhead)})
    assert len(encode_frame(exact)) == wire.MAX_FRAME
    with pytest.raises(TooLarge):
        encode_frame(Envelope("x", "1", {"d": "a" * (wire.MAX_FRAME - overhead + 1)}))


@pytest.mark.parametrize("data", [b"not a document", b"[1,2]", b'{"v":1,"type":"ping","id":"1"}',
                                  b'{"v":2,"type":"ping","id":"1","payload":{}}',
                                  b'{"v":1,"type":"Bad Type","id":"1","payload":{}}',
                                  b'{"v":true,"type":"ping","id":"1","payload":{}}', b"\xff\xfe"])
def test_decode_rejects(data):
    with pytest.raises(BadRequest):
        decode_frame(data)


def test_nan_payload_rejected():
    with pytest.raises(BadRequest):
        encode_frame(Envelope("x", "1", {"f": float("nan")}))


def test_no_raw_lf_inside_frame():
    data = encode_frame(Envelope("x", "1\n2", {"s": "line\nbreak"}))
    assert data.count(b"\n") == 1


@given(envelopes)
@settings(max_examples=300)
def test_round_trip_property(env):
    assert decode_frame(encode_frame(env)) == env


@given(st.lists(envelopes, min_size=1, max_size=8), st.lists(st.integers(1, 50), min_size=1, max_size=20))
@settings(max_examples=200)
def test_framing_independent_of_chunks(envs, cuts):
    stream = b"".join(encode_frame(e) for e in envs)
    buf = FrameBuffer()
    lines = []
    pos = 0
    i = 0
    while pos < len(stream):
        step = cuts[i % len(cuts)]
        lines += buf.feed(stream[pos:pos + step])
        pos += step
        i += 1
    assert [decode_frame(line) for line in lines] == envs


def test_frame_buffer_limit():
    buf = FrameBuffer(limit=100)
    with pytest.raises(TooLarge):
        buf.feed(b"x" * 100)


# -- dispatch ----------------------------------------------------------------

def test_dispatch_ping_and_unknown():
    router = Router()
    assert router.dispatch(None, Envelope("ping", "1")) == Envelope("ping.ok", "1", {})
    err = router.dispatch(None, Envelope("nope.xyz", "2"))
    assert err.type == "nope.xyz.err" and err.payload["code"] == "bad_request"


def test_dispatch_handler_failure_is_internal():
    router = Router()
    router.register("boom", lambda p, c: 1 / 0)
    router.register("missing", lambda p, c: (_ for _ in ()).throw(NotFound("gone")))
    assert router.dispatch(None, Envelope("boom", "1")).payload["code"] == "internal"
    assert router.dispatch(None, Envelope("missing", "1")).payload == {"code": "not_found", "message": "gone"}


def test_reserved_suffix():
    with pytest.raises(ValueError):
        Router().register("x.ok", lambda p, c: {})


def _pair(router, chunk=None):
    a, b = wire.pipe_pair(chunk)
    server = wire.Connection(b, router, "server").start()
    client = wire.Connection(a, Router(), "client").start()
    return client, server


def test_pipelined_requests_correlate():
    gate = threading.Event()
    router = Router()
    router.register("slow", lambda p, c: (gate.wait(5), {"who": "a"})[1])
    router.register("fast", lambda p, c: {"who": "b"})
    client, server = _pair(router, chunk=3)
    fa = client.request_async("slow")
    fb = client.request_async("fast")
    assert fb.result(5) == {"who": "b"}  # answered out of order
    gate.set()
    assert fa.result(5) == {"who": "a"}
    client.close()


def test_handler_error_keeps_connection_usable():
    router = Router()
    router.register("boom", lambda p, c: 1 / 0)
    client, server = _pair(router)
    with pytest.raises(Internal):
        client.request("boom")
    assert client.request("ping") == {}
    with pytest.raises(BadRequest):
        client.request("nope.xyz")
    client.close()


def test_garbage_line_gets_err_response():
    router = Router()
    a, b = wire.pipe_pair()
    wire.Connection(b, router, "server").start()
    a.send(b'{"v":2,"type":"ping","id":"9","payload":{}}\n')
    reply = decode_frame(a.recv())
    assert reply.type == "ping.err" and reply.id == "9" and reply.payload["code"] == "bad_request"
    a.close()


def test_response_pairing_many_requests():
    router = Router()
    router.register("echo", lambda p, c: {"n": p["n"]})
    client, server = _pair(router, chunk=7)
    futures = [client.request_async("echo", {"n": i}) for i in range(200)]
    assert [f.result(10)["n"] for f in futures] == list(range(200))
    client.close()


def test_close_fails_pending():
    router = Router()
    router.register("hang", lambda p, c: (time.sleep(2), {})[1])
    client, server = _pair(router)
    fut = client.request_async("hang")
    client.close()
    with pytest.raises(Exception) as info:
        fut.result(5)
    assert getattr(info.value, "code", "") == "unavailable"


def test_tcp_server_and_bidirectional_requests():
    router = Router()
    router.register("ask_back", lambda p, c: {"answer": c.request("whoami")["me"]})
    server = wire.serve(router, "tcp://127.0.0.1:0")
    client_router = Router()
    client_router.register("whoami", lambda p, c: {"me": "client"})
    conn = wire.connect(server.address, client_router)
    assert conn.request("ask_back") == {"answer": "client"}
    assert json.loads(json.dumps(conn.request("ping"))) == {}
    conn.close()
    server.close()


def test_tcp_port_conflict_unavailable():
    server = wire.serve(Router(), "tcp://127.0.0.1:0")
    with pytest.raises(Exception) as info:
        wire.serve(Router(), server.address)
    assert info.value.code == "unavailable"
    server.close()


def test_inproc_name_conflict_and_missing():
    server = wire.serve(Router(), "inproc://wire-test")
    with pytest.raises(Exception) as info:
        wire.serve(Router(), "inproc://wire-test")
    assert info.value.code == "unavailable"
    server.close()
    with pytest.raises(Exception) as info:
        wire.connect("inproc://wire-test")
    assert info.value.code == "unavailable"
