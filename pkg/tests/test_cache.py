import os
import random
import threading

import pytest

from casa import wire
from casa.cache import BlockCache, BlockKey, CacheClient, CacheConfig, CacheStats
from casa.errors import BadRequest, NotFound, Unauthorized

BS = 4096


@pytest.fixture
def origin(tmp_path):
    root = tmp_path / "origin"
    (root / "store").mkdir(parents=True)
    rng = random.Random(5)
    for name, size in [("a", 4 * BS), ("b", BS), ("c", BS), ("big", 3 * 2**20), ("odd", 3 * BS + 17)]:
        (root / "store" / name).write_bytes(bytes(rng.getrandbits(8) for _ in range(size)) if size < 2**16
                                            else os.urandom(size))
    return root


@pytest.fixture
def reader(issuer):
    return issuer.mint("r", ["read:/store/"])


def make(origin, issuer, **kw):
    kw.setdefault("block_size", BS)
    return BlockCache(CacheConfig(str(origin), **kw), issuer)


def test_read_through_counts(origin, issuer, reader):
    cache = make(origin, issuer, block_size=2**20)
    expected = (origin / "store" / "big").read_bytes()
    assert cache.read_range("/store/big", 0, 3 * 2**20, reader) == expected
    s1 = cache.stats()
    assert (s1.misses, s1.hits, s1.bytes_from_origin) == (3, 0, 3 * 2**20)
    assert cache.read_range("/store/big", 0, 3 * 2**20, reader) == expected
    s2 = cache.stats()
    assert (s2.misses, s2.hits, s2.bytes_from_origin) == (3, 3, 3 * 2**20)
    assert s2.bytes_from_cache == 3 * 2**20


def test_small_range(origin, issuer, reader):
    cache = make(origin, issuer)
    assert cache.read_range("/store/odd", 10, 5, reader) == (origin / "store" / "odd").read_bytes()[10:15]


def test_truncates_at_object_end(origin, issuer, reader):
    cache = make(origin, issuer)
    data = (origin / "store" / "odd").read_bytes()
    assert cache.read_range("/store/odd", len(data) - 3, 100, reader) == data[-3:]
    assert cache.read_range("/store/odd", len(data) + 10, 100, reader) == b""


@pytest.mark.parametrize("path", ["/store/../secret", "store/a", "/store//a", "/store/./a", "/store/a\x00"])
def test_path_normalization(origin, issuer, reader, path):
    with pytest.raises(BadRequest):
        make(origin, issuer).read_range(path, 0, 1, reader)


@pytest.mark.parametrize("offset,length", [(-1, 1), (0, 0), (0, -5), (1.5, 1)])
def test_bad_ranges(origin, issuer, reader, offset, length):
    with pytest.raises(BadRequest):
        make(origin, issuer).read_range("/store/a", offset, length, reader)


def test_missing_object(origin, issuer, reader):
    with pytest.raises(NotFound):
        make(origin, issuer).read_range("/store/nope", 0, 1, reader)
    (origin / "store" / "dir").mkdir()
    with pytest.raises(NotFound):
        make(origin, issuer).read_range("/store/dir", 0, 1, reader)


def test_read_requires_capability(origin, issuer):
    cache = make(origin, issuer)
    with pytest.raises(Unauthorized):
        cache.read_range("/store/a", 0, 1, issuer.mint("r", ["read:/other/"]))
    with pytest.raises(Unauthorized):
        cache.read_range("/store/a", 0, 1, "garbage")


def test_lru_example(origin, issuer, reader):
    cache = make(origin, issuer, capacity_blocks=4)
    for i in range(4):
        cache.read_range("/store/a", i * BS, 1, reader)
    assert cache.stats().evictions == 0
    cache.read_range("/store/a", 0, 1, reader)  # touch A0
    cache.read_range("/store/b", 0, 1, reader)  # insert a fifth block
    resident = cache.resident()
    assert BlockKey("/store/a", 1) not in resident
    assert BlockKey("/store/a", 0) in resident and len(resident) == 4
    assert cache.stats().evictions == 1


def test_lru_thrash(origin, issuer, reader):
    cache = make(origin, issuer, capacity_blocks=1)
    for path in ["/store/b", "/store/c", "/store/b", "/store/c"]:
        cache.read_range(path, 0, 1, reader)
    s = cache.stats()
    assert (s.misses, s.hits, s.evictions) == (4, 0, 3)


def test_fresh_stats_zero(origin, issuer):
    assert make(origin, issuer).stats() == CacheStats()


def test_purge(origin, issuer, reader):
    cache = make(origin, issuer)
    cache.read_range("/store/a", 0, 4 * BS, reader)
    with pytest.raises(Unauthorized):
        cache.purge(reader)
    cache.purge(issuer.mint("ops", ["write:/"]))
    assert cache.resident() == [] and cache.stats().misses == 4
    cache.read_range("/store/a", 0, 4 * BS, reader)
    assert cache.stats().misses == 8


def test_set_capacity_evicts_lru(origin, issuer, reader):
    cache = make(origin, issuer, capacity_blocks=256, block_size=4096)
    big = (origin / "store" / "big")
    cache.read_range("/store/big", 0, 100 * 4096, reader)
    assert len(cache.resident()) == 100
    evicted = cache.set_capacity(64)
    assert len(evicted) == 36
    assert evicted == [BlockKey("/store/big", i) for i in range(36)]
    assert len(cache.resident()) == 64 and big.exists()


def test_fuzz_reads_match_origin(origin, issuer, reader):
    cache = make(origin, issuer, capacity_blocks=7)
    rng = random.Random(99)
    blobs = {n: (origin / "store" / n).read_bytes() for n in ("a", "b", "odd", "big")}
    touched = 0
    for _ in range(1000):
        name = rng.choice(list(blobs))
        data = blobs[name]
        offset = rng.randrange(0, len(data) + BS)
        length = rng.randrange(1, 5 * BS)
        assert cache.read_range("/store/" + name, offset, length, reader) == data[offset:offset + length]
        end = min(offset + length, len(data))
        if offset < end:
            touched += (end - 1) // BS - offset // BS + 1
        assert len(cache.resident()) <= 7
    s = cache.stats()
    assert s.hits + s.misses == touched


def test_single_flight(origin, issuer, reader):
    cache = make(origin, issuer, origin_latency=50)
    barrier = threading.Barrier(16)
    out = []

    def read():
        barrier.wait()
        out.append(cache.read_range("/store/a", 0, BS, reader))

    threads = [threading.Thread(target=read) for _ in range(16)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert cache.origin_fetches == 1
    assert cache.stats().bytes_from_origin == BS
    assert len(set(out)) == 1 and len(out) == 16


def test_concurrent_accounting(origin, issuer, reader):
    cache = make(origin, issuer, capacity_blocks=3, origin_latency=1)
    errors = []

    def work(seed):
        rng = random.Random(seed)
        data = (origin / "store" / "odd").read_bytes()
        for _ in range(50):
            off = rng.randrange(len(data))
            if cache.read_range("/store/odd", off, BS, reader) != data[off:off + BS]:
                errors.append(off)

    threads = [threading.Thread(target=work, args=(i,)) for i in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors and len(cache.resident()) <= 3


def test_wire_client(origin, issuer, reader):
    cache = make(origin, issuer)
    router = wire.Router()
    router.update(cache.routes())
    server = wire.serve(router, "inproc://cache-test")
    client = CacheClient(wire.connect(server.address))
    data = (origin / "store" / "odd").read_bytes()
    assert client.read_range("/store/odd", 1, 2 * BS, reader) == data[1:1 + 2 * BS]
    assert client.stats().misses == 3
    with pytest.raises(NotFound):
        client.read_range("/store/zzz", 0, 1, reader)
    server.close()


def test_config_validation(origin):
    with pytest.raises(BadRequest):
        CacheConfig(str(origin), block_size=1024)
    with pytest.raises(BadRequest):
        CacheConfig(str(origin), capacity_blocks=0)
