import threading

import numpy as np
import pytest

from ria.cache import CacheStats, ReprCache, format_key, item_key, page_key
from ria.errors import CacheMissError, ConfigError


class FakeClock:
    def __init__(self):
        self.now = 0.0

    def __call__(self):
        return self.now


def test_hit_returns_the_stored_bytes():
    cache = ReprCache()
    v = np.arange(4, dtype=np.float32) / 3
    cache.put(item_key("r1", 7), v)
    v[0] = 99  # caller mutation after put must not leak in
    (got,) = cache.get_many([item_key("r1", 7)])
    assert got.tobytes() == (np.arange(4, dtype=np.float32) / 3).tobytes()
    got[1] = -1  # nor mutation of a returned copy
    assert cache.get_many([item_key("r1", 7)])[0][1] != -1


def test_partial_hit_is_a_whole_miss():
    cache = ReprCache()
    cache.put(item_key("r1", 1), np.zeros(2))
    with pytest.raises(CacheMissError) as err:
        cache.get_many([item_key("r1", 1), page_key("r1", 1)])
    assert "page/r1/1" in str(err.value)
    assert (cache.stats.hits, cache.stats.misses) == (0, 1)


def test_ttl_expiry_with_fake_clock():
    clock = FakeClock()
    cache = ReprCache(ttl=5, clock=clock)
    cache.put(item_key("r", 1), np.ones(2))
    clock.now = 5.0
    assert cache.get_many([item_key("r", 1)])
    clock.now = 5.5
    assert item_key("r", 1) not in cache
    with pytest.raises(CacheMissError, match="expired"):
        cache.get_many([item_key("r", 1)])
    assert cache.stats.expirations == 1
    assert cache.purge_expired() == 1 and len(cache) == 0


def test_eviction_drops_least_recently_written_group():
    cache = ReprCache(capacity=4)
    for rid in ("a", "b"):
        cache.put(item_key(rid, 1), np.zeros(1))
        cache.put(item_key(rid, 2), np.zeros(1))
    cache.put(item_key("a", 3), np.zeros(1))  # "a" is now the freshest group; "b" goes
    assert item_key("b", 1) not in cache and item_key("a", 1) in cache
    assert cache.stats.evictions == 2 and len(cache) == 3


def test_oversized_group_stays_whole():
    cache = ReprCache(capacity=2)
    for i in range(4):
        cache.put(item_key("big", i), np.zeros(1))
    assert len(cache) == 4 and cache.stats.evictions == 0


def test_overwrites_invalidate_and_stats():
    cache = ReprCache()
    cache.put(page_key("r", 1), np.zeros((2, 3)))
    cache.put(page_key("r", 1), np.zeros((2, 3)))
    assert cache.stats.overwrites == 1 and cache.stats.stores == 2
    assert cache.invalidate("r") == 1 and len(cache) == 0
    stats = CacheStats(hits=3, misses=1)
    assert stats.hit_rate == 0.75 and CacheStats().hit_rate == 0.0
    assert stats.as_dict()["hit_rate"] == 0.75


def test_dump_lists_key_shape_dtype_checksum():
    cache = ReprCache()
    cache.put(page_key("r", 2), np.zeros((2, 3)))
    cache.put(item_key("r", 5), np.ones(4, dtype=np.float32))
    lines = cache.dump().splitlines()
    assert [ln.split("\t")[:3] for ln in lines] == [["item/r/5", "4", "float32"], ["page/r/2", "2x3", "float64"]]
    assert all(len(ln.split("\t")[3]) == 16 for ln in lines)
    assert ReprCache().dump() == ""


def test_bad_settings():
    with pytest.raises(ConfigError):
        ReprCache(ttl=0)
    with pytest.raises(ConfigError):
        ReprCache(capacity=0)
    assert format_key(item_key("x", 3)) == "item/x/3"


def test_concurrent_writers_and_readers():
    cache = ReprCache(capacity=400)
    errors = []

    def work(t):
        try:
            for i in range(200):
                rid = f"t{t}-{i % 20}"
                cache.put(item_key(rid, i), np.full(3, float(i)))
                try:
                    (v,) = cache.get_many([item_key(rid, i)])
                    assert v[0] == float(i)
                except CacheMissError:
                    pass  # evicted by another thread
        except Exception as exc:  # pragma: no cover
            errors.append(exc)

    threads = [threading.Thread(target=work, args=(t,)) for t in range(4)]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    assert not errors
    assert len(cache) <= 400 + 20
    assert cache.stats.stores == 800
