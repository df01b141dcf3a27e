import random
import threading
from fractions import Fraction

import pytest
from hypothesis import given, strategies as st

from dpufam.dpu_agent import ProxyConfig
from dpufam.dpu_cache import (AdaptiveController, CacheModel, CacheTable, DynamicCache,
                              HitRateMonitor, RecentList, StaticCache, adaptive_decision,
                              baseline_fetch_time, expected_fetch_time, required_hit_rate)
from dpufam.errors import AllocationError, ConfigError, FamError
from dpufam.system import System

from oracles import model_times

CS = 1024


# -- model -----------------------------------------------------------------------------

def test_required_hit_rate_examples():
    assert required_hit_rate(1, 2) == 0.5
    assert required_hit_rate(1, 3) == pytest.approx(1 / 3)
    assert required_hit_rate(5, 5) == 1.0
    for bad in [(0, 1), (1, 0), (-1, 1)]:
        with pytest.raises(ValueError):
            required_hit_rate(*bad)


def test_break_even_at_required_rate():
    r = required_hit_rate(1e9, 2e9)
    m = CacheModel(65536, 1e9, 2e9, r)
    assert abs(expected_fetch_time(m) - baseline_fetch_time(65536, 1e9)) < 1e-12
    assert not m.beneficial()


def test_model_extremes():
    s, bn, bi = 65536, 1e9, 4e9
    assert CacheModel(s, bn, bi, 0).expected_fetch_time() == pytest.approx(s / bi + s / bn)
    assert CacheModel(s, bn, bi, 1).expected_fetch_time() == pytest.approx(s / bi)
    with pytest.raises(ValueError):
        CacheModel(s, bn, bi, 1.5)


@given(s=st.integers(1, 1 << 24), bn=st.integers(1, 10 ** 10), bi=st.integers(1, 10 ** 10),
       h=st.fractions(0, 1))
def test_model_matches_rational_oracle(s, bn, bi, h):
    base, exp = model_times(s, bn, bi, h)
    m = CacheModel(s, bn, bi, float(h))
    assert m.baseline_time() == pytest.approx(float(base), rel=1e-9)
    assert m.expected_fetch_time() == pytest.approx(float(exp), rel=1e-9)
    # caching pays off exactly above the required rate
    if bn < bi:
        assert (exp < base) == (h > Fraction(bn, bi))


# -- adaptive control ----------------------------------------------------------------------

def test_decision_examples():
    assert adaptive_decision(0.56, 0.5, 0.05, True) is True
    assert adaptive_decision(0.3, 0.5, 0.05, True) is False
    assert adaptive_decision(0.52, 0.5, 0.05, False) is False
    assert adaptive_decision(0.6, 0.5, 0.05, False) is True


def feed(ctrl, mon, pattern, n):
    for i in range(n):
        mon.record(pattern(i))
        ctrl.update(mon, i)


def test_controller_no_flapping_inside_band():
    mon, ctrl = HitRateMonitor(100), AdaptiveController(0.5, 0.05)
    # windowed rate drifts between 0.46 and 0.54, never leaving the band
    feed(ctrl, mon, lambda i: i % 100 < (54 if (i // 500) % 2 else 46), 3000)
    assert ctrl.transitions == []


def test_controller_disables_then_reenables():
    mon, ctrl = HitRateMonitor(50), AdaptiveController(0.5, 0.05)
    feed(ctrl, mon, lambda i: i % 10 < 3, 200)
    assert not ctrl.enabled
    feed(ctrl, mon, lambda i: True, 200)
    assert ctrl.enabled
    assert [on for _, on in ctrl.transitions] == [False, True]


def test_monitor_window():
    mon = HitRateMonitor(4)
    for hit in (1, 1, 0, 0, 0, 0):
        mon.record(bool(hit))
    assert mon.full and mon.hit_rate == 0.0
    with pytest.raises(ConfigError):
        HitRateMonitor(0)


# -- data structures -------------------------------------------------------------------------

@given(st.integers(0, 400))
def test_recent_list_holds_last_pushes(n):
    rl = RecentList()
    for i in range(n):
        rl.push(i)
    assert rl.items() == list(range(max(0, n - 128), n))


def test_recent_list_since():
    rl = RecentList(8)
    for i in range(5):
        rl.push(i)
    items, seen = rl.since(2)
    assert items == [2, 3, 4] and seen == 5
    for i in range(5, 30):
        rl.push(i)
    items, _ = rl.since(seen)
    assert items == list(range(22, 30))  # older ones were overwritten


def test_cache_table_pins_block_eviction():
    t = CacheTable(2 * 64, 64, seed=3)
    for k in ("a", "b"):
        idx, gen, view = t.reserve(k)
        view[:1] = b"x"
        assert t.install(idx, k, gen, 64)
    ia = t.lookup("a")
    ib = t.lookup("b")
    assert t.reserve("c") is None       # everything pinned
    t.release(ib)
    idx, gen, _ = t.reserve("c")        # b is the only candidate
    t.install(idx, "c", gen, 64)
    assert t.contains("a") and not t.contains("b")
    t.release(ia)
    with pytest.raises(RuntimeError):
        t.release(ia)


def test_cache_table_invalidate_races_fill():
    t = CacheTable(4 * 64, 64)
    idx, gen, _ = t.reserve("k")
    t.invalidate("k")                   # a write lands while the fill is in flight
    assert not t.install(idx, "k", gen, 64)
    assert not t.contains("k")


def test_static_cache_budget():
    sc = StaticCache(100)
    sc.reserve(60)
    with pytest.raises(AllocationError):
        sc.reserve(41)
    assert sc.used == 60


# -- dynamic cache, driven synchronously ---------------------------------------------------------

def make_cache(region_chunks, cache_groups, group_chunks=8, **kw):
    backing = bytes(random.Random(0).randbytes(region_chunks * CS))
    fetched = []

    def fetch(rid, off, into):
        n = min(len(into), len(backing) - off)
        if n <= 0:
            return 0
        into[:n] = backing[off:off + n]
        fetched.append(n)
        return n

    entry = group_chunks * CS
    dc = DynamicCache(fetch, cache_bytes=cache_groups * entry, entry_bytes=entry,
                      chunk_size=CS, **kw)
    return dc, backing, fetched


def access(dc, backing, chunk):
    got = dc.lookup(1, chunk, CS)
    if got is not None:
        idx, view = got
        assert bytes(view) == backing[chunk * CS:(chunk + 1) * CS]
        dc.release(idx)
    dc.process_pending()
    return got is not None


def test_sequential_scan_hit_rate():
    dc, backing, _ = make_cache(2000, 8, prefetch_degree=1)
    hits = sum(access(dc, backing, c) for c in range(2000))
    assert hits / 2000 > 0.9
    assert dc.enabled


def test_uniform_random_hit_rate_tracks_capacity():
    groups, slots = 40, 10
    dc, backing, _ = make_cache(groups * 8, slots, prefetch_degree=0, adaptive=False)
    rng = random.Random(2)
    for _ in range(2000):  # warm up
        access(dc, backing, rng.randrange(groups * 8))
    n = 20000
    hits = sum(access(dc, backing, rng.randrange(groups * 8)) for _ in range(n))
    assert abs(hits / n - slots / groups) < 0.03


def test_prefetch_degree_zero_fetches_only_demanded_group():
    dc, backing, fetched = make_cache(64, 8, prefetch_degree=0)
    access(dc, backing, 0)
    assert len(fetched) == 1
    assert not dc.table.contains((1, 1))
    with pytest.raises(ConfigError):
        make_cache(8, 1, prefetch_degree=-1)


def test_adversarial_workload_disables_within_two_windows():
    window = 256
    dc, backing, fetched = make_cache(100 * 4 * 8, 4, prefetch_degree=1, hit_window=window,
                                      required=0.5)
    rng = random.Random(3)
    for i in range(4 * window):
        access(dc, backing, rng.randrange(100 * 4 * 8))
    assert not dc.enabled
    at, on = dc.controller.transitions[0]
    assert on is False and at <= 2 * window
    before = len(fetched)
    for _ in range(100):
        access(dc, backing, rng.randrange(100 * 4 * 8))
    assert len(fetched) == before  # no more prefetching, lookups still counted
    assert dc.stats.hits + dc.stats.misses == 4 * window + 100


def test_late_hit_waits_for_inflight_fill():
    gate = threading.Event()
    backing = bytes(range(256)) * 32

    def fetch(rid, off, into):
        gate.wait(5)
        into[:len(into)] = backing[off:off + len(into)]
        return len(into)

    dc = DynamicCache(fetch, cache_bytes=8 * CS, entry_bytes=8 * CS, chunk_size=CS,
                      prefetch_degree=0)
    t = threading.Thread(target=dc.fill, args=(1, 0))
    t.start()
    while dc.table.fill_event((1, 0)) is None:
        pass
    threading.Timer(0.05, gate.set).start()
    got = dc.lookup(1, 3, CS)
    t.join()
    assert got is not None and bytes(got[1]) == backing[3 * CS:4 * CS]
    assert dc.stats.late_hits == 1


def test_pin_stress_checksums():
    dc, backing, _ = make_cache(64 * 8, 4, prefetch_degree=1, adaptive=False)
    dc.start()
    errors = []

    def worker(seed):
        rng = random.Random(seed)
        for _ in range(3000):
            c = rng.randrange(64 * 8)
            got = dc.lookup(1, c, CS)
            if got is not None:
                idx, view = got
                if bytes(view) != backing[c * CS:(c + 1) * CS]:
                    errors.append(c)
                dc.release(idx)
            if rng.random() < 0.05:
                dc.table.evict_random()

    ts = [threading.Thread(target=worker, args=(i,)) for i in range(8)]
    for t in ts:
        t.start()
    for t in ts:
        t.join()
    dc.stop()
    assert errors == []
    assert dc.table.pinned() == 0


# -- through the proxy -----------------------------------------------------------------------------

def test_static_reads_cost_one_net_transfer():
    n = 8
    cfg = ProxyConfig(chunk_size=CS, cache_mode="static")
    with System("offload", proxy=cfg, chunk_size=CS) as s:
        h = s.host("h", buffer_chunks=64)
        fh = h.fam_alloc(n * CS)
        h.fam_write(fh, 0, bytes(range(256)) * (n * CS // 256))
        h.flush()
        h.evict(h.resident())
        h.wait_writebacks()
        s.counters.reset()
        h.static_load(fh)
        for c in range(n):
            h.fam_read(fh, c * CS, CS)
        c = s.counters
        assert c.messages(link="net") == 1
        assert c.bytes(link="net") == n * CS + 64
        assert c.messages(link="intra", tclass="on_demand") == 2 * n
        assert c.payload(link="intra", tclass="on_demand") == n * 24 + n * (8 + CS)
        assert s.proxy.stats.static_hits == n
        # writes go through to the pinned copy and to memory
        h.fam_write(fh, 0, b"w" * CS)
        h.evict(h.resident())
        h.wait_writebacks()
        assert h.fam_read(fh, 0, 4) == b"wwww"
        assert s.memory.contents(fh.region_id)[:4] == b"wwww"


def test_static_over_budget_pins_nothing():
    cfg = ProxyConfig(chunk_size=CS, cache_mode="static", dpu_memory=4 * CS)
    with System("offload", proxy=cfg, chunk_size=CS) as s:
        h = s.host("h")
        fh = h.fam_alloc(8 * CS)
        s.counters.reset()
        with pytest.raises(FamError):
            h.static_load(fh)
        assert s.proxy.static_cache.used == 0
        assert s.proxy.static_cache.regions == {}
        assert s.counters.bytes(link="net") == 0


def test_static_needs_offload_and_static_mode():
    with System("direct", chunk_size=CS) as s:
        h = s.host("h")
        with pytest.raises(ConfigError):
            h.static_load(h.fam_alloc(CS))
    with System("offload", chunk_size=CS) as s:
        h = s.host("h")
        with pytest.raises(FamError):
            h.static_load(h.fam_alloc(CS))


def test_dynamic_cache_through_proxy_sequential():
    cfg = ProxyConfig(chunk_size=CS, cache_mode="dynamic", entry_bytes=16 * CS,
                      cache_bytes=64 * CS, prefetch_degree=2)
    with System("offload", proxy=cfg, chunk_size=CS) as s:
        h = s.host("h", buffer_chunks=4)
        fh = h.fam_alloc(512 * CS)
        pattern = bytes(random.Random(9).randbytes(512 * CS))
        h.fam_write(fh, 0, pattern)
        h.flush()
        h.evict(h.resident())
        h.wait_writebacks()
        for c in range(512):
            assert h.fam_read(fh, c * CS, CS) == pattern[c * CS:(c + 1) * CS]
        st_ = s.proxy.dynamic.stats
        assert st_.hits / (st_.hits + st_.misses) > 0.9
        c = s.counters
        assert c.bytes() == c.bytes(tclass="on_demand") + c.bytes(tclass="background")
