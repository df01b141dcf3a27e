"""Acceptance suite: one test per criterion, each reported as a PASS/FAIL line.

Run on its own with ``pytest tests/test_acceptance.py`` or
``python3 tests/test_acceptance.py``.
"""
import dataclasses
import json
import os
import random
import subprocess
import sys
import threading
import time

import numpy as np
import pytest

from dpufam import metrics
from dpufam import protocol as P
from dpufam.dpu_agent import ProxyAgent, ProxyConfig, aggregate
from dpufam.dpu_cache import CacheModel, CacheTable, required_hit_rate
from dpufam.fabric import Fabric
from dpufam.graphbench import algorithms, csr
from dpufam.host_agent import HostAgent
from dpufam.memory_agent import MemoryAgent
from dpufam.nodes import digest
from dpufam.system import System
from dpufam.tcp import TcpFabric

from oracles import (FlatMemory, adjacency, bfs_levels, brandes_single_source, lru_misses,
                     read_request_bytes, sampled_radii, sparse_pagerank, undirected,
                     union_find_labels, write_request_bytes)

HERE = os.path.dirname(os.path.abspath(__file__))
N, M, SEED = 10_000, 100_000, 7


def criterion(num, title):
    return pytest.mark.criterion(num, title)


@pytest.fixture(scope="module")
def big_graph():
    return csr.uniform_graph(N, M, SEED)


@pytest.fixture(scope="module")
def big_edges(big_graph):
    src, dst = csr.edge_pairs(big_graph)
    return list(zip(src.tolist(), dst.tolist()))


# -- 1 -------------------------------------------------------------------------------------

def check_against_textbook(g, edges, outputs):
    """The in-memory outputs themselves agree with independent oracles."""
    adj = adjacency(g.n, edges)
    und = undirected(g.n, edges)
    _, level = outputs["bfs"]
    assert level.tolist() == bfs_levels(adj, 0)
    assert outputs["cc"].tolist() == union_find_labels(g.n, edges)
    pr = outputs["pagerank"]
    assert np.max(np.abs(pr - np.array(sparse_pagerank(g.n, edges, 0.85, 10)))) < 1e-12
    bc = outputs["bc"]
    assert np.allclose(bc, brandes_single_source(g.n, edges, 0), rtol=1e-9, atol=1e-12)
    k = min(algorithms.RADII_SAMPLES, g.n)
    sources = np.random.default_rng(0).choice(g.n, size=k, replace=False).tolist()
    assert outputs["radii"].tolist() == sampled_radii(und, sources)


@criterion(1, "transparency: 5 algorithms x 4 modes byte-identical to in-memory oracle, < 60 s")
def test_transparency_equivalence(big_graph, big_edges):
    oracle = {name: algorithms.run(name, big_graph, source=0, threads=1)
              for name in algorithms.ALGORITHMS}
    check_against_textbook(big_graph, big_edges, oracle)
    cells = [("direct", "off"), ("offload", "off"), ("offload", "static"),
             ("offload", "dynamic")]
    t0 = time.perf_counter()
    for mode, cache in cells:
        for name in algorithms.ALGORITHMS:
            spec = metrics.ExperimentSpec.from_dict({
                "application": name, "mode": mode, "cache_mode": cache,
                "host": {"buffer_fraction": 1 / 3},
                "proxy": {"entry_bytes": 1 << 18, "cache_bytes": 1 << 20}
                if cache == "dynamic" else {}})
            rep = metrics.run_experiment(spec, big_graph)
            assert rep["output_sha256"] == digest(oracle[name]), (mode, cache, name)
            assert rep["traffic"]["links"]["net"]["bytes_total"] > 0
    elapsed = time.perf_counter() - t0
    print(f"transparency runs took {elapsed:.1f} s")
    assert elapsed < 60


# -- 2 -------------------------------------------------------------------------------------

@criterion(2, "protocol golden bytes and 10^4 random round trips")
def test_protocol_golden_bytes():
    with open(os.path.join(HERE, "fixtures", "protocol_golden.json")) as fh:
        golden = json.load(fh)
    for name, case in golden.items():
        if name.startswith("read"):
            req = P.ReadRequest(*case["fields"])
            assert P.encode_read(req).hex() == case["hex"]
            assert P.decode_read(bytes.fromhex(case["hex"])) == req
            assert len(bytes.fromhex(case["hex"])) == 24
        else:
            rid, off, data = case["fields"]
            data = bytes.fromhex(data)
            req = P.WriteRequest(rid, off, len(data), data)
            assert P.encode_write(req).hex() == case["hex"]
            assert P.decode_write(bytes.fromhex(case["hex"])) == req
            assert len(bytes.fromhex(case["hex"])) == 12 + len(data)
    rng = random.Random(2024)
    for _ in range(10_000):
        if rng.random() < 0.5:
            f = (rng.getrandbits(16), rng.getrandbits(48), rng.getrandbits(64),
                 rng.getrandbits(32), rng.getrandbits(32))
            raw = P.encode_read(P.ReadRequest(*f))
            assert raw == read_request_bytes(*f) and len(raw) == 24
            assert P.decode_read(raw) == P.ReadRequest(*f)
        else:
            data = rng.randbytes(rng.randint(1, 300))
            rid, off = rng.getrandbits(16), rng.getrandbits(48)
            req = P.WriteRequest(rid, off, len(data), data)
            raw = P.encode_write(req)
            assert raw == write_request_bytes(rid, off, data)
            assert len(raw) == 12 + len(data)
            assert P.decode_write(raw) == req


# -- 3 -------------------------------------------------------------------------------------

@criterion(3, "LRU fidelity: ReadRequests over 10^5 accesses equal the LRU oracle's misses")
def test_lru_fidelity():
    cs, cap, nchunks = 256, 64, 160
    rng = random.Random(3)
    # skewed so both hits and misses are common
    seq = [min(int(rng.expovariate(1 / 50)), nchunks - 1) for _ in range(100_000)]
    with System("offload", chunk_size=cs) as s:
        h = s.host("h", buffer_chunks=cap, load_threshold=1.0)
        fh = h.fam_alloc(nchunks * cs)
        for c in seq:
            h.fam_read(fh, c * cs + 3, 16)
        expect = lru_misses(seq, cap)
        assert h.stats.read_requests == expect
        assert s.proxy.stats.reads == expect
        # one request and one response per miss
        assert s.counters.messages(link="intra", tclass="on_demand", client="h") == 2 * expect


# -- 4 -------------------------------------------------------------------------------------

@criterion(4, "read-your-writes with buffer = 1/3 of footprint; flushed memory identical")
@pytest.mark.parametrize("mode", ["direct", "offload"])
def test_read_your_writes_under_eviction(mode):
    cs, nchunks = 1024, 48
    size = cs * nchunks
    rng = random.Random(4)
    with System(mode, chunk_size=cs) as s:
        h = s.host("h", buffer_chunks=nchunks // 3)
        fh = h.fam_alloc(size)
        oracle = FlatMemory(size)
        for _ in range(20_000):
            off = rng.randrange(size)
            n = min(rng.randint(1, 3 * cs), size - off)
            if rng.random() < 0.4:
                data = rng.randbytes(n)
                h.fam_write(fh, off, data)
                oracle.write(off, data)
            else:
                assert h.fam_read(fh, off, n) == oracle.read(off, n)
            assert h.resident() <= nchunks // 3
        assert h.stats.evictions + h.stats.proactive_evictions > 0
        assert h.stats.write_requests > 0
        h.flush()
        assert s.memory.contents(fh.region_id) == bytes(oracle.buf)


# -- 5 -------------------------------------------------------------------------------------

@criterion(5, "cache model: thresholds 1/2 and 1/3, break-even at h = R within 1e-12")
def test_cache_model():
    assert required_hit_rate(1, 2) == 0.5
    assert abs(required_hit_rate(1, 3) - 1 / 3) < 1e-15
    for b_net, b_intra in [(1, 2), (1, 3), (6.3e9, 12.6e9), (25e9, 64e9)]:
        r = required_hit_rate(b_net, b_intra)
        for s in (4096, 65536, 1 << 20):
            m = CacheModel(s, b_net, b_intra, r)
            t = m.baseline_time()
            assert abs(m.expected_fetch_time() - t) <= 1e-12 * t


# -- 6 -------------------------------------------------------------------------------------

@criterion(6, "static cache: vertex-region net bytes = size + overhead; PageRank on-demand net lower")
def test_static_cache_traffic(big_graph):
    reps = {}
    for cache, iters in [("off", 10), ("static", 10), ("static", 3)]:
        spec = metrics.ExperimentSpec.from_dict({
            "application": "pagerank", "mode": "offload", "cache_mode": cache,
            "host": {"buffer_fraction": 1 / 3}, "algorithm": {"iters": iters}})
        reps[(cache, iters)] = metrics.run_experiment(spec, big_graph)
    vb = reps[("static", 10)]["graph"]["vertex_bytes"]
    for key in [("static", 10), ("static", 3)]:
        for role in ("offsets", "rev_offsets"):
            net = reps[key]["region_traffic"][role]["net"]
            assert net["bytes_total"] == vb + 64
            assert net["messages"] == 1
    on = {k: r["traffic"]["links"]["net"]["bytes_on_demand"] for k, r in reps.items()}
    assert on[("static", 10)] < on[("off", 10)]


# -- 7 -------------------------------------------------------------------------------------

def sequential_scan(cache_mode, n_chunks=2048, cs=4096):
    cfg = ProxyConfig(chunk_size=cs, cache_mode=cache_mode, entry_bytes=16 * cs,
                      cache_bytes=64 * 16 * cs, prefetch_degree=2, hit_window=1024)
    with System("offload", proxy=cfg, chunk_size=cs) as s:
        h = s.host("h", buffer_chunks=8)
        fh = h.fam_alloc(n_chunks * cs)
        h.close()
        h = s.host("scan", buffer_chunks=8)
        fh = h.fam_map(fh.region_id)
        s.counters.reset()
        for c in range(n_chunks):
            h.fam_read(fh, c * cs, cs)
        c = s.counters
        out = {"on_demand": c.bytes(link="net", tclass="on_demand"),
               "background": c.bytes(link="net", tclass="background"),
               "total": c.bytes(link="net"),
               "all_total": c.bytes(),
               "all_split": c.bytes(tclass="on_demand") + c.bytes(tclass="background")}
        if s.proxy.dynamic is not None:
            out["window_hit_rate"] = s.proxy.dynamic.monitor.hit_rate
        return out


@criterion(7, "dynamic cache: scan hit > 0.9, on-demand net -50%, exact split; adversarial disables")
def test_dynamic_cache_accounting():
    base = sequential_scan("off")
    dyn = sequential_scan("dynamic")
    assert dyn["window_hit_rate"] > 0.9
    assert dyn["on_demand"] < 0.5 * base["on_demand"]
    for r in (base, dyn):
        assert r["on_demand"] + r["background"] == r["total"]
        assert r["all_split"] == r["all_total"]

    cs, window = 4096, 256
    entry = 4 * cs
    cache_entries = 4
    region = 100 * cache_entries * entry
    cfg = ProxyConfig(chunk_size=cs, cache_mode="dynamic", entry_bytes=entry,
                      cache_bytes=cache_entries * entry, prefetch_degree=1, hit_window=window)
    rng = random.Random(7)
    with System("offload", proxy=cfg, chunk_size=cs) as s:
        h = s.host("h", buffer_chunks=2)
        fh = h.fam_alloc(region)
        for _ in range(3 * window):
            h.fam_read(fh, rng.randrange(region // cs) * cs, 8)
        ctrl = s.proxy.dynamic.controller
        assert not ctrl.enabled
        at, on = ctrl.transitions[0]
        assert on is False and at <= 2 * window


# -- 8 -------------------------------------------------------------------------------------

@criterion(8, "pin safety: 8 workers, 10^6 lookup/release ops with forced evictions, no corruption")
def test_pin_safety_stress():
    entry, slots, keys = 64, 16, 64
    table = CacheTable(slots * entry, entry, seed=8)

    def pattern(key):
        return (key * 0x9E3779B97F4A7C15 & (2 ** 64 - 1)).to_bytes(8, "little") * (entry // 8)

    ops_per_worker = 1_000_000 // 8
    bad = []
    counts = [0] * 8

    def worker(w):
        rng = random.Random(w)
        done = 0
        while done < ops_per_worker:
            key = rng.randrange(keys)
            idx = table.lookup(key)
            if idx is not None:
                first = bytes(table.view(idx))
                if first != pattern(key):
                    bad.append(("pin", key))
                # data must stay put for as long as the pin is held
                if bytes(table.view(idx)) != first:
                    bad.append(("moved", key))
                table.release(idx)
            else:
                got = table.reserve(key)
                if got is not None:
                    slot, gen, view = got
                    view[:entry] = pattern(key)
                    table.install(slot, key, gen, entry)
            if done % 16 == 0:
                table.evict_random()
            done += 1
        counts[w] = done

    ts = [threading.Thread(target=worker, args=(w,)) for w in range(8)]
    for t in ts:
        t.start()
    for t in ts:
        t.join()
    assert sum(counts) == 1_000_000
    assert bad == []
    assert table.pinned() == 0
    assert table.evictions > 0


# -- 9 -------------------------------------------------------------------------------------

def batched_net_bytes(aggregation, n=16, cs=1024):
    fab = Fabric()
    mem = MemoryAgent(fab, "mem0", chunk_size=cs).start()
    try:
        proxy = ProxyAgent(fab, ProxyConfig(chunk_size=cs, aggregation=aggregation,
                                            pipeline=False))
        fab.create_endpoint("c", "host")
        ack = proxy._control("c", P.AllocRegion(n * cs, "c", True))
        fab.counters.reset()
        for i in range(n):
            req = P.ReadRequest(ack.region_id, i, i, cs, 0)
            fab.send("c", "dpu0", P.encode_read(req), P.Imm.READ, client="c")
        while proxy.stats.reads < n:
            proxy.process_batch(aggregate(proxy.endpoint, n, aggregation, timeout=1))
        return fab.counters.bytes(link="net"), proxy.stats.batches
    finally:
        mem.stop()
        fab.close()


@criterion(9, "batching: 16 simultaneous requests save exactly 15 x per-op overhead")
def test_batching_overhead():
    on, batches_on = batched_net_bytes(True)
    off, batches_off = batched_net_bytes(False)
    assert (batches_on, batches_off) == (1, 16)
    assert off - on == 15 * 64


# -- 10 ------------------------------------------------------------------------------------

class Node:
    def __init__(self, *args):
        env = dict(os.environ)
        self.proc = subprocess.Popen([sys.executable, "-m", "dpufam.nodes", *args],
                                     stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True,
                                     env=env)
        line = self.proc.stdout.readline()
        if not line:
            raise RuntimeError(self.proc.stderr.read())
        self.address = json.loads(line)["address"]

    def stop(self):
        self.proc.terminate()
        try:
            self.proc.wait(10)
        except subprocess.TimeoutExpired:
            self.proc.kill()


@criterion(10, "multi-process: two host processes through one proxy, isolated, counters add up")
def test_multi_process_multiplexing():
    g = csr.uniform_graph(2000, 16000, 10)
    mem = Node("memory")
    proxy = None
    loader_fab = None
    try:
        proxy = Node("proxy", "--memory-address", mem.address)
        loader_fab = TcpFabric()
        loader_fab.connect(proxy.address)
        loader_fab.connect(mem.address)
        loader_fab.wait_for("dpu0")
        loader = HostAgent(loader_fab, "loader", mode="offload", buffer_chunks=64)
        _, layout = csr.to_fam(g, loader)
        layout_json = json.dumps(dataclasses.asdict(layout))

        apps = {"hostA": "pagerank", "hostB": "bfs"}
        procs = {}
        for hid, app in apps.items():
            procs[hid] = subprocess.Popen(
                [sys.executable, "-m", "dpufam.nodes", "host", "--connect", proxy.address,
                 "--id", hid, "--layout", layout_json, "--app", app, "--buffer-chunks", "8",
                 "--repeat", "3"],
                stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True)
        results = {}
        for hid, p in procs.items():
            out, err = p.communicate(timeout=300)
            assert p.returncode == 0, err
            results[hid] = json.loads(out)

        # response isolation: each process got exactly its own answers
        for hid, app in apps.items():
            want = digest(algorithms.run(app, g, source=0, threads=1))
            assert results[hid]["digests"] == [want] * 3
            recs = results[hid]["counters"]
            assert {r["client"] for r in recs} == {hid}

        from dpufam.counters import TrafficCounters
        total = loader_fab.collect_counters()
        for hid in apps:
            total.merge(TrafficCounters.from_records(results[hid]["counters"]))
        proxy_side = loader_fab.peer_counters()
        for hid in apps:
            reqs = results[hid]["stats"]["read_requests"]
            mine = TrafficCounters.from_records(results[hid]["counters"])
            assert mine.messages(link="intra", tclass="on_demand") == reqs
            # the proxy answered each request once, to the right client
            answered = sum(c.messages(link="intra", tclass="on_demand", client=hid)
                           for c in proxy_side)
            assert answered == reqs
        for link in ("intra", "net"):
            for tclass in ("on_demand", "background"):
                assert total.bytes(link, tclass) == sum(
                    total.bytes(link, tclass, client=c) for c in total.clients())
        assert total.bytes() == sum(total.bytes(client=c) for c in total.clients())
        assert {"hostA", "hostB"} <= set(total.clients())
        loader.close()
    finally:
        if loader_fab is not None:
            loader_fab.close()
        if proxy is not None:
            proxy.stop()
        mem.stop()


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
