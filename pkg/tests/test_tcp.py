import json
import subprocess
import sys

import numpy as np
import pytest

from dpufam.counters import TrafficCounters
from dpufam.dpu_agent import ProxyAgent, ProxyConfig
from dpufam.errors import CoherenceError, ProtectionFault
from dpufam.graphbench import algorithms, csr
from dpufam.host_agent import HostAgent
from dpufam.memory_agent import MemoryAgent
from dpufam.nodes import digest
from dpufam.tcp import TcpFabric, _pack_str, _unpack_str, parse_address

CS = 4096


def test_parse_address():
    assert parse_address("127.0.0.1:80") == ("127.0.0.1", 80)
    for bad in ("nope", ":80", "host:", "h:x"):
        with pytest.raises(ValueError):
            parse_address(bad)


@pytest.mark.parametrize("s", [None, "", "host0", "ü" * 10])
def test_id_prefix_round_trip(s):
    buf = _pack_str(s) + b"rest"
    got, pos = _unpack_str(buf, 0)
    assert got == s and buf[pos:] == b"rest"


class Chain:
    """memory <-> proxy <-> hosts, each with its own TcpFabric."""

    def __init__(self, cache_mode="off"):
        self.mf = TcpFabric(listen="127.0.0.1:0")
        self.mem = MemoryAgent(self.mf, "mem0", chunk_size=CS).start()
        self.pf = TcpFabric(listen="127.0.0.1:0")
        self.pf.connect(self.mf.address)
        self.pf.wait_for("mem0")
        self.proxy = ProxyAgent(self.pf, ProxyConfig(chunk_size=CS, cache_mode=cache_mode)).start()
        self.hosts = []

    def host(self, name, mode="offload", **kw):
        f = TcpFabric()
        f.connect(self.pf.address if mode == "offload" else self.mf.address)
        f.wait_for("dpu0" if mode == "offload" else "mem0")
        h = HostAgent(f, name, mode=mode, chunk_size=CS, **kw)
        self.hosts.append((h, f))
        return h, f

    def close(self):
        for h, f in self.hosts:
            h.close()
            f.close()
        self.proxy.stop()
        self.pf.close()
        self.mem.stop()
        self.mf.close()


@pytest.fixture
def chain():
    c = Chain(cache_mode="static")
    yield c
    c.close()


def test_write_flush_read_over_sockets(chain):
    h, _ = chain.host("h1")
    fh = h.fam_alloc(10 * CS)
    data = bytes(range(256)) * 40
    h.fam_write(fh, 100, data)
    h.flush()
    assert chain.mem.contents(fh.region_id)[100:100 + len(data)] == data
    h.evict(h.resident())
    h.wait_writebacks()
    assert h.fam_read(fh, 100, len(data)) == data
    assert h.stats.read_requests > 0


def test_errors_cross_the_wire(chain):
    h, _ = chain.host("h1")
    g, _ = chain.host("h2")
    fh = h.fam_alloc(2 * CS)
    with pytest.raises(CoherenceError):
        g.fam_map(fh.region_id, writable=True)
    with pytest.raises(ProtectionFault):
        h.fam_read(fh, 2 * CS, 1)


def test_static_load_and_counter_merge(chain):
    h, hf = chain.host("h1")
    fh = h.fam_alloc(8 * CS)
    h.fam_write(fh, 0, b"s" * 8 * CS)
    h.flush()
    h.evict(h.resident())
    h.wait_writebacks()
    h.static_load(fh)
    assert h.fam_read(fh, 5 * CS, 3) == b"sss"
    assert chain.proxy.stats.static_hits >= 1
    merged = hf.collect_counters()
    parts = [hf.counters] + hf.peer_counters()
    total = TrafficCounters()
    for p in parts:
        total.merge(p)
    assert merged.bytes() == total.bytes() > 0
    # the proxy's process charged the memory-side traffic
    assert chain.pf.counters.bytes(link="net") > 0
    assert hf.counters.bytes(link="net") == 0


def test_direct_mode_over_tcp(chain):
    h, hf = chain.host("d1", mode="direct")
    fh = h.fam_alloc(4 * CS)
    h.fam_write(fh, 0, b"direct")
    h.flush()
    h.evict(h.resident())
    assert h.fam_read(fh, 0, 6) == b"direct"
    assert hf.counters.bytes(link="net") > 0
    assert hf.counters.bytes(link="intra") == 0


def test_graph_over_tcp_matches_in_memory(chain):
    g = csr.uniform_graph(300, 1500, 4)
    h, _ = chain.host("loader", buffer_chunks=8)
    fg, _ = csr.to_fam(g, h)
    for name in algorithms.ALGORITHMS:
        a = algorithms.run(name, fg, source=1, threads=2, block=64)
        b = algorithms.run(name, g, source=1, threads=1)
        assert digest(a) == digest(b)


def test_nodes_usage_error():
    r = subprocess.run([sys.executable, "-m", "dpufam.nodes"], capture_output=True, text=True)
    assert r.returncode == 2 and "usage" in r.stderr
