"""Standalone processes over the TCP fabric.

``dpufam-memory`` runs a memory agent, ``dpufam-proxy`` runs a proxy that
dials the memory agent, and ``python -m dpufam.nodes host`` runs one graph
application against a graph already stored in FAM and prints a JSON
result on stdout.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import signal
import sys
import threading
import time

from .dpu_agent import CACHE_MODES, ProxyConfig, ProxyAgent
from .memory_agent import DEFAULT_CAPACITY, MemoryAgent
from .tcp import TcpFabric

log = logging.getLogger(__name__)


def _setup_logging():
    from .cli import configure_logging
    configure_logging()


def _wait_forever(stop: threading.Event):
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    while not stop.wait(0.2):
        pass


def _announce(fabric: TcpFabric, what: str):
    # one machine-readable line so a parent process can learn the port
    print(json.dumps({"role": what, "address": fabric.address}), flush=True)


def memory_main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="dpufam-memory", description="Run a memory agent.")
    ap.add_argument("--listen", default="127.0.0.1:0", help="host:port to accept peers on")
    ap.add_argument("--capacity", type=int, default=DEFAULT_CAPACITY, help="bytes")
    ap.add_argument("--data-dir", default=None, help="directory for file-backed regions")
    ap.add_argument("--id", default="mem0", help="endpoint id")
    args = ap.parse_args(argv)
    _setup_logging()
    fabric = TcpFabric(listen=args.listen)
    agent = MemoryAgent(fabric, args.id, capacity=args.capacity, data_dir=args.data_dir).start()
    _announce(fabric, "memory")
    stop = threading.Event()
    try:
        _wait_forever(stop)
    finally:
        agent.stop()
        fabric.close()
    return 0


def proxy_main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="dpufam-proxy", description="Run a proxy (DPU) agent.")
    ap.add_argument("--listen", default="127.0.0.1:0", help="host-side host:port")
    ap.add_argument("--memory-address", required=True, help="memory agent host:port")
    ap.add_argument("--memory-id", default="mem0")
    ap.add_argument("--cache-mode", default="off", choices=CACHE_MODES)
    ap.add_argument("--dpu-memory", type=int, default=ProxyConfig.dpu_memory, help="bytes")
    ap.add_argument("--no-aggregation", action="store_true")
    args = ap.parse_args(argv)
    _setup_logging()
    fabric = TcpFabric(listen=args.listen)
    fabric.connect(args.memory_address)
    fabric.wait_for(args.memory_id)
    cfg = ProxyConfig(memory=args.memory_id, cache_mode=args.cache_mode,
                      dpu_memory=args.dpu_memory, aggregation=not args.no_aggregation)
    proxy = ProxyAgent(fabric, cfg).start()
    _announce(fabric, "proxy")
    stop = threading.Event()
    try:
        _wait_forever(stop)
    finally:
        proxy.stop()
        fabric.close()
    return 0


def digest(output) -> str:
    """Stable hash of an algorithm output (array or tuple of arrays)."""
    h = hashlib.sha256()
    for a in output if isinstance(output, tuple) else (output,):
        h.update(a.dtype.str.encode())
        h.update(a.tobytes())
    return h.hexdigest()


def host_main(argv=None) -> int:
    from .graphbench import algorithms, csr
    from .host_agent import HostAgent

    ap = argparse.ArgumentParser(prog="dpufam-host",
                                 description="Run one graph application on a FAM graph.")
    ap.add_argument("--connect", required=True, help="proxy (offload) or memory (direct) host:port")
    ap.add_argument("--id", required=True, help="endpoint id of this host")
    ap.add_argument("--mode", default="offload", choices=("offload", "direct"))
    ap.add_argument("--layout", required=True, help="JSON graph layout from the loader")
    ap.add_argument("--app", default="bfs", choices=sorted(algorithms.ALGORITHMS))
    ap.add_argument("--source", type=int, default=0)
    ap.add_argument("--buffer-chunks", type=int, default=1024)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--repeat", type=int, default=1, help="run the application this many times")
    args = ap.parse_args(argv)
    _setup_logging()
    layout = csr.FamGraphLayout(**json.loads(args.layout))
    fabric = TcpFabric()
    fabric.connect(args.connect)
    host = HostAgent(fabric, args.id, mode=args.mode, buffer_chunks=args.buffer_chunks)
    g = csr.map_fam(layout, host)
    t0 = time.perf_counter()
    digests = []
    for _ in range(args.repeat):
        out = algorithms.run(args.app, g, source=args.source, threads=args.threads)
        digests.append(digest(out))
    wall = time.perf_counter() - t0
    host.close()
    result = {"id": args.id, "app": args.app, "digests": digests, "wall_time_s": wall,
              "stats": vars(host.stats), "counters": fabric.counters.to_records()}
    fabric.close()
    json.dump(result, sys.stdout)
    sys.stdout.write("\n")
    return 0


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    roles = {"memory": memory_main, "proxy": proxy_main, "host": host_main}
    if not argv or argv[0] not in roles:
        print(f"usage: python -m dpufam.nodes {{{','.join(roles)}}} [options]", file=sys.stderr)
        return 2
    return roles[argv[0]](argv[1:])


if __name__ == "__main__":
    sys.exit(main())
