"""Experiment specs, the experiment driver, reports and report comparison."""
from __future__ import annotations

import copy
import csv
import dataclasses
import io
import json
import threading
import time
from dataclasses import dataclass, field
from importlib import resources
from typing import Any, Optional

import jsonschema

from .counters import BACKGROUND, ON_DEMAND, TrafficCounters
from .dpu_agent import CACHE_MODES, ProxyConfig
from .errors import ConfigError
from .fabric import DEFAULT_INTRA, DEFAULT_NET, LinkProfile
from .graphbench import algorithms, csr
from .host_agent import MODES
from .nodes import digest
from .system import System

SCHEMA_VERSION = 1
APP_CLIENT = "app"
BG_CLIENT = "bg"


@dataclass
class GraphSpec:
    generator: str = "uniform"   # uniform | rmat | file
    n: int = 10_000
    m: int = 100_000
    seed: int = 1
    path: Optional[str] = None   # edge list or binary CSR when generator == "file"


@dataclass
class ExperimentSpec:
    """Everything needed to reproduce one run.

    ``host``, ``proxy``, ``fabric`` and ``algorithm`` hold overrides for
    the respective components; unknown keys are rejected.
    """
    application: str = "pagerank"
    graph: GraphSpec = field(default_factory=GraphSpec)
    mode: str = "offload"
    cache_mode: str = "off"
    static_vertices: bool = True
    corun: Optional[str] = None
    repetitions: int = 1
    host: dict = field(default_factory=dict)
    proxy: dict = field(default_factory=dict)
    fabric: dict = field(default_factory=dict)
    algorithm: dict = field(default_factory=dict)

    HOST_KEYS = ("buffer_chunks", "buffer_fraction", "chunk_size", "load_threshold",
                 "low_water", "qp_count", "window_chunks", "static_bypass")
    FABRIC_KEYS = ("intra_bandwidth", "intra_latency", "net_bandwidth", "net_latency",
                   "header_bytes", "max_message")
    ALGO_KEYS = ("source", "iters", "damping", "samples", "seed", "threads", "block", "backend")

    def validate(self) -> "ExperimentSpec":
        if self.application not in algorithms.ALGORITHMS:
            raise ConfigError(f"application must be one of {sorted(algorithms.ALGORITHMS)}")
        if self.corun is not None and self.corun not in algorithms.ALGORITHMS:
            raise ConfigError(f"corun must be one of {sorted(algorithms.ALGORITHMS)}")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.cache_mode not in CACHE_MODES:
            raise ConfigError(f"cache_mode must be one of {CACHE_MODES}")
        if self.mode == "direct" and self.cache_mode != "off":
            raise ConfigError("proxy caches need mode=offload")
        if self.corun is not None and self.mode != "offload":
            raise ConfigError("co-runs share a proxy and need mode=offload")
        if self.repetitions < 1:
            raise ConfigError("repetitions must be >= 1")
        if self.graph.generator not in ("uniform", "rmat", "file"):
            raise ConfigError("graph.generator must be uniform, rmat or file")
        if self.graph.generator == "file" and not self.graph.path:
            raise ConfigError("graph.path is required for generator=file")
        for name, allowed in (("host", self.HOST_KEYS), ("fabric", self.FABRIC_KEYS),
                              ("algorithm", self.ALGO_KEYS)):
            bad = set(getattr(self, name)) - set(allowed)
            if bad:
                raise ConfigError(f"unknown {name} keys: {sorted(bad)}")
        proxy_fields = {f.name for f in dataclasses.fields(ProxyConfig)}
        bad = set(self.proxy) - proxy_fields
        if bad:
            raise ConfigError(f"unknown proxy keys: {sorted(bad)}")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        d = copy.deepcopy(d)
        known = {f.name for f in dataclasses.fields(cls)}
        bad = set(d) - known
        if bad:
            raise ConfigError(f"unknown spec keys: {sorted(bad)}")
        g = d.pop("graph", {}) or {}
        gknown = {f.name for f in dataclasses.fields(GraphSpec)}
        if set(g) - gknown:
            raise ConfigError(f"unknown graph keys: {sorted(set(g) - gknown)}")
        try:
            spec = cls(graph=GraphSpec(**g), **d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        return spec.validate()


def apply_overrides(d: dict, assignments: list[str]) -> dict:
    """Apply ``dotted.key=value`` overrides; values are parsed as YAML scalars."""
    import yaml
    d = copy.deepcopy(d)
    for item in assignments:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        parts = key.split(".")
        cur = d
        for p in parts[:-1]:
            nxt = cur.setdefault(p, {})
            if not isinstance(nxt, dict):
                raise ConfigError(f"{key}: {p} is not a section")
            cur = nxt
        cur[parts[-1]] = yaml.safe_load(raw)
    return d


def load_spec_file(path: str) -> dict:
    import yaml
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    if path.endswith(".json"):
        data = json.loads(text)
    else:
        data = yaml.safe_load(text)
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a mapping")
    return data


# -- running ----------------------------------------------------------------------------

def build_graph(gs: GraphSpec) -> csr.CsrGraph:
    if gs.generator == "file":
        with open(gs.path, "rb") as fh:
            magic = fh.read(len(csr.MAGIC))
        if magic == csr.MAGIC:
            return csr.load_binary(gs.path)
        return csr.load_edge_list(gs.path)
    return csr.generate(gs.generator, gs.n, gs.m, gs.seed)


def _links(fab: dict) -> tuple[LinkProfile, LinkProfile]:
    intra = LinkProfile("intra", fab.get("intra_bandwidth", DEFAULT_INTRA.bandwidth_bytes_per_sec),
                        fab.get("intra_latency", DEFAULT_INTRA.latency_sec))
    net = LinkProfile("net", fab.get("net_bandwidth", DEFAULT_NET.bandwidth_bytes_per_sec),
                      fab.get("net_latency", DEFAULT_NET.latency_sec))
    return intra, net


def _algo_kwargs(name: str, opts: dict) -> dict:
    kw = {"threads": opts.get("threads", 1)}
    for k in ("block", "backend"):
        if k in opts:
            kw[k] = opts[k]
    if name in ("bfs", "bc"):
        kw["source"] = opts.get("source", 0)
    if name == "pagerank":
        kw["iters"] = opts.get("iters", 10)
        kw["damping"] = opts.get("damping", 0.85)
    if name == "radii":
        kw["samples"] = opts.get("samples", algorithms.RADII_SAMPLES)
        kw["seed"] = opts.get("seed", 0)
    return kw


def _host_kwargs(opts: dict, footprint: int, chunk_size: int) -> dict:
    kw = {k: v for k, v in opts.items() if k not in ("buffer_fraction", "chunk_size")}
    if "buffer_fraction" in opts:
        chunks = -(-footprint // chunk_size)
        kw["buffer_chunks"] = max(1, int(chunks * opts["buffer_fraction"]))
    return kw


def _traffic_by_region(counters: TrafficCounters, roles: dict) -> dict:
    out = {}
    for role, rid in roles.items():
        if rid is None:
            continue
        out[role] = {link: {"bytes_on_demand": counters.bytes(link, ON_DEMAND, region=rid),
                            "bytes_background": counters.bytes(link, BACKGROUND, region=rid),
                            "bytes_total": counters.bytes(link, region=rid),
                            "messages": counters.messages(link, region=rid)}
                     for link in ("intra", "net")}
    return out


def _cache_report(system: System) -> Optional[dict]:
    proxy = system.proxy
    if proxy is None:
        return None
    out: dict[str, Any] = {"static_bytes": proxy.static_cache.used}
    dyn = proxy.dynamic
    if dyn is None:
        out["dynamic"] = None
    else:
        s = dyn.stats
        lookups = s.hits + s.late_hits + s.misses
        out["dynamic"] = {
            "hits": s.hits + s.late_hits, "late_hits": s.late_hits, "misses": s.misses,
            "prefetch_fills": s.prefetch_fills, "prefetch_bytes": s.prefetch_bytes,
            "hit_rate": (s.hits + s.late_hits) / lookups if lookups else 0.0,
            "window_hit_rate": dyn.monitor.hit_rate,
            "enabled": dyn.enabled,
            "transitions": [list(t) for t in dyn.controller.transitions],
        }
    return out


def _run_once(spec: ExperimentSpec, graph: csr.CsrGraph) -> dict:
    intra, net = _links(spec.fabric)
    fab_kw = {k: spec.fabric[k] for k in ("header_bytes", "max_message") if k in spec.fabric}
    chunk_size = spec.host.get("chunk_size", 64 * 1024)
    proxy_cfg = ProxyConfig(**{**spec.proxy, "cache_mode": spec.cache_mode,
                               "chunk_size": chunk_size})
    footprint = 8 * (2 * (graph.n + 1) + 2 * graph.m)
    host_kw = _host_kwargs(spec.host, footprint, chunk_size)
    with System(spec.mode, proxy=proxy_cfg, intra=intra, net=net, chunk_size=chunk_size,
                **fab_kw) as system:
        app = system.host(APP_CLIENT, **host_kw)
        fg, layout = csr.to_fam(graph, app)
        roles = layout.regions()
        bg = None
        if spec.corun:
            bg = system.host(BG_CLIENT, **host_kw)
            bg_graph = csr.map_fam(layout, bg)
        system.counters.reset()
        app.stats = type(app.stats)()
        if "static" in spec.cache_mode and spec.static_vertices:
            for h in csr.vertex_handles(fg):
                app.static_load(h)

        results: dict[str, Any] = {}

        def run(name, who, g, key):
            t0 = time.perf_counter()
            results[key] = (algorithms.run(name, g, **_algo_kwargs(name, spec.algorithm)),
                            time.perf_counter() - t0)

        threads = [threading.Thread(target=run, args=(spec.application, app, fg, APP_CLIENT))]
        if bg is not None:
            threads.append(threading.Thread(target=run, args=(spec.corun, bg, bg_graph, BG_CLIENT)))
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        if APP_CLIENT not in results or (bg is not None and BG_CLIENT not in results):
            raise RuntimeError("application thread failed")
        # quiesce before the snapshot
        for h in system.hosts:
            h.wait_writebacks(h.rpc_timeout)
        output, wall = results[APP_CLIENT]
        counters = system.counters
        snap = counters.snapshot()
        rep = {
            "output_sha256": digest(output),
            "wall_time_s": wall,
            "modeled_time_s": counters.modeled_time(),
            "traffic": snap,
            "region_traffic": _traffic_by_region(counters, roles),
            "host": {h.id: dataclasses.asdict(h.stats) for h in system.hosts},
            "proxy": dataclasses.asdict(system.proxy.stats) if system.proxy else None,
            "cache": _cache_report(system),
            "corun": None,
        }
        if bg is not None:
            bg_out, bg_wall = results[BG_CLIENT]
            rep["corun"] = {"application": spec.corun, "output_sha256": digest(bg_out),
                            "wall_time_s": bg_wall}
        rep["_output"] = output
        return rep


def run_experiment(spec: ExperimentSpec, graph: Optional[csr.CsrGraph] = None) -> dict:
    """Run ``spec`` and return a report (validated against the report schema)."""
    spec.validate()
    graph = graph if graph is not None else build_graph(spec.graph)
    reps = [_run_once(spec, graph) for _ in range(spec.repetitions)]
    first = reps[0]
    report = {
        "schema": "dpufam.report",
        "schema_version": SCHEMA_VERSION,
        "spec": spec.to_dict(),
        "application": spec.application,
        "mode": spec.mode,
        "cache_mode": spec.cache_mode,
        "graph": {"n": graph.n, "m": graph.m, "vertex_bytes": 8 * (graph.n + 1),
                  "edge_bytes": 8 * graph.m},
        "output_sha256": first["output_sha256"],
        "wall_time_s": [r["wall_time_s"] for r in reps],
        "modeled_time_s": first["modeled_time_s"],
        "traffic": first["traffic"],
        "region_traffic": first["region_traffic"],
        "host": first["host"],
        "proxy": first["proxy"],
        "cache": first["cache"],
        "corun": first["corun"],
        "consistent": {
            "outputs": len({r["output_sha256"] for r in reps}) == 1,
            "traffic": all(r["traffic"] == first["traffic"] for r in reps),
        },
    }
    validate_report(report)
    report["_output"] = first["_output"]
    return report


def public(report: dict) -> dict:
    """The report without in-memory extras, ready for JSON."""
    return {k: v for k, v in report.items() if not k.startswith("_")}


def report_schema() -> dict:
    return json.loads(resources.files("dpufam").joinpath("report_schema.json").read_text())


def validate_report(report: dict) -> None:
    jsonschema.validate(public(report), report_schema())


# -- aggregation & comparison -------------------------------------------------------------

def client_sums(traffic: dict) -> dict:
    """Per-link totals obtained by summing the per-client counters."""
    out: dict[str, dict[str, int]] = {}
    for per_link in traffic["clients"].values():
        for link, summary in per_link.items():
            acc = out.setdefault(link, {k: 0 for k in summary})
            for k, v in summary.items():
                acc[k] += v
    return out


def aggregate(reports: list[dict]) -> dict:
    """Sum link and per-client counters over several reports (e.g. processes of a co-run)."""
    links: dict[str, dict[str, int]] = {}
    clients: dict[str, dict[str, dict[str, int]]] = {}
    for r in reports:
        t = r["traffic"]
        for link, summary in t["links"].items():
            acc = links.setdefault(link, {k: 0 for k in summary})
            for k, v in summary.items():
                acc[k] += v
        for c, per_link in t["clients"].items():
            for link, summary in per_link.items():
                acc = clients.setdefault(c, {}).setdefault(link, {k: 0 for k in summary})
                for k, v in summary.items():
                    acc[k] += v
    return {"links": links, "clients": clients}


METRICS = (
    ("net_bytes_total", lambda r: r["traffic"]["links"]["net"]["bytes_total"]),
    ("net_bytes_on_demand", lambda r: r["traffic"]["links"]["net"]["bytes_on_demand"]),
    ("net_bytes_background", lambda r: r["traffic"]["links"]["net"]["bytes_background"]),
    ("intra_bytes_total", lambda r: r["traffic"]["links"]["intra"]["bytes_total"]),
    ("net_messages", lambda r: r["traffic"]["links"]["net"]["messages"]),
    ("modeled_time_s", lambda r: r["modeled_time_s"]),
    ("wall_time_s", lambda r: min(r["wall_time_s"])),
)


def reduction(a: float, b: float) -> Optional[float]:
    """Traffic reduction of ``a`` relative to baseline ``b``: ``1 - a/b``."""
    return None if b == 0 else 1.0 - a / b


def ratio(a: float, b: float) -> Optional[float]:
    if b == 0:
        return 1.0 if a == 0 else None
    return a / b


def compare(a: dict, b: dict) -> list[dict]:
    """Rows comparing report ``a`` against baseline ``b``."""
    for key in ("application",):
        if a[key] != b[key]:
            raise ConfigError(f"reports differ in {key}: {a[key]!r} vs {b[key]!r}")
    if a["spec"]["graph"] != b["spec"]["graph"] or a["graph"] != b["graph"]:
        raise ConfigError("reports ran on different graphs")
    rows = []
    for name, get in METRICS:
        va, vb = get(a), get(b)
        rows.append({"metric": name, "a": va, "b": vb, "ratio": ratio(va, vb),
                     "reduction_pct": None if reduction(va, vb) is None
                     else 100.0 * reduction(va, vb)})
    ha = (a.get("cache") or {}).get("dynamic") or {}
    hb = (b.get("cache") or {}).get("dynamic") or {}
    if ha or hb:
        va, vb = ha.get("hit_rate", 0.0), hb.get("hit_rate", 0.0)
        rows.append({"metric": "hit_rate", "a": va, "b": vb, "ratio": ratio(va, vb),
                     "reduction_pct": None})
    ta, tb = a["modeled_time_s"], b["modeled_time_s"]
    rows.append({"metric": "modeled_speedup", "a": ta, "b": tb,
                 "ratio": None if ta == 0 else tb / ta, "reduction_pct": None})
    return rows


def format_rows(rows: list[dict], fmt: str = "text") -> str:
    cols = ("metric", "a", "b", "ratio", "reduction_pct")
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: "" if r[k] is None else r[k] for k in cols})
        return buf.getvalue()
    if fmt != "text":
        raise ConfigError(f"unknown format {fmt!r}")

    def cell(v):
        if v is None:
            return "-"
        if isinstance(v, float):
            return f"{v:.6g}"
        return str(v)
    table = [cols] + [tuple(cell(r[k]) for k in cols) for r in rows]
    widths = [max(len(row[i]) for row in table) for i in range(len(cols))]
    return "".join("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() + "\n"
                   for row in table)


# Default comparison: direct, offload baseline, offload with the static cache.
DEFAULT_MATRIX = (
    {"mode": "direct", "cache_mode": "off"},
    {"mode": "offload", "cache_mode": "off"},
    {"mode": "offload", "cache_mode": "static"},
)
