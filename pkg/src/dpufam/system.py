"""Wiring helper: one memory agent, an optional proxy and any number of hosts."""
from __future__ import annotations

from typing import Optional

from .dpu_agent import ProxyAgent, ProxyConfig
from .fabric import DEFAULT_INTRA, DEFAULT_NET, Fabric, LinkProfile
from .host_agent import HostAgent
from .memory_agent import DEFAULT_CAPACITY, MemoryAgent


class System:
    def __init__(self, mode: str = "offload", *, proxy: Optional[ProxyConfig] = None,
                 intra: LinkProfile = DEFAULT_INTRA, net: LinkProfile = DEFAULT_NET,
                 header_bytes: int = 64, max_message: int = 1 << 20,
                 memory_capacity: int = DEFAULT_CAPACITY, data_dir: Optional[str] = None,
                 chunk_size: int = 64 * 1024, fabric: Optional[Fabric] = None):
        self.mode = mode
        self.fabric = fabric or Fabric(intra, net, header_bytes=header_bytes,
                                       max_message=max_message)
        self.memory = MemoryAgent(self.fabric, "mem0", capacity=memory_capacity,
                                  data_dir=data_dir, chunk_size=chunk_size).start()
        self.chunk_size = chunk_size
        self.proxy: Optional[ProxyAgent] = None
        if mode == "offload":
            cfg = proxy or ProxyConfig(chunk_size=chunk_size)
            cfg.memory = self.memory.id
            cfg.chunk_size = chunk_size
            self.proxy = ProxyAgent(self.fabric, cfg).start()
        self.hosts: list[HostAgent] = []

    @property
    def counters(self):
        return self.fabric.counters

    def host(self, name: Optional[str] = None, **kw) -> HostAgent:
        name = name or f"host{len(self.hosts)}"
        kw.setdefault("chunk_size", self.chunk_size)
        h = HostAgent(self.fabric, name, mode=self.mode,
                      proxy=self.proxy.config.endpoint if self.proxy else "dpu0",
                      memory=self.memory.id, **kw)
        self.hosts.append(h)
        return h

    def close(self) -> None:
        for h in self.hosts:
            try:
                h.close()
            except Exception:
                pass
        if self.proxy is not None:
            self.proxy.stop()
        self.memory.stop()
        self.fabric.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
