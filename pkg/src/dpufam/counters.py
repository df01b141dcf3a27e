"""Traffic accounting shared by every fabric backend."""
from __future__ import annotations

import threading
from collections import defaultdict
from dataclasses import dataclass
from typing import Optional

ON_DEMAND = "on_demand"
BACKGROUND = "background"
TRAFFIC_CLASSES = (ON_DEMAND, BACKGROUND)

# Client label for traffic no host session owns (static preload, prefetch fills
# triggered by several clients, proxy control plane).
SHARED = "_shared"


@dataclass
class _Cell:
    bytes: int = 0
    payload: int = 0
    messages: int = 0
    batches: int = 0
    modeled_time: float = 0.0


class TrafficCounters:
    """Byte/message counters keyed by (link, class, client, region).

    Every charge lands in exactly one cell, so any marginal (per link, per
    client, per region) is a plain sum over cells and totals are exact.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._cells: dict[tuple, _Cell] = defaultdict(_Cell)

    def charge(self, link: str, tclass: str, client: Optional[str], region: Optional[int],
               payload: int, overhead: int, *, messages: int = 1, batches: int = 0,
               modeled_time: float = 0.0) -> None:
        if tclass not in TRAFFIC_CLASSES:
            raise ValueError(f"unknown traffic class {tclass!r}")
        key = (link, tclass, client or SHARED, region)
        with self._lock:
            c = self._cells[key]
            c.bytes += payload + overhead
            c.payload += payload
            c.messages += messages
            c.batches += batches
            c.modeled_time += modeled_time

    def reset(self) -> None:
        with self._lock:
            self._cells.clear()

    def _select(self, link=None, tclass=None, client=None, region=None):
        with self._lock:
            items = list(self._cells.items())
        for (l, t, c, r), cell in items:
            if link is not None and l != link:
                continue
            if tclass is not None and t != tclass:
                continue
            if client is not None and c != client:
                continue
            if region is not None and r != region:
                continue
            yield (l, t, c, r), cell

    def bytes(self, link=None, tclass=None, client=None, region=None) -> int:
        return sum(c.bytes for _, c in self._select(link, tclass, client, region))

    def payload(self, link=None, tclass=None, client=None, region=None) -> int:
        return sum(c.payload for _, c in self._select(link, tclass, client, region))

    def messages(self, link=None, tclass=None, client=None, region=None) -> int:
        return sum(c.messages for _, c in self._select(link, tclass, client, region))

    def batches(self, link=None, tclass=None, client=None, region=None) -> int:
        return sum(c.batches for _, c in self._select(link, tclass, client, region))

    def modeled_time(self, link=None) -> float:
        return sum(c.modeled_time for _, c in self._select(link))

    def clients(self) -> list[str]:
        return sorted({k[2] for k, _ in self._select()})

    def links(self) -> list[str]:
        return sorted({k[0] for k, _ in self._select()})

    def link_summary(self, link: str, client=None) -> dict:
        return {
            "bytes_on_demand": self.bytes(link, ON_DEMAND, client),
            "bytes_background": self.bytes(link, BACKGROUND, client),
            "bytes_total": self.bytes(link, client=client),
            "payload_bytes": self.payload(link, client=client),
            "messages": self.messages(link, client=client),
            "batches": self.batches(link, client=client),
        }

    def snapshot(self, links=("intra", "net")) -> dict:
        """Nested plain-dict view used by reports."""
        links = sorted(set(links) | set(self.links()))
        return {
            "links": {l: self.link_summary(l) for l in links},
            "clients": {
                c: {l: self.link_summary(l, c) for l in links} for c in self.clients()
            },
            "modeled_time_s": {l: self.modeled_time(l) for l in links},
        }

    def merge(self, other: "TrafficCounters") -> None:
        with other._lock:
            items = [(k, _Cell(**vars(c))) for k, c in other._cells.items()]
        with self._lock:
            for k, c in items:
                mine = self._cells[k]
                mine.bytes += c.bytes
                mine.payload += c.payload
                mine.messages += c.messages
                mine.batches += c.batches
                mine.modeled_time += c.modeled_time

    def to_records(self) -> list[dict]:
        """Flat per-cell records, e.g. for shipping counters between processes."""
        with self._lock:
            items = list(self._cells.items())
        return [{"link": l, "tclass": t, "client": c, "region": r, **vars(cell)}
                for (l, t, c, r), cell in items]

    @classmethod
    def from_records(cls, records) -> "TrafficCounters":
        out = cls()
        for rec in records:
            key = (rec["link"], rec["tclass"], rec["client"], rec["region"])
            out._cells[key] = _Cell(rec["bytes"], rec["payload"], rec["messages"],
                                    rec["batches"], rec["modeled_time"])
        return out
