"""Cloud-side QoS authority: SLA resolution, placement, servant lifecycle.

Resource resolution walks a hand-built dictionary mapping (service, SLA
value) to a resource configuration; placement is deterministic best-fit on
memory over a modeled node pool. All pool mutations serialize through the
Choreographer, so allocate/release sequences are linearizable.
"""

from __future__ import annotations

import json
import logging
import threading
from dataclasses import dataclass, field
from pathlib import Path

from .manifest import PackageManifest, ResourceQuota, validate_quota
from .protocol import SlaDeclaration

logger = logging.getLogger(__name__)

SERVANT_STATES = ("instantiating", "running", "terminating", "terminated")


class InsufficientResources(RuntimeError):
    """No node can fit the requested quota; nothing was allocated."""


class UnknownService(KeyError):
    pass


class UnknownServant(KeyError):
    pass


@dataclass(frozen=True)
class SlaEntry:
    service: str
    t_desire_ms_max: int
    resources: ResourceQuota
    aux: dict = field(default_factory=dict)


class SlaDictionary:
    """Immutable (service, SLA value) -> resources table, built in advance."""

    def __init__(self, entries: list[SlaEntry] | None = None):
        entries = list(entries or [])
        seen = set()
        for e in entries:
            key = (e.service, e.t_desire_ms_max)
            if key in seen:
                raise ValueError(f"duplicate dictionary entry for {key}")
            seen.add(key)
        self._entries = tuple(entries)

    @property
    def entries(self) -> tuple[SlaEntry, ...]:
        return self._entries

    def lookup(self, service: str, t_desire_ms: int) -> ResourceQuota | None:
        """Resources of the entry with the smallest t_desire_ms_max >= t_desire_ms;
        the largest-capability entry when none qualifies; None when the service
        has no entries at all."""
        entries = [e for e in self._entries if e.service == service]
        if not entries:
            return None
        qualifying = [e for e in entries if e.t_desire_ms_max >= t_desire_ms]
        if qualifying:
            return min(qualifying, key=lambda e: e.t_desire_ms_max).resources
        return max(entries, key=lambda e: e.t_desire_ms_max).resources

    @classmethod
    def from_json(cls, raw: bytes | str) -> "SlaDictionary":
        doc = json.loads(raw)
        if not isinstance(doc, list):
            raise ValueError("SLA dictionary must be a JSON array")
        entries = []
        for i, item in enumerate(doc):
            if not isinstance(item, dict):
                raise ValueError(f"dictionary entry {i} must be an object")
            resources = validate_quota(item.get("resources"), f"[{i}].resources")
            aux = item.get("aux", {})
            if not isinstance(aux, dict):
                raise ValueError(f"dictionary entry {i} aux must be an object")
            entries.append(SlaEntry(service=item["service"],
                                    t_desire_ms_max=int(item["t_desire_ms_max"]),
                                    resources=resources, aux=aux))
        return cls(entries)

    @classmethod
    def from_file(cls, path: str | Path) -> "SlaDictionary":
        return cls.from_json(Path(path).read_bytes())


def resolve_resources(service: str, sla: SlaDeclaration, dictionary: SlaDictionary,
                      default: ResourceQuota) -> ResourceQuota:
    """Total, pure SLA-to-quota resolution."""
    if sla.resources is not None:
        return sla.resources
    if sla.times is not None:
        found = dictionary.lookup(service, sla.times.t_desire_ms)
        if found is not None:
            return found
    return default


@dataclass
class Node:
    node_id: str
    cpu_millicores_total: int
    memory_mb_total: int
    allocated: dict[str, ResourceQuota] = field(default_factory=dict)

    @property
    def free_cpu(self) -> int:
        return self.cpu_millicores_total - sum(q.cpu_millicores for q in self.allocated.values())

    @property
    def free_memory(self) -> int:
        return self.memory_mb_total - sum(q.memory_mb for q in self.allocated.values())

    def fits(self, quota: ResourceQuota) -> bool:
        return self.free_cpu >= quota.cpu_millicores and self.free_memory >= quota.memory_mb


class NodePool:
    """Modeled cluster capacity. Placement: best-fit on memory, ties broken
    by smallest node_id, so identical op sequences yield identical layouts."""

    def __init__(self, nodes: list[Node]):
        ids = [n.node_id for n in nodes]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate node_id in pool")
        self.nodes = list(nodes)
        self._placement: dict[str, Node] = {}

    @classmethod
    def from_json(cls, raw: bytes | str) -> "NodePool":
        doc = json.loads(raw)
        if not isinstance(doc, list):
            raise ValueError("node pool must be a JSON array")
        return cls([Node(node_id=item["node_id"],
                         cpu_millicores_total=int(item["cpu_millicores_total"]),
                         memory_mb_total=int(item["memory_mb_total"]))
                    for item in doc])

    @classmethod
    def from_file(cls, path: str | Path) -> "NodePool":
        return cls.from_json(Path(path).read_bytes())

    def allocate(self, servant_id: str, quota: ResourceQuota) -> str:
        if servant_id in self._placement:
            raise ValueError(f"servant {servant_id} already placed")
        candidates = [n for n in self.nodes if n.fits(quota)]
        if not candidates:
            raise InsufficientResources(
                f"no node fits cpu={quota.cpu_millicores} mem={quota.memory_mb}")
        node = min(candidates, key=lambda n: (n.free_memory, n.node_id))
        node.allocated[servant_id] = quota
        self._placement[servant_id] = node
        return node.node_id

    def free(self, servant_id: str) -> None:
        node = self._placement.pop(servant_id, None)
        if node is None:
            raise UnknownServant(servant_id)
        del node.allocated[servant_id]

    def snapshot(self) -> dict[str, dict]:
        return {n.node_id: {"free_cpu": n.free_cpu, "free_memory": n.free_memory,
                            "allocated": sorted(n.allocated)} for n in self.nodes}


def schedule(quota: ResourceQuota, pool: NodePool, servant_id: str) -> str:
    """Place ``servant_id`` with ``quota``; accounting updates atomically with
    the decision and nothing is allocated on failure."""
    return pool.allocate(servant_id, quota)


@dataclass
class ServantRecord:
    servant_id: str
    service: str
    owner_session: str  # empty for shared servants
    quota: ResourceQuota
    node_id: str
    state: str = "instantiating"

    def advance(self, new_state: str) -> None:
        order = SERVANT_STATES.index
        if order(new_state) < order(self.state):
            raise ValueError(f"servant {self.servant_id}: cannot move "
                             f"{self.state} -> {new_state}")
        self.state = new_state


class Choreographer:
    """Single logical authority over servant records and pool accounting."""

    def __init__(self, dictionary: SlaDictionary, pool: NodePool):
        self.dictionary = dictionary
        self.pool = pool
        self._services: dict[str, PackageManifest] = {}
        self._records: dict[str, ServantRecord] = {}
        self._by_service: dict[str, list[str]] = {}
        self._subscribers: dict[str, set[str]] = {}
        self._seq = 0
        self._lock = threading.RLock()

    def register_service(self, manifest: PackageManifest) -> None:
        with self._lock:
            self._services[manifest.name] = manifest
            self._by_service.setdefault(manifest.name, [])

    def manifest_for(self, service: str) -> PackageManifest:
        manifest = self._services.get(service)
        if manifest is None:
            raise UnknownService(service)
        return manifest

    def resolve(self, service: str, sla: SlaDeclaration) -> ResourceQuota:
        manifest = self.manifest_for(service)
        return resolve_resources(service, sla, self.dictionary, manifest.default_resources)

    def instantiate(self, service: str, session: str, sla: SlaDeclaration) -> ServantRecord:
        """Reuse a shared servant when possible, else place a new one.

        Stateful services always get an exclusive servant owned by ``session``;
        stateless services share any live servant whose quota covers the newly
        resolved quota.
        """
        with self._lock:
            manifest = self.manifest_for(service)
            quota = self.resolve(service, sla)
            if not manifest.stateful:
                for sid in self._by_service[service]:
                    rec = self._records[sid]
                    if (rec.state in ("instantiating", "running")
                            and rec.owner_session == ""
                            and rec.quota.covers(quota)):
                        self._subscribers[sid].add(session)
                        return rec
            servant_id = f"{service}-{self._seq:04d}"
            self._seq += 1
            node_id = self.pool.allocate(servant_id, quota)
            rec = ServantRecord(servant_id=servant_id, service=service,
                                owner_session=session if manifest.stateful else "",
                                quota=quota, node_id=node_id)
            self._records[servant_id] = rec
            self._by_service[service].append(servant_id)
            if not manifest.stateful:
                self._subscribers[servant_id] = {session}
            logger.debug("instantiated %s on %s (quota %s)", servant_id, node_id, quota)
            return rec

    def mark_running(self, servant_id: str) -> None:
        with self._lock:
            self._record(servant_id).advance("running")

    def release(self, servant_id: str, session: str) -> bool:
        """Session lets go of a servant. Exclusive servants terminate with
        their owner; shared servants terminate when the last subscriber leaves.
        Returns True when the servant terminated."""
        with self._lock:
            rec = self._record(servant_id)
            if rec.owner_session:
                if rec.owner_session != session:
                    raise UnknownServant(f"{servant_id} not held by {session}")
                self._terminate(rec)
                return True
            subs = self._subscribers.get(servant_id)
            if subs is None or session not in subs:
                raise UnknownServant(f"{servant_id} not held by {session}")
            subs.discard(session)
            if not subs:
                self._terminate(rec)
                return True
            return False

    def terminate(self, servant_id: str) -> ServantRecord:
        """Force-terminate regardless of holders (management path)."""
        with self._lock:
            rec = self._record(servant_id)
            self._terminate(rec)
            return rec

    def _terminate(self, rec: ServantRecord) -> None:
        rec.advance("terminating")
        self.pool.free(rec.servant_id)
        rec.advance("terminated")
        self._subscribers.pop(rec.servant_id, None)
        logger.debug("terminated %s", rec.servant_id)

    def _record(self, servant_id: str) -> ServantRecord:
        rec = self._records.get(servant_id)
        if rec is None or rec.state in ("terminating", "terminated"):
            raise UnknownServant(servant_id)
        return rec

    def record(self, servant_id: str) -> ServantRecord:
        rec = self._records.get(servant_id)
        if rec is None:
            raise UnknownServant(servant_id)
        return rec

    def live_records(self) -> list[ServantRecord]:
        with self._lock:
            return [r for r in self._records.values()
                    if r.state in ("instantiating", "running")]

    def holders(self, servant_id: str) -> set[str]:
        rec = self.record(servant_id)
        if rec.owner_session:
            return {rec.owner_session}
        return set(self._subscribers.get(servant_id, ()))
