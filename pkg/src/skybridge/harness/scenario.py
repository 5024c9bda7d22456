"""Deterministic scenario runner.

A scenario drives synthetic robot clients against an in-process portal
through the modeled network. By default everything executes on the
virtual-time loop: modeled service and transfer times become event
orderings, so a multi-minute run completes in milliseconds and identical
(scenario, seed, build) triples produce byte-identical traces. The
realtime flag maps the same delays onto wall-clock waits instead.
"""

from __future__ import annotations

import asyncio
import itertools
import json
import random
from dataclasses import dataclass, field, replace
from pathlib import Path

from .. import demo, schemas
from ..choreographer import Choreographer, NodePool, SlaDictionary
from ..manifest import ResourceQuota, parse_manifest
from ..portal.core import PortalCore
from ..protocol import Envelope, compress_payload
from ..servant import BuiltinSandbox
from ..stub import (CallFailed, LocalLaunchError, ServiceDown, ServiceStub,
                    timeout_marker_ms)
from ..stubgen import StubDescriptor, parse_descriptor
from .metrics import MetricsReport, RequestRecord, compute_sd
from .network import NetworkModel, NetworkSegment, SimLink
from .vtime import run_virtual


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioClient:
    client_id: str
    service: str
    target: str
    t_desire_ms: int
    t_max_ms: int
    period_ms: float = 250.0
    request_count: int | None = None
    payload: dict = field(default_factory=dict)
    local_fallback: bool = True
    local_cpu_millicores: int = 1000
    q_threshold: int | None = None
    keepalive_interval_ms: int = 2000


@dataclass(frozen=True)
class Scenario:
    name: str
    seed: int
    request_count: int
    clients: tuple[ScenarioClient, ...]
    network_timeline: tuple[NetworkSegment, ...]
    manifests: tuple[str, ...] = ()
    sla_dictionary: str | None = None
    node_pool: str | None = None
    duration_ms: float | None = None  # alternative to request_count
    base_dir: Path = Path(".")

    def client_requests(self, client: ScenarioClient) -> int:
        if client.request_count is not None:
            return client.request_count
        if self.request_count:
            return self.request_count
        if self.duration_ms is not None:
            return max(1, int(self.duration_ms // client.period_ms))
        raise ScenarioError("scenario needs request_count or duration_ms")

    def total_requests(self) -> int:
        return sum(self.client_requests(c) for c in self.clients)


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    doc = json.loads(path.read_text(encoding="utf-8"))
    try:
        clients = tuple(
            ScenarioClient(
                client_id=c.get("client_id", f"robot{i}"),
                service=c["service"],
                target=c["target"],
                t_desire_ms=int(c["t_desire_ms"]),
                t_max_ms=int(c["t_max_ms"]),
                period_ms=float(c.get("period_ms", 250.0)),
                request_count=c.get("request_count"),
                payload=dict(c.get("payload", {})),
                local_fallback=bool(c.get("local_fallback", True)),
                local_cpu_millicores=int(c.get("local_cpu_millicores", 1000)),
                q_threshold=c.get("q_threshold"),
                keepalive_interval_ms=int(c.get("keepalive_interval_ms", 2000)),
            )
            for i, c in enumerate(doc.get("clients", []))
        )
        segments = tuple(
            NetworkSegment(
                from_request=int(s["from_request"]),
                to_request=int(s["to_request"]),
                base_latency_ms=float(s.get("base_latency_ms", 0.0)),
                jitter_ms=float(s.get("jitter_ms", 0.0)),
                bandwidth_kbps=s.get("bandwidth_kbps"),
                up=bool(s.get("up", True)),
            )
            for s in doc.get("network_timeline", [])
        )
        scenario = Scenario(
            name=doc.get("name", path.stem),
            seed=int(doc.get("seed", 0)),
            request_count=int(doc.get("request_count", 0)),
            clients=clients,
            network_timeline=segments,
            manifests=tuple(doc.get("manifests", [])),
            sla_dictionary=doc.get("sla_dictionary"),
            node_pool=doc.get("node_pool"),
            duration_ms=doc.get("duration_ms"),
            base_dir=path.parent,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioError(f"bad scenario file {path}: {exc}") from exc
    if not scenario.clients:
        raise ScenarioError("scenario declares no clients")
    return scenario


def build_payload(spec: dict, index: int, seed: int, client_id: str) -> bytes:
    """Deterministic request payload for a given request index."""
    schema = spec.get("schema", "image_rgb")
    fill = spec.get("fill", "gradient")
    if schema == "image_rgb":
        width, height = int(spec.get("width", 64)), int(spec.get("height", 64))
        n = 3 * width * height
        body = _fill_bytes(fill, n, index, seed, client_id)
        return schemas.encode_image_rgb(width, height, body)
    if schema == "grid_map":
        width, height = int(spec.get("width", 64)), int(spec.get("height", 64))
        body = _fill_bytes(fill, width * height, index, seed, client_id)
        return schemas.encode_grid_map(width, height, body)
    if schema == "blob":
        return _fill_bytes(fill, int(spec.get("bytes", 1024)), index, seed, client_id)
    raise ScenarioError(f"cannot generate payloads for schema {schema!r}")


def _fill_bytes(fill: str, n: int, index: int, seed: int, client_id: str) -> bytes:
    if fill == "zero":
        return bytes(n)
    if fill == "gradient":
        return bytes((j + index) % 256 for j in range(n))
    if fill == "noise":
        return random.Random(f"{seed}:{client_id}:{index}").randbytes(n)
    raise ScenarioError(f"unknown payload fill {fill!r}")


class SimCloud:
    """In-process portal with services deployed, ready for simulated links."""

    def __init__(self, manifests: list[bytes],
                 dictionary: SlaDictionary | None = None,
                 pool: NodePool | None = None):
        if pool is None:
            pool = NodePool.from_json(json.dumps(demo.default_node_pool_doc()))
        self.choreographer = Choreographer(dictionary or SlaDictionary([]), pool)
        self.core = PortalCore(self.choreographer, portal_url="sim://portal/ws")
        for raw in manifests:
            self.core.deploy(raw)

    def descriptor(self, service: str, with_local_fallback: bool = True) -> StubDescriptor:
        entry = self.core.catalog.get(service)
        if entry is None:
            raise ScenarioError(f"service {service!r} is not deployed")
        descriptor = parse_descriptor(entry.stub_descriptor_bytes)
        if not with_local_fallback:
            descriptor = replace(descriptor, local_fallback=None)
        return descriptor

    def stub(self, service: str, network: NetworkModel | None = None,
             with_local_fallback: bool = True, **stub_kwargs) -> tuple[ServiceStub, SimLink]:
        network = network or NetworkModel.flat()
        link = SimLink(self.core, network)
        stub = ServiceStub(self.descriptor(service, with_local_fallback),
                           connect=_once(link), **stub_kwargs)
        return stub, link

    async def shutdown(self) -> None:
        await self.core.shutdown()


def _once(link: SimLink):
    async def connect():
        return link
    return connect


def run_scenario(scenario: Scenario, realtime: bool = False) -> MetricsReport:
    """Execute a scenario and return its metrics report (records + aggregates)."""
    if realtime:
        return asyncio.run(_run_scenario(scenario))
    return run_virtual(_run_scenario(scenario))


async def _run_scenario(scenario: Scenario) -> MetricsReport:
    manifests = []
    for rel in scenario.manifests:
        path = Path(rel)
        if not path.is_absolute():
            path = scenario.base_dir / path
        manifests.append(path.read_bytes())
    if not manifests:
        manifests = [demo.detector_manifest_bytes(), demo.mapper_manifest_bytes()]

    dictionary = None
    if scenario.sla_dictionary:
        dictionary = SlaDictionary.from_file(scenario.base_dir / scenario.sla_dictionary)
    else:
        dictionary = SlaDictionary.from_json(json.dumps(demo.default_sla_dictionary_doc()))
    pool = None
    if scenario.node_pool:
        pool = NodePool.from_file(scenario.base_dir / scenario.node_pool)

    cloud = SimCloud(manifests, dictionary=dictionary, pool=pool)
    for client in scenario.clients:
        if client.service not in cloud.core.catalog:
            raise ScenarioError(f"scenario references undeployed service "
                                f"{client.service!r}")
        manifest = cloud.core.catalog[client.service].manifest
        if manifest.workload.kind == "external_process":
            raise ScenarioError("external_process workloads require --realtime")

    segments = list(scenario.network_timeline) or [NetworkSegment(0, 2**31)]
    network = NetworkModel(segments, random.Random(f"{scenario.seed}:network"))
    network.validate_cover(scenario.total_requests())

    issue_counter = itertools.count()
    records: list[RequestRecord] = []

    async def run_client(client: ScenarioClient) -> None:
        loop = asyncio.get_running_loop()
        stub, link = cloud.stub(
            client.service, network=network,
            with_local_fallback=client.local_fallback,
            t_desire_ms=client.t_desire_ms,
            t_max_ms=client.t_max_ms,
            q_threshold=client.q_threshold,
            local_cpu_millicores=client.local_cpu_millicores,
            keepalive_interval_ms=client.keepalive_interval_ms,
        )
        await stub.start()
        started = loop.time()
        issue_tasks = []
        for i in range(scenario.client_requests(client)):
            due = started + i * client.period_ms / 1000
            delay = due - loop.time()
            if delay > 0:
                await asyncio.sleep(delay)
            index = next(issue_counter)
            network.note_issue(index)
            data = build_payload(client.payload, i, scenario.seed, client.client_id)
            issue_tasks.append(asyncio.ensure_future(
                _issue(stub, client, index, data, records)))
        await asyncio.gather(*issue_tasks)
        await stub.close()
        await link.close()

    await asyncio.gather(*(run_client(c) for c in scenario.clients))
    await cloud.shutdown()

    report = MetricsReport(records=records)
    report.finalize()
    return report


async def _issue(stub: ServiceStub, client: ScenarioClient, index: int,
                 data: bytes, records: list[RequestRecord]) -> None:
    loop = asyncio.get_running_loop()
    begun = loop.time()
    try:
        outcome = await stub.call(client.target, data)
        await outcome.accounted
        records.append(RequestRecord(
            index=index,
            t_remote_ms=outcome.t_remote_ms,
            t_local_ms=outcome.t_local_ms,
            winner=outcome.winner,
            q_after=outcome.q_after if outcome.q_after is not None else stub.state.q,
            action=outcome.action,
            serving_ms=outcome.serving_ms,
            within_t_max=outcome.serving_ms <= client.t_max_ms,
        ))
    except (ServiceDown, CallFailed, LocalLaunchError):
        records.append(RequestRecord(
            index=index,
            t_remote_ms=timeout_marker_ms(client.t_max_ms),
            t_local_ms=None,
            winner="none",
            q_after=stub.state.q,
            action=None,
            serving_ms=(loop.time() - begun) * 1000,
            within_t_max=False,
        ))


def run_sd_comparison(seed: int, request_count: int = 60,
                      contention: tuple[float, float] = (1.0, 3.0)
                      ) -> tuple[float, float]:
    """The jitter experiment: serving-time SD of a contended native executor
    versus the uncontended cloud path. Returns (sd_native, sd_cloud)."""

    async def main() -> tuple[float, float]:
        dictionary = SlaDictionary.from_json(json.dumps(demo.default_sla_dictionary_doc()))
        cloud = SimCloud([demo.detector_manifest_bytes()], dictionary=dictionary)
        network = NetworkModel.flat(base_latency_ms=10, jitter_ms=2,
                                    rng=random.Random(f"{seed}:net"))
        stub, link = cloud.stub("detect", network=network,
                                with_local_fallback=False,
                                t_desire_ms=100, t_max_ms=300,
                                enable_keepalive=False)
        await stub.start()
        cloud_times = []
        for i in range(request_count):
            data = build_payload({"schema": "image_rgb", "width": 64, "height": 64},
                                 i, seed, "sdcmp")
            outcome = await stub.call("detect", data)
            await outcome.accounted
            cloud_times.append(outcome.serving_ms)
        await stub.close()
        await link.close()
        await cloud.shutdown()

        # Native: same workload on the onboard computer, compute threads
        # fighting for a saturated CPU -> multiplicative service-time noise.
        manifest = parse_manifest(demo.detector_manifest_bytes())
        sandbox = BuiltinSandbox("native", manifest.interface, manifest.stateful,
                                 manifest.workload,
                                 ResourceQuota(cpu_millicores=1000, memory_mb=256))
        rng = random.Random(f"{seed}:contention")
        native_times = []
        for i in range(request_count):
            data = build_payload({"schema": "image_rgb", "width": 64, "height": 64},
                                 i, seed, "sdcmp")
            env = Envelope(op="call", id=f"n{i}", target="detect",
                           payload=compress_payload("image_rgb", data, "none"))
            t_ms = sandbox.plan(env) * rng.uniform(*contention)
            await asyncio.sleep(t_ms / 1000)
            sandbox.complete(env)
            native_times.append(t_ms)

        return compute_sd(native_times), compute_sd(cloud_times)

    return run_virtual(main())
