"""Transport-agnostic portal: service catalog, session handling, routing.

The core speaks envelopes only; the surrounding layer (WebSocket app, or the
harness's in-process links) supplies a send callable per session and feeds
received frames in. One session = one client robot. Requests for a target
are multiplexed to the servant granted to that session, each servant runs a
single worker consuming its queue in arrival order, and replies are routed
back by call id.
"""

from __future__ import annotations

import asyncio
import base64
import logging
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Awaitable, Callable

from .. import stubgen
from ..choreographer import (Choreographer, InsufficientResources, UnknownServant,
                             UnknownService)
from ..manifest import PackageManifest, parse_manifest, serialize_manifest
from ..protocol import Envelope, Payload, ProtocolError, Status, decode, encode
from ..schemas import SchemaError, canonical_json
from ..servant import Sandbox, UnknownTarget, WorkloadLaunchError, start_sandbox

logger = logging.getLogger(__name__)

SendFn = Callable[[bytes], Awaitable[None]]

_SHUTDOWN = object()


class ConflictError(RuntimeError):
    """Deploy would replace different content without the replace flag."""


@dataclass
class ServiceCatalogEntry:
    service: str
    manifest: PackageManifest
    manifest_bytes: bytes
    deployed_at: float
    stub_descriptor_bytes: bytes


@dataclass
class Session:
    session_id: str
    peer: str
    send: SendFn
    granted: dict[str, str] = field(default_factory=dict)  # service -> servant_id
    pending: dict[str, float] = field(default_factory=dict)  # call id -> enqueue time
    closed: bool = False


@dataclass
class _ServantHost:
    queue: asyncio.Queue
    ready: asyncio.Event
    sandbox: Sandbox | None = None
    task: asyncio.Task | None = None
    closing: bool = False


class PortalCore:
    def __init__(self, choreographer: Choreographer, portal_url: str = "ws://localhost:8008/ws"):
        self.choreographer = choreographer
        self.portal_url = portal_url
        self.catalog: dict[str, ServiceCatalogEntry] = {}
        self.metrics: Counter = Counter()
        self._sessions: dict[str, Session] = {}
        self._hosts: dict[str, _ServantHost] = {}
        self._session_seq = 0

    # -- deployment -------------------------------------------------------

    def deploy(self, manifest_bytes: bytes, replace: bool = False) -> ServiceCatalogEntry:
        """Validate and publish a package. No servant is started here: the
        first request_service instantiates on demand."""
        manifest = parse_manifest(manifest_bytes)
        canonical = serialize_manifest(manifest)
        existing = self.catalog.get(manifest.name)
        if existing is not None:
            if existing.manifest_bytes == canonical:
                return existing  # idempotent redeploy
            if not replace:
                raise ConflictError(f"service {manifest.name!r} already deployed "
                                    "with different content")
        descriptor = stubgen.generate_stub(manifest, self.portal_url)
        entry = ServiceCatalogEntry(
            service=manifest.name,
            manifest=manifest,
            manifest_bytes=canonical,
            deployed_at=time.time(),
            stub_descriptor_bytes=stubgen.serialize_descriptor(descriptor),
        )
        self.catalog[manifest.name] = entry
        self.choreographer.register_service(manifest)
        self.metrics["packages_deployed"] += 1
        logger.info("deployed service %s", manifest.name)
        return entry

    # -- session lifecycle -------------------------------------------------

    def open_session(self, send: SendFn, peer: str = "") -> Session:
        self._session_seq += 1
        session = Session(session_id=f"s{self._session_seq:05d}", peer=peer, send=send)
        self._sessions[session.session_id] = session
        self.metrics["sessions_opened"] += 1
        return session

    async def close_session(self, session: Session) -> None:
        if session.closed:
            return
        session.closed = True
        self._sessions.pop(session.session_id, None)
        if session.pending:
            self.metrics["calls_abandoned_on_close"] += len(session.pending)
            session.pending.clear()
        for servant_id in list(session.granted.values()):
            try:
                terminated = self.choreographer.release(servant_id, session.session_id)
            except UnknownServant:
                continue
            if terminated:
                await self._stop_host(servant_id)
        session.granted.clear()
        self.metrics["sessions_closed"] += 1

    async def handle_frame(self, session: Session, raw: bytes) -> None:
        self.metrics["frames_in"] += 1
        try:
            e = decode(raw)
        except ProtocolError as exc:
            await self._send(session, Envelope(op="error",
                                               status=Status(code=exc.code, detail=exc.detail)))
            return
        if e.op == "ping":
            await self._send(session, Envelope(op="pong", id=e.id))
        elif e.op == "pong":
            pass
        elif e.op == "request_service":
            await self._handle_request_service(session, e)
        elif e.op in ("call", "publish"):
            await self._route(session, e)
        else:
            await self._send(session, Envelope(
                op="error", id=e.id,
                status=Status(code="invariant", detail=f"unexpected op {e.op!r} from client")))

    # -- SLA handshake ------------------------------------------------------

    async def _handle_request_service(self, session: Session, e: Envelope) -> None:
        service = e.target
        entry = self.catalog.get(service)
        if entry is None:
            await self._send(session, Envelope(
                op="error", id=e.id, target=service,
                status=Status(code="unknown_service", detail=service)))
            return

        # A stateful re-request replaces the old exclusive servant (fresh
        # state); a stateless re-request is answered from the existing grant.
        prior = session.granted.get(service)
        if prior is not None and entry.manifest.stateful:
            try:
                if self.choreographer.release(prior, session.session_id):
                    await self._stop_host(prior)
            except UnknownServant:
                pass
            del session.granted[service]

        try:
            record = self.choreographer.instantiate(service, session.session_id, e.sla)
        except InsufficientResources as exc:
            await self._send(session, Envelope(
                op="error", id=e.id, target=service,
                status=Status(code="insufficient_resources", detail=str(exc))))
            return
        except UnknownService:
            await self._send(session, Envelope(
                op="error", id=e.id, target=service,
                status=Status(code="unknown_service", detail=service)))
            return

        host = self._hosts.get(record.servant_id)
        if host is None:
            host = await self._start_host(record.servant_id, entry, session, e)
            if host is None:
                return  # launch failure already reported
        await host.ready.wait()

        # A stateless re-request may have been resolved to a different (larger)
        # shared servant; let go of the old one so its refcount can reach zero.
        if prior is not None and prior != record.servant_id and not entry.manifest.stateful:
            try:
                if self.choreographer.release(prior, session.session_id):
                    await self._stop_host(prior)
            except UnknownServant:
                pass

        session.granted[service] = record.servant_id
        self.metrics["grants"] += 1
        grant = canonical_json({"servant_id": record.servant_id})
        await self._send(session, Envelope(
            op="service_granted", id=e.id, target=service,
            payload=Payload(schema="blob", compression="none",
                            data=_b64(grant))))

    async def _start_host(self, servant_id: str, entry: ServiceCatalogEntry,
                          session: Session, e: Envelope) -> _ServantHost | None:
        record = self.choreographer.record(servant_id)
        host = _ServantHost(queue=asyncio.Queue(), ready=asyncio.Event())
        self._hosts[servant_id] = host
        try:
            host.sandbox = await start_sandbox(record, entry.manifest)
        except WorkloadLaunchError as exc:
            del self._hosts[servant_id]
            self.choreographer.terminate(servant_id)
            await self._send(session, Envelope(
                op="error", id=e.id, target=entry.service,
                status=Status(code="launch_failed", detail=str(exc))))
            return None
        host.task = asyncio.ensure_future(self._worker(servant_id, host))
        host.ready.set()
        self.metrics["servants_started"] += 1
        return host

    # -- routing ------------------------------------------------------------

    async def _route(self, session: Session, e: Envelope) -> None:
        servant_id = self._grant_for_target(session, e.target)
        host = self._hosts.get(servant_id) if servant_id else None
        if host is None or host.closing:
            await self._send(session, Envelope(
                op="error", id=e.id, target=e.target,
                status=Status(code="no_grant", detail=e.target)))
            return
        if e.op == "call":
            session.pending[e.id] = time.time()
        self.metrics["requests_routed"] += 1
        host.queue.put_nowait((e, session))

    def _grant_for_target(self, session: Session, target: str) -> str | None:
        for service, servant_id in session.granted.items():
            entry = self.catalog.get(service)
            if entry is None:
                continue
            iface = entry.manifest.interface
            if iface.rpc(target) is not None:
                return servant_id
            topic = iface.topic(target)
            if topic is not None and topic.direction == "inbound":
                return servant_id
        return None

    async def _worker(self, servant_id: str, host: _ServantHost) -> None:
        while True:
            item = await host.queue.get()
            if item is _SHUTDOWN:
                break
            call, session = item
            replies = await self._execute(host.sandbox, call)
            for reply in replies:
                if reply.op == "publish":
                    await self._fan_out(servant_id, reply)
                else:
                    session.pending.pop(call.id, None)
                    await self._send(session, reply)
            self.metrics["requests_served"] += 1

    async def _execute(self, sandbox: Sandbox, call: Envelope) -> list[Envelope]:
        if sandbox.stopped:
            return [Envelope(op="error", id=call.id, target=call.target,
                             status=Status(code="terminating"))]
        try:
            return await sandbox.execute_async(call)
        except UnknownTarget:
            return [Envelope(op="error", id=call.id, target=call.target,
                             status=Status(code="unknown_target", detail=call.target))]
        except SchemaError as exc:
            return [Envelope(op="error", id=call.id, target=call.target,
                             status=Status(code="schema_error", detail=str(exc)))]
        except ConnectionError as exc:
            return [Envelope(op="error", id=call.id, target=call.target,
                             status=Status(code="terminating", detail=str(exc)))]

    async def _fan_out(self, servant_id: str, publish: Envelope) -> None:
        try:
            holders = self.choreographer.holders(servant_id)
        except UnknownServant:
            return
        for session_id in sorted(holders):
            target = self._sessions.get(session_id)
            if target is not None and not target.closed:
                await self._send(target, publish)

    async def _send(self, session: Session, e: Envelope) -> None:
        if session.closed:
            return
        try:
            await session.send(encode(e))
            self.metrics["frames_out"] += 1
        except Exception:
            logger.exception("send to %s failed; closing session", session.session_id)
            await self.close_session(session)

    # -- management ----------------------------------------------------------

    async def terminate_servant(self, servant_id: str) -> None:
        """Management path: force a servant down and revoke matching grants."""
        self.choreographer.terminate(servant_id)  # raises UnknownServant
        await self._stop_host(servant_id)
        for session in self._sessions.values():
            for service, sid in list(session.granted.items()):
                if sid == servant_id:
                    del session.granted[service]

    async def _stop_host(self, servant_id: str) -> None:
        host = self._hosts.pop(servant_id, None)
        if host is None:
            return
        host.closing = True
        host.queue.put_nowait(_SHUTDOWN)
        if host.task is not None:
            await host.task
        await host.sandbox.stop()
        self.metrics["servants_terminated"] += 1

    async def shutdown(self) -> None:
        for session in list(self._sessions.values()):
            await self.close_session(session)
        for servant_id in list(self._hosts):
            try:
                self.choreographer.terminate(servant_id)
            except UnknownServant:
                pass
            await self._stop_host(servant_id)

    def servants_view(self) -> list[dict]:
        out = []
        for rec in self.choreographer.live_records():
            out.append({
                "servant_id": rec.servant_id,
                "service": rec.service,
                "owner_session": rec.owner_session,
                "node_id": rec.node_id,
                "state": rec.state,
                "quota": {"cpu_millicores": rec.quota.cpu_millicores,
                          "memory_mb": rec.quota.memory_mb},
            })
        return out


def _b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")
