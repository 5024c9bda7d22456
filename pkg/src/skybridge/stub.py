"""Client-side service stub: satisfaction-driven local restart, result racing,
and failover to a local copy of the package.

Policy summary, applied per completed remote request with time t:

    t <= t_desire        satisfaction q rises by 2 (capped at q_cap)
    t_desire < t <= t_max  q rises by 1 (capped)
    t > t_max            q halves

Crossing strictly below the threshold starts the local copy; strictly above
stops it. While the local copy runs, every request executes both remotely and
locally and the first result wins, but only remote completion times (or the
timeout marker 2*t_max for requests the cloud never answered) feed q.

A keepalive ping runs on a fixed interval; after three consecutive unanswered
pings the link is considered down and requests route to the local copy until
a pong is seen again. Stateful services never start/stop their local copy
from the satisfaction policy, only from failover, and re-negotiate a fresh
servant when the link comes back.
"""

from __future__ import annotations

import asyncio
import json
import logging
from dataclasses import dataclass, replace
from typing import Awaitable, Callable

from .manifest import ResourceQuota, WorkloadSpec
from .protocol import (KEEPALIVE_INTERVAL_MS, KEEPALIVE_MISS_LIMIT, Envelope,
                       Payload, ProtocolError, SlaDeclaration, SlaTimes,
                       compress_payload, decode, encode, payload_data)
from .servant import BuiltinSandbox, ExternalSandbox, Sandbox, WorkloadLaunchError
from .stubgen import StubDescriptor

logger = logging.getLogger(__name__)

Q_CAP_FACTOR = 4
TIMEOUT_FACTOR = 2

START_LOCAL = "start_local"
STOP_LOCAL = "stop_local"


class ServiceDown(RuntimeError):
    """Remote unreachable (or past its deadline) and no local fallback."""


class LocalLaunchError(RuntimeError):
    """A local fallback is specified but could not be launched."""


class GrantRefused(RuntimeError):
    def __init__(self, code: str, detail: str = ""):
        self.code = code
        self.detail = detail
        super().__init__(f"{code}: {detail}")


class CallFailed(RuntimeError):
    def __init__(self, code: str, detail: str = ""):
        self.code = code
        self.detail = detail
        super().__init__(f"{code}: {detail}")


@dataclass(frozen=True)
class SatisfactionState:
    q: float
    q_threshold: int
    t_desire_ms: int
    t_max_ms: int
    local_running: bool = False
    q_cap: float = 0.0

    @classmethod
    def initial(cls, q_threshold: int, t_desire_ms: int, t_max_ms: int) -> "SatisfactionState":
        # Neutral start: q == threshold emits no action on the first update.
        return cls(q=float(q_threshold), q_threshold=q_threshold,
                   t_desire_ms=t_desire_ms, t_max_ms=t_max_ms,
                   local_running=False, q_cap=float(Q_CAP_FACTOR * q_threshold))


def timeout_marker_ms(t_max_ms: int) -> float:
    """Completion time accounted for a request the cloud never answered."""
    return float(TIMEOUT_FACTOR * t_max_ms)


def update_satisfaction(s: SatisfactionState, t_current_ms: float
                        ) -> tuple[SatisfactionState, str | None]:
    """One satisfaction step for a completed request time; returns the new
    state and the start/stop action, if any. Pure; q is real-valued and
    halving is exact. q == threshold is deliberately actionless."""
    if t_current_ms <= s.t_desire_ms:
        q = min(s.q_cap, s.q + 2)
    elif t_current_ms <= s.t_max_ms:
        q = min(s.q_cap, s.q + 1)
    else:
        q = s.q / 2
    action = None
    local_running = s.local_running
    if q < s.q_threshold and not s.local_running:
        action = START_LOCAL
        local_running = True
    elif q > s.q_threshold and s.local_running:
        action = STOP_LOCAL
        local_running = False
    return replace(s, q=q, local_running=local_running), action


class KeepaliveMonitor:
    """Counts unanswered pings; flips a link up/down event at the miss limit."""

    def __init__(self, miss_limit: int = KEEPALIVE_MISS_LIMIT):
        self.miss_limit = miss_limit
        self.misses = 0
        self.awaiting_pong = False
        self.down = False

    def tick(self) -> str | None:
        event = None
        if self.awaiting_pong:
            self.misses += 1
            if self.misses >= self.miss_limit and not self.down:
                self.down = True
                event = "link_down"
        self.awaiting_pong = True
        return event

    def pong(self) -> str | None:
        self.awaiting_pong = False
        self.misses = 0
        if self.down:
            self.down = False
            return "link_up"
        return None


@dataclass
class RequestOutcome:
    request_id: str
    winner: str = ""
    result: bytes = b""
    serving_ms: float = 0.0       # caller-observed latency to the first result
    t_remote_ms: float | None = None  # remote completion or the timeout marker
    t_local_ms: float | None = None   # local execution time, when it ran to completion
    q_after: float | None = None
    action: str | None = None
    accounted: asyncio.Future | None = None


class Transport:
    """Byte-frame duplex link to the portal."""

    async def send(self, raw: bytes) -> None:
        raise NotImplementedError

    async def recv(self) -> bytes:
        raise NotImplementedError

    async def close(self) -> None:
        raise NotImplementedError


class WebSocketTransport(Transport):
    def __init__(self, ws):
        self._ws = ws

    @classmethod
    async def connect(cls, url: str) -> "WebSocketTransport":
        import websockets
        return cls(await websockets.connect(url))

    async def send(self, raw: bytes) -> None:
        await self._ws.send(raw.decode("utf-8"))

    async def recv(self) -> bytes:
        msg = await self._ws.recv()
        if isinstance(msg, str):
            return msg.encode("utf-8")
        return msg

    async def close(self) -> None:
        await self._ws.close()


class ServiceStub:
    """Mirrors a deployed service's interface; embeds the QoS policy.

    One stub instance serves one descriptor over one session and keeps a
    single satisfaction state for the service. Concurrent calls are
    supported; satisfaction updates apply in remote-completion order.
    """

    def __init__(self, descriptor: StubDescriptor,
                 connect: Callable[[], Awaitable[Transport]] | None = None,
                 *,
                 t_desire_ms: int | None = None,
                 t_max_ms: int | None = None,
                 q_threshold: int | None = None,
                 sla_resources: ResourceQuota | None = None,
                 local_cpu_millicores: int = 1000,
                 keepalive_interval_ms: int = KEEPALIVE_INTERVAL_MS,
                 keepalive_miss_limit: int = KEEPALIVE_MISS_LIMIT,
                 enable_keepalive: bool = True):
        self.descriptor = descriptor
        self._connect = connect or (lambda: WebSocketTransport.connect(descriptor.portal_url))
        t_desire = t_desire_ms if t_desire_ms is not None else descriptor.defaults.t_desire_ms
        t_max = t_max_ms if t_max_ms is not None else descriptor.defaults.t_max_ms
        if t_desire is None or t_max is None:
            raise ValueError("t_desire_ms and t_max_ms must be set (descriptor "
                             "defaults are unset)")
        if t_desire > t_max:
            raise ValueError("t_desire_ms must not exceed t_max_ms")
        qt = q_threshold if q_threshold is not None else descriptor.defaults.q_threshold
        self.state = SatisfactionState.initial(qt, t_desire, t_max)
        self.sla = SlaDeclaration(resources=sla_resources) if sla_resources is not None \
            else SlaDeclaration(times=SlaTimes(t_desire_ms=t_desire, t_max_ms=t_max))
        self.local_cpu_millicores = local_cpu_millicores
        self.keepalive_interval_ms = keepalive_interval_ms
        self.monitor = KeepaliveMonitor(keepalive_miss_limit)
        self.enable_keepalive = enable_keepalive
        self.events: list[tuple[float, str]] = []

        self._transport: Transport | None = None
        self._transport_dead = True
        self._down = False
        self._pending: dict[str, asyncio.Future] = {}
        self._subscribers: dict[str, list[Callable[[str, bytes], None]]] = {}
        self._seq = 0
        self._granted_servant: str | None = None
        self._grant_stale = False
        self._grant_lock: asyncio.Lock | None = None  # created inside the loop
        self._local: Sandbox | None = None
        self._local_lock: asyncio.Lock | None = None
        self._tasks: list[asyncio.Task] = []
        self._closing = False

    # -- lifecycle ---------------------------------------------------------

    async def start(self) -> None:
        await self._open_transport()
        if self.enable_keepalive:
            self._tasks.append(asyncio.ensure_future(self._keepalive_loop()))
        try:
            await self._ensure_grant()
        except ServiceDown:
            if not self._can_local():
                raise
            await self._enter_down("initial grant unanswered")
        except GrantRefused as exc:
            # a resource rejection is not a network failure: the link stays
            # up and every call re-negotiates, serving locally meanwhile
            if exc.code != "insufficient_resources" or not self._can_local():
                raise
            logger.warning("grant refused (%s); relying on the local copy", exc.code)

    async def close(self) -> None:
        self._closing = True
        for task in self._tasks:
            task.cancel()
        for task in self._tasks:
            try:
                await task
            except (asyncio.CancelledError, Exception):
                pass
        self._tasks.clear()
        if self._local is not None:
            await self._local.stop()
            self._local = None
        if self._transport is not None and not self._transport_dead:
            try:
                await self._transport.close()
            except Exception:
                pass
        self._transport = None

    async def _open_transport(self) -> None:
        self._transport = await self._connect()
        self._transport_dead = False
        self._tasks.append(asyncio.ensure_future(self._recv_loop()))

    # -- time helpers --------------------------------------------------------

    @staticmethod
    def _now_ms() -> float:
        return asyncio.get_running_loop().time() * 1000.0

    @property
    def t_max_ms(self) -> int:
        return self.state.t_max_ms

    @property
    def link_down(self) -> bool:
        return self._down

    # -- public interface ----------------------------------------------------

    async def call(self, target: str, data: bytes) -> RequestOutcome:
        """Invoke an RPC; returns at the first arriving result.

        The request always goes to the cloud while the link is up; a running
        local copy races it. The outcome's satisfaction fields are completed
        when the remote side is accounted (see ``RequestOutcome.accounted``).
        """
        rpc = self.descriptor.interface.rpc(target)
        if rpc is None:
            raise KeyError(f"service has no rpc {target!r}")
        codec = self.descriptor.compression_policy.get(rpc.request_schema, "none")
        payload = compress_payload(rpc.request_schema, data, codec)
        self._seq += 1
        req_id = f"c{self._seq:06d}"
        call_env = Envelope(op="call", id=req_id, target=target, payload=payload)
        outcome = RequestOutcome(request_id=req_id,
                                 accounted=asyncio.get_running_loop().create_future())
        started = self._now_ms()

        if self._down:
            await self._serve_locally(outcome, call_env, started)
            return outcome

        try:
            await self._ensure_grant()
        except ServiceDown:
            if self._can_local():
                await self._serve_locally(outcome, call_env, started)
                return outcome
            self._account(outcome, timeout_marker_ms(self.t_max_ms))
            raise
        except GrantRefused as exc:
            # a resource rejection is the cloud saying no; failover applies
            if exc.code == "insufficient_resources" and self._can_local():
                await self._serve_locally(outcome, call_env, started)
                return outcome
            raise

        fut: asyncio.Future = asyncio.get_running_loop().create_future()
        self._pending[req_id] = fut
        sent = await self._transport_send(call_env)
        if not sent:
            self._pending.pop(req_id, None)
            if self._can_local():
                await self._serve_locally(outcome, call_env, started)
                return outcome
            self._account(outcome, timeout_marker_ms(self.t_max_ms))
            raise ServiceDown("link lost and no local fallback")

        local_task = None
        if self.state.local_running and self._can_local():
            local_task = asyncio.ensure_future(self._run_local_timed(call_env))
            local_task.add_done_callback(_consume_exception)
        asyncio.ensure_future(self._account_remote(outcome, req_id, fut, started))

        waiters = {fut} | ({local_task} if local_task else set())
        done, _ = await asyncio.wait(waiters, return_when=asyncio.FIRST_COMPLETED,
                                     timeout=TIMEOUT_FACTOR * self.t_max_ms / 1000)

        if fut in done:
            env = fut.result()
            if env.op == "response":
                outcome.winner = "remote"
                outcome.serving_ms = self._now_ms() - started
                outcome.result = payload_data(env.payload) if env.payload else b""
                if (local_task is not None and local_task.done()
                        and not local_task.cancelled()
                        and local_task.exception() is None):
                    _, outcome.t_local_ms = local_task.result()
                return outcome
            # remote reported an error; fall back to the local racer if any
            if local_task is None:
                if self._can_local():
                    await self._finish_with_oneshot(outcome, call_env, started)
                    return outcome
                raise CallFailed(env.status.code if env.status else "error",
                                 env.status.detail if env.status else "")

        if local_task is not None:
            env_l, t_local = await local_task  # first (or only) usable result
            self._fill_local_win(outcome, env_l, t_local, started)
            return outcome

        # Deadline passed with no local racer: one-shot fallback or give up.
        if self._can_local():
            await self._finish_with_oneshot(outcome, call_env, started)
            return outcome
        raise ServiceDown(f"no result within {TIMEOUT_FACTOR}*t_max and no local fallback")

    async def publish(self, topic: str, data: bytes) -> None:
        spec = self.descriptor.interface.topic(topic)
        if spec is None or spec.direction != "inbound":
            raise KeyError(f"service has no inbound topic {topic!r}")
        codec = self.descriptor.compression_policy.get(spec.schema, "none")
        env = Envelope(op="publish", target=topic,
                       payload=compress_payload(spec.schema, data, codec))
        if self._down:
            if self._can_local():
                await self._ensure_local("failover")
                await self._run_local_timed(env)
            return
        await self._transport_send(env)

    def subscribe(self, topic: str, handler: Callable[[str, bytes], None]) -> None:
        spec = self.descriptor.interface.topic(topic)
        if spec is None or spec.direction != "outbound":
            raise KeyError(f"service has no outbound topic {topic!r}")
        self._subscribers.setdefault(topic, []).append(handler)

    # -- local execution -----------------------------------------------------

    def _can_local(self) -> bool:
        return self.descriptor.local_fallback is not None

    async def _ensure_local(self, reason: str) -> Sandbox:
        if self._local is not None and not self._local.stopped:
            return self._local
        workload: WorkloadSpec = self.descriptor.local_fallback
        quota = ResourceQuota(cpu_millicores=self.local_cpu_millicores, memory_mb=512)
        cls = ExternalSandbox if workload.kind == "external_process" else BuiltinSandbox
        sandbox = cls("local", self.descriptor.interface, self.descriptor.stateful,
                      workload, quota)
        try:
            await sandbox.start()
        except WorkloadLaunchError as exc:
            raise LocalLaunchError(str(exc)) from exc
        self._local = sandbox
        self._event(f"local_started:{reason}")
        return sandbox

    async def _stop_local(self) -> None:
        if self._local is not None:
            await self._local.stop()
            self._local = None
            self._event("local_stopped")

    async def _run_local_timed(self, env: Envelope) -> tuple[Envelope | None, float]:
        if self._local_lock is None:
            self._local_lock = asyncio.Lock()
        sandbox = await self._ensure_local("race")
        begun = self._now_ms()
        async with self._local_lock:
            replies = await sandbox.execute_async(env)
        t_local = self._now_ms() - begun
        for reply in replies:
            if reply.op == "publish":
                self._dispatch_publish(reply)
        responses = [r for r in replies if r.op == "response"]
        return (responses[0] if responses else None), t_local

    async def _serve_locally(self, outcome: RequestOutcome, call_env: Envelope,
                             started: float) -> None:
        """Failover path: the cloud is not consulted; the request is accounted
        with the timeout marker."""
        if not self._can_local():
            self._account(outcome, timeout_marker_ms(self.t_max_ms))
            raise ServiceDown("link down and no local fallback")
        await self._ensure_local("failover")
        env_l, t_local = await self._run_local_timed(call_env)
        self._fill_local_win(outcome, env_l, t_local, started)
        self._account(outcome, timeout_marker_ms(self.t_max_ms))

    async def _finish_with_oneshot(self, outcome: RequestOutcome, call_env: Envelope,
                                   started: float) -> None:
        await self._ensure_local("timeout_fallback")
        env_l, t_local = await self._run_local_timed(call_env)
        self._fill_local_win(outcome, env_l, t_local, started)

    def _fill_local_win(self, outcome: RequestOutcome, env_l: Envelope | None,
                        t_local: float, started: float) -> None:
        outcome.winner = "local"
        outcome.t_local_ms = t_local
        outcome.serving_ms = self._now_ms() - started
        outcome.result = payload_data(env_l.payload) if env_l and env_l.payload else b""

    # -- satisfaction accounting ----------------------------------------------

    async def _account_remote(self, outcome: RequestOutcome, req_id: str,
                              fut: asyncio.Future, started: float) -> None:
        try:
            env = await asyncio.wait_for(asyncio.shield(fut),
                                         TIMEOUT_FACTOR * self.t_max_ms / 1000)
            if env.op == "response":
                t_remote = self._now_ms() - started
            else:
                # a cloud-side error is a QoS violation, not a completion
                t_remote = timeout_marker_ms(self.t_max_ms)
        except asyncio.TimeoutError:
            self._pending.pop(req_id, None)  # late responses are discarded by id
            t_remote = timeout_marker_ms(self.t_max_ms)
        self._account(outcome, t_remote)

    def _account(self, outcome: RequestOutcome, t_remote_ms: float) -> None:
        new_state, action = update_satisfaction(self.state, t_remote_ms)
        if self.descriptor.stateful:
            # Stateful services keep q for metrics only; the local copy is
            # governed exclusively by failover.
            new_state = replace(new_state, local_running=self.state.local_running)
            action = None
        if action == START_LOCAL and not self._can_local():
            new_state = replace(new_state, local_running=False)
            action = None
        self.state = new_state
        outcome.t_remote_ms = t_remote_ms
        outcome.q_after = new_state.q
        outcome.action = action
        if action is not None:
            asyncio.ensure_future(self._apply_action(action))
        if outcome.accounted is not None and not outcome.accounted.done():
            outcome.accounted.set_result(True)

    async def _apply_action(self, action: str) -> None:
        if action == START_LOCAL:
            try:
                await self._ensure_local("policy")
            except LocalLaunchError:
                logger.warning("local fallback failed to launch")
                self.state = replace(self.state, local_running=False)
        elif action == STOP_LOCAL:
            await self._stop_local()

    # -- session plumbing ------------------------------------------------------

    async def _ensure_grant(self) -> None:
        if self._grant_lock is None:
            self._grant_lock = asyncio.Lock()
        async with self._grant_lock:
            if self._granted_servant is not None and not self._grant_stale:
                return
            if self._down or self._transport_dead:
                raise ServiceDown("link is down")
            self._seq += 1
            req_id = f"g{self._seq:06d}"
            fut: asyncio.Future = asyncio.get_running_loop().create_future()
            self._pending[req_id] = fut
            env = Envelope(op="request_service", id=req_id,
                           target=self.descriptor.service, sla=self.sla)
            if not await self._transport_send(env):
                self._pending.pop(req_id, None)
                raise ServiceDown("link lost during service request")
            try:
                reply = await asyncio.wait_for(asyncio.shield(fut),
                                               TIMEOUT_FACTOR * self.t_max_ms / 1000)
            except asyncio.TimeoutError:
                self._pending.pop(req_id, None)
                raise ServiceDown("service request unanswered")
            if reply.op != "service_granted":
                code = reply.status.code if reply.status else "error"
                raise GrantRefused(code, reply.status.detail if reply.status else "")
            grant = payload_data(reply.payload) if reply.payload else b"{}"
            self._granted_servant = json.loads(grant.decode("utf-8")).get("servant_id")
            self._grant_stale = False
            self._event(f"granted:{self._granted_servant}")

    async def _transport_send(self, env: Envelope) -> bool:
        if self._transport is None or self._transport_dead:
            return False
        try:
            await self._transport.send(encode(env))
            return True
        except Exception:
            self._transport_dead = True
            await self._enter_down("send failed")
            return False

    async def _recv_loop(self) -> None:
        try:
            while True:
                raw = await self._transport.recv()
                try:
                    env = decode(raw)
                except ProtocolError:
                    logger.warning("undecodable frame from portal")
                    continue
                if env.op == "pong":
                    await self._on_pong()
                elif env.op in ("response", "error", "service_granted") and env.id:
                    fut = self._pending.pop(env.id, None)
                    if fut is not None and not fut.done():
                        fut.set_result(env)
                elif env.op == "publish":
                    self._dispatch_publish(env)
        except asyncio.CancelledError:
            raise
        except Exception:
            if not self._closing:
                self._transport_dead = True
                await self._enter_down("connection lost")

    def _dispatch_publish(self, env: Envelope) -> None:
        handlers = self._subscribers.get(env.target, [])
        if not handlers:
            return
        data = payload_data(env.payload) if env.payload else b""
        for handler in handlers:
            try:
                handler(env.target, data)
            except Exception:
                logger.exception("subscriber for %s failed", env.target)

    # -- failover ---------------------------------------------------------------

    async def _keepalive_loop(self) -> None:
        interval = self.keepalive_interval_ms / 1000
        while True:
            await asyncio.sleep(interval)
            if self._transport_dead and not self._closing:
                await self._try_reconnect()
            event = self.monitor.tick()
            if event == "link_down":
                await self._enter_down("missed pongs")
            await self._send_ping()

    async def _send_ping(self) -> None:
        if self._transport is None or self._transport_dead:
            return
        try:
            await self._transport.send(encode(Envelope(op="ping")))
        except Exception:
            self._transport_dead = True
            await self._enter_down("ping send failed")

    async def _try_reconnect(self) -> None:
        try:
            await self._open_transport()
        except Exception:
            return
        # fresh session on the portal: all grants are gone
        self._granted_servant = None
        self._grant_stale = False
        self.monitor.awaiting_pong = False
        self.monitor.misses = 0

    async def _enter_down(self, reason: str) -> None:
        if self._down:
            return
        self._down = True
        self.monitor.down = True
        self._event(f"link_down:{reason}")
        if self._can_local():
            try:
                await self._ensure_local("failover")
                if not self.descriptor.stateful:
                    self.state = replace(self.state, local_running=True)
            except LocalLaunchError:
                logger.warning("failover requested but local copy failed to launch")

    async def _on_pong(self) -> None:
        event = self.monitor.pong()
        if event == "link_up" and self._down:
            self._down = False
            self._event("link_up")
            if self.descriptor.stateful:
                # fresh servant, fresh state: re-negotiate before the next call
                self._grant_stale = True
                if self.state.local_running or self._local is not None:
                    await self._stop_local()
                    self.state = replace(self.state, local_running=False)
            # stateless services resume racing immediately; the satisfaction
            # policy will stop the local copy once the cloud looks healthy

    def _event(self, kind: str) -> None:
        self.events.append((self._now_ms(), kind))
        logger.debug("stub event: %s", kind)


def _consume_exception(task: asyncio.Task) -> None:
    """Mark a background racer's failure as retrieved; awaiters still see it."""
    if not task.cancelled():
        task.exception()


def local_result_equivalence(descriptor: StubDescriptor, target: str,
                             data: bytes) -> bool:
    """Test support: a fresh local copy and a fresh (cloud-quota) sandbox
    produce identical result bytes for the same request."""
    rpc = descriptor.interface.rpc(target)
    if rpc is None or descriptor.local_fallback is None:
        return False
    payload = compress_payload(rpc.request_schema, data, "none")
    env = Envelope(op="call", id="eq", target=target, payload=payload)
    results = []
    for cpu in (1000, 4000):
        sandbox = BuiltinSandbox("eq", descriptor.interface, descriptor.stateful,
                                 descriptor.local_fallback,
                                 ResourceQuota(cpu_millicores=cpu, memory_mb=256))
        t = sandbox.plan(env)  # noqa: F841  (timing differs; bytes must not)
        replies = sandbox.complete(env)
        results.append(encode(replies[0]) if replies else b"")
    return results[0] == results[1]
