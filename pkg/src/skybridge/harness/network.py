"""Modeled network conditions between stubs and the portal.

A scenario's timeline is segmented by request index: the segment containing
the most recently issued request decides latency, jitter, bandwidth and
whether the link is up at all. Down segments drop every frame in both
directions, which also suppresses keepalive pongs and so drives the stub's
link-down detector.

Delivery per frame: base_latency + U(-jitter, +jitter) + bytes * 8 / bandwidth_kbps
(milliseconds; bandwidth in SI kilobits per second). Frames on one direction
never overtake each other, matching a single ordered stream.
"""

from __future__ import annotations

import asyncio
import random
from dataclasses import dataclass

from ..portal.core import PortalCore, Session
from ..stub import Transport


@dataclass(frozen=True)
class NetworkSegment:
    from_request: int
    to_request: int
    base_latency_ms: float = 0.0
    jitter_ms: float = 0.0
    bandwidth_kbps: float | None = None
    up: bool = True


class NetworkModel:
    def __init__(self, segments: list[NetworkSegment], rng: random.Random):
        self.segments = sorted(segments, key=lambda s: s.from_request)
        self.rng = rng
        self.current_request = 0

    @classmethod
    def flat(cls, base_latency_ms: float = 0.0, jitter_ms: float = 0.0,
             bandwidth_kbps: float | None = None,
             rng: random.Random | None = None) -> "NetworkModel":
        segment = NetworkSegment(0, 2**31, base_latency_ms, jitter_ms, bandwidth_kbps)
        return cls([segment], rng or random.Random(0))

    def validate_cover(self, request_count: int) -> None:
        expected = 0
        for seg in self.segments:
            if seg.from_request != expected:
                raise ValueError(f"network timeline has a gap or overlap at "
                                 f"request {expected}")
            if seg.to_request < seg.from_request:
                raise ValueError("network segment ends before it starts")
            expected = seg.to_request + 1
        if expected < request_count:
            raise ValueError("network timeline does not cover the full run")

    def note_issue(self, request_index: int) -> None:
        self.current_request = request_index

    def _active(self) -> NetworkSegment:
        for seg in self.segments:
            if seg.from_request <= self.current_request <= seg.to_request:
                return seg
        return self.segments[-1]

    def delay_ms(self, n_bytes: int) -> float | None:
        """Delivery delay for a frame, or None when the link is down."""
        seg = self._active()
        if not seg.up:
            return None
        delay = seg.base_latency_ms
        if seg.jitter_ms:
            delay += self.rng.uniform(-seg.jitter_ms, seg.jitter_ms)
        if seg.bandwidth_kbps:
            delay += n_bytes * 8 / seg.bandwidth_kbps
        return max(0.0, delay)


class SimLink(Transport):
    """In-process duplex link binding a stub to a portal session through the
    network model. The client half implements the stub Transport interface."""

    def __init__(self, core: PortalCore, network: NetworkModel, peer: str = "sim"):
        self._core = core
        self._network = network
        self._inbox: asyncio.Queue[bytes] = asyncio.Queue()
        self._closed = False
        self._last_up_arrival = 0.0   # client -> portal FIFO floor
        self._last_down_arrival = 0.0  # portal -> client FIFO floor
        self.session: Session = core.open_session(self._to_client, peer=peer)

    async def send(self, raw: bytes) -> None:
        if self._closed:
            raise ConnectionError("link closed")
        delay = self._network.delay_ms(len(raw))
        if delay is None:
            return  # dropped
        loop = asyncio.get_running_loop()
        arrival = max(loop.time() + delay / 1000, self._last_up_arrival)
        self._last_up_arrival = arrival
        loop.call_at(arrival, self._deliver_to_portal, raw)

    def _deliver_to_portal(self, raw: bytes) -> None:
        if not self._closed:
            asyncio.ensure_future(self._core.handle_frame(self.session, raw))

    async def _to_client(self, raw: bytes) -> None:
        delay = self._network.delay_ms(len(raw))
        if delay is None:
            return
        loop = asyncio.get_running_loop()
        arrival = max(loop.time() + delay / 1000, self._last_down_arrival)
        self._last_down_arrival = arrival
        loop.call_at(arrival, self._inbox.put_nowait, raw)

    async def recv(self) -> bytes:
        if self._closed:
            raise ConnectionError("link closed")
        return await self._inbox.get()

    async def close(self) -> None:
        if not self._closed:
            self._closed = True
            await self._core.close_session(self.session)
