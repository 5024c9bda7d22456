"""Sandboxed package execution: the runtime behind every running servant.

Builtin workloads model compute cost analytically: a request's service time
is (base + per_kb * payload_kb) scaled by the granted CPU quota, plus linear
growth in stored frames for stateful packages. The wait is realized against
the ambient clock (real sleep in live mode, virtual sleep under the harness
loop), and results are synthesized deterministically from request bytes so
local and remote executions of the same stream are byte-comparable.

External-process workloads launch a child that speaks newline-delimited
protocol envelopes on stdin/stdout: for every inbound envelope the child
streams any topic publishes, then exactly one terminal frame (response or
error for calls, pong as the ack for pings and inbound publishes).
"""

from __future__ import annotations

import asyncio
import hashlib
import logging
import os
import shlex
import time
from dataclasses import dataclass

from . import schemas
from .choreographer import ServantRecord
from .manifest import InterfaceSpec, PackageManifest, ResourceQuota, WorkloadSpec
from .protocol import (DEFAULT_CODEC_BY_SCHEMA, CodecError, Envelope, Payload,
                       ProtocolError, Status, compress_payload, decode, encode,
                       payload_data)
from .schemas import SchemaError

logger = logging.getLogger(__name__)

HANDSHAKE_TIMEOUT_S = 5.0

DETECTION_LABELS = ("person", "chair", "bottle", "dog", "monitor", "plant")


class UnknownTarget(KeyError):
    pass


class WorkloadLaunchError(RuntimeError):
    pass


@dataclass(frozen=True)
class BuiltinWorkloadModel:
    base_work_millicore_ms: float = 0.0
    per_kb_work_millicore_ms: float = 0.0
    state_growth_ms_per_frame: float = 0.0

    @classmethod
    def from_spec(cls, workload: WorkloadSpec) -> "BuiltinWorkloadModel":
        params = workload.params
        return cls(
            base_work_millicore_ms=float(params.get("base_work_millicore_ms", 0.0)),
            per_kb_work_millicore_ms=float(params.get("per_kb_work_millicore_ms", 0.0)),
            state_growth_ms_per_frame=float(params.get("state_growth_ms", 0.0)),
        )

    def service_time_ms(self, payload_bytes: int, cpu_millicores: int,
                        frames_stored: int) -> float:
        work = self.base_work_millicore_ms + self.per_kb_work_millicore_ms * (payload_bytes / 1024)
        return work * (1000 / cpu_millicores) + self.state_growth_ms_per_frame * frames_stored


def synthesize(schema: str, request: bytes, frames: int | None = None,
               rolling: bytes | None = None) -> bytes:
    """Deterministic result bytes for a builtin workload.

    Keyed by a hash of the request, or by the rolling state digest when the
    workload is stateful (frames/rolling given), so identical request streams
    always produce identical results wherever they run.
    """
    d = hashlib.sha256(request).digest()
    if schema == "detections":
        try:
            width, height = schemas.raster_size(request)
        except SchemaError:
            width = height = 64
        boxes = []
        for i in range(1 + d[0] % 3):
            boxes.append({
                "label": DETECTION_LABELS[d[1 + i] % len(DETECTION_LABELS)],
                "confidence": round(0.5 + d[4 + i] / 510, 4),
                "x": d[8 + i] % max(1, width),
                "y": d[12 + i] % max(1, height),
                "w": 1 + d[16 + i] % 16,
                "h": 1 + d[20 + i] % 16,
            })
        return schemas.encode_detections(boxes)
    if schema == "blob":
        if frames is not None:
            doc = {"checksum": (rolling or b"").hex(), "frames": frames}
        else:
            doc = {"checksum": d.hex()}
        return schemas.canonical_json(doc)
    if schema == "grid_map":
        return schemas.encode_grid_map(16, 16, (rolling if rolling is not None else d) * 8)
    if schema == "image_rgb":
        return schemas.encode_image_rgb(8, 8, (d * 6))
    if schema == "pose":
        return schemas.encode_pose(
            int.from_bytes(d[0:4], "big") / 2**32 * 10,
            int.from_bytes(d[4:8], "big") / 2**32 * 10,
            int.from_bytes(d[8:12], "big") / 2**32 * 6.283185307179586,
        )
    raise SchemaError(f"cannot synthesize schema {schema!r}")


_ROLLING_SEED = b"\x00" * 32


class Sandbox:
    """Isolated execution context for one servant. Interaction happens only
    through routed envelopes; private state never leaks across sandboxes."""

    def __init__(self, servant_id: str, interface: InterfaceSpec, stateful: bool,
                 workload: WorkloadSpec, quota: ResourceQuota):
        self.servant_id = servant_id
        self.interface = interface
        self.stateful = stateful
        self.workload = workload
        self.quota = quota
        self.stopped = False

    async def start(self) -> None:
        pass

    def plan(self, call: Envelope) -> float:
        """Validate a call/publish and return its service time in ms.

        Raises UnknownTarget or SchemaError; leaves state untouched so the
        caller controls when the timed wait happens.
        """
        raise NotImplementedError

    def complete(self, call: Envelope) -> list[Envelope]:
        """Apply state effects and synthesize the reply/publishes for a call
        previously accepted by plan()."""
        raise NotImplementedError

    async def execute_async(self, call: Envelope) -> list[Envelope]:
        t_ms = self.plan(call)
        if t_ms > 0:
            await asyncio.sleep(t_ms / 1000)
        return self.complete(call)

    def execute(self, call: Envelope) -> list[Envelope]:
        """Blocking variant: realizes the service time as an actual timed wait."""
        t_ms = self.plan(call)
        if t_ms > 0:
            time.sleep(t_ms / 1000)
        return self.complete(call)

    async def stop(self) -> None:
        self.stopped = True


class BuiltinSandbox(Sandbox):
    def __init__(self, servant_id, interface, stateful, workload, quota):
        super().__init__(servant_id, interface, stateful, workload, quota)
        self.model = BuiltinWorkloadModel.from_spec(workload)
        self._frames = 0
        self._rolling = _ROLLING_SEED

    @property
    def frames_stored(self) -> int:
        return self._frames

    def _request_bytes(self, call: Envelope) -> bytes:
        declared = self._declared_schema(call)
        if call.payload is None:
            return b""
        if call.payload.schema != declared:
            raise SchemaError(f"target {call.target!r} expects schema {declared!r}, "
                              f"got {call.payload.schema!r}")
        try:
            return payload_data(call.payload)
        except CodecError as exc:
            raise SchemaError(f"payload does not decode: {exc}") from exc

    def _declared_schema(self, call: Envelope) -> str:
        if call.op == "call":
            rpc = self.interface.rpc(call.target)
            if rpc is None:
                raise UnknownTarget(call.target)
            return rpc.request_schema
        topic = self.interface.topic(call.target)
        if topic is None or topic.direction != "inbound":
            raise UnknownTarget(call.target)
        return topic.schema

    def plan(self, call: Envelope) -> float:
        data = self._request_bytes(call)
        return self.model.service_time_ms(len(data), self.quota.cpu_millicores,
                                          self._frames if self.stateful else 0)

    def complete(self, call: Envelope) -> list[Envelope]:
        data = self._request_bytes(call)
        if self.stateful and call.payload is not None:
            self._rolling = hashlib.sha256(self._rolling + data).digest()
            self._frames += 1
        out: list[Envelope] = []
        if call.op == "call":
            rpc = self.interface.rpc(call.target)
            out.append(Envelope(op="response", id=call.id, target=call.target,
                                payload=self._make_payload(rpc.response_schema, data)))
        if call.payload is not None:
            for topic in self.interface.topics:
                if topic.direction == "outbound":
                    out.append(Envelope(op="publish", target=topic.name,
                                        payload=self._make_payload(topic.schema, data)))
        return out

    def _make_payload(self, schema: str, request: bytes) -> Payload:
        if self.stateful:
            result = synthesize(schema, request, self._frames, self._rolling)
        else:
            result = synthesize(schema, request)
        return compress_payload(schema, result, DEFAULT_CODEC_BY_SCHEMA[schema])


class ExternalSandbox(Sandbox):
    """Child process speaking newline-delimited envelopes on stdio."""

    def __init__(self, servant_id, interface, stateful, workload, quota):
        super().__init__(servant_id, interface, stateful, workload, quota)
        self._proc: asyncio.subprocess.Process | None = None
        self._io_lock = asyncio.Lock()

    async def start(self) -> None:
        command = str(self.workload.params.get("command", ""))
        env = dict(os.environ)
        env["SKYBRIDGE_MEMORY_MB"] = str(self.quota.memory_mb)  # advisory only
        env["SKYBRIDGE_CPU_MILLICORES"] = str(self.quota.cpu_millicores)
        try:
            self._proc = await asyncio.create_subprocess_exec(
                *shlex.split(command),
                stdin=asyncio.subprocess.PIPE,
                stdout=asyncio.subprocess.PIPE,
                env=env,
            )
        except (OSError, ValueError) as exc:
            raise WorkloadLaunchError(f"cannot launch {command!r}: {exc}") from exc
        try:
            batch = await asyncio.wait_for(
                self._roundtrip(Envelope(op="ping")), HANDSHAKE_TIMEOUT_S)
        except (asyncio.TimeoutError, ConnectionError, OSError) as exc:
            await self.stop()
            raise WorkloadLaunchError(f"no handshake from {command!r}: {exc}") from exc
        except ProtocolError as exc:
            await self.stop()
            raise WorkloadLaunchError(f"bad handshake from {command!r}: {exc}") from exc
        if batch[-1].op != "pong":
            await self.stop()
            raise WorkloadLaunchError(f"bad handshake op {batch[-1].op!r} from {command!r}")

    async def _roundtrip(self, e: Envelope) -> list[Envelope]:
        """One request, one batch of replies.

        The child streams any topic publishes first and always finishes the
        batch with a terminal frame: response or error for calls, pong for
        pings and inbound publishes.
        """
        assert self._proc is not None
        async with self._io_lock:
            self._proc.stdin.write(encode(e) + b"\n")
            await self._proc.stdin.drain()
            batch: list[Envelope] = []
            while True:
                line = await self._proc.stdout.readline()
                if not line:
                    raise ConnectionError("workload process closed its stdout")
                reply = decode(line.strip())
                batch.append(reply)
                if reply.op != "publish":
                    return batch

    def plan(self, call: Envelope) -> float:
        if call.op == "call" and self.interface.rpc(call.target) is None:
            raise UnknownTarget(call.target)
        return 0.0  # child realizes its own service time

    async def execute_async(self, call: Envelope) -> list[Envelope]:
        self.plan(call)
        if self._proc is None or self.stopped:
            return [Envelope(op="error", id=call.id, target=call.target,
                             status=Status(code="terminating"))]
        batch = await self._roundtrip(call)
        # drop the transport-level pong ack and put the terminal reply first,
        # matching the builtin execution order (response, then publishes)
        terminal = [e for e in batch if e.op not in ("publish", "pong")]
        return terminal + [e for e in batch if e.op == "publish"]

    def execute(self, call: Envelope) -> list[Envelope]:
        raise NotImplementedError("external workloads are asyncio-only")

    def complete(self, call: Envelope) -> list[Envelope]:
        raise NotImplementedError("external workloads are asyncio-only")

    async def stop(self) -> None:
        self.stopped = True
        proc, self._proc = self._proc, None
        if proc is not None and proc.returncode is None:
            proc.terminate()
            try:
                await asyncio.wait_for(proc.wait(), 2.0)
            except asyncio.TimeoutError:
                proc.kill()
                await proc.wait()


async def start_sandbox(record: ServantRecord, manifest: PackageManifest) -> Sandbox:
    """Bring up the sandbox for a freshly instantiated servant record."""
    cls = ExternalSandbox if manifest.workload.kind == "external_process" else BuiltinSandbox
    sandbox = cls(record.servant_id, manifest.interface, manifest.stateful,
                  manifest.workload, record.quota)
    await sandbox.start()
    record.advance("running")
    return sandbox
