#!/usr/bin/env python3
"""Generate the shared protocol conformance suite.

Each case is a list of raw frames to send over a fresh connection and a list
of matchers for the frames the portal must reply with. Expected frames are
recorded from the reference portal and frozen; grants and error details are
matched by fields (servant ids and prose vary), everything else is exact.

Usage: python3 scripts/gen_conformance.py > conformance/suite.json
"""

from __future__ import annotations

import asyncio
import json
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from skybridge import demo, schemas  # noqa: E402
from skybridge.choreographer import Choreographer, NodePool, SlaDictionary  # noqa: E402
from skybridge.portal.core import PortalCore  # noqa: E402
from skybridge.protocol import (Envelope, SlaDeclaration, SlaTimes,  # noqa: E402
                                compress_payload, encode)
from skybridge.manifest import ResourceQuota  # noqa: E402


def detect_image(shade_step: int) -> bytes:
    pixels = bytes(((j + shade_step) % 256) for j in range(3 * 16 * 16))
    return schemas.encode_image_rgb(16, 16, pixels)


def mapper_frame(fill: int) -> bytes:
    return schemas.encode_grid_map(8, 8, bytes([fill]) * 64)


def grant_frame(req_id: str, service: str, t_desire=100, t_max=300) -> str:
    e = Envelope(op="request_service", id=req_id, target=service,
                 sla=SlaDeclaration(times=SlaTimes(t_desire, t_max)))
    return encode(e).decode()


def call_frame(req_id: str, target: str, schema: str, data: bytes, codec: str) -> str:
    e = Envelope(op="call", id=req_id, target=target,
                 payload=compress_payload(schema, data, codec))
    return encode(e).decode()


def publish_frame(target: str, schema: str, data: bytes, codec: str) -> str:
    e = Envelope(op="publish", target=target,
                 payload=compress_payload(schema, data, codec))
    return encode(e).decode()


CASES = [
    ("ping_pong", ['{"op":"ping"}'], 1),
    ("ping_echoes_id", ['{"id":"k7","op":"ping"}'], 1),
    ("grant_with_times", [grant_frame("g1", "detect")], 1),
    ("grant_with_resources",
     [encode(Envelope(op="request_service", id="g2", target="detect",
                      sla=SlaDeclaration(resources=ResourceQuota(2000, 512)))).decode()], 1),
    ("grant_unknown_service", [grant_frame("g3", "warp_drive")], 1),
    ("grant_rejects_both_sla_forms",
     ['{"id":"g4","op":"request_service","sla":{"resources":{"cpu_millicores":2000,'
      '"memory_mb":512},"times":{"t_desire_ms":100,"t_max_ms":300}},"target":"detect"}'], 1),
    ("grant_rejects_empty_sla",
     ['{"id":"g5","op":"request_service","sla":{},"target":"detect"}'], 1),
    ("call_without_grant",
     [call_frame("c1", "detect", "image_rgb", detect_image(0), "none")], 1),
    ("call_missing_id", ['{"op":"call","target":"detect"}'], 1),
    ("malformed_frame", ['this is not an envelope'], 1),
    ("detect_roundtrip_uncompressed",
     [grant_frame("g6", "detect"),
      call_frame("c2", "detect", "image_rgb", detect_image(1), "none")], 2),
    ("detect_roundtrip_deflate",
     [grant_frame("g7", "detect"),
      call_frame("c3", "detect", "image_rgb", detect_image(2), "deflate")], 2),
    ("mapper_two_frames",
     [grant_frame("g8", "mapper", 400, 800),
      call_frame("m1", "add_frame", "grid_map", mapper_frame(3), "zlib"),
      call_frame("m2", "add_frame", "grid_map", mapper_frame(4), "zlib")], 5),
    ("publish_to_inbound_topic",
     [grant_frame("g9", "mapper", 400, 800),
      publish_frame("frames", "grid_map", mapper_frame(5), "zlib")], 2),
    ("stateless_grant_is_idempotent",
     [grant_frame("ga", "detect"), grant_frame("gb", "detect")], 2),
]


def matcher_for(frame: dict) -> dict:
    if frame.get("op") == "service_granted":
        return {"match": "fields",
                "fields": {"op": "service_granted", "id": frame.get("id", ""),
                           "target": frame.get("target", "")}}
    if frame.get("op") == "error":
        fields = {"op": "error", "status.code": frame["status"]["code"]}
        if frame.get("id"):
            fields["id"] = frame["id"]
        return {"match": "fields", "fields": fields}
    return {"match": "exact", "frame": frame}


async def record(core: PortalCore, sends: list[str], n_expect: int) -> list[dict]:
    received: list[dict] = []

    async def sink(raw: bytes) -> None:
        received.append(json.loads(raw))

    session = core.open_session(sink, peer="conformance-gen")
    for raw in sends:
        await core.handle_frame(session, raw.encode())
    for _ in range(2000):
        if len(received) >= n_expect:
            break
        await asyncio.sleep(0.01)
    await core.close_session(session)
    if len(received) != n_expect:
        raise RuntimeError(f"expected {n_expect} frames, portal sent {received}")
    return received


async def main() -> dict:
    dictionary = SlaDictionary.from_json(json.dumps(demo.default_sla_dictionary_doc()))
    pool = NodePool.from_json(json.dumps(demo.default_node_pool_doc()))
    core = PortalCore(Choreographer(dictionary, pool), portal_url="ws://gen/ws")
    core.deploy(demo.detector_manifest_bytes())
    core.deploy(demo.mapper_manifest_bytes())

    cases = []
    for name, sends, n_expect in CASES:
        frames = await record(core, sends, n_expect)
        cases.append({
            "name": name,
            "send": sends,
            "expect": [matcher_for(f) for f in frames],
        })
    await core.shutdown()
    return {
        "suite": "envelope-protocol-conformance",
        "version": 1,
        "requires": {"services": ["detect", "mapper"]},
        "semantics": {
            "connection": "fresh WebSocket connection per case",
            "matching": "received frames are matched in order; 'exact' compares "
                        "parsed JSON deep-equal, 'fields' compares the listed "
                        "dotted paths only",
            "timeout_ms": 5000,
        },
        "cases": cases,
    }


if __name__ == "__main__":
    suite = asyncio.run(main())
    json.dump(suite, sys.stdout, indent=2, sort_keys=False)
    sys.stdout.write("\n")
