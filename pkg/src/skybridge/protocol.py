"""JSON wire protocol: envelopes, SLA declarations, payload compression.

One frame = one canonically encoded Envelope (UTF-8 JSON, sorted keys, no
insignificant whitespace, base64 standard alphabet with padding). Binary
payloads ride inside the JSON frame as base64 text, optionally compressed.

This module is the conformance surface: every peer, including clients in
other languages, interoperates through these bytes alone.
"""

from __future__ import annotations

import base64
import binascii
import json
import zlib
from dataclasses import dataclass

from .manifest import ResourceQuota, ValidationError, validate_quota
from .schemas import is_schema, validate as validate_schema

OPS = ("request_service", "service_granted", "publish", "call",
       "response", "error", "ping", "pong")

COMPRESSIONS = ("none", "deflate", "zlib")

# Keepalive policy: a ping every interval, link considered down after
# this many consecutive unanswered pings.
KEEPALIVE_INTERVAL_MS = 2000
KEEPALIVE_MISS_LIMIT = 3

# Codec applied when producing a payload of a given schema. Raster data
# compresses extremely well; structured scalars are not worth the header.
DEFAULT_CODEC_BY_SCHEMA = {
    "blob": "none",
    "image_rgb": "deflate",
    "grid_map": "zlib",
    "pose": "none",
    "detections": "none",
}


class ProtocolError(ValueError):
    """Wire-level failure; ``code`` is "malformed" or "invariant"."""

    def __init__(self, code: str, detail: str):
        self.code = code
        self.detail = detail
        super().__init__(f"{code}: {detail}")


class CodecError(ValueError):
    """Payload compression or base64 stream is unusable."""


@dataclass(frozen=True)
class SlaTimes:
    t_desire_ms: int
    t_max_ms: int


@dataclass(frozen=True)
class SlaDeclaration:
    times: SlaTimes | None = None
    resources: ResourceQuota | None = None


@dataclass(frozen=True)
class Payload:
    schema: str
    compression: str
    data: str  # base64 text of the (possibly compressed) canonical encoding


@dataclass(frozen=True)
class Status:
    code: str
    detail: str = ""


@dataclass(frozen=True)
class Envelope:
    op: str
    id: str = ""
    target: str = ""
    payload: Payload | None = None
    sla: SlaDeclaration | None = None
    status: Status | None = None


def _invariant(condition: bool, rule: str) -> None:
    if not condition:
        raise ProtocolError("invariant", rule)


def check(e: Envelope) -> Envelope:
    """Validate envelope invariants; raises ProtocolError(code=invariant)."""
    _invariant(e.op in OPS, f"unknown op {e.op!r}")
    if e.op == "call":
        _invariant(bool(e.id), "call requires a non-empty id")
        _invariant(bool(e.target), "call requires a target")
    if e.op == "publish":
        _invariant(e.id == "", "publish carries no id")
        _invariant(bool(e.target), "publish requires a target")
    if e.op == "response":
        _invariant(bool(e.id), "response requires the originating call id")
    if e.op == "request_service":
        _invariant(bool(e.id), "request_service requires an id")
        _invariant(bool(e.target), "request_service requires a service name")
        _invariant(e.sla is not None, "request_service requires an sla")
        has_times = e.sla.times is not None
        has_resources = e.sla.resources is not None
        _invariant(has_times != has_resources,
                   "sla requires exactly one of times or resources")
        if has_times:
            t = e.sla.times
            _invariant(t.t_desire_ms > 0 and t.t_max_ms > 0,
                       "sla times must be positive")
            _invariant(t.t_desire_ms <= t.t_max_ms,
                       "t_desire_ms must not exceed t_max_ms")
    else:
        _invariant(e.sla is None, "sla is only valid on request_service")
    if e.op == "error":
        _invariant(e.status is not None, "error requires a status")
    else:
        _invariant(e.status is None, "status is only valid on error")
    if e.payload is not None:
        _invariant(is_schema(e.payload.schema),
                   f"unknown payload schema {e.payload.schema!r}")
        _invariant(e.payload.compression in COMPRESSIONS,
                   f"unknown compression {e.payload.compression!r}")
    return e


def encode(e: Envelope) -> bytes:
    """Canonical frame bytes; decode(encode(e)) == e for every valid envelope."""
    check(e)
    doc: dict = {"op": e.op}
    if e.id:
        doc["id"] = e.id
    if e.target:
        doc["target"] = e.target
    if e.payload is not None:
        doc["payload"] = {
            "schema": e.payload.schema,
            "compression": e.payload.compression,
            "data": e.payload.data,
        }
    if e.sla is not None:
        sla: dict = {}
        if e.sla.times is not None:
            sla["times"] = {"t_desire_ms": e.sla.times.t_desire_ms,
                            "t_max_ms": e.sla.times.t_max_ms}
        if e.sla.resources is not None:
            sla["resources"] = {"cpu_millicores": e.sla.resources.cpu_millicores,
                                "memory_mb": e.sla.resources.memory_mb}
        doc["sla"] = sla
    if e.status is not None:
        doc["status"] = {"code": e.status.code, "detail": e.status.detail}
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")


_TOP_KEYS = {"op", "id", "target", "payload", "sla", "status"}


def decode(raw: bytes | str) -> Envelope:
    """Parse one frame. ProtocolError(malformed) for unparsable bytes,
    ProtocolError(invariant) when a well-formed frame breaks an envelope rule."""
    if isinstance(raw, bytes):
        try:
            raw = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ProtocolError("malformed", f"frame is not UTF-8: {exc}") from exc
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ProtocolError("malformed", f"frame is not JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ProtocolError("malformed", "frame must be a JSON object")

    unknown = set(doc) - _TOP_KEYS
    _invariant(not unknown, f"unknown envelope keys {sorted(unknown)}")
    op = doc.get("op")
    _invariant(isinstance(op, str), "op must be a string")

    e = Envelope(
        op=op,
        id=_opt_str(doc, "id"),
        target=_opt_str(doc, "target"),
        payload=_parse_payload(doc.get("payload")),
        sla=_parse_sla(doc.get("sla")),
        status=_parse_status(doc.get("status")),
    )
    return check(e)


def _opt_str(doc: dict, key: str) -> str:
    value = doc.get(key, "")
    _invariant(isinstance(value, str), f"{key} must be a string")
    return value


def _parse_payload(doc) -> Payload | None:
    if doc is None:
        return None
    _invariant(isinstance(doc, dict), "payload must be an object")
    _invariant(set(doc) == {"schema", "compression", "data"},
               "payload requires exactly schema, compression, data")
    schema, compression, data = doc["schema"], doc["compression"], doc["data"]
    _invariant(isinstance(schema, str) and isinstance(compression, str)
               and isinstance(data, str), "payload fields must be strings")
    return Payload(schema=schema, compression=compression, data=data)


def _parse_sla(doc) -> SlaDeclaration | None:
    if doc is None:
        return None
    _invariant(isinstance(doc, dict), "sla must be an object")
    _invariant(set(doc) <= {"times", "resources"}, "sla allows only times or resources")
    times = None
    if "times" in doc:
        t = doc["times"]
        _invariant(isinstance(t, dict) and set(t) == {"t_desire_ms", "t_max_ms"},
                   "sla.times requires t_desire_ms and t_max_ms")
        _invariant(all(isinstance(t[k], int) and not isinstance(t[k], bool)
                       for k in ("t_desire_ms", "t_max_ms")),
                   "sla times must be integers")
        times = SlaTimes(t_desire_ms=t["t_desire_ms"], t_max_ms=t["t_max_ms"])
    resources = None
    if "resources" in doc:
        try:
            resources = validate_quota(doc["resources"], "sla.resources")
        except ValidationError as exc:
            raise ProtocolError("invariant", str(exc)) from exc
    return SlaDeclaration(times=times, resources=resources)


def _parse_status(doc) -> Status | None:
    if doc is None:
        return None
    _invariant(isinstance(doc, dict) and set(doc) <= {"code", "detail"}
               and isinstance(doc.get("code"), str),
               "status requires a code string")
    detail = doc.get("detail", "")
    _invariant(isinstance(detail, str), "status.detail must be a string")
    return Status(code=doc["code"], detail=detail)


def compress_payload(schema: str, data: bytes, codec: str = "none") -> Payload:
    """Wrap canonical schema bytes into a Payload, compressing per ``codec``."""
    validate_schema(schema, data)
    if codec == "none":
        packed = data
    elif codec == "deflate":
        deflater = zlib.compressobj(6, zlib.DEFLATED, -zlib.MAX_WBITS)
        packed = deflater.compress(data) + deflater.flush()
    elif codec == "zlib":
        packed = zlib.compress(data, 6)
    else:
        raise CodecError(f"unknown codec {codec!r}")
    return Payload(schema=schema, compression=codec,
                   data=base64.b64encode(packed).decode("ascii"))


def decompress_payload(p: Payload) -> bytes:
    """Inverse of compress_payload: the canonical schema bytes."""
    try:
        packed = base64.b64decode(p.data, validate=True)
    except (binascii.Error, ValueError) as exc:
        raise CodecError(f"payload base64 is corrupt: {exc}") from exc
    if p.compression == "none":
        return packed
    if p.compression == "deflate":
        wbits = -zlib.MAX_WBITS
    elif p.compression == "zlib":
        wbits = zlib.MAX_WBITS
    else:
        raise CodecError(f"unknown codec {p.compression!r}")
    try:
        return zlib.decompress(packed, wbits=wbits)
    except zlib.error as exc:
        raise CodecError(f"compressed stream is corrupt: {exc}") from exc


def payload_data(p: Payload) -> bytes:
    """Decompress and check the result against the declared schema."""
    data = decompress_payload(p)
    validate_schema(p.schema, data)
    return data


def compression_ratio(original: bytes, p: Payload) -> float:
    """Size saving as a fraction: 1 - compressed_len / original_len."""
    if not original:
        return 0.0
    compressed_len = len(base64.b64decode(p.data))
    return 1.0 - compressed_len / len(original)
