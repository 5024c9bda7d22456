"""Package manifest: the declarative description that drives service wrapping.

A manifest declares a package's name, its topic/RPC interface, how its
workload runs (builtin model or external process) and the default resource
quota for a servant when no SLA dictionary entry applies.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

from .schemas import is_schema

NAME_RE = re.compile(r"^[a-z][a-z0-9_]{0,62}$")

WORKLOAD_KINDS = ("builtin_stateless", "builtin_stateful", "external_process")
TOPIC_DIRECTIONS = ("inbound", "outbound")

CPU_MIN, CPU_MAX = 100, 64_000
MEM_MIN, MEM_MAX = 16, 262_144

Scalar = str | int | float | bool


class ManifestSyntaxError(ValueError):
    """Manifest bytes are not well-formed UTF-8 JSON."""


class ValidationError(ValueError):
    """A manifest invariant is violated; ``path`` locates the offending field."""

    def __init__(self, path: str, message: str = "invalid value"):
        self.path = path
        self.message = message
        super().__init__(f"{path}: {message}")


@dataclass(frozen=True)
class TopicSpec:
    name: str
    direction: str
    schema: str


@dataclass(frozen=True)
class RpcSpec:
    name: str
    request_schema: str
    response_schema: str


@dataclass(frozen=True)
class InterfaceSpec:
    topics: tuple[TopicSpec, ...] = ()
    rpcs: tuple[RpcSpec, ...] = ()

    def rpc(self, name: str) -> RpcSpec | None:
        for r in self.rpcs:
            if r.name == name:
                return r
        return None

    def topic(self, name: str) -> TopicSpec | None:
        for t in self.topics:
            if t.name == name:
                return t
        return None


@dataclass(frozen=True)
class WorkloadSpec:
    kind: str
    params: dict[str, Scalar] = field(default_factory=dict)


@dataclass(frozen=True)
class ResourceQuota:
    cpu_millicores: int
    memory_mb: int

    def covers(self, other: "ResourceQuota") -> bool:
        return (self.cpu_millicores >= other.cpu_millicores
                and self.memory_mb >= other.memory_mb)


@dataclass(frozen=True)
class PackageManifest:
    name: str
    version: str
    stateful: bool
    interface: InterfaceSpec
    workload: WorkloadSpec
    default_resources: ResourceQuota


def parse_manifest(raw: bytes | str) -> PackageManifest:
    """Parse and validate manifest JSON; raises ManifestSyntaxError or ValidationError."""
    if isinstance(raw, bytes):
        try:
            raw = raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ManifestSyntaxError(f"manifest is not UTF-8: {exc}") from exc
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ManifestSyntaxError(f"manifest is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ValidationError("$", "manifest must be a JSON object")
    return _build(doc)


def interface_doc(interface: InterfaceSpec) -> dict:
    """Plain-JSON form of an interface, shared by manifest and stub serialization."""
    return {
        "topics": [
            {"name": t.name, "direction": t.direction, "schema": t.schema}
            for t in interface.topics
        ],
        "rpcs": [
            {"name": r.name, "request_schema": r.request_schema,
             "response_schema": r.response_schema}
            for r in interface.rpcs
        ],
    }


def workload_doc(workload: WorkloadSpec) -> dict:
    return {"kind": workload.kind, "params": dict(workload.params)}


def serialize_manifest(m: PackageManifest) -> bytes:
    """Canonical bytes: sorted keys, no insignificant whitespace.

    parse_manifest(serialize_manifest(m)) == m for every valid manifest, and
    structurally equal manifests serialize to identical bytes.
    """
    doc = {
        "name": m.name,
        "version": m.version,
        "stateful": m.stateful,
        "interface": interface_doc(m.interface),
        "workload": workload_doc(m.workload),
        "default_resources": {
            "cpu_millicores": m.default_resources.cpu_millicores,
            "memory_mb": m.default_resources.memory_mb,
        },
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")


def validate_quota(doc, path: str) -> ResourceQuota:
    if not isinstance(doc, dict):
        raise ValidationError(path, "must be an object")
    cpu = _require(doc, path, "cpu_millicores", int)
    mem = _require(doc, path, "memory_mb", int)
    if not CPU_MIN <= cpu <= CPU_MAX:
        raise ValidationError(f"{path}.cpu_millicores", f"must be in [{CPU_MIN}, {CPU_MAX}]")
    if not MEM_MIN <= mem <= MEM_MAX:
        raise ValidationError(f"{path}.memory_mb", f"must be in [{MEM_MIN}, {MEM_MAX}]")
    return ResourceQuota(cpu_millicores=cpu, memory_mb=mem)


def _require(doc: dict, path: str, key: str, kind):
    if key not in doc:
        raise ValidationError(f"{path}.{key}", "missing required field")
    value = doc[key]
    if kind is int and isinstance(value, bool):
        raise ValidationError(f"{path}.{key}", "expected integer, got boolean")
    if not isinstance(value, kind):
        raise ValidationError(f"{path}.{key}", f"expected {getattr(kind, '__name__', kind)}")
    return value


def _build(doc: dict) -> PackageManifest:
    name = _require(doc, "$", "name", str)
    if not NAME_RE.match(name):
        raise ValidationError("$.name", "must match [a-z][a-z0-9_]{0,62}")
    version = _require(doc, "$", "version", str)
    stateful = _require(doc, "$", "stateful", bool)
    interface = _build_interface(_require(doc, "$", "interface", dict))
    workload = _build_workload(_require(doc, "$", "workload", dict))
    quota = validate_quota(_require(doc, "$", "default_resources", dict), "default_resources")
    return PackageManifest(name=name, version=version, stateful=stateful,
                           interface=interface, workload=workload,
                           default_resources=quota)


def _build_interface(doc: dict) -> InterfaceSpec:
    topics_doc = doc.get("topics", [])
    rpcs_doc = doc.get("rpcs", [])
    if not isinstance(topics_doc, list):
        raise ValidationError("interface.topics", "must be a list")
    if not isinstance(rpcs_doc, list):
        raise ValidationError("interface.rpcs", "must be a list")
    if not topics_doc and not rpcs_doc:
        raise ValidationError("interface", "must declare at least one topic or rpc")

    topics = []
    seen_topics: set[str] = set()
    for i, t in enumerate(topics_doc):
        path = f"interface.topics[{i}]"
        if not isinstance(t, dict):
            raise ValidationError(path, "must be an object")
        tname = _require(t, path, "name", str)
        if tname in seen_topics:
            raise ValidationError(f"{path}.name", f"duplicate topic name {tname!r}")
        seen_topics.add(tname)
        direction = _require(t, path, "direction", str)
        if direction not in TOPIC_DIRECTIONS:
            raise ValidationError(f"{path}.direction", "must be inbound or outbound")
        schema = _require(t, path, "schema", str)
        if not is_schema(schema):
            raise ValidationError(f"{path}.schema", f"unknown schema {schema!r}")
        topics.append(TopicSpec(name=tname, direction=direction, schema=schema))

    rpcs = []
    seen_rpcs: set[str] = set()
    for i, r in enumerate(rpcs_doc):
        path = f"interface.rpcs[{i}]"
        if not isinstance(r, dict):
            raise ValidationError(path, "must be an object")
        rname = _require(r, path, "name", str)
        if rname in seen_rpcs or rname in seen_topics:
            raise ValidationError(f"{path}.name", f"duplicate interface name {rname!r}")
        seen_rpcs.add(rname)
        req = _require(r, path, "request_schema", str)
        resp = _require(r, path, "response_schema", str)
        for label, schema in (("request_schema", req), ("response_schema", resp)):
            if not is_schema(schema):
                raise ValidationError(f"{path}.{label}", f"unknown schema {schema!r}")
        rpcs.append(RpcSpec(name=rname, request_schema=req, response_schema=resp))

    return InterfaceSpec(topics=tuple(topics), rpcs=tuple(rpcs))


def _build_workload(doc: dict) -> WorkloadSpec:
    kind = _require(doc, "workload", "kind", str)
    if kind not in WORKLOAD_KINDS:
        raise ValidationError("workload.kind", f"must be one of {', '.join(WORKLOAD_KINDS)}")
    params_doc = doc.get("params", {})
    if not isinstance(params_doc, dict):
        raise ValidationError("workload.params", "must be an object")
    params: dict[str, Scalar] = {}
    for key, value in params_doc.items():
        if not isinstance(value, (str, int, float, bool)):
            raise ValidationError(f"workload.params.{key}", "must be a scalar")
        params[key] = value

    if kind == "builtin_stateless" and "state_growth_ms" in params:
        raise ValidationError("workload.params.state_growth_ms",
                              "forbidden for builtin_stateless workloads")
    if kind == "builtin_stateful" and "state_growth_ms" not in params:
        raise ValidationError("workload.params.state_growth_ms",
                              "required for builtin_stateful workloads")
    if kind == "external_process" and not isinstance(params.get("command"), str):
        raise ValidationError("workload.params.command",
                              "external_process requires a command string")

    for key in ("base_work_millicore_ms", "per_kb_work_millicore_ms", "state_growth_ms"):
        if key in params:
            value = params[key]
            if isinstance(value, bool) or not isinstance(value, (int, float)) or value < 0:
                raise ValidationError(f"workload.params.{key}", "must be a non-negative number")

    return WorkloadSpec(kind=kind, params=params)
