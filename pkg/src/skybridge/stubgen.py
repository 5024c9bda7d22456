"""Stub descriptor generation.

A deployed package is mirrored on the client by a StubDescriptor: the
package's interface verbatim, where to reach the portal, which codec to use
per payload schema, and how to run a local copy for QoS fallback. The
descriptor is data, interpreted by the client stub at runtime; generation is
a pure function, so repeated generation yields byte-identical descriptors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .manifest import (InterfaceSpec, PackageManifest, ValidationError,
                       WorkloadSpec, _build_interface, _build_workload,
                       interface_doc, workload_doc)
from .protocol import DEFAULT_CODEC_BY_SCHEMA

DEFAULT_Q_THRESHOLD = 10


@dataclass(frozen=True)
class StubDefaults:
    t_desire_ms: int | None = None
    t_max_ms: int | None = None
    q_threshold: int = DEFAULT_Q_THRESHOLD


@dataclass(frozen=True)
class StubDescriptor:
    service: str
    interface: InterfaceSpec
    stateful: bool
    portal_url: str
    compression_policy: dict[str, str]
    local_fallback: WorkloadSpec | None
    defaults: StubDefaults


def generate_stub(manifest: PackageManifest, portal_url: str) -> StubDescriptor:
    """Descriptor for a deployed manifest; interface copied verbatim."""
    return StubDescriptor(
        service=manifest.name,
        interface=manifest.interface,
        stateful=manifest.stateful,
        portal_url=portal_url,
        compression_policy=dict(DEFAULT_CODEC_BY_SCHEMA),
        local_fallback=manifest.workload,
        defaults=StubDefaults(),
    )


def serialize_descriptor(d: StubDescriptor) -> bytes:
    doc = {
        "service": d.service,
        "interface": interface_doc(d.interface),
        "stateful": d.stateful,
        "portal_url": d.portal_url,
        "compression_policy": dict(d.compression_policy),
        "local_fallback": workload_doc(d.local_fallback) if d.local_fallback else None,
        "defaults": {
            "t_desire_ms": d.defaults.t_desire_ms,
            "t_max_ms": d.defaults.t_max_ms,
            "q_threshold": d.defaults.q_threshold,
        },
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")


def parse_descriptor(raw: bytes | str) -> StubDescriptor:
    doc = json.loads(raw)
    if not isinstance(doc, dict):
        raise ValidationError("$", "descriptor must be a JSON object")
    defaults = doc.get("defaults", {})
    fallback = doc.get("local_fallback")
    return StubDescriptor(
        service=doc["service"],
        interface=_build_interface(doc["interface"]),
        stateful=bool(doc["stateful"]),
        portal_url=doc["portal_url"],
        compression_policy=dict(doc["compression_policy"]),
        local_fallback=_build_workload(fallback) if fallback else None,
        defaults=StubDefaults(
            t_desire_ms=defaults.get("t_desire_ms"),
            t_max_ms=defaults.get("t_max_ms"),
            q_threshold=int(defaults.get("q_threshold", DEFAULT_Q_THRESHOLD)),
        ),
    )
