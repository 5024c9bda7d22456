"""Canonical demo packages: a stateless detector and a stateful mapper.

These are the two workload archetypes the QoS machinery is exercised with:
object detection (pure function of the frame) and incremental mapping
(answer time grows with stored frames).
"""

from __future__ import annotations

import json


def detector_manifest_doc() -> dict:
    return {
        "name": "detect",
        "version": "1.0.0",
        "stateful": False,
        "interface": {
            "topics": [],
            "rpcs": [
                {"name": "detect", "request_schema": "image_rgb",
                 "response_schema": "detections"},
            ],
        },
        "workload": {
            "kind": "builtin_stateless",
            "params": {"base_work_millicore_ms": 200.0,
                       "per_kb_work_millicore_ms": 0.5},
        },
        "default_resources": {"cpu_millicores": 1000, "memory_mb": 128},
    }


def mapper_manifest_doc() -> dict:
    return {
        "name": "mapper",
        "version": "1.0.0",
        "stateful": True,
        "interface": {
            "topics": [
                {"name": "frames", "direction": "inbound", "schema": "grid_map"},
                {"name": "map_updates", "direction": "outbound", "schema": "grid_map"},
            ],
            "rpcs": [
                {"name": "add_frame", "request_schema": "grid_map",
                 "response_schema": "blob"},
            ],
        },
        "workload": {
            "kind": "builtin_stateful",
            "params": {"base_work_millicore_ms": 300.0,
                       "per_kb_work_millicore_ms": 0.2,
                       "state_growth_ms": 2.0},
        },
        "default_resources": {"cpu_millicores": 2000, "memory_mb": 512},
    }


def detector_manifest_bytes() -> bytes:
    return json.dumps(detector_manifest_doc(), sort_keys=True,
                      separators=(",", ":")).encode()


def mapper_manifest_bytes() -> bytes:
    return json.dumps(mapper_manifest_doc(), sort_keys=True,
                      separators=(",", ":")).encode()


def default_sla_dictionary_doc() -> list[dict]:
    return [
        {"service": "detect", "t_desire_ms_max": 100, "aux": {},
         "resources": {"cpu_millicores": 4000, "memory_mb": 1024}},
        {"service": "detect", "t_desire_ms_max": 500, "aux": {},
         "resources": {"cpu_millicores": 1000, "memory_mb": 256}},
        {"service": "mapper", "t_desire_ms_max": 400, "aux": {},
         "resources": {"cpu_millicores": 4000, "memory_mb": 2048}},
        {"service": "mapper", "t_desire_ms_max": 1000, "aux": {},
         "resources": {"cpu_millicores": 2000, "memory_mb": 1024}},
    ]


def default_node_pool_doc() -> list[dict]:
    return [
        {"node_id": "node-a", "cpu_millicores_total": 32000, "memory_mb_total": 65536},
        {"node_id": "node-b", "cpu_millicores_total": 32000, "memory_mb_total": 65536},
    ]
