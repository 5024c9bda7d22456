import json

from skybridge import demo
from skybridge.manifest import interface_doc, parse_manifest
from skybridge.stubgen import generate_stub, parse_descriptor, serialize_descriptor

PORTAL = "ws://cloud.example:8008/ws"


def test_detector_descriptor_policy_and_fallback():
    m = parse_manifest(demo.detector_manifest_bytes())
    d = generate_stub(m, PORTAL)
    assert d.service == "detect"
    assert not d.stateful
    assert d.compression_policy["image_rgb"] == "deflate"
    assert d.compression_policy["grid_map"] == "zlib"
    assert d.compression_policy["pose"] == "none"
    assert d.local_fallback == m.workload
    assert d.portal_url == PORTAL
    assert d.defaults.q_threshold == 10
    assert d.defaults.t_desire_ms is None and d.defaults.t_max_ms is None


def test_mapper_descriptor_stateful():
    m = parse_manifest(demo.mapper_manifest_bytes())
    d = generate_stub(m, PORTAL)
    assert d.stateful
    assert d.compression_policy["grid_map"] == "zlib"


def test_interface_copied_verbatim():
    m = parse_manifest(demo.mapper_manifest_bytes())
    d = generate_stub(m, PORTAL)
    assert d.interface is m.interface
    canonical = json.dumps(interface_doc(m.interface), sort_keys=True,
                           separators=(",", ":"))
    doc = json.loads(serialize_descriptor(d))
    assert json.dumps(doc["interface"], sort_keys=True, separators=(",", ":")) \
        == canonical
    # structural fidelity: the name/schema sets a client compiles against
    assert {r["name"] for r in doc["interface"]["rpcs"]} \
        == {r.name for r in m.interface.rpcs}
    assert {t["name"] for t in doc["interface"]["topics"]} \
        == {t.name for t in m.interface.topics}


def test_generation_is_deterministic():
    m = parse_manifest(demo.detector_manifest_bytes())
    a = serialize_descriptor(generate_stub(m, PORTAL))
    b = serialize_descriptor(generate_stub(m, PORTAL))
    assert a == b


def test_descriptor_round_trip():
    m = parse_manifest(demo.mapper_manifest_bytes())
    d = generate_stub(m, PORTAL)
    parsed = parse_descriptor(serialize_descriptor(d))
    assert parsed == d
