import base64

import pytest
from hypothesis import given, settings, strategies as st

from skybridge import schemas
from skybridge.manifest import ResourceQuota
from skybridge.protocol import (CodecError, Envelope, Payload, ProtocolError,
                                SlaDeclaration, SlaTimes, Status, compress_payload,
                                compression_ratio, decode, decompress_payload,
                                encode, payload_data)


def test_ping_is_minimal_canonical_frame():
    assert encode(Envelope(op="ping")) == b'{"op":"ping"}'


def test_request_service_times_fields():
    e = Envelope(op="request_service", id="1", target="detect",
                 sla=SlaDeclaration(times=SlaTimes(t_desire_ms=100, t_max_ms=300)))
    raw = encode(e)
    assert b'"t_desire_ms":100' in raw and b'"t_max_ms":300' in raw
    assert decode(raw) == e


def test_golden_call_frame():
    img = schemas.encode_image_rgb(2, 2, bytes(range(12)))
    call = Envelope(op="call", id="7", target="detect",
                    payload=compress_payload("image_rgb", img, "none"))
    expected = (b'{"id":"7","op":"call","payload":{"compression":"none",'
                b'"data":"AAAAAgAAAAIAAQIDBAUGBwgJCgs=","schema":"image_rgb"},'
                b'"target":"detect"}')
    assert encode(call) == expected
    assert decode(expected) == call


def test_call_without_id_is_invariant_error():
    with pytest.raises(ProtocolError) as err:
        decode(b'{"op":"call"}')
    assert err.value.code == "invariant"


def test_truncated_utf8_is_malformed():
    with pytest.raises(ProtocolError) as err:
        decode(b'{"op":"ping"\xe2\x28')
    assert err.value.code == "malformed"


def test_bad_json_is_malformed():
    with pytest.raises(ProtocolError) as err:
        decode(b"hello there")
    assert err.value.code == "malformed"


@pytest.mark.parametrize("doc,rule_hint", [
    ('{"op":"publish","id":"x","target":"frames"}', "publish"),
    ('{"op":"response"}', "response"),
    ('{"op":"request_service","id":"1","target":"d"}', "sla"),
    ('{"op":"request_service","id":"1","target":"d","sla":{}}', "exactly one"),
    ('{"op":"request_service","id":"1","target":"d","sla":{"times":{"t_desire_ms":300,"t_max_ms":100}}}', "exceed"),
    ('{"op":"ping","sla":{"times":{"t_desire_ms":1,"t_max_ms":2}}}', "only valid"),
    ('{"op":"ping","status":{"code":"x"}}', "only valid"),
    ('{"op":"teleport"}', "unknown op"),
    ('{"op":"ping","extra":1}', "unknown envelope keys"),
])
def test_invariant_violations(doc, rule_hint):
    with pytest.raises(ProtocolError) as err:
        decode(doc.encode())
    assert err.value.code == "invariant"
    assert rule_hint in err.value.detail


def test_sla_exactly_one_allows_resources():
    e = Envelope(op="request_service", id="1", target="detect",
                 sla=SlaDeclaration(resources=ResourceQuota(2000, 512)))
    assert decode(encode(e)) == e
    both = SlaDeclaration(times=SlaTimes(100, 300),
                          resources=ResourceQuota(2000, 512))
    with pytest.raises(ProtocolError):
        encode(Envelope(op="request_service", id="1", target="d", sla=both))


# -- compression ------------------------------------------------------------


def test_zero_grid_zlib_ratio():
    grid = schemas.encode_grid_map(256, 256, bytes(256 * 256))
    p = compress_payload("grid_map", grid, "zlib")
    assert compression_ratio(grid, p) >= 0.99
    assert decompress_payload(p) == grid


def test_empty_blob_identity():
    p = compress_payload("blob", b"", "none")
    assert decompress_payload(p) == b""
    assert p.data == ""


def test_gradient_image_deflate_baseline():
    # Regression baseline measured once; held to +/- 2 percentage points.
    pixels = bytes(((j // 3) % 256) for j in range(3 * 64 * 64))
    img = schemas.encode_image_rgb(64, 64, pixels)
    p = compress_payload("image_rgb", img, "deflate")
    assert compression_ratio(img, p) == pytest.approx(0.9263, abs=0.02)


def test_corrupt_base64_is_codec_error():
    p = Payload(schema="blob", compression="zlib", data="@@not-base64@@")
    with pytest.raises(CodecError):
        decompress_payload(p)


def test_corrupt_stream_is_codec_error():
    p = compress_payload("blob", b"x" * 100, "zlib")
    broken = Payload(schema="blob", compression="zlib",
                     data=base64.b64encode(b"\x01\x02\x03").decode())
    assert decompress_payload(p) == b"x" * 100
    with pytest.raises(CodecError):
        decompress_payload(broken)


def test_none_passthrough():
    body = bytes(range(256))
    p = compress_payload("blob", body, "none")
    assert base64.b64decode(p.data) == body
    assert decompress_payload(p) == body


@given(st.binary(max_size=4096), st.sampled_from(["none", "deflate", "zlib"]))
def test_blob_round_trip_all_codecs(body, codec):
    p = compress_payload("blob", body, codec)
    assert decompress_payload(p) == body
    assert payload_data(p) == body


# -- property round trip ------------------------------------------------------

ids = st.text(alphabet="abcdef0123456789", min_size=1, max_size=8)
targets = st.from_regex(r"[a-z][a-z0-9_]{0,10}", fullmatch=True)


@st.composite
def envelopes(draw):
    op = draw(st.sampled_from(["request_service", "service_granted", "publish",
                               "call", "response", "error", "ping", "pong"]))
    e = {"op": op, "id": "", "target": "", "payload": None, "sla": None, "status": None}
    if op in ("call", "response", "service_granted"):
        e["id"] = draw(ids)
    if op in ("call", "publish", "request_service"):
        e["target"] = draw(targets)
    if op == "request_service":
        e["id"] = draw(ids)
        if draw(st.booleans()):
            t1 = draw(st.integers(1, 1000))
            e["sla"] = SlaDeclaration(times=SlaTimes(t1, t1 + draw(st.integers(0, 1000))))
        else:
            e["sla"] = SlaDeclaration(resources=ResourceQuota(
                draw(st.integers(100, 64000)), draw(st.integers(16, 262144))))
    if op == "error":
        e["status"] = Status(code=draw(st.sampled_from(["no_grant", "malformed", "x"])),
                             detail=draw(st.text(max_size=20)))
    if op in ("call", "response", "publish") and draw(st.booleans()):
        body = draw(st.binary(max_size=64))
        codec = draw(st.sampled_from(["none", "deflate", "zlib"]))
        e["payload"] = compress_payload("blob", body, codec)
    return Envelope(**e)


@settings(max_examples=300)
@given(envelopes())
def test_property_encode_decode_round_trip(e):
    assert decode(encode(e)) == e
