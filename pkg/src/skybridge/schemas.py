"""Built-in payload schema registry and canonical binary encodings.

Every payload on the wire declares one of these schemas. The registry is
closed: services describe their interfaces in terms of these names only.

Canonical encodings:
    blob        raw bytes, no structure
    image_rgb   u32be width, u32be height, then 3*w*h pixel bytes
    grid_map    u32be width, u32be height, then w*h cell bytes
    pose        three float64be: x, y, theta
    detections  canonical JSON (sorted keys, no whitespace) list of boxes
"""

from __future__ import annotations

import json
import struct

SCHEMA_NAMES = ("blob", "image_rgb", "grid_map", "pose", "detections")

_HEADER = struct.Struct(">II")
_POSE = struct.Struct(">ddd")


class SchemaError(ValueError):
    """Payload bytes do not parse under the declared schema."""


def is_schema(name: str) -> bool:
    return name in SCHEMA_NAMES


def validate(schema: str, data: bytes) -> None:
    """Raise SchemaError unless ``data`` is a canonical encoding under ``schema``."""
    if schema == "blob":
        return
    if schema == "image_rgb":
        _validate_raster(data, bytes_per_cell=3, what="image_rgb")
        return
    if schema == "grid_map":
        _validate_raster(data, bytes_per_cell=1, what="grid_map")
        return
    if schema == "pose":
        if len(data) != _POSE.size:
            raise SchemaError(f"pose requires exactly {_POSE.size} bytes, got {len(data)}")
        return
    if schema == "detections":
        _validate_detections(data)
        return
    raise SchemaError(f"unknown schema {schema!r}")


def _validate_raster(data: bytes, bytes_per_cell: int, what: str) -> None:
    if len(data) < _HEADER.size:
        raise SchemaError(f"{what} shorter than header")
    width, height = _HEADER.unpack_from(data)
    expected = _HEADER.size + bytes_per_cell * width * height
    if len(data) != expected:
        raise SchemaError(f"{what} {width}x{height} requires {expected} bytes, got {len(data)}")


def _validate_detections(data: bytes) -> None:
    try:
        boxes = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SchemaError(f"detections payload is not JSON: {exc}") from exc
    if not isinstance(boxes, list):
        raise SchemaError("detections payload must be a JSON list")
    for i, box in enumerate(boxes):
        if not isinstance(box, dict):
            raise SchemaError(f"detections[{i}] must be an object")
        for key, kind in (("label", str), ("confidence", (int, float)),
                          ("x", int), ("y", int), ("w", int), ("h", int)):
            if key not in box or not isinstance(box[key], kind) or isinstance(box[key], bool):
                raise SchemaError(f"detections[{i}].{key} missing or wrong type")
    if canonical_json(boxes) != data:
        raise SchemaError("detections payload is not in canonical JSON form")


def canonical_json(value) -> bytes:
    """Canonical JSON bytes: lexicographically sorted keys, no insignificant whitespace."""
    return json.dumps(value, sort_keys=True, separators=(",", ":")).encode("utf-8")


def encode_image_rgb(width: int, height: int, pixels: bytes) -> bytes:
    if len(pixels) != 3 * width * height:
        raise SchemaError(f"image_rgb {width}x{height} needs {3 * width * height} pixel bytes")
    return _HEADER.pack(width, height) + pixels


def encode_grid_map(width: int, height: int, cells: bytes) -> bytes:
    if len(cells) != width * height:
        raise SchemaError(f"grid_map {width}x{height} needs {width * height} cell bytes")
    return _HEADER.pack(width, height) + cells


def raster_size(data: bytes) -> tuple[int, int]:
    """Width and height of an image_rgb or grid_map encoding."""
    if len(data) < _HEADER.size:
        raise SchemaError("raster shorter than header")
    width, height = _HEADER.unpack_from(data)
    return width, height


def encode_pose(x: float, y: float, theta: float) -> bytes:
    return _POSE.pack(x, y, theta)


def encode_detections(boxes: list[dict]) -> bytes:
    data = canonical_json(boxes)
    _validate_detections(data)
    return data
