import pytest

from skybridge import schemas
from skybridge.schemas import SchemaError


def test_registry_names():
    for name in ("blob", "image_rgb", "grid_map", "pose", "detections"):
        assert schemas.is_schema(name)
    assert not schemas.is_schema("video")


def test_image_rgb_encoding_and_size_check():
    img = schemas.encode_image_rgb(2, 3, bytes(18))
    assert schemas.raster_size(img) == (2, 3)
    schemas.validate("image_rgb", img)
    with pytest.raises(SchemaError):
        schemas.validate("image_rgb", img[:-1])
    with pytest.raises(SchemaError):
        schemas.encode_image_rgb(2, 3, bytes(17))


def test_grid_map_encoding():
    grid = schemas.encode_grid_map(4, 4, bytes(16))
    schemas.validate("grid_map", grid)
    with pytest.raises(SchemaError):
        schemas.validate("grid_map", grid + b"x")


def test_pose_is_exactly_three_doubles():
    pose = schemas.encode_pose(1.0, -2.5, 0.25)
    schemas.validate("pose", pose)
    assert len(pose) == 24
    with pytest.raises(SchemaError):
        schemas.validate("pose", pose[:-1])


def test_detections_canonical_only():
    boxes = [{"label": "dog", "confidence": 0.9, "x": 1, "y": 2, "w": 3, "h": 4}]
    data = schemas.encode_detections(boxes)
    schemas.validate("detections", data)
    # whitespace variant is valid JSON but not canonical
    with pytest.raises(SchemaError):
        schemas.validate("detections", b'[ ' + data[1:])
    with pytest.raises(SchemaError):
        schemas.validate("detections", b'[{"label":1}]')
    with pytest.raises(SchemaError):
        schemas.validate("detections", b'{"not":"a list"}')


def test_blob_accepts_anything():
    schemas.validate("blob", b"")
    schemas.validate("blob", bytes(range(256)))
