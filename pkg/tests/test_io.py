import json
import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from splataug.errors import ConflictError, FormatError, LoadError, ParseError
from splataug.geometry import SE3, CameraModel, Rotation
from splataug.io import (Episode, Frame, Manifest, ManifestEntry, decode_tensor, encode_tensor, json_number,
                         load_episode, load_manifest, load_scenes, read_camera, read_png, read_tensor, save_episode,
                         save_manifest, write_camera, write_png, write_tensor)
from splataug.synthetic import random_scene


def camera(rng, w=8, h=6):
    return CameraModel(10.0, 11.0, 3.5, 2.5, w, h, SE3(Rotation(rng.normal(size=4)), rng.normal(size=3)))


def make_episode(rng, n_frames, cams=("ext0",), eid="ep", teacher=False):
    cameras = {n: camera(rng) for n in cams}
    frames = [Frame(0.05 * i + 0.01, {n: rng.integers(0, 256, size=(6, 8, 3), dtype=np.uint8) for n in cams},
                    rng.normal(size=7).astype(np.float32)) for i in range(n_frames)]
    t = {"pointmaps": rng.normal(size=(n_frames, 6, 8, 3)).astype(np.float32)} if teacher else {}
    return Episode(eid, frames, "pick up the cube", cameras, (), t, {"note": "x"})


def assert_episode_equal(a, b):
    assert (a.id, a.instruction, a.wrist_cameras, a.meta) == (b.id, b.instruction, b.wrist_cameras, b.meta)
    assert list(a.cameras) == list(b.cameras)
    for n in a.cameras:
        assert a.cameras[n].to_dict() == b.cameras[n].to_dict()
    assert len(a.frames) == len(b.frames)
    for fa, fb in zip(a.frames, b.frames):
        assert fa.timestamp == fb.timestamp
        assert fa.action.tobytes() == fb.action.tobytes()
        assert set(fa.images) == set(fb.images)
        for n in fa.images:
            assert fa.images[n].dtype == fb.images[n].dtype and fa.images[n].tobytes() == fb.images[n].tobytes()
    assert set(a.teacher) == set(b.teacher)
    for n in a.teacher:
        assert a.teacher[n].tobytes() == b.teacher[n].tobytes()


# raw tensors -------------------------------------------------------------------

def test_gstf_layout():
    blob = encode_tensor(np.arange(6, dtype=np.float32).reshape(2, 3))
    assert blob[:4] == b"GSTF"
    assert struct.unpack_from("<IIIII", blob, 4) == (1, 2, 2, 3, 0)
    assert np.array_equal(np.frombuffer(blob[24:], "<f4"), np.arange(6))


@given(arrays(np.float32, array_shapes(min_dims=0, max_dims=4, min_side=0, max_side=5),
              elements=st.floats(-1e6, 1e6, width=32)))
def test_gstf_round_trip(a):
    b = decode_tensor(encode_tensor(a))
    assert b.shape == a.shape and b.tobytes() == a.tobytes()


def test_gstf_errors():
    blob = encode_tensor(np.ones((2, 2), np.float32))
    with pytest.raises(ParseError):
        decode_tensor(blob[:-1])
    with pytest.raises(ParseError):
        decode_tensor(blob[:6])
    with pytest.raises(FormatError):
        decode_tensor(b"XXXX" + blob[4:])
    with pytest.raises(FormatError):
        decode_tensor(blob[:4] + struct.pack("<I", 9) + blob[8:])
    with pytest.raises(FormatError):
        decode_tensor(blob[:20] + struct.pack("<I", 5) + blob[24:])


def test_gstf_file(tmp_path, rng):
    a = rng.normal(size=(3, 4)).astype(np.float32)
    write_tensor(tmp_path / "a.gstf", a)
    assert read_tensor(tmp_path / "a.gstf").tobytes() == a.tobytes()


def test_png_and_camera_files(tmp_path, rng):
    img = rng.integers(0, 256, size=(5, 7, 3), dtype=np.uint8)
    write_png(tmp_path / "i.png", img)
    assert np.array_equal(read_png(tmp_path / "i.png"), img)
    cam = camera(rng)
    write_camera(tmp_path / "c.json", cam)
    assert read_camera(tmp_path / "c.json").to_dict() == cam.to_dict()
    (tmp_path / "bad.json").write_text('{"fx": 1}')
    with pytest.raises(LoadError):
        read_camera(tmp_path / "bad.json")


def test_json_number():
    assert json_number(float("inf")) == "inf" and json_number(-float("inf")) == "-inf" and json_number(2) == 2.0


# episodes ----------------------------------------------------------------------

def test_minimal_episode_round_trip(tmp_path, rng):
    ep = make_episode(rng, 1)
    save_episode(ep, tmp_path / "ep")
    assert_episode_equal(load_episode(tmp_path / "ep"), ep)


def test_three_camera_fifty_frame_round_trip(tmp_path, rng):
    ep = make_episode(rng, 50, ("ext0", "ext1", "wrist"), teacher=True)
    ep.wrist_cameras = ("wrist",)
    save_episode(ep, tmp_path / "ep")
    back = load_episode(tmp_path / "ep")
    assert_episode_equal(back, ep)
    # saving what was loaded reproduces the same bytes
    save_episode(back, tmp_path / "ep2")
    for p in sorted((tmp_path / "ep").rglob("*")):
        if p.is_file():
            assert p.read_bytes() == (tmp_path / "ep2" / p.relative_to(tmp_path / "ep")).read_bytes(), p


def test_overwrite_is_atomic_swap(tmp_path, rng):
    save_episode(make_episode(rng, 2, eid="a"), tmp_path / "ep")
    save_episode(make_episode(rng, 3, eid="a"), tmp_path / "ep")
    assert len(load_episode(tmp_path / "ep").frames) == 3
    assert [p.name for p in tmp_path.iterdir()] == ["ep"]


def test_scenes_round_trip(tmp_path, rng):
    ep = make_episode(rng, 3)
    scenes = [random_scene(rng, 4, dtype=np.float32), None, random_scene(rng, 2, dtype=np.float32)]
    save_episode(ep, tmp_path / "ep", scenes)
    back = load_scenes(tmp_path / "ep", 3)
    assert back[1] is None and back[0].equals(scenes[0]) and back[2].equals(scenes[2])


def test_non_increasing_timestamps(tmp_path, rng):
    ep = make_episode(rng, 3)
    with pytest.raises(LoadError):
        Episode("x", [ep.frames[1], ep.frames[0]], "", ep.cameras)
    save_episode(ep, tmp_path / "ep")
    doc = json.loads((tmp_path / "ep" / "episode.json").read_text())
    doc["frames"][2]["timestamp"] = doc["frames"][1]["timestamp"]
    (tmp_path / "ep" / "episode.json").write_text(json.dumps(doc))
    with pytest.raises(LoadError) as e:
        load_episode(tmp_path / "ep")
    assert e.value.field == "frames[2].timestamp"


@pytest.mark.parametrize("mutate,field", [
    (lambda d: d.update(schema_version=2), "schema_version"),
    (lambda d: d.pop("instruction"), "instruction"),
    (lambda d: d["cameras"]["ext0"].pop("fx"), "cameras.ext0"),
])
def test_load_errors_name_field(tmp_path, rng, mutate, field):
    save_episode(make_episode(rng, 2), tmp_path / "ep")
    jp = tmp_path / "ep" / "episode.json"
    doc = json.loads(jp.read_text())
    mutate(doc)
    jp.write_text(json.dumps(doc))
    with pytest.raises(LoadError) as e:
        load_episode(tmp_path / "ep")
    assert e.value.field == field


def test_missing_files(tmp_path, rng):
    save_episode(make_episode(rng, 2), tmp_path / "ep")
    (tmp_path / "ep" / "images" / "000001_ext0.png").unlink()
    with pytest.raises(LoadError) as e:
        load_episode(tmp_path / "ep")
    assert e.value.field == "frames[1].images.ext0"
    with pytest.raises(LoadError):
        load_episode(tmp_path / "nothing")


def test_episode_invariants(rng):
    ep = make_episode(rng, 2, ("a", "b"))
    bad = Frame(1.0, {"a": ep.frames[0].images["a"]}, ep.frames[0].action)
    with pytest.raises(LoadError):
        Episode("x", [bad], "", ep.cameras)
    short = Frame(2.0, ep.frames[1].images, np.zeros(3, np.float32))
    with pytest.raises(LoadError):
        Episode("x", [ep.frames[0], short], "", ep.cameras)


# manifests ---------------------------------------------------------------------

def test_manifest_round_trip_and_dangling(tmp_path):
    (tmp_path / "e1").mkdir()
    m = Manifest([ManifestEntry("e1", "e1"), ManifestEntry("e1__aug0", "e2", "augmented", {"axis": "X"}, "e1")])
    save_manifest(m, tmp_path / "m.json")
    back = load_manifest(tmp_path / "m.json", check_paths=False)
    assert back.to_dict() == m.to_dict()
    with pytest.raises(LoadError) as e:
        load_manifest(tmp_path / "m.json")
    assert e.value.field == "e1__aug0"
    (tmp_path / "e2").mkdir()
    assert len(load_manifest(tmp_path / "m.json")) == 2


def test_manifest_duplicates_and_schema(tmp_path):
    with pytest.raises(ConflictError):
        Manifest([ManifestEntry("a", "a"), ManifestEntry("a", "b")])
    (tmp_path / "m.json").write_text(json.dumps({"schema_version": 7, "episodes": []}))
    with pytest.raises(LoadError) as e:
        load_manifest(tmp_path / "m.json")
    assert e.value.field == "schema_version"
