import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lilac import datamodel as dm
from lilac.rotations import random_rotation


def make_episode(seed=0, horizon=4, n=5, with_prompt=True, size=32):
    rng = np.random.default_rng(seed)
    cam = dm.CameraModel(40.0, 42.0, size / 2, size / 2 - 1, size, size)
    coords = rng.uniform(0, size - 0.01, size=(horizon, n, 2))
    traj = [dm.Pose6DoF(rng.normal(scale=0.2, size=3), random_rotation(rng)) for _ in range(horizon)]
    s = size / 32
    prompt = dm.VisualPrompt((1.5 * s, 2.0 * s), (20.0 * s, 7.25 * s), (0.0, 1.0, 10.0 * s, 12.0 * s)) \
        if with_prompt else None
    return dm.Episode(f"ep{seed:05d}", rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8),
                      "move the red block left", rng.uniform(0.5, 2.0, size=(size, size)), cam,
                      dm.FlowSequence(coords), traj, prompt)


def assert_episodes_close(a: dm.Episode, b: dm.Episode):
    assert a.id == b.id and a.instruction == b.instruction and a.camera == b.camera
    assert np.array_equal(a.rgb, b.rgb)
    assert np.allclose(a.depth, b.depth, rtol=1e-6)
    assert np.allclose(a.gt_flow.coords, b.gt_flow.coords, rtol=1e-6, atol=1e-5)
    assert len(a.gt_trajectory) == len(b.gt_trajectory)
    for p, q in zip(a.gt_trajectory, b.gt_trajectory):
        assert np.allclose(p.translation, q.translation, atol=1e-6)
        assert np.allclose(p.rotation, q.rotation, atol=1e-6)
    assert (a.prompt is None) == (b.prompt is None)
    if a.prompt is not None:
        assert np.allclose(a.prompt.start + a.prompt.end + a.prompt.bbox,
                           b.prompt.start + b.prompt.end + b.prompt.bbox)


def test_save_load_round_trip(tmp_path):
    e = make_episode()
    path = tmp_path / "e.lflw"
    dm.save_episode(e, path)
    loaded = dm.load_episode(path)
    assert_episodes_close(e, loaded)
    dm.save_episode(loaded, tmp_path / "again.lflw")
    assert (tmp_path / "again.lflw").read_bytes() == path.read_bytes()
    assert dm.validate(loaded) == []


def test_bad_magic(tmp_path):
    path = tmp_path / "e.lflw"
    path.write_bytes(b"XXXX" + dm.encode_episode(make_episode())[4:])
    with pytest.raises(dm.CorruptPayload):
        dm.load_episode(path)


def test_future_version(tmp_path):
    buf = bytearray(dm.encode_episode(make_episode()))
    buf[4:6] = struct.pack("<H", dm.FORMAT_VERSION + 1)
    with pytest.raises(dm.FormatVersionMismatch):
        dm.decode_episode(bytes(buf))


def test_missing_section():
    buf = dm.encode_episode(make_episode(with_prompt=False))
    # drop the trailing instruction section
    instr = "move the red block left".encode()
    truncated = buf[: len(buf) - len(instr) - 4]
    with pytest.raises(dm.MissingField):
        dm.decode_episode(truncated)


def test_truncated_payload():
    buf = dm.encode_episode(make_episode())
    with pytest.raises(dm.CorruptPayload):
        dm.decode_episode(buf[:-3])


def test_validate_clean_episode():
    assert dm.validate(make_episode()) == []


def test_validate_flow_at_width_boundary():
    e = make_episode()
    e.gt_flow.coords[2, 1, 0] = e.camera.width
    assert len(dm.validate(e)) == 1


def test_validate_trajectory_length():
    e = make_episode()
    e.gt_trajectory = e.gt_trajectory[:-1]
    assert len(dm.validate(e)) == 1


def test_validate_nonpositive_depth():
    e = make_episode()
    x, y = np.floor(e.gt_flow.coords[0, 0]).astype(int)
    e.depth[y, x] = 0.0
    assert any("depth" in v for v in dm.validate(e))


def test_validate_bad_prompt_and_camera():
    e = make_episode()
    e.prompt = dm.VisualPrompt((0.0, 0.0), (40.0, 1.0), (5.0, 1.0, 2.0, 3.0))
    msgs = dm.validate(e)
    assert any("bbox" in m for m in msgs) and any("end" in m for m in msgs)
    assert dm.CameraModel(-1.0, 1.0, 0.0, 0.0, 8, 8).violations()


def test_digest_stable():
    assert make_episode(3).digest() == make_episode(3).digest()
    assert make_episode(3).digest() != make_episode(4).digest()


def test_pose_round_trips():
    rng = np.random.default_rng(1)
    for _ in range(50):
        p = dm.Pose6DoF(rng.normal(size=3), random_rotation(rng))
        q = dm.Pose6DoF.from_quaternion(p.translation, p.quaternion)
        assert np.allclose(p.rotation, q.rotation, atol=1e-12)
        v = dm.Pose6DoF.from_vector6(p.to_vector6())
        assert np.allclose(p.rotation, v.rotation, atol=1e-10)
        assert abs(np.linalg.norm(p.quaternion) - 1) < 1e-9
        ident = p.compose(p.inverse())
        assert np.allclose(ident.rotation, np.eye(3), atol=1e-12)
        assert np.allclose(ident.translation, 0, atol=1e-12)


def test_split_directory(tmp_path):
    eps = [make_episode(i) for i in range(3)]
    dm.write_split(tmp_path, "train", eps)
    loaded = dm.load_split(tmp_path, "train")
    assert [e.id for e in loaded] == [e.id for e in eps]
    d1 = dm.dataset_digest(tmp_path)
    dm.write_split(tmp_path, "train", loaded)
    assert dm.dataset_digest(tmp_path) == d1


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 100_000), st.integers(2, 9), st.integers(1, 20), st.booleans(),
       st.text(min_size=1, max_size=40).filter(lambda s: s.strip()))
def test_serialization_total_and_invertible(seed, horizon, n, with_prompt, instruction):
    e = make_episode(seed, horizon, n, with_prompt, size=16)
    e.instruction = instruction
    assert dm.validate(e) == []
    buf = dm.encode_episode(e)
    back = dm.decode_episode(buf)
    assert_episodes_close(e, back)
    assert dm.encode_episode(back) == buf
