import copy
import json
import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, strategies as st

from mugl.data import (
    Archive,
    archive_from_json,
    archive_to_json,
    decode_archive,
    desk_spec,
    encode_archive,
    load_archive,
    load_spec,
    save_archive,
    split_cross_setup,
    synth_generate,
)
from mugl.errors import BadSpec, CorruptArchive, InvariantViolation, IoFailure, UnknownSetup
from mugl.kinematics import bone_lengths
from mugl.rotations import IDENTITY_6D
from mugl.sequence import compose_global, sequence_world


def tiny_spec(**cls):
    spec = desk_spec()
    spec.update(samples_per_class=3, jitter={}, view_yaw_deg=[0.0, 0.0])
    spec["classes"] = [dict({"name": "x", "t_range": [16, 16]}, **cls)]
    return spec


def test_desk_manifest(desk):
    manifest, samples = desk
    assert [c.name for c in manifest.classes] == ["wave", "squat", "walk", "approach"]
    assert manifest.person_counts == [1, 1, 1, 2] and manifest.leg_classes == [1, 2]
    assert (manifest.T, manifest.P, manifest.skeleton.joint_count) == (16, 2, 8)
    assert len(samples) == 160
    assert all(sum(s.class_label == c for s in samples) == 40 for c in range(4))


def test_synth_is_deterministic():
    a = synth_generate(desk_spec(), 3)[1]
    b = synth_generate(desk_spec(), 3)[1]
    c = synth_generate(desk_spec(), 4)[1]
    assert a == b and a != c


def test_static_class_is_rest_pose():
    manifest, samples = synth_generate(tiny_spec(joints={}), 0)
    for s in samples:
        np.testing.assert_allclose(s.local, np.broadcast_to(IDENTITY_6D, s.local.shape), atol=1e-7)
        np.testing.assert_array_equal(s.trajectory, 0)


def test_constant_velocity_class():
    _, samples = synth_generate(tiny_spec(velocity=[0.1, 0, 0]), 0)
    t = np.arange(16)
    for s in samples:
        np.testing.assert_allclose(s.trajectory, np.stack([0.1 * t, 0 * t, 0 * t], 1), atol=1e-6)


def test_second_person_displacement_pattern():
    spec = tiny_spec(persons=2, second={"offset": [0.0, 0.0, 1.6], "velocity": [0.0, 0.0, -0.05]})
    _, samples = synth_generate(spec, 0)
    t = np.arange(16)[:, None]
    pattern = np.array([0.0, 0.0, 1.6]) + np.array([0.0, 0.0, -0.05]) * t
    for s in samples:
        g = compose_global(s.trajectory.astype(np.float64), s.displacements.astype(np.float64))
        np.testing.assert_allclose(g[1] - g[0], pattern, atol=1e-6)


def test_synth_padding_holds_last_frame(desk):
    manifest, samples = desk
    for s in samples[:40]:
        world = sequence_world(s, manifest.skeleton)
        np.testing.assert_allclose(world[s.length:], np.broadcast_to(world[s.length - 1], world[s.length:].shape), atol=1e-6)


def test_synth_bone_lengths(desk):
    manifest, samples = desk
    sk = manifest.skeleton
    rest = bone_lengths(sk.rest, sk.tree)
    world = np.stack([sequence_world(s, sk) for s in samples[::7]])
    assert np.abs(bone_lengths(world, sk.tree) - rest).max() / rest.min() < 1e-5


def test_spec_validation(tmp_path):
    with pytest.raises(BadSpec):
        synth_generate({"T": 16}, 0)
    with pytest.raises(BadSpec):
        synth_generate(tiny_spec(joints={"tail": {"axis": [0, 0, 1]}}), 0)
    with pytest.raises(BadSpec):
        synth_generate(tiny_spec(t_range=[0, 20]), 0)
    (tmp_path / "bad.json").write_text("{nope")
    with pytest.raises(BadSpec):
        load_spec(tmp_path / "bad.json")
    with pytest.raises(IoFailure):
        load_spec(tmp_path / "missing.json")


def test_archive_round_trip(desk, tmp_path):
    manifest, samples = desk
    path = tmp_path / "d.mugl"
    save_archive(manifest, samples[:2], path)
    back = load_archive(path)
    assert back.samples == samples[:2]
    assert back.manifest.to_dict() == manifest.to_dict()
    assert encode_archive(back.manifest, back.samples) == path.read_bytes()


def test_archive_layout(desk):
    manifest, samples = desk
    buf = encode_archive(manifest, samples[:1])
    assert buf[:8] == b"MUGLDATA"
    version, mlen = struct.unpack("<II", buf[8:16])
    assert version == 1
    assert json.loads(buf[16 : 16 + mlen])["T"] == 16
    (count,) = struct.unpack("<I", buf[16 + mlen : 20 + mlen])
    assert count == 1
    rec = buf[20 + mlen : -4]
    assert struct.unpack("<I", buf[-4:])[0] == zlib.crc32(rec)
    assert struct.unpack("<4i", rec[:16]) == (0, samples[0].viewpoint, samples[0].setup, samples[0].length)


def test_archive_corruption(desk, tmp_path):
    manifest, samples = desk
    buf = encode_archive(manifest, samples[:2])
    with pytest.raises(CorruptArchive):
        decode_archive(buf[:-5])
    with pytest.raises(CorruptArchive):
        decode_archive(b"NOTMUGL!" + buf[8:])
    flipped = bytearray(buf)
    flipped[-20] ^= 0xFF
    with pytest.raises(CorruptArchive):
        decode_archive(bytes(flipped))
    with pytest.raises(CorruptArchive):
        decode_archive(buf + b"\0")
    with pytest.raises(IoFailure):
        load_archive(tmp_path / "missing.mugl")


def test_archive_rejects_invalid_samples(desk):
    manifest, samples = desk
    bad = copy.copy(samples[0])
    object.__setattr__(bad, "class_label", 9)
    with pytest.raises(InvariantViolation):
        encode_archive(manifest, [bad])


def test_json_round_trip(desk):
    manifest, samples = desk
    arch = Archive(manifest, samples[:5])
    doc = json.loads(json.dumps(archive_to_json(arch, include_joints=True)))
    assert doc["format"] == "mugl-json"
    assert np.asarray(doc["samples"][0]["joints"]).shape == (samples[0].length, 2, 8, 3)
    back = archive_from_json(doc)
    assert back.samples == arch.samples
    assert encode_archive(back.manifest, back.samples) == encode_archive(manifest, samples[:5])
    doc["format"] = "other"
    with pytest.raises(CorruptArchive):
        archive_from_json(doc)


def test_split_cross_setup(desk):
    _, samples = desk
    train, held = split_cross_setup(samples, [0])
    assert all(s.setup == 0 for s in train) and all(s.setup == 1 for s in held)
    train, held = split_cross_setup(samples, [])
    assert train == [] and len(held) == len(samples)
    with pytest.raises(UnknownSetup):
        split_cross_setup(samples, [7])


@given(st.lists(st.integers(0, 3), min_size=1, max_size=30), st.sets(st.integers(0, 3)))
def test_split_is_partition(setups, train_setups):
    _, base = synth_generate(tiny_spec(), 0)
    samples = [copy.copy(base[0]) for _ in setups]
    for s, k in zip(samples, setups):
        object.__setattr__(s, "setup", k)
    train, held = split_cross_setup(samples, train_setups, known_setups=range(4))
    assert len(train) + len(held) == len(samples)
    assert all(s.setup in train_setups for s in train) and all(s.setup not in train_setups for s in held)
