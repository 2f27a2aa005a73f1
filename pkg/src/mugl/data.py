"""Dataset archives, JSON interchange, the synthetic action generator and splits.

Binary archive layout (all little-endian)::

    b"MUGLDATA" | u32 version | u32 manifest_len | manifest (UTF-8 JSON)
    u32 sample_count
    per sample:  i32 class | i32 viewpoint | i32 setup | i32 length
                 f32 local[T*P*J*6] | f32 trajectory[T*3] | f32 displacements[(P-1)*T*3]
                 u32 crc32(of the record bytes above)
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .errors import BadSpec, CorruptArchive, InvariantViolation, IoFailure, UnknownSetup
from .kinematics import Skeleton, desk_skeleton, forward_kinematics, humanoid24
from .rotations import axis_angle_to_matrix
from .sequence import ActionSequence, sequence_world, split_components

ARCHIVE_MAGIC = b"MUGLDATA"
ARCHIVE_VERSION = 1
JSON_FORMAT = "mugl-json"


@dataclass
class ClassInfo:
    name: str
    person_count: int = 1
    leg: bool = False
    setups: list[int] = field(default_factory=list)


@dataclass
class Manifest:
    classes: list[ClassInfo]
    num_views: int
    skeleton: Skeleton
    T: int
    P: int
    frame_rate: float = 8.25
    extra: dict[str, Any] = field(default_factory=dict)

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    @property
    def person_counts(self) -> list[int]:
        return [c.person_count for c in self.classes]

    @property
    def leg_classes(self) -> list[int]:
        return [i for i, c in enumerate(self.classes) if c.leg]

    def to_dict(self) -> dict:
        return {
            "classes": [vars(c).copy() for c in self.classes],
            "num_views": self.num_views,
            "skeleton": self.skeleton.to_dict(),
            "T": self.T,
            "P": self.P,
            "frame_rate": self.frame_rate,
            "extra": self.extra,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Manifest":
        try:
            return cls(
                classes=[ClassInfo(**c) for c in d["classes"]],
                num_views=int(d["num_views"]),
                skeleton=Skeleton.from_dict(d["skeleton"]),
                T=int(d["T"]),
                P=int(d["P"]),
                frame_rate=float(d.get("frame_rate", 8.25)),
                extra=dict(d.get("extra", {})),
            )
        except (KeyError, TypeError) as exc:
            raise CorruptArchive(f"malformed manifest: {exc}") from exc

    def same_classes(self, other: "Manifest") -> bool:
        return [c.name for c in self.classes] == [c.name for c in other.classes]


@dataclass
class Archive:
    manifest: Manifest
    samples: list[ActionSequence]

    def by_class(self, c: int) -> list[ActionSequence]:
        return [s for s in self.samples if s.class_label == c]


def validate(manifest: Manifest, samples: Sequence[ActionSequence]) -> None:
    J = manifest.skeleton.joint_count
    for i, s in enumerate(samples):
        if s.local.shape != (manifest.T, manifest.P, J, 6):
            raise InvariantViolation(f"sample {i}: local shape {s.local.shape} does not match manifest")
        if not 0 <= s.class_label < manifest.num_classes:
            raise InvariantViolation(f"sample {i}: class {s.class_label} out of range")
        if not 0 <= s.viewpoint < manifest.num_views:
            raise InvariantViolation(f"sample {i}: viewpoint {s.viewpoint} out of range")
        if not 1 <= s.length <= manifest.T:
            raise InvariantViolation(f"sample {i}: length {s.length} out of range")


# -- binary archive ------------------------------------------------------------------

def _record_bytes(s: ActionSequence) -> bytes:
    head = struct.pack("<4i", s.class_label, s.viewpoint, s.setup, s.length)
    body = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes()
                    for a in (s.local, s.trajectory, s.displacements))
    return head + body


def encode_archive(manifest: Manifest, samples: Sequence[ActionSequence]) -> bytes:
    validate(manifest, samples)
    mbytes = json.dumps(manifest.to_dict(), sort_keys=True).encode("utf-8")
    parts = [ARCHIVE_MAGIC, struct.pack("<II", ARCHIVE_VERSION, len(mbytes)), mbytes,
             struct.pack("<I", len(samples))]
    for s in samples:
        rec = _record_bytes(s)
        parts.append(rec + struct.pack("<I", zlib.crc32(rec)))
    return b"".join(parts)


def decode_archive(buf: bytes, source: str = "<bytes>") -> Archive:
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CorruptArchive(f"{source}: truncated archive")
        out = buf[pos : pos + n]
        pos += n
        return out

    if take(8) != ARCHIVE_MAGIC:
        raise CorruptArchive(f"{source}: bad magic bytes")
    version, mlen = struct.unpack("<II", take(8))
    if version != ARCHIVE_VERSION:
        raise CorruptArchive(f"{source}: unsupported archive version {version}")
    try:
        manifest = Manifest.from_dict(json.loads(take(mlen).decode("utf-8")))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptArchive(f"{source}: manifest is not valid JSON") from exc
    (count,) = struct.unpack("<I", take(4))
    T, P, J = manifest.T, manifest.P, manifest.skeleton.joint_count
    sizes = (T * P * J * 6, T * 3, (P - 1) * T * 3)
    rec_len = 16 + 4 * sum(sizes)
    samples = []
    for i in range(count):
        rec = take(rec_len)
        (crc,) = struct.unpack("<I", take(4))
        if zlib.crc32(rec) != crc:
            raise CorruptArchive(f"{source}: checksum mismatch in record {i}")
        c, v, setup, length = struct.unpack("<4i", rec[:16])
        arrays = []
        off = 16
        for n in sizes:
            arrays.append(np.frombuffer(rec, dtype="<f4", count=n, offset=off).astype(np.float32))
            off += 4 * n
        try:
            samples.append(ActionSequence(
                class_label=c, viewpoint=v, length=length, setup=setup,
                local=arrays[0].reshape(T, P, J, 6),
                trajectory=arrays[1].reshape(T, 3),
                displacements=arrays[2].reshape(P - 1, T, 3),
            ))
        except ValueError as exc:
            raise InvariantViolation(f"{source}: record {i}: {exc}") from exc
    if pos != len(buf):
        raise CorruptArchive(f"{source}: trailing bytes after last record")
    validate(manifest, samples)
    return Archive(manifest, samples)


def save_archive(manifest: Manifest, samples: Sequence[ActionSequence], path) -> None:
    data = encode_archive(manifest, samples)
    try:
        Path(path).write_bytes(data)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def load_archive(path) -> Archive:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    return decode_archive(buf, str(path))


# -- JSON interchange --------------------------------------------------------------

def archive_to_json(archive: Archive, include_joints: bool = False) -> dict:
    samples = []
    for s in archive.samples:
        d = {
            "class": s.class_label, "viewpoint": s.viewpoint, "setup": s.setup, "length": s.length,
            "local": s.local.astype(np.float64).tolist(),
            "trajectory": s.trajectory.astype(np.float64).tolist(),
            "displacements": s.displacements.astype(np.float64).tolist(),
        }
        if include_joints:
            world = sequence_world(s, archive.manifest.skeleton)[: s.length]
            d["joints"] = world.tolist()
        samples.append(d)
    return {"format": JSON_FORMAT, "version": ARCHIVE_VERSION, "manifest": archive.manifest.to_dict(),
            "samples": samples}


def archive_from_json(doc: dict) -> Archive:
    if doc.get("format") != JSON_FORMAT or doc.get("version") != ARCHIVE_VERSION:
        raise CorruptArchive("not a mugl JSON archive of a supported version")
    manifest = Manifest.from_dict(doc["manifest"])
    samples = []
    for i, d in enumerate(doc["samples"]):
        try:
            samples.append(ActionSequence(
                class_label=int(d["class"]), viewpoint=int(d["viewpoint"]), setup=int(d["setup"]),
                length=int(d["length"]),
                local=np.asarray(d["local"], dtype=np.float32),
                trajectory=np.asarray(d["trajectory"], dtype=np.float32),
                displacements=np.asarray(d["displacements"], dtype=np.float32).reshape(
                    manifest.P - 1, manifest.T, 3),
            ))
        except (KeyError, ValueError) as exc:
            raise InvariantViolation(f"sample {i}: {exc}") from exc
    validate(manifest, samples)
    return Archive(manifest, samples)


# -- synthetic actions -----------------------------------------------------------------

def desk_spec() -> dict:
    """Four desk classes: arm wave, squat, walk (locomotion) and a two-person approach."""
    return {
        "T": 16, "P": 2, "num_views": 2, "setups": 2, "samples_per_class": 40,
        "skeleton": "desk", "frame_rate": 8.25, "view_yaw_deg": [0.0, 10.0],
        "jitter": {"amplitude": 0.15, "phase": 0.4},
        "classes": [
            {"name": "wave", "t_range": [8, 12], "joints": {
                "r_elbow": {"axis": [0, 0, 1], "amplitude": 0.6, "offset": -0.4, "frequency": 2.0},
                "r_hand": {"axis": [0, 0, 1], "amplitude": 1.0, "offset": -0.6, "frequency": 2.0},
                "l_elbow": {"axis": [0, 0, 1], "offset": -1.2},
                "l_hand": {"axis": [0, 0, 1], "offset": -1.2},
            }},
            {"name": "squat", "leg": True, "t_range": [10, 16], "joints": {
                "chest": {"axis": [1, 0, 0], "amplitude": 0.5, "offset": 0.3, "frequency": 1.0},
                "l_foot": {"axis": [1, 0, 0], "amplitude": 0.7, "offset": -0.4, "frequency": 1.0},
                "r_foot": {"axis": [1, 0, 0], "amplitude": 0.7, "offset": -0.4, "frequency": 1.0},
                "l_elbow": {"axis": [0, 1, 0], "offset": 1.3}, "l_hand": {"axis": [0, 1, 0], "offset": 1.3},
                "r_elbow": {"axis": [0, 1, 0], "offset": -1.3}, "r_hand": {"axis": [0, 1, 0], "offset": -1.3},
            }},
            {"name": "walk", "leg": True, "t_range": [12, 16], "velocity": [0.0, 0.0, 0.06], "joints": {
                "l_foot": {"axis": [1, 0, 0], "amplitude": 0.5, "frequency": 2.0},
                "r_foot": {"axis": [1, 0, 0], "amplitude": 0.5, "frequency": 2.0, "phase": 3.14159},
                "l_elbow": {"axis": [0, 0, 1], "offset": -1.3}, "r_elbow": {"axis": [0, 0, 1], "offset": 1.3},
                "l_hand": {"axis": [1, 0, 0], "amplitude": 0.4, "frequency": 2.0, "phase": 3.14159},
                "r_hand": {"axis": [1, 0, 0], "amplitude": 0.4, "frequency": 2.0},
            }},
            {"name": "approach", "persons": 2, "t_range": [8, 16], "joints": {
                "r_elbow": {"axis": [0, 1, 0], "offset": 1.0, "amplitude": 0.3, "frequency": 1.0},
                "r_hand": {"axis": [0, 1, 0], "offset": 1.0, "amplitude": 0.3, "frequency": 1.0},
            }, "second": {
                "offset": [0.0, 0.0, 1.6], "velocity": [0.0, 0.0, -0.06], "facing_deg": 180.0,
                "joints": {"l_elbow": {"axis": [0, 1, 0], "offset": -1.0},
                           "l_hand": {"axis": [0, 1, 0], "offset": -1.0}},
            }},
        ],
    }


SKELETONS = {"desk": desk_skeleton, "humanoid24": humanoid24}


def _yaw(deg: float) -> np.ndarray:
    return axis_angle_to_matrix(np.array([0.0, 1.0, 0.0]), np.deg2rad(deg))


def _pose_rotations(joint_specs: dict, skeleton: Skeleton, T: int, amp_scale: float, phase_shift: float):
    names = skeleton.tree.names
    rot = np.broadcast_to(np.eye(3), (T, skeleton.joint_count, 3, 3)).copy()
    t = np.arange(T)
    for name, js in joint_specs.items():
        if names is None or name not in names:
            raise BadSpec(f"unknown joint {name!r}")
        j = names.index(name)
        axis = np.asarray(js.get("axis", [0, 0, 1]), dtype=np.float64)
        if np.linalg.norm(axis) == 0:
            raise BadSpec(f"joint {name!r} has a zero rotation axis")
        amp = float(js.get("amplitude", 0.0)) * amp_scale
        freq = float(js.get("frequency", 0.0))
        phase = float(js.get("phase", 0.0)) + phase_shift
        angle = float(js.get("offset", 0.0)) + amp * np.sin(2 * np.pi * freq * t / T + phase)
        rot[:, j] = axis_angle_to_matrix(np.broadcast_to(axis, (T, 3)), angle)
    return rot


def _check_spec(spec: dict) -> None:
    for key in ("T", "P", "classes"):
        if key not in spec:
            raise BadSpec(f"spec is missing {key!r}")
    if not spec["classes"]:
        raise BadSpec("spec lists no classes")
    for c in spec["classes"]:
        lo, hi = c.get("t_range", spec.get("t_range", [spec["T"], spec["T"]]))
        if not 1 <= lo <= hi <= spec["T"]:
            raise BadSpec(f"class {c.get('name')}: bad length range [{lo}, {hi}]")
        if c.get("persons", 1) > spec["P"]:
            raise BadSpec(f"class {c.get('name')}: more persons than P")


def synth_generate(spec: dict, seed: int) -> tuple[Manifest, list[ActionSequence]]:
    """Procedural actions: per-joint sinusoidal rotations about fixed axes.

    Per sample the amplitude scale, phase and length are jittered. Classes
    with ``velocity`` translate at a constant rate per step; classes with
    ``second`` add another person whose displacement from the first follows
    ``offset + velocity * t``. Viewpoint ``v`` yaws the whole scene by
    ``view_yaw_deg[v]``.
    """
    _check_spec(spec)
    T, P = int(spec["T"]), int(spec["P"])
    skel_name = spec.get("skeleton", "desk")
    if skel_name not in SKELETONS:
        raise BadSpec(f"unknown skeleton {skel_name!r}")
    skeleton = SKELETONS[skel_name]()
    V = int(spec.get("num_views", 1))
    yaws = spec.get("view_yaw_deg", [0.0] * V)
    if len(yaws) != V:
        raise BadSpec("view_yaw_deg must list one angle per viewpoint")
    setups = int(spec.get("setups", 1))
    per_class = int(spec.get("samples_per_class", 10))
    jitter = spec.get("jitter", {})
    j_amp, j_phase = float(jitter.get("amplitude", 0.0)), float(jitter.get("phase", 0.0))
    rng = np.random.default_rng(seed)

    classes, samples = [], []
    for ci, cs in enumerate(spec["classes"]):
        persons = int(cs.get("persons", 1))
        classes.append(ClassInfo(cs.get("name", f"class{ci}"), persons, bool(cs.get("leg", False)),
                                 list(range(setups))))
        lo, hi = cs.get("t_range", spec.get("t_range", [T, T]))
        vel = np.asarray(cs.get("velocity", [0.0, 0.0, 0.0]), dtype=np.float64)
        second = cs.get("second")
        for k in range(per_class):
            amp_scale = 1.0 + rng.uniform(-j_amp, j_amp)
            phase = rng.uniform(-j_phase, j_phase)
            length = int(rng.integers(lo, hi + 1))
            view = int(rng.integers(V))
            steps = np.minimum(np.arange(T), length - 1)[:, None]
            persons_world = []
            rot1 = _pose_rotations(cs.get("joints", {}), skeleton, T, amp_scale, phase)
            root1 = vel * steps
            persons_world.append(forward_kinematics(rot1, skeleton.rest, skeleton.tree) + root1[:, None])
            if second is not None and persons >= 2:
                face = _yaw(float(second.get("facing_deg", 0.0)))
                rot2 = face @ _pose_rotations(second.get("joints", {}), skeleton, T, amp_scale, phase)
                disp = np.asarray(second.get("offset", [0, 0, 0]), dtype=np.float64) + \
                    np.asarray(second.get("velocity", [0, 0, 0]), dtype=np.float64) * steps
                persons_world.append(forward_kinematics(rot2, skeleton.rest, skeleton.tree)
                                     + (root1 + disp)[:, None])
            while len(persons_world) < P:
                persons_world.append(persons_world[0])
            world = np.stack(persons_world, axis=1) @ _yaw(yaws[view]).T
            world[length:] = world[length - 1]  # padding holds the last valid frame
            local6d, g1, d = split_components(world, skeleton)
            samples.append(ActionSequence(
                class_label=ci, viewpoint=view, length=length, setup=k % setups,
                local=local6d.astype(np.float32), trajectory=g1.astype(np.float32),
                displacements=d.astype(np.float32),
            ))
    manifest = Manifest(classes, V, skeleton, T, P, float(spec.get("frame_rate", 8.25)),
                        {"source": "synthetic", "seed": seed})
    return manifest, samples


def split_cross_setup(samples: Sequence[ActionSequence], train_setups, known_setups=None):
    """Partition samples by setup id into ``(train, eval)``."""
    train_setups = set(train_setups)
    present = {s.setup for s in samples} if known_setups is None else set(known_setups)
    unknown = train_setups - present
    if unknown:
        raise UnknownSetup(f"setups {sorted(unknown)} do not occur in the data")
    train = [s for s in samples if s.setup in train_setups]
    held = [s for s in samples if s.setup not in train_setups]
    return train, held


def load_spec(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise IoFailure(f"cannot read spec {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise BadSpec(f"{path} is not valid JSON: {exc}") from exc
