"""Action-sequence data model and the transforms around it.

A sequence is stored decoupled: per-person local poses as 6D joint rotations
(each frame's root at the origin) plus a global part made of the first
person's root trajectory and the other persons' displacements relative to it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import OutOfRange, ShapeMismatch, TooShort
from .kinematics import Skeleton, forward_kinematics, inverse_kinematics
from .rotations import matrix_to_rot6d, rot6d_to_matrix

DEFAULT_THETA_S = 0.97


@dataclass(frozen=True, eq=False)
class ActionSequence:
    """One (possibly multi-person) action.

    ``local`` is ``(T, P, J, 6)``, ``trajectory`` is the first person's root
    path ``(T, 3)`` and ``displacements`` is ``(P - 1, T, 3)``. Frames at index
    ``>= length`` are padding.
    """

    class_label: int
    viewpoint: int
    length: int
    local: np.ndarray
    trajectory: np.ndarray
    displacements: np.ndarray
    setup: int = 0

    def __post_init__(self):
        if self.local.ndim != 4 or self.local.shape[-1] != 6:
            raise ShapeMismatch(f"local must be (T, P, J, 6), got {self.local.shape}")
        t, p = self.local.shape[:2]
        if self.trajectory.shape != (t, 3):
            raise ShapeMismatch(f"trajectory must be ({t}, 3), got {self.trajectory.shape}")
        if self.displacements.shape != (p - 1, t, 3):
            raise ShapeMismatch(f"displacements must be ({p - 1}, {t}, 3), got {self.displacements.shape}")
        if not 1 <= self.length <= t:
            raise OutOfRange(f"length {self.length} outside [1, {t}]")

    @property
    def T(self) -> int:
        return self.local.shape[0]

    @property
    def person_count(self) -> int:
        return self.local.shape[1]

    @property
    def joint_count(self) -> int:
        return self.local.shape[2]

    def global_array(self) -> np.ndarray:
        """Global component as ``(T, P, 3)``: first trajectory then displacements."""
        return np.concatenate([self.trajectory[:, None], np.swapaxes(self.displacements, 0, 1)], axis=1)

    def __eq__(self, other):
        if not isinstance(other, ActionSequence):
            return NotImplemented
        return (
            (self.class_label, self.viewpoint, self.length, self.setup)
            == (other.class_label, other.viewpoint, other.length, other.setup)
            and np.array_equal(self.local, other.local)
            and np.array_equal(self.trajectory, other.trajectory)
            and np.array_equal(self.displacements, other.displacements)
        )

    __hash__ = None


def encode_length(t_s: int, T: int) -> np.ndarray:
    """Index sequence ``t[n] = n / (t_s - 1)`` for ``n < t_s`` and 1 afterwards.

    ``t_s = 1`` yields all ones.
    """
    if not 1 <= t_s <= T:
        raise OutOfRange(f"t_s={t_s} outside [1, {T}]")
    code = np.ones(T)
    if t_s > 1:
        code[:t_s] = np.arange(t_s) / (t_s - 1)
    return code


def decode_length(code, theta_s: float = DEFAULT_THETA_S):
    """Length from the first entry ``j`` with ``code[j] >= theta_s``; ``T`` when nothing crosses.

    The crossing is read as a point on a ramp through the origin, so the ramp
    ends at index ``round(j / code[j])`` and the length is one more. When the
    crossing value is close to 1 this is just ``j + 1``. For long codes the
    ramp can pass ``theta_s`` a step before it reaches 1 (``t[j] = j/(t_s-1)``
    with ``j = t_s - 2``), and the correction recovers the exact length.

    Accepts a single code ``(T,)`` or a batch ``(..., T)``.
    """
    c = np.asarray(code, dtype=np.float64)
    T = c.shape[-1]
    hit = c >= theta_s
    j = np.argmax(hit, axis=-1)
    at = np.take_along_axis(c, j[..., None], axis=-1)[..., 0]
    end = np.floor(j / np.where(hit.any(axis=-1), at, 1.0) + 0.5)
    out = np.where(hit.any(axis=-1), np.clip(end, j, T - 1) + 1, T).astype(np.int64)
    return int(out) if out.ndim == 0 else out


def length_mask(lengths, T: int) -> np.ndarray:
    """Boolean ``(N, T)`` mask of valid (non-padded) timesteps."""
    return np.arange(T)[None, :] < np.asarray(lengths)[:, None]


def compose_global(trajectory, displacements) -> np.ndarray:
    """Per-person root trajectories ``(P, T, 3)``; person ``j`` is ``G1 + D_j``."""
    g1 = np.asarray(trajectory)
    d = np.asarray(displacements)
    if g1.ndim != 2 or g1.shape[-1] != 3 or d.ndim != 3 or d.shape[1:] != g1.shape:
        raise ShapeMismatch(f"trajectory {g1.shape} and displacements {d.shape} disagree")
    return np.concatenate([g1[None], g1[None] + d], axis=0)


def decompose_global(trajectories) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of :func:`compose_global`."""
    g = np.asarray(trajectories)
    if g.ndim != 3 or g.shape[-1] != 3:
        raise ShapeMismatch(f"expected (P, T, 3), got {g.shape}")
    return g[0], g[1:] - g[:1]


def split_components(raw, skeleton: Skeleton):
    """Decouple world joints ``(T, P, J, 3)`` into ``(local6d, trajectory, displacements)``.

    Root trajectories form the global part; every frame is moved so its root
    sits at the origin and then converted to 6D rotations by inverse kinematics.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 4 or raw.shape[2:] != (skeleton.joint_count, 3):
        raise ShapeMismatch(f"expected (T, P, {skeleton.joint_count}, 3), got {raw.shape}")
    root = skeleton.tree.root_index
    roots = raw[:, :, root, :]
    local_joints = raw - roots[:, :, None, :]
    rot = inverse_kinematics(local_joints, skeleton.rest, skeleton.tree)
    g1, d = decompose_global(np.swapaxes(roots, 0, 1))
    return matrix_to_rot6d(rot, check=False), g1, d


def compose_world(local6d, trajectory, displacements, skeleton: Skeleton) -> np.ndarray:
    """World joints ``(T, P, J, 3)``: forward kinematics offset by each person's root path."""
    rot = rot6d_to_matrix(np.asarray(local6d, dtype=np.float64))
    local = forward_kinematics(rot, skeleton.rest, skeleton.tree)
    roots = compose_global(trajectory, displacements)
    return local + np.swapaxes(roots, 0, 1)[:, :, None, :]


def sequence_world(seq: ActionSequence, skeleton: Skeleton) -> np.ndarray:
    return compose_world(seq.local, seq.trajectory, seq.displacements, skeleton)


def temporal_subsample(seq: ActionSequence, factor: int) -> ActionSequence:
    """Keep every ``factor``-th frame starting at frame 0."""
    if factor < 1:
        raise OutOfRange(f"subsample factor must be >= 1, got {factor}")
    t_new = math.ceil(seq.T / factor)
    length = min(max(math.ceil(seq.length / factor), 1), t_new)
    return replace(
        seq,
        length=length,
        local=seq.local[::factor].copy(),
        trajectory=seq.trajectory[::factor].copy(),
        displacements=seq.displacements[:, ::factor].copy(),
    )


def _cubic_kernel(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    x = np.abs(x)
    near = ((a + 2) * x - (a + 3)) * x * x + 1
    far = ((a * x - 5 * a) * x + 8 * a) * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def bicubic_matrix(T: int, target_T: int) -> np.ndarray:
    """Linear operator ``(target_T, T)`` performing cubic-convolution resampling in time.

    Output frame ``i`` samples source position ``i (T-1)/(target_T-1)``, so both
    endpoints are kept. Samples beyond the ends are extrapolated with Keys'
    boundary rule ``f(-1) = 3 f(0) - 3 f(1) + f(2)``, which keeps linear and
    quadratic signals exact.
    """
    if T < 4:
        raise TooShort(f"bicubic resampling needs at least 4 frames, got {T}")
    if target_T < 1:
        raise OutOfRange(f"target length must be >= 1, got {target_T}")
    w = np.zeros((target_T, T))
    scale = (T - 1) / (target_T - 1) if target_T > 1 else 0.0
    for i in range(target_T):
        s = i * scale
        k = min(int(math.floor(s)), T - 2)
        f = s - k
        taps = np.array([k - 1, k, k + 1, k + 2])
        weights = _cubic_kernel(np.array([f + 1, f, 1 - f, 2 - f]))
        for idx, wt in zip(taps, weights):
            if wt == 0.0:
                continue
            if idx < 0:
                w[i, [0, 1, 2]] += wt * np.array([3.0, -3.0, 1.0])
            elif idx >= T:
                w[i, [T - 1, T - 2, T - 3]] += wt * np.array([3.0, -3.0, 1.0])
            else:
                w[i, idx] += wt
    return w


def temporal_upsample_bicubic(x, target_T: int) -> np.ndarray:
    """Resample ``(T, ...)`` to ``(target_T, ...)`` along the first axis."""
    x = np.asarray(x, dtype=np.float64)
    w = bicubic_matrix(x.shape[0], target_T)
    return (w @ x.reshape(x.shape[0], -1)).reshape((target_T,) + x.shape[1:])


def resample_valid(x, length: int, target_T: int) -> np.ndarray:
    """Resample the first ``length`` frames of ``x`` to ``target_T`` frames.

    Clips shorter than four frames are first extended by holding their last
    frame so the cubic resampler has enough support.
    """
    x = np.asarray(x, dtype=np.float64)[:length]
    if length < 4:
        x = np.concatenate([x, np.repeat(x[-1:], 4 - length, axis=0)], axis=0)
    return temporal_upsample_bicubic(x, target_T)


def pad_crop(seq: ActionSequence, T_target: int) -> ActionSequence:
    """Crop to the first ``T_target`` frames, or extend by repeating the last valid frame."""
    if T_target < 1:
        raise OutOfRange(f"target length must be >= 1, got {T_target}")
    if seq.T >= T_target:
        return replace(
            seq,
            length=min(seq.length, T_target),
            local=seq.local[:T_target].copy(),
            trajectory=seq.trajectory[:T_target].copy(),
            displacements=seq.displacements[:, :T_target].copy(),
        )
    n = T_target - seq.T
    last = seq.length - 1
    return replace(
        seq,
        local=np.concatenate([seq.local, np.repeat(seq.local[last : last + 1], n, axis=0)]),
        trajectory=np.concatenate([seq.trajectory, np.repeat(seq.trajectory[last : last + 1], n, axis=0)]),
        displacements=np.concatenate(
            [seq.displacements, np.repeat(seq.displacements[:, last : last + 1], n, axis=1)], axis=1
        ),
    )
