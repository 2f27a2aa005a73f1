"""Kinematic trees, forward kinematics and the matching inverse kinematics.

Forward kinematics follows the recursion

    pos(root) = 0
    pos(c)    = R_c (rest_c - rest_p) + pos(p)

where ``R_c`` is the child joint's own (world-frame) rotation. Because every
rotated offset only feeds its descendants additively, the recursion is a
matrix product with the tree's ancestor matrix, which keeps it vectorized and
differentiable.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import torch

from .errors import TreeMismatch, ZeroBone
from .rotations import _as_tensor, _back

ZERO_BONE_EPS = 1e-8


@dataclass(frozen=True)
class KinematicTree:
    """Joint hierarchy given by parent links; the root has parent -1."""

    parents: tuple[int, ...]
    names: tuple[str, ...] | None = None

    def __post_init__(self):
        parents = tuple(int(p) for p in self.parents)
        object.__setattr__(self, "parents", parents)
        roots = [j for j, p in enumerate(parents) if p == -1]
        if len(roots) != 1:
            raise TreeMismatch(f"expected exactly one root, found {len(roots)}")
        n = len(parents)
        for j, p in enumerate(parents):
            if p != -1 and not 0 <= p < n:
                raise TreeMismatch(f"joint {j} has out-of-range parent {p}")
        if self.names is not None and len(self.names) != n:
            raise TreeMismatch("names length differs from joint count")
        # topological_order raises on cycles / unreachable joints
        self.topological_order

    @property
    def joint_count(self) -> int:
        return len(self.parents)

    @property
    def root_index(self) -> int:
        return self.parents.index(-1)

    def children(self, j: int) -> list[int]:
        return [c for c, p in enumerate(self.parents) if p == j]

    @cached_property
    def topological_order(self) -> tuple[int, ...]:
        order = [self.root_index]
        i = 0
        while i < len(order):
            order.extend(self.children(order[i]))
            i += 1
        if len(order) != self.joint_count:
            raise TreeMismatch("parent links contain a cycle or unreachable joints")
        return tuple(order)

    @cached_property
    def ancestor_matrix(self) -> np.ndarray:
        """``A[j, k] = 1`` when non-root joint ``k`` lies on the path root -> ``j`` (inclusive)."""
        n = self.joint_count
        a = np.zeros((n, n))
        for j in range(n):
            k = j
            while self.parents[k] != -1:
                a[j, k] = 1.0
                k = self.parents[k]
        return a

    def bone_offsets(self, positions) -> np.ndarray:
        """Child-minus-parent vectors, root row set to zero."""
        pos = np.asarray(positions, dtype=np.float64)
        par = np.array([p if p >= 0 else j for j, p in enumerate(self.parents)])
        return pos - pos[..., par, :]


@dataclass(frozen=True)
class Skeleton:
    """A kinematic tree together with its rest-pose joint positions (J x 3)."""

    tree: KinematicTree
    rest: np.ndarray = field(repr=False)

    def __post_init__(self):
        rest = np.asarray(self.rest, dtype=np.float64)
        if rest.shape != (self.tree.joint_count, 3):
            raise TreeMismatch(f"rest pose shape {rest.shape} does not match J={self.tree.joint_count}")
        lengths = bone_lengths(rest, self.tree)
        if np.any(lengths < ZERO_BONE_EPS):
            raise ZeroBone("rest pose has a zero-length bone")
        object.__setattr__(self, "rest", rest)

    @property
    def joint_count(self) -> int:
        return self.tree.joint_count

    def to_dict(self) -> dict:
        return {
            "parents": list(self.tree.parents),
            "names": list(self.tree.names) if self.tree.names else None,
            "rest": self.rest.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Skeleton":
        names = tuple(d["names"]) if d.get("names") else None
        return cls(KinematicTree(tuple(d["parents"]), names), np.asarray(d["rest"], dtype=np.float64))

    def __eq__(self, other):
        if not isinstance(other, Skeleton):
            return NotImplemented
        return self.tree.parents == other.tree.parents and np.array_equal(self.rest, other.rest)

    __hash__ = None


def forward_kinematics(rotations, rest, tree: KinematicTree):
    """Joint positions ``(..., J, 3)`` from per-joint rotations ``(..., J, 3, 3)``.

    The root lands exactly at the origin and every bone keeps its rest length.
    """
    rot, to_numpy = _as_tensor(rotations)
    j = tree.joint_count
    if rot.shape[-3:] != (j, 3, 3):
        raise TreeMismatch(f"rotations shape {tuple(rot.shape)} does not match J={j}")
    rest_t = torch.as_tensor(np.asarray(rest, dtype=np.float64), dtype=rot.dtype)
    if rest_t.shape != (j, 3):
        raise TreeMismatch(f"rest pose shape {tuple(rest_t.shape)} does not match J={j}")
    offsets = torch.as_tensor(tree.bone_offsets(rest_t.numpy()), dtype=rot.dtype)
    rotated = (rot @ offsets[..., None])[..., 0]
    anc = torch.as_tensor(tree.ancestor_matrix, dtype=rot.dtype)
    return _back(anc @ rotated, to_numpy)


def bone_lengths(joints, tree: KinematicTree) -> np.ndarray:
    """Length of every bone, one per non-root joint in joint-index order."""
    pos = np.asarray(joints, dtype=np.float64)
    if pos.shape[-2:] != (tree.joint_count, 3):
        raise TreeMismatch(f"joints shape {pos.shape} does not match J={tree.joint_count}")
    off = tree.bone_offsets(pos)
    keep = [c for c in range(tree.joint_count) if c != tree.root_index]
    return np.linalg.norm(off[..., keep, :], axis=-1)


def _normalize_rows(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _any_perpendicular(a: np.ndarray) -> np.ndarray:
    basis = np.eye(3)[np.argmin(np.abs(a), axis=-1)]
    return _normalize_rows(np.cross(a, basis))


def _rodrigues(axis: np.ndarray, angle: np.ndarray) -> np.ndarray:
    x, y, z = axis[..., 0], axis[..., 1], axis[..., 2]
    zero = np.zeros_like(x)
    k = np.stack(
        (np.stack((zero, -z, y), -1), np.stack((z, zero, -x), -1), np.stack((-y, x, zero), -1)), -2
    )
    s = np.sin(angle)[..., None, None]
    c = np.cos(angle)[..., None, None]
    return np.eye(3) + s * k + (1.0 - c) * (k @ k)


def shortest_arc(a, b) -> np.ndarray:
    """Minimal-angle rotation taking direction ``a`` onto direction ``b`` (zero twist).

    Antiparallel inputs rotate by pi about a deterministic axis perpendicular to ``a``.
    """
    a = _normalize_rows(np.asarray(a, dtype=np.float64))
    b = _normalize_rows(np.asarray(b, dtype=np.float64))
    v = np.cross(a, b)
    s = np.linalg.norm(v, axis=-1)
    c = np.sum(a * b, axis=-1)
    angle = np.arctan2(s, c)
    safe = s > 1e-12
    axis = np.where(safe[..., None], v / np.where(safe, s, 1.0)[..., None], _any_perpendicular(a))
    # parallel case: angle is 0 and the axis is irrelevant; antiparallel: angle = pi
    angle = np.where(safe, angle, np.where(c > 0, 0.0, np.pi))
    return _rodrigues(axis, angle)


def procrustes_rotation(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Rotation ``R`` minimizing ``sum_i |R src_i - dst_i|^2``; inputs are ``(..., n, 3)``."""
    h = np.swapaxes(src, -1, -2) @ dst
    u, _, vt = np.linalg.svd(h)
    v = np.swapaxes(vt, -1, -2)
    d = np.sign(np.linalg.det(v @ np.swapaxes(u, -1, -2)))
    d = np.where(d == 0, 1.0, d)
    fix = np.ones(h.shape[:-2] + (3,))
    fix[..., 2] = d
    return v @ (fix[..., :, None] * np.swapaxes(u, -1, -2))


def inverse_kinematics(joints, rest, tree: KinematicTree) -> np.ndarray:
    """Per-joint rotations ``(..., J, 3, 3)`` reproducing ``joints`` under :func:`forward_kinematics`.

    Every non-root joint gets the shortest-arc rotation of its incoming bone,
    which is the only rotation forward kinematics reads for that joint. The
    root, which forward kinematics ignores, gets the best-fit orientation of
    its child bones (shortest arc for one child, Procrustes for several).
    """
    pos = np.asarray(joints, dtype=np.float64)
    rest = np.asarray(rest, dtype=np.float64)
    n = tree.joint_count
    if pos.shape[-2:] != (n, 3) or rest.shape != (n, 3):
        raise TreeMismatch(f"joints {pos.shape} / rest {rest.shape} do not match J={n}")
    obs = tree.bone_offsets(pos)
    ref = tree.bone_offsets(rest)
    root = tree.root_index
    non_root = [c for c in range(n) if c != root]
    obs_len = np.linalg.norm(obs[..., non_root, :], axis=-1)
    if np.any(obs_len < ZERO_BONE_EPS):
        raise ZeroBone("observed bone has (near) zero length")

    out = np.empty(pos.shape[:-1] + (3, 3))
    ref_b = np.broadcast_to(ref, obs.shape)
    out[..., non_root, :, :] = shortest_arc(ref_b[..., non_root, :], obs[..., non_root, :])
    kids = tree.children(root)
    if not kids:
        out[..., root, :, :] = np.eye(3)
    elif len(kids) == 1:
        out[..., root, :, :] = shortest_arc(ref_b[..., kids[0], :], obs[..., kids[0], :])
    else:
        out[..., root, :, :] = procrustes_rotation(ref_b[..., kids, :], obs[..., kids, :])
    return out


DESK_JOINTS = ("pelvis", "chest", "l_elbow", "l_hand", "r_elbow", "r_hand", "l_foot", "r_foot")


def desk_skeleton() -> Skeleton:
    """Eight-joint humanoid (height ~1 unit) used by the synthetic desk dataset."""
    parents = (-1, 0, 1, 2, 1, 4, 0, 0)
    rest = [
        [0.0, 0.0, 0.0],
        [0.0, 0.35, 0.0],
        [0.25, 0.30, 0.0],
        [0.50, 0.30, 0.0],
        [-0.25, 0.30, 0.0],
        [-0.50, 0.30, 0.0],
        [0.10, -0.50, 0.0],
        [-0.10, -0.50, 0.0],
    ]
    return Skeleton(KinematicTree(parents, DESK_JOINTS), np.array(rest))


HUMANOID24_JOINTS = (
    "pelvis", "l_hip", "r_hip", "spine1", "l_knee", "r_knee", "spine2", "l_ankle",
    "r_ankle", "spine3", "l_foot", "r_foot", "neck", "l_collar", "r_collar", "head",
    "l_shoulder", "r_shoulder", "l_elbow", "r_elbow", "l_wrist", "r_wrist", "l_hand", "r_hand",
)


def humanoid24() -> Skeleton:
    """Canonical 24-joint T-pose humanoid (SMPL joint layout, approximate meters, y up)."""
    parents = (-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21)
    rest = [
        [0.00, 0.00, 0.00], [0.06, -0.09, 0.00], [-0.06, -0.09, 0.00], [0.00, 0.11, -0.02],
        [0.10, -0.47, 0.00], [-0.10, -0.47, 0.00], [0.00, 0.24, 0.01], [0.09, -0.87, -0.04],
        [-0.09, -0.87, -0.04], [0.00, 0.29, 0.03], [0.12, -0.93, 0.08], [-0.12, -0.93, 0.08],
        [0.00, 0.51, 0.00], [0.08, 0.41, 0.00], [-0.08, 0.41, 0.00], [0.00, 0.60, 0.05],
        [0.19, 0.45, -0.01], [-0.19, 0.45, -0.01], [0.45, 0.43, -0.03], [-0.45, 0.43, -0.03],
        [0.71, 0.44, -0.03], [-0.71, 0.44, -0.03], [0.79, 0.43, -0.04], [-0.79, 0.43, -0.04],
    ]
    return Skeleton(KinematicTree(parents, HUMANOID24_JOINTS), np.array(rest))

