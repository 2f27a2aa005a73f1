"""Continuous 6D rotation representation and 3x3 rotation-matrix utilities.

The 6D vector holds the first two columns ``(a1, a2)`` of a rotation matrix.
Mapping back uses Gram-Schmidt, so raw network outputs of any scale are valid
as long as the two columns are not collinear.

All functions accept numpy arrays or torch tensors with arbitrary leading
batch dimensions and return the same array type they were given. The torch
path is differentiable.
"""

from __future__ import annotations

import numpy as np
import torch

from .errors import DegenerateInput, InvalidRotation, ShapeMismatch

DEGENERATE_EPS = 1e-8
ORTHO_TOL = 1e-4

IDENTITY_6D = (1.0, 0.0, 0.0, 0.0, 1.0, 0.0)


def _as_tensor(x):
    if isinstance(x, torch.Tensor):
        return x, False
    arr = np.array(x, dtype=np.float64)
    return torch.from_numpy(arr), True


def _back(t: torch.Tensor, to_numpy: bool):
    return t.detach().numpy() if to_numpy else t


def rot6d_to_matrix(r, check: bool = True):
    """Map 6D vectors ``(..., 6)`` to rotation matrices ``(..., 3, 3)``.

    Columns of the result are ``b1 = a1/|a1|``, ``b2`` the normalized part of
    ``a2`` orthogonal to ``b1``, and ``b3 = b1 x b2``.
    """
    t, to_numpy = _as_tensor(r)
    if t.shape[-1] != 6:
        raise ShapeMismatch(f"expected trailing dimension 6, got shape {tuple(t.shape)}")
    a1, a2 = t[..., :3], t[..., 3:]
    n1 = torch.linalg.vector_norm(a1, dim=-1, keepdim=True)
    if check and bool((n1 < DEGENERATE_EPS).any()):
        raise DegenerateInput("first 6D column has (near) zero norm")
    b1 = a1 / n1
    u = a2 - (b1 * a2).sum(-1, keepdim=True) * b1
    n2 = torch.linalg.vector_norm(u, dim=-1, keepdim=True)
    if check and bool((n2 < DEGENERATE_EPS).any()):
        raise DegenerateInput("6D columns are (near) collinear")
    b2 = u / n2
    b3 = torch.linalg.cross(b1, b2, dim=-1)
    return _back(torch.stack((b1, b2, b3), dim=-1), to_numpy)


def check_rotation(m, tol: float = ORTHO_TOL) -> None:
    """Raise InvalidRotation unless every matrix is orthonormal with det +1."""
    t, _ = _as_tensor(m)
    if t.shape[-2:] != (3, 3):
        raise ShapeMismatch(f"expected (..., 3, 3), got {tuple(t.shape)}")
    t = t.detach().to(torch.float64)
    eye = torch.eye(3, dtype=t.dtype)
    ortho_err = (t.transpose(-1, -2) @ t - eye).abs().amax() if t.numel() else torch.tensor(0.0)
    if float(ortho_err) > tol:
        raise InvalidRotation(f"columns not orthonormal (max deviation {float(ortho_err):.3g})")
    if t.numel():
        det_err = (torch.linalg.det(t) - 1.0).abs().amax()
        if float(det_err) > tol:
            raise InvalidRotation(f"determinant deviates from +1 by {float(det_err):.3g}")


def matrix_to_rot6d(m, check: bool = True):
    """Drop the third column: ``(..., 3, 3) -> (..., 6)``."""
    t, to_numpy = _as_tensor(m)
    if check:
        check_rotation(t)
    return _back(torch.cat((t[..., :, 0], t[..., :, 1]), dim=-1), to_numpy)


def axis_angle_to_matrix(axis, angle):
    """Rodrigues formula. ``axis`` is ``(..., 3)`` (normalized here), ``angle`` broadcastable to ``(...)``."""
    ax, to_numpy = _as_tensor(axis)
    ang = torch.as_tensor(angle, dtype=ax.dtype)
    ax = ax / torch.linalg.vector_norm(ax, dim=-1, keepdim=True)
    x, y, z = ax.unbind(-1)
    zero = torch.zeros_like(x)
    k = torch.stack(
        (
            torch.stack((zero, -z, y), -1),
            torch.stack((z, zero, -x), -1),
            torch.stack((-y, x, zero), -1),
        ),
        -2,
    )
    s = torch.sin(ang)[..., None, None]
    c = torch.cos(ang)[..., None, None]
    eye = torch.eye(3, dtype=ax.dtype).expand(k.shape)
    return _back(eye + s * k + (1.0 - c) * (k @ k), to_numpy)


def rotation_angle(m):
    """Geodesic angle of rotation matrices, in radians."""
    t, to_numpy = _as_tensor(m)
    tr = t.diagonal(dim1=-2, dim2=-1).sum(-1)
    return _back(torch.arccos(((tr - 1.0) / 2.0).clamp(-1.0, 1.0)), to_numpy)


def random_rotation(seed: int, angle: float | None = None) -> np.ndarray:
    """Deterministic random rotation: uniform axis on the sphere, angle uniform in [0, pi].

    Passing ``angle`` fixes the angle while keeping the seeded axis.
    """
    rng = np.random.default_rng(seed)
    axis = rng.normal(size=3)
    while np.linalg.norm(axis) < 1e-12:
        axis = rng.normal(size=3)
    theta = rng.uniform(0.0, np.pi) if angle is None else float(angle)
    return axis_angle_to_matrix(axis, theta)
