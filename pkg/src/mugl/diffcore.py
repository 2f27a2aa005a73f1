"""Differentiable building blocks, parameter checkpoints and a gradient checker.

Autograd comes from torch; this module pins down the layer set the model is
built from (affine maps, 1D convolutions, a residual 2D convolution block),
their initialization, the on-disk parameter format and a central-difference
harness used to verify analytic gradients end to end.
"""

from __future__ import annotations

import math
import random
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import CorruptArchive, IoFailure, NonFinite, ShapeMismatch

LEAKY_SLOPE = 0.2
CKPT_MAGIC = b"MUGLCKPT"
CKPT_VERSION = 1


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def activation(x: torch.Tensor) -> torch.Tensor:
    return F.leaky_relu(x, LEAKY_SLOPE)


def _fan_in_uniform(shape, fan_in: int, gen: torch.Generator | None) -> torch.Tensor:
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return (torch.rand(shape, generator=gen) * 2.0 - 1.0) * bound


def affine(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """``y = x W + b`` with ``W`` stored as ``(in, out)``."""
    if x.shape[-1] != weight.shape[0] or (bias is not None and bias.shape[-1] != weight.shape[1]):
        raise ShapeMismatch(f"affine: x {tuple(x.shape)}, W {tuple(weight.shape)}")
    y = x @ weight
    return y if bias is None else y + bias


def conv1d(x: torch.Tensor, kernels: torch.Tensor, bias: torch.Tensor | None = None, stride: int = 1, padding: int = 0):
    """Cross-correlation over ``(N, C, T)`` with kernels ``(O, C, width)``."""
    if x.ndim != 3 or kernels.ndim != 3 or x.shape[1] != kernels.shape[1]:
        raise ShapeMismatch(f"conv1d: x {tuple(x.shape)}, kernels {tuple(kernels.shape)}")
    if x.shape[2] + 2 * padding < kernels.shape[2]:
        raise ShapeMismatch("conv1d: kernel wider than padded input")
    return F.conv1d(x, kernels, bias, stride=stride, padding=padding)


def residual_conv2d_block(x: torch.Tensor, params: Mapping[str, torch.Tensor], stride=(1, 1)) -> torch.Tensor:
    """``act(conv2(act(conv1(x))) + skip(x))``.

    ``params`` holds ``conv1.weight``, ``conv1.bias``, ``conv2.weight``,
    ``conv2.bias`` and optionally ``skip.weight``/``skip.bias`` (a 1x1
    projection, required when channels or stride change). Kernels are padded
    to keep "same" size, so stride ``s`` gives ``ceil(size / s)`` outputs.
    """
    if x.ndim != 4 or x.shape[1] != params["conv1.weight"].shape[1]:
        raise ShapeMismatch(f"residual block: x {tuple(x.shape)}, conv1 {tuple(params['conv1.weight'].shape)}")
    stride = tuple(stride)
    k1 = params["conv1.weight"].shape[-2:]
    k2 = params["conv2.weight"].shape[-2:]
    h = F.conv2d(x, params["conv1.weight"], params["conv1.bias"], stride=stride, padding=(k1[0] // 2, k1[1] // 2))
    h = F.conv2d(activation(h), params["conv2.weight"], params["conv2.bias"], padding=(k2[0] // 2, k2[1] // 2))
    if "skip.weight" in params:
        skip = F.conv2d(x, params["skip.weight"], params.get("skip.bias"), stride=stride)
    else:
        if stride != (1, 1) or params["conv2.weight"].shape[0] != x.shape[1]:
            raise ShapeMismatch("identity skip needs matching channels and unit stride")
        skip = x
    return activation(h + skip)


class Affine(nn.Module):
    def __init__(self, in_features: int, out_features: int, gen: torch.Generator | None = None):
        super().__init__()
        self.weight = nn.Parameter(_fan_in_uniform((in_features, out_features), in_features, gen))
        self.bias = nn.Parameter(_fan_in_uniform((out_features,), in_features, gen))

    def forward(self, x):
        return affine(x, self.weight, self.bias)


class Conv1d(nn.Module):
    def __init__(self, cin: int, cout: int, width: int = 3, stride: int = 1, padding: int | None = None,
                 gen: torch.Generator | None = None):
        super().__init__()
        fan_in = cin * width
        self.weight = nn.Parameter(_fan_in_uniform((cout, cin, width), fan_in, gen))
        self.bias = nn.Parameter(_fan_in_uniform((cout,), fan_in, gen))
        self.stride = stride
        self.padding = width // 2 if padding is None else padding

    def forward(self, x):
        return conv1d(x, self.weight, self.bias, self.stride, self.padding)


class ResidualBlock2d(nn.Module):
    """Two-convolution residual block with a 1x1 projection skip when shapes change."""

    def __init__(self, cin: int, cout: int, kernel=(3, 3), stride=(1, 1), gen: torch.Generator | None = None):
        super().__init__()
        kh, kw = kernel
        self.stride = tuple(stride)
        self.conv1_weight = nn.Parameter(_fan_in_uniform((cout, cin, kh, kw), cin * kh * kw, gen))
        self.conv1_bias = nn.Parameter(_fan_in_uniform((cout,), cin * kh * kw, gen))
        self.conv2_weight = nn.Parameter(_fan_in_uniform((cout, cout, kh, kw), cout * kh * kw, gen))
        self.conv2_bias = nn.Parameter(_fan_in_uniform((cout,), cout * kh * kw, gen))
        if cin != cout or self.stride != (1, 1):
            self.skip_weight = nn.Parameter(_fan_in_uniform((cout, cin, 1, 1), cin, gen))
            self.skip_bias = nn.Parameter(_fan_in_uniform((cout,), cin, gen))
        else:
            self.skip_weight = None
            self.skip_bias = None

    def block_params(self) -> dict[str, torch.Tensor]:
        p = {
            "conv1.weight": self.conv1_weight,
            "conv1.bias": self.conv1_bias,
            "conv2.weight": self.conv2_weight,
            "conv2.bias": self.conv2_bias,
        }
        if self.skip_weight is not None:
            p["skip.weight"] = self.skip_weight
            p["skip.bias"] = self.skip_bias
        return p

    def forward(self, x):
        return residual_conv2d_block(x, self.block_params(), self.stride)


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# -- checkpoints --------------------------------------------------------------

def save_checkpoint(params: Mapping[str, torch.Tensor | np.ndarray], path) -> None:
    """Write ``MUGLCKPT | u32 version | per tensor: u32 len, name, u32 rank, u32 dims..., f32 data``.

    All integers and floats are little-endian.
    """
    chunks = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION)]
    for name, value in params.items():
        arr = value.detach().cpu().numpy() if isinstance(value, torch.Tensor) else np.asarray(value)
        arr = np.asarray(arr, dtype="<f4", order="C")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    try:
        Path(path).write_bytes(b"".join(chunks))
    except OSError as exc:
        raise IoFailure(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path) -> dict[str, np.ndarray]:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read checkpoint {path}: {exc}") from exc
    if buf[:8] != CKPT_MAGIC:
        raise CorruptArchive(f"{path}: bad checkpoint magic")
    pos = 8

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CorruptArchive(f"{path}: truncated checkpoint")
        out = buf[pos : pos + n]
        pos += n
        return out

    (version,) = struct.unpack("<I", take(4))
    if version != CKPT_VERSION:
        raise CorruptArchive(f"{path}: unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    while pos < len(buf):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        out[name] = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape).copy()
    return out


# -- gradient verification ----------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    worst: str
    checked: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol


def grad_check(
    f: Callable[[], torch.Tensor],
    params: Mapping[str, torch.Tensor] | Sequence[torch.Tensor],
    step: float = 1e-4,
    tol: float = 1e-3,
    max_entries: int | None = None,
    seed: int = 0,
    abs_floor: float = 1e-6,
) -> GradCheckReport:
    """Compare autograd gradients of scalar ``f()`` with central differences.

    ``params`` are the leaf tensors ``f`` reads; they are perturbed in place
    and restored. ``max_entries`` caps how many coordinates are probed per
    tensor (chosen with ``seed``). The relative error of each coordinate is
    ``|a - n| / max(|a|, |n|, abs_floor)``.
    """
    named = dict(params) if isinstance(params, Mapping) else {str(i): p for i, p in enumerate(params)}
    tensors = list(named.values())
    for t in tensors:
        t.requires_grad_(True)
    value = f()
    if value.numel() != 1:
        raise ShapeMismatch("grad_check needs a scalar function")
    if not torch.isfinite(value):
        raise NonFinite("function value is not finite at the check point")
    grads = torch.autograd.grad(value, tensors, allow_unused=True)
    rng = np.random.default_rng(seed)
    worst, worst_name, checked = 0.0, "", 0
    with torch.no_grad():
        for (name, t), g in zip(named.items(), grads):
            g = torch.zeros_like(t) if g is None else g
            if not torch.isfinite(g).all():
                raise NonFinite(f"analytic gradient of {name} is not finite")
            flat = t.view(-1)
            gflat = g.reshape(-1)
            idx = np.arange(flat.numel())
            if max_entries is not None and flat.numel() > max_entries:
                idx = rng.choice(flat.numel(), size=max_entries, replace=False)
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + step
                up = f().item()
                flat[i] = orig - step
                down = f().item()
                flat[i] = orig
                if not (math.isfinite(up) and math.isfinite(down)):
                    raise NonFinite(f"function not finite while perturbing {name}[{i}]")
                num = (up - down) / (2 * step)
                ana = gflat[i].item()
                err = abs(ana - num) / max(abs(ana), abs(num), abs_floor)
                checked += 1
                if err > worst:
                    worst, worst_name = err, f"{name}[{int(i)}]"
    return GradCheckReport(worst, worst_name, checked, tol)
