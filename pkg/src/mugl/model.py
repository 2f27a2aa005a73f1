"""The conditional Gaussian-mixture VAE over decoupled action sequences.

Encoders: local pose (spatial residual block, per-timestep joint pooling,
strided temporal residual blocks), global trajectory (strided 1D convs) and
sequence length (strided 1D convs over the index code). Their features are
concatenated with the class one-hot and a learned viewpoint embedding and
mapped to a diagonal Gaussian posterior. One learnable Gaussian per class
forms the mixture prior.

Decoders start from ``z_cv``, a linear map of ``z || class || viewpoint``
reshaped to ``(channels, seed_steps)``, and upsample it by factors of two to
``T`` timesteps.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .diffcore import Affine, Conv1d, ResidualBlock2d, activation
from .errors import ConfigError, NonFinite, OutOfRange, ShapeMismatch
from .kinematics import Skeleton, forward_kinematics
from .rotations import IDENTITY_6D, rot6d_to_matrix
from .sequence import DEFAULT_THETA_S, ActionSequence, decode_length, temporal_upsample_bicubic

LOGVAR_CLAMP = 10.0


LENGTH_BIAS_INIT = 0.5


@dataclass
class ModelConfig:
    T: int = 16
    J: int = 8
    P: int = 2
    num_classes: int = 4
    num_views: int = 2
    latent_dim: int = 32
    channels: tuple[int, ...] = (16, 32, 32)
    seed_steps: int = 4
    view_dim: int = 8
    feature_dim: int = 64
    length_channels: int = 8
    spatial_hidden: int = 64
    theta_s: float = DEFAULT_THETA_S
    init_seed: int = 0

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if self.T % self.seed_steps or (self.T // self.seed_steps) & (self.T // self.seed_steps - 1):
            raise ConfigError(f"T={self.T} must be seed_steps={self.seed_steps} times a power of two")
        if min(self.T, self.J, self.P, self.num_classes, self.num_views, self.latent_dim) < 1:
            raise ConfigError("model sizes must be positive")
        if not self.channels:
            raise ConfigError("channels must not be empty")

    @property
    def stages(self) -> int:
        return int(round(math.log2(self.T // self.seed_steps)))

    def stage_channels(self, i: int) -> int:
        return self.channels[min(i, len(self.channels) - 1)]

    @classmethod
    def keys(cls) -> set[str]:
        return {f.name for f in fields(cls)}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d


def full_config() -> ModelConfig:
    """Sizes for the 120-class, 24-joint, 64-step setting."""
    return ModelConfig(T=64, J=24, P=2, num_classes=120, num_views=3, latent_dim=256,
                       channels=(32, 64, 64, 64, 96), feature_dim=128, length_channels=16, spatial_hidden=128)


@dataclass
class Condition:
    """Class indices and viewpoint indices for a batch."""

    classes: torch.Tensor
    views: torch.Tensor

    def one_hot(self, num_classes: int, dtype) -> torch.Tensor:
        return F.one_hot(self.classes.long(), num_classes).to(dtype)


@dataclass
class PosteriorParams:
    mean: torch.Tensor
    logvar: torch.Tensor


class MUGL(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(cfg.init_seed)
        c = cfg.stage_channels
        width = cfg.P * cfg.J
        s = cfg.stages

        # local pose encoder
        self.spatial_enc = ResidualBlock2d(6, c(0), kernel=(1, 3), gen=gen)
        self.joint_pool = nn.Parameter(
            (torch.rand((c(0), c(0), 1, width), generator=gen) * 2 - 1) / math.sqrt(c(0) * width)
        )
        self.joint_pool_bias = nn.Parameter(torch.zeros(c(0)))
        self.temporal_enc = nn.ModuleList(
            ResidualBlock2d(c(i), c(i + 1), kernel=(3, 1), stride=(2, 1), gen=gen) for i in range(s)
        )
        local_flat = c(s) * cfg.seed_steps

        # global trajectory encoder
        self.global_enc = nn.ModuleList(
            Conv1d(3 * cfg.P if i == 0 else c(i), c(i + 1), stride=2, gen=gen) for i in range(s)
        )
        self.global_feat = Affine(c(s) * cfg.seed_steps, cfg.feature_dim, gen)

        # sequence length encoder
        lc = cfg.length_channels
        self.length_enc = nn.ModuleList(Conv1d(1 if i == 0 else lc, lc, stride=2, gen=gen) for i in range(s))
        self.length_feat = Affine(lc * cfg.seed_steps, cfg.feature_dim // 4, gen)

        self.view_embed = Affine(cfg.num_views, cfg.view_dim, gen)
        cond_dim = cfg.num_classes + cfg.view_dim
        enc_in = local_flat + cfg.feature_dim + cfg.feature_dim // 4 + cond_dim
        self.posterior = Affine(enc_in, 2 * cfg.latent_dim, gen)

        # mixture prior, one component per class
        self.prior_mean = nn.Parameter(torch.zeros(cfg.num_classes, cfg.latent_dim))
        self.prior_logvar = nn.Parameter(torch.zeros(cfg.num_classes, cfg.latent_dim))

        # decoders
        top = c(s)
        self.latent_to_seed = Affine(cfg.latent_dim + cond_dim, top * cfg.seed_steps, gen)
        self.temporal_dec = nn.ModuleList(Conv1d(c(s - i), c(s - i - 1), gen=gen) for i in range(s))
        self.spatial_dec1 = Affine(c(0), cfg.spatial_hidden, gen)
        self.spatial_dec2 = Affine(cfg.spatial_hidden, width * 6, gen)
        self.register_buffer("identity_6d", torch.tensor(IDENTITY_6D).repeat(width), persistent=False)
        self.global_dec = nn.ModuleList(Conv1d(c(s - i), c(s - i - 1), gen=gen) for i in range(s))
        self.global_out = Affine(c(0), 3 * cfg.P, gen)
        self.length_in = Affine(top * cfg.seed_steps, lc * cfg.seed_steps, gen)
        self.length_dec = nn.ModuleList(Conv1d(lc, lc, gen=gen) for _ in range(s))
        self.length_out = Conv1d(lc, 1, gen=gen)
        with torch.no_grad():
            # start the ReLU in its active region; a negative start leaves the code stuck at 0.5
            self.length_out.bias.fill_(LENGTH_BIAS_INIT)

    # -- conditioning ------------------------------------------------------------

    def _condition_vector(self, cond: Condition, dtype) -> torch.Tensor:
        onehot_c = cond.one_hot(self.cfg.num_classes, dtype)
        onehot_v = F.one_hot(cond.views.long(), self.cfg.num_views).to(dtype)
        return torch.cat([onehot_c, self.view_embed(onehot_v)], dim=-1)

    # -- encoders ----------------------------------------------------------------

    def encode(self, local6d: torch.Tensor, global_: torch.Tensor, code: torch.Tensor, cond: Condition) -> PosteriorParams:
        """``local6d (N,T,P,J,6)``, ``global_ (N,T,P,3)``, ``code (N,T)`` -> posterior."""
        cfg = self.cfg
        n = local6d.shape[0]
        if local6d.shape[1:] != (cfg.T, cfg.P, cfg.J, 6) or global_.shape[1:] != (cfg.T, cfg.P, 3) \
                or code.shape[1:] != (cfg.T,):
            raise ShapeMismatch(
                f"encode: got local {tuple(local6d.shape)}, global {tuple(global_.shape)}, code {tuple(code.shape)}"
            )
        x = local6d.reshape(n, cfg.T, cfg.P * cfg.J, 6).permute(0, 3, 1, 2)
        h = self.spatial_enc(x)
        h = activation(F.conv2d(h, self.joint_pool, self.joint_pool_bias))
        for block in self.temporal_enc:
            h = block(h)
        f_l = h.reshape(n, -1)

        g = global_.reshape(n, cfg.T, 3 * cfg.P).transpose(1, 2)
        for conv in self.global_enc:
            g = activation(conv(g))
        f_g = activation(self.global_feat(g.reshape(n, -1)))

        s = code[:, None, :]
        for conv in self.length_enc:
            s = activation(conv(s))
        f_s = activation(self.length_feat(s.reshape(n, -1)))

        feat = torch.cat([f_l, f_g, f_s, self._condition_vector(cond, local6d.dtype)], dim=-1)
        out = self.posterior(feat)
        mean, logvar = out.chunk(2, dim=-1)
        return PosteriorParams(mean, logvar.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP))

    @staticmethod
    def reparameterize(post: PosteriorParams, generator: torch.Generator | None = None) -> torch.Tensor:
        eps = torch.randn(post.mean.shape, generator=generator, dtype=post.mean.dtype)
        logvar = post.logvar.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP)
        return post.mean + torch.exp(0.5 * logvar) * eps

    def sample_prior(self, classes: torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
        mean = self.prior_mean[classes]
        logvar = self.prior_logvar[classes]
        return self.reparameterize(PosteriorParams(mean, logvar), generator)

    def condition_latent(self, z: torch.Tensor, cond: Condition) -> torch.Tensor:
        """``z_cv`` of shape ``(N, channels, seed_steps)``."""
        h = self.latent_to_seed(torch.cat([z, self._condition_vector(cond, z.dtype)], dim=-1))
        return h.reshape(z.shape[0], -1, self.cfg.seed_steps)

    # -- decoders ----------------------------------------------------------------

    @staticmethod
    def _upsample_stack(h: torch.Tensor, convs: nn.ModuleList) -> torch.Tensor:
        for conv in convs:
            h = activation(conv(F.interpolate(h, scale_factor=2, mode="nearest")))
        return h

    def decode_local(self, z_cv: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        h = self._upsample_stack(z_cv, self.temporal_dec).transpose(1, 2)  # (N, T, C)
        raw = self.spatial_dec2(activation(self.spatial_dec1(h))) + self.identity_6d
        return raw.reshape(z_cv.shape[0], cfg.T, cfg.P, cfg.J, 6)

    def decode_global(self, z_cv: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        h = self._upsample_stack(z_cv, self.global_dec).transpose(1, 2)
        return self.global_out(h).reshape(z_cv.shape[0], cfg.T, cfg.P, 3)

    def decode_length_seq(self, z_cv: torch.Tensor) -> torch.Tensor:
        cfg = self.cfg
        h = self.length_in(z_cv.reshape(z_cv.shape[0], -1)).reshape(z_cv.shape[0], cfg.length_channels, -1)
        raw = self.length_out(self._upsample_stack(activation(h), self.length_dec))[:, 0]
        return torch.sigmoid(torch.cumsum(F.relu(raw), dim=-1))

    def decode(self, z: torch.Tensor, cond: Condition) -> dict[str, torch.Tensor]:
        z_cv = self.condition_latent(z, cond)
        return {
            "local6d": self.decode_local(z_cv),
            "global": self.decode_global(z_cv),
            "code": self.decode_length_seq(z_cv),
        }

    def forward(self, local6d, global_, code, cond: Condition, generator: torch.Generator | None = None):
        post = self.encode(local6d, global_, code, cond)
        z = self.reparameterize(post, generator)
        out = self.decode(z, cond)
        out["mean"], out["logvar"], out["z"] = post.mean, post.logvar, z
        return out


def local_positions(local6d: torch.Tensor, skeleton: Skeleton) -> torch.Tensor:
    """Differentiable 6D -> rotation matrix -> forward kinematics."""
    return forward_kinematics(rot6d_to_matrix(local6d), skeleton.rest, skeleton.tree)


def _hold_after(x: np.ndarray, length: int) -> np.ndarray:
    x = x.copy()
    x[length:] = x[length - 1]
    return x


@torch.no_grad()
def generate(
    model: MUGL,
    class_label: int,
    count: int,
    seed: int,
    person_counts: list[int] | None = None,
    upsample: int = 1,
    viewpoint: int = 0,
) -> list[ActionSequence]:
    """Sample ``count`` sequences of one class from its prior component.

    Decoded 6D poses and trajectories are held constant past the decoded
    length. With ``upsample > 1`` the whole block is resampled in time by
    cubic convolution and the length rescaled so the last valid frame maps to
    the same instant.
    """
    cfg = model.cfg
    if not 0 <= class_label < cfg.num_classes:
        raise OutOfRange(f"class {class_label} outside [0, {cfg.num_classes})")
    if count < 0 or upsample < 1:
        raise OutOfRange("count must be >= 0 and upsample >= 1")
    if count == 0:
        return []
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    gen = torch.Generator().manual_seed(seed)
    classes = torch.full((count,), class_label, dtype=torch.long)
    cond = Condition(classes, torch.full((count,), viewpoint, dtype=torch.long))
    z = model.sample_prior(classes, gen)
    out = model.decode(z, cond)
    model.train(was_training)

    local = out["local6d"].to(torch.float64).numpy()
    glob = out["global"].to(torch.float64).numpy()
    lengths = decode_length(out["code"].to(torch.float64).numpy(), cfg.theta_s)
    lengths = np.atleast_1d(lengths)
    if not (np.isfinite(local).all() and np.isfinite(glob).all()):
        raise NonFinite("generated sequence contains non-finite values")
    single = person_counts is not None and person_counts[class_label] == 1

    seqs = []
    T_out = cfg.T * upsample
    for i in range(count):
        t_s = int(lengths[i])
        loc = local[i]
        g = glob[i]
        if single:
            loc = np.repeat(loc[:, :1], cfg.P, axis=1)
            g = np.concatenate([g[:, :1], np.zeros_like(g[:, 1:])], axis=1)
        loc = _hold_after(loc, t_s)
        g = _hold_after(g, t_s)
        if upsample > 1:
            loc = temporal_upsample_bicubic(loc, T_out)
            g = temporal_upsample_bicubic(g, T_out)
            t_s = int(round((t_s - 1) * (T_out - 1) / (cfg.T - 1))) + 1
        seqs.append(
            ActionSequence(
                class_label=class_label,
                viewpoint=viewpoint,
                length=t_s,
                local=loc.astype(np.float32),
                trajectory=g[:, 0].astype(np.float32),
                displacements=np.swapaxes(g[:, 1:], 0, 1).astype(np.float32),
            )
        )
    return seqs


def config_from_dict(d: dict) -> ModelConfig:
    unknown = set(d) - ModelConfig.keys()
    if unknown:
        raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
    return ModelConfig(**d)


__all__ = [
    "MUGL", "ModelConfig", "Condition", "PosteriorParams", "generate", "local_positions",
    "full_config", "config_from_dict",
]
