"""Loss assembly, schedules, class-balanced minibatches and the training loop."""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, fields
from typing import Callable, Sequence

import numpy as np
import torch

from .diffcore import GradCheckReport, grad_check, save_checkpoint
from .errors import ConfigError, EmptyClass, EmptySet, NonFinite, OutOfRange, ShapeMismatch
from .kinematics import Skeleton, forward_kinematics
from .model import MUGL, Condition, ModelConfig, PosteriorParams, local_positions
from .rotations import rot6d_to_matrix
from .sequence import DEFAULT_THETA_S, ActionSequence, encode_length

log = logging.getLogger(__name__)

HISTORY_FIELDS = ("epoch", "total", "loss_6d", "loss_3d", "loss_global", "loss_len", "loss_kl",
                  "lambda_kl", "lr", "mse_3d")


@dataclass
class LossWeights:
    rot: float = 10.0
    global_: float = 1.0
    len: float = 2.0
    theta_s: float = DEFAULT_THETA_S

    def __post_init__(self):
        if min(self.rot, self.global_, self.len) < 0 or not 0 < self.theta_s < 1:
            raise ConfigError("loss weights must be >= 0 and theta_s in (0, 1)")


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 100
    lr: float = 0.015
    lr_decay: float = 0.5
    lr_step: int = 10
    kl_cycles: int = 4
    seed: int = 0
    steps_per_epoch: int | None = None
    grad_clip: float = 5.0
    leg_boost: float = 1.0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0 or self.lr_step < 1 or self.kl_cycles < 1:
            raise ConfigError("training config values must be positive")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ConfigError("steps_per_epoch must be positive")

    @classmethod
    def keys(cls) -> set[str]:
        return {f.name for f in fields(cls)}


# -- losses -------------------------------------------------------------------

def masked_mse(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean squared error over timesteps where ``mask`` (N, T) is set.

    ``pred``/``target`` are ``(N, T, ...)``; the mean runs over every element
    of the valid timesteps.
    """
    if pred.shape != target.shape or pred.shape[:2] != mask.shape:
        raise ShapeMismatch(f"pred {tuple(pred.shape)}, target {tuple(target.shape)}, mask {tuple(mask.shape)}")
    per_step = int(np.prod(pred.shape[2:])) if pred.ndim > 2 else 1
    m = mask.to(pred.dtype).reshape(mask.shape + (1,) * (pred.ndim - 2))
    sq = (pred - target) ** 2 * m
    return sq.sum() / (m.sum() * per_step).clamp_min(1.0)


def loss_local(pred6d, pred3d, target6d, target3d, mask, rot_weight: float = 10.0) -> torch.Tensor:
    """``rot_weight * L_6D + L_3D`` over the unpadded extent."""
    return rot_weight * masked_mse(pred6d, target6d, mask) + masked_mse(pred3d, target3d, mask)


def loss_global_and_len(pred_global, target_global, pred_code, target_code, mask):
    """Masked trajectory MSE and length-code MSE over all T entries, both unweighted."""
    if pred_code.shape != target_code.shape:
        raise ShapeMismatch(f"code shapes {tuple(pred_code.shape)} vs {tuple(target_code.shape)}")
    return masked_mse(pred_global, target_global, mask), torch.mean((pred_code - target_code) ** 2)


def kl_divergence(post: PosteriorParams, prior_mean: torch.Tensor, prior_logvar: torch.Tensor) -> torch.Tensor:
    """Closed-form KL of diagonal Gaussians, summed over latent dims and averaged over the batch."""
    var_q = torch.exp(post.logvar)
    var_p = torch.exp(prior_logvar)
    kl = 0.5 * (prior_logvar - post.logvar + (var_q + (post.mean - prior_mean) ** 2) / var_p - 1.0)
    return kl.sum(-1).mean()


def total_loss(local, global_, length, kl, weights: LossWeights, kl_weight: float):
    """``(L_local + w_global L_global) + w_len L_len + w_kl L_kl``."""
    for name, v in (("local", local), ("global", global_), ("length", length), ("kl", kl)):
        if not math.isfinite(float(torch.as_tensor(v).detach())):
            raise NonFinite(f"{name} loss term is not finite")
    return (local + weights.global_ * global_) + weights.len * length + kl_weight * kl


# -- schedules ------------------------------------------------------------------

def annealing_weight(epoch: int, total_epochs: int, cycles: int = 4, ramp: float = 0.5) -> float:
    """Cyclic KL weight: within each of ``cycles`` spans, ramp 0 -> 1 over the first half, then hold."""
    if not 0 <= epoch < total_epochs:
        raise OutOfRange(f"epoch {epoch} outside [0, {total_epochs})")
    period = total_epochs / cycles
    tau = (epoch % period) / period
    return min(tau / ramp, 1.0)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    if epoch < 0:
        raise OutOfRange("epoch must be >= 0")
    return cfg.lr * cfg.lr_decay ** (epoch // cfg.lr_step)


def sampling_weights(labels, leg_classes: Sequence[int] = (), leg_boost: float = 1.0,
                     num_classes: int | None = None) -> np.ndarray:
    """Per-sample weights proportional to ``1 / count(class)``, mean 1.

    Samples of ``leg_classes`` are additionally scaled by ``leg_boost``.
    With ``num_classes`` given, every class must be present.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise EmptyClass("no samples to weight")
    counts = np.bincount(labels, minlength=num_classes or 0)
    if num_classes is not None and np.any(counts[:num_classes] == 0):
        missing = np.flatnonzero(counts[:num_classes] == 0).tolist()
        raise EmptyClass(f"classes without samples: {missing}")
    w = 1.0 / counts[labels]
    if leg_classes:
        w = w * np.where(np.isin(labels, list(leg_classes)), leg_boost, 1.0)
    return w / w.mean()


# -- data preparation -------------------------------------------------------------

@dataclass
class TrainingData:
    local6d: torch.Tensor   # (N, T, P, J, 6)
    target3d: torch.Tensor  # (N, T, P, J, 3)
    global_: torch.Tensor   # (N, T, P, 3)
    code: torch.Tensor      # (N, T)
    mask: torch.Tensor      # (N, T)
    labels: torch.Tensor
    views: torch.Tensor
    lengths: np.ndarray

    def __len__(self):
        return self.local6d.shape[0]

    def batch(self, idx) -> "TrainingData":
        idx = torch.as_tensor(np.asarray(idx), dtype=torch.long)
        return TrainingData(
            self.local6d[idx], self.target3d[idx], self.global_[idx], self.code[idx], self.mask[idx],
            self.labels[idx], self.views[idx], self.lengths[idx.numpy()],
        )

    def condition(self) -> Condition:
        return Condition(self.labels, self.views)

    def to(self, dtype) -> "TrainingData":
        return TrainingData(self.local6d.to(dtype), self.target3d.to(dtype), self.global_.to(dtype),
                            self.code.to(dtype), self.mask, self.labels, self.views, self.lengths)


def prepare_data(samples: Sequence[ActionSequence], skeleton: Skeleton) -> TrainingData:
    if not samples:
        raise EmptySet("training set is empty")
    T = samples[0].T
    local = np.stack([s.local for s in samples]).astype(np.float32)
    glob = np.stack([s.global_array() for s in samples]).astype(np.float32)
    lengths = np.array([s.length for s in samples], dtype=np.int64)
    code = np.stack([encode_length(int(t), T) for t in lengths]).astype(np.float32)
    rot = rot6d_to_matrix(local.astype(np.float64))
    target3d = forward_kinematics(rot, skeleton.rest, skeleton.tree).astype(np.float32)
    mask = np.arange(T)[None, :] < lengths[:, None]
    return TrainingData(
        torch.from_numpy(local), torch.from_numpy(target3d), torch.from_numpy(glob), torch.from_numpy(code),
        torch.from_numpy(mask), torch.tensor([s.class_label for s in samples]),
        torch.tensor([s.viewpoint for s in samples]), lengths,
    )


def compute_losses(model: MUGL, data: TrainingData, skeleton: Skeleton, weights: LossWeights,
                   kl_weight: float, generator: torch.Generator | None = None) -> dict[str, torch.Tensor]:
    out = model(data.local6d, data.global_, data.code, data.condition(), generator)
    pred3d = local_positions(out["local6d"], skeleton)
    l6 = masked_mse(out["local6d"], data.local6d, data.mask)
    l3 = masked_mse(pred3d, data.target3d, data.mask)
    lg, ll = loss_global_and_len(out["global"], data.global_, out["code"], data.code, data.mask)
    classes = data.labels
    kl = kl_divergence(PosteriorParams(out["mean"], out["logvar"]),
                       model.prior_mean[classes], model.prior_logvar[classes])
    local = weights.rot * l6 + l3
    total = total_loss(local, lg, ll, kl, weights, kl_weight)
    return {"total": total, "loss_6d": l6, "loss_3d": l3, "loss_global": lg, "loss_len": ll, "loss_kl": kl}


@torch.no_grad()
def reconstruction_mse(model: MUGL, data: TrainingData, skeleton: Skeleton, seed: int = 0,
                       sample: bool = True) -> float:
    """Masked 3D joint MSE of encode -> (reparameterize) -> decode -> FK."""
    was = model.training
    model.eval()
    post = model.encode(data.local6d, data.global_, data.code, data.condition())
    z = model.reparameterize(post, torch.Generator().manual_seed(seed)) if sample else post.mean
    out = model.decode(z, data.condition())
    model.train(was)
    return float(masked_mse(local_positions(out["local6d"], skeleton), data.target3d, data.mask))


@dataclass
class FitResult:
    model: MUGL
    history: list[dict]


def fit(
    samples: Sequence[ActionSequence],
    skeleton: Skeleton,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    weights: LossWeights | None = None,
    leg_classes: Sequence[int] = (),
    history_path=None,
    ckpt_path=None,
    callback: Callable[[dict], None] | None = None,
) -> FitResult:
    """Train a fresh model with Adam, step-decayed learning rate and cyclic KL annealing.

    Each epoch draws ``steps_per_epoch`` minibatches (default: enough to cover
    the set once) by class-balanced sampling with replacement.
    """
    weights = weights or LossWeights(theta_s=model_cfg.theta_s)
    data = prepare_data(samples, skeleton)
    if data.local6d.shape[1:] != (model_cfg.T, model_cfg.P, model_cfg.J, 6):
        raise ShapeMismatch(f"data {tuple(data.local6d.shape[1:])} does not match model config")
    model = MUGL(model_cfg)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8)
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    probs = sampling_weights(data.labels.numpy(), leg_classes, cfg.leg_boost, model_cfg.num_classes)
    probs = probs / probs.sum()
    batch = min(cfg.batch_size, len(data))
    steps = cfg.steps_per_epoch or math.ceil(len(data) / batch)

    history = []
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        for group in opt.param_groups:
            group["lr"] = lr
        kl_w = annealing_weight(epoch, cfg.epochs, cfg.kl_cycles)
        sums: dict[str, float] = {}
        for _ in range(steps):
            idx = rng.choice(len(data), size=batch, replace=True, p=probs)
            terms = compute_losses(model, data.batch(idx), skeleton, weights, kl_w, gen)
            opt.zero_grad(set_to_none=True)
            terms["total"].backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            for k, v in terms.items():
                sums[k] = sums.get(k, 0.0) + float(v.detach())
        row = {"epoch": epoch, **{k: v / steps for k, v in sums.items()}, "lambda_kl": kl_w, "lr": lr}
        row["mse_3d"] = reconstruction_mse(model, data, skeleton, seed=cfg.seed)
        history.append(row)
        if callback:
            callback(row)
        if epoch % 10 == 0 or epoch == cfg.epochs - 1:
            log.info("epoch %d total %.4f mse3d %.5f kl %.3f lr %.2e", epoch, row["total"], row["mse_3d"],
                     row["loss_kl"], lr)

    if history_path is not None:
        write_history(history, history_path)
    if ckpt_path is not None:
        save_checkpoint(dict(model.state_dict()), ckpt_path)
    return FitResult(model, history)


def write_history(history: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS, extrasaction="ignore")
        w.writeheader()
        for row in history:
            w.writerow({k: (repr(float(v)) if k != "epoch" else int(v)) for k, v in row.items() if k in HISTORY_FIELDS})


def load_model(params: dict[str, np.ndarray], model_cfg: ModelConfig) -> MUGL:
    model = MUGL(model_cfg)
    state = {k: torch.from_numpy(v) for k, v in params.items()}
    model.load_state_dict(state)
    model.eval()
    return model


def train_config_from_dict(d: dict) -> TrainConfig:
    unknown = set(d) - TrainConfig.keys()
    if unknown:
        raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
    return TrainConfig(**d)



def loss_gradcheck(model: MUGL, data: TrainingData, skeleton: Skeleton, weights: LossWeights | None = None,
                   kl_weight: float = 0.5, seed: int = 0, max_entries: int | None = 6, step: float = 1e-6,
                   tol: float = 1e-3) -> GradCheckReport:
    """Finite-difference check of the full training loss in float64.

    The reparameterization noise is redrawn from the same seed on every call,
    so the loss is a deterministic function of the parameters.
    """
    weights = weights or LossWeights()
    model = copy.deepcopy(model).to(torch.float64)
    data = data.to(torch.float64)

    def f():
        gen = torch.Generator().manual_seed(seed)
        return compute_losses(model, data, skeleton, weights, kl_weight, gen)["total"]

    return grad_check(f, dict(model.named_parameters()), step=step, tol=tol, max_entries=max_entries, seed=seed)
