"""Kernel two-sample metrics for generated motion.

Both metrics use the biased empirical MMD^2 with an RBF kernel,

    MMD^2 = mean k(g, g') + mean k(e, e') - 2 mean k(g, e),

and differ in the kernel: MMD-S flattens whole sequences, MMD-A averages the
RBF kernel over aligned timesteps.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ClassMismatch, EmptySet, OutOfRange, ShapeMismatch, SkeletonMismatch, TooFewSamples
from .sequence import ActionSequence, resample_valid, sequence_world

METRIC_T = 64


def rbf_kernel(x, y, bandwidth: float) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ShapeMismatch(f"rbf_kernel: {x.shape} vs {y.shape}")
    if not bandwidth > 0:
        raise OutOfRange(f"bandwidth must be positive, got {bandwidth}")
    return float(np.exp(-np.sum((x - y) ** 2) / (2.0 * bandwidth**2)))


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise squared distances ``(n, m)`` between rows of ``(n, d)`` and ``(m, d)``.

    Computed from explicit differences (row by row to bound memory) rather
    than the Gram expansion, so identical rows give exactly zero.
    """
    out = np.empty((a.shape[0], b.shape[0]))
    for i in range(a.shape[0]):
        diff = b - a[i]
        out[i] = np.einsum("ij,ij->i", diff, diff)
    return out


def median_bandwidth(samples) -> float:
    """Median heuristic: ``sigma^2 = median(pairwise squared distance) / 2``; 1.0 if all points coincide."""
    x = np.asarray(samples, dtype=np.float64)
    if x.shape[0] < 2:
        raise TooFewSamples("median bandwidth needs at least two samples")
    x = x.reshape(x.shape[0], -1)
    d = _sq_dists(x, x)[np.triu_indices(x.shape[0], k=1)]
    med = float(np.median(d))
    return float(np.sqrt(med / 2.0)) if med > 0 else 1.0


def _as_set(x) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.shape[0] == 0:
        raise EmptySet("sample set is empty")
    return arr


def _mmd_from_dists(dxx, dyy, dxy, bandwidth: float) -> float:
    s = 2.0 * bandwidth**2
    return float(np.exp(-dxx / s).mean() + np.exp(-dyy / s).mean() - 2.0 * np.exp(-dxy / s).mean())


def mmd_s(gen, ref, bandwidth: float) -> float:
    """Whole-sequence MMD^2; sets are ``(n, ...)`` and flattened per sample."""
    g = _as_set(gen)
    e = _as_set(ref)
    g = g.reshape(g.shape[0], -1)
    e = e.reshape(e.shape[0], -1)
    if g.shape[1] != e.shape[1]:
        raise ShapeMismatch("generated and reference samples differ in size")
    return _mmd_from_dists(_sq_dists(g, g), _sq_dists(e, e), _sq_dists(g, e), bandwidth)


def mmd_a(gen, ref, bandwidth: float) -> float:
    """Per-timestep MMD^2 with kernel ``(1/T) sum_t k(g_t, e_t)``; sets are ``(n, T, ...)``."""
    g = _as_set(gen)
    e = _as_set(ref)
    g = g.reshape(g.shape[0], g.shape[1], -1)
    e = e.reshape(e.shape[0], e.shape[1], -1)
    if g.shape[1:] != e.shape[1:]:
        raise ShapeMismatch("generated and reference samples differ in shape")
    s = 2.0 * bandwidth**2
    T = g.shape[1]

    def k(a, b):
        return sum(np.exp(-_sq_dists(a[:, t], b[:, t]) / s) for t in range(T)) / T

    return float(k(g, g).mean() + k(e, e).mean() - 2.0 * k(g, e).mean())


def timestep_bandwidth(samples) -> float:
    """Median heuristic on the mean per-timestep squared distance of ``(n, T, ...)`` sequences."""
    x = np.asarray(samples, dtype=np.float64)
    return median_bandwidth(x.reshape(x.shape[0], -1) / np.sqrt(x.shape[1]))


def metric_features(seqs: Sequence[ActionSequence], skeleton, T: int = METRIC_T) -> np.ndarray:
    """World joints of the valid extent, resampled to ``T`` frames: ``(n, T, P*J*3)``."""
    out = []
    for s in seqs:
        world = sequence_world(s, skeleton)
        r = resample_valid(world.reshape(world.shape[0], -1), s.length, T)
        out.append(r)
    return np.stack(out) if out else np.zeros((0, T, 0))


@dataclass
class MetricReport:
    classes: list[int]
    mmd_a: list[float]
    mmd_s: list[float]

    @property
    def mean_a(self) -> float:
        return float(np.mean(self.mmd_a))

    @property
    def std_a(self) -> float:
        return float(np.std(self.mmd_a))

    @property
    def mean_s(self) -> float:
        return float(np.mean(self.mmd_s))

    @property
    def std_s(self) -> float:
        return float(np.std(self.mmd_s))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["class", "mmd_a", "mmd_s"])
            for c, a, s in zip(self.classes, self.mmd_a, self.mmd_s):
                w.writerow([c, repr(a), repr(s)])
            w.writerow(["mean", repr(self.mean_a), repr(self.mean_s)])
            w.writerow(["std", repr(self.std_a), repr(self.std_s)])

    def summary(self) -> str:
        return (f"MMD-A {self.mean_a:.4f} +- {self.std_a:.4f}   "
                f"MMD-S {self.mean_s:.4f} +- {self.std_s:.4f}   ({len(self.classes)} classes)")


def class_metrics(gen_feats: np.ndarray, ref_feats: np.ndarray) -> tuple[float, float]:
    """MMD-A and MMD-S with bandwidths from the median heuristic over the union of both sets."""
    union = np.concatenate([gen_feats, ref_feats])
    return (mmd_a(gen_feats, ref_feats, timestep_bandwidth(union)),
            mmd_s(gen_feats, ref_feats, median_bandwidth(union)))


def evaluate(gen_archive, ref_archive, T: int = METRIC_T) -> MetricReport:
    """Per-class metrics for every class present in the generated archive."""
    gm, rm = gen_archive.manifest, ref_archive.manifest
    if gm.skeleton != rm.skeleton or gm.P != rm.P:
        raise SkeletonMismatch("archives use different skeletons or person counts")
    if not gm.same_classes(rm):
        raise ClassMismatch("archives declare different class sets")
    classes = sorted({s.class_label for s in gen_archive.samples})
    if not classes:
        raise EmptySet("generated archive holds no samples")
    ref_classes = {s.class_label for s in ref_archive.samples}
    missing = [c for c in classes if c not in ref_classes]
    if missing:
        raise ClassMismatch(f"reference archive has no samples of classes {missing}")
    a_vals, s_vals = [], []
    for c in classes:
        g = metric_features(gen_archive.by_class(c), gm.skeleton, T)
        e = metric_features(ref_archive.by_class(c), rm.skeleton, T)
        a, s = class_metrics(g, e)
        a_vals.append(a)
        s_vals.append(s)
    return MetricReport(classes, a_vals, s_vals)


def read_report(path) -> MetricReport:
    rows = list(csv.reader(Path(path).read_text().splitlines()))
    body = [r for r in rows[1:] if r[0] not in ("mean", "std")]
    return MetricReport([int(r[0]) for r in body], [float(r[1]) for r in body], [float(r[2]) for r in body])
