"""Kernel-regression stand-in for a wide network's predictions.

A sample's class probabilities are the kernel-weighted vote of the training
set under ``K(x, x') = exp(-2 * gamma * ||x - x'||^2)``.  Used to check how
evenly a dataset's classes "pull" on the sum of two samples from different
classes.  Kernel sums are accumulated in log space.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import logsumexp

TINY = 1e-300


class KernelUnderflowWarning(RuntimeWarning):
    pass


@dataclass
class KernelDataset:
    samples: np.ndarray  # (n, d)
    labels: np.ndarray
    gamma: float
    num_classes: Optional[int] = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(len(self.labels), -1)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.samples) == 0:
            raise ValueError("kernel dataset is empty")
        if not self.gamma > 0:
            raise ValueError(f"gamma must be > 0, got {self.gamma}")
        if self.num_classes is None:
            self.num_classes = int(self.labels.max()) + 1
        self._sq_norms = np.einsum("ij,ij->i", self.samples, self.samples)

    @property
    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def with_gamma(self, gamma: float) -> "KernelDataset":
        return KernelDataset(self.samples, self.labels, gamma, self.num_classes)

    def log_kernel(self, x) -> np.ndarray:
        """``log K(x, x_i)`` for every training sample."""
        x = np.asarray(x, dtype=np.float64).ravel()
        if x.shape[0] != self.samples.shape[1]:
            raise ValueError(f"input dimension {x.shape[0]} != dataset dimension {self.samples.shape[1]}")
        d2 = self._sq_norms - 2.0 * self.samples @ x + x @ x
        return -2.0 * self.gamma * np.maximum(d2, 0.0)

    def class_log_sums(self, x) -> np.ndarray:
        lk = self.log_kernel(x)
        out = np.full(self.num_classes, -np.inf)
        for k in range(self.num_classes):
            sel = lk[self.labels == k]
            if len(sel):
                out[k] = logsumexp(sel)
        return out


def kernel(x, y, gamma: float) -> float:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    d = x - y
    return math.exp(-2.0 * gamma * float(d @ d))


def median_gamma(samples) -> float:
    """``1 / (2 * median pairwise squared distance)``."""
    x = np.asarray(samples, dtype=np.float64).reshape(len(samples), -1)
    sq = np.einsum("ij,ij->i", x, x)
    d2 = sq[:, None] + sq[None, :] - 2.0 * x @ x.T
    iu = np.triu_indices(len(x), k=1)
    med = float(np.median(np.maximum(d2[iu], 0.0)))
    if med <= 0:
        raise ValueError("all samples coincide; cannot pick a bandwidth")
    return 1.0 / (2.0 * med)


def ntk_predict(ds: KernelDataset, x) -> np.ndarray:
    ls = ds.class_log_sums(x)
    return np.exp(ls - logsumexp(ls))


def class_log_ratio(ds: KernelDataset, x, a: int, b: int) -> float:
    if a == b:
        raise ValueError("classes must differ")
    counts = ds.class_counts
    if counts[a] == 0 or counts[b] == 0:
        raise ValueError(f"class {a if counts[a] == 0 else b} is empty")
    ls = ds.class_log_sums(x)
    if min(ls[a], ls[b]) < math.log(TINY):
        warnings.warn(f"kernel sums below {TINY:g}; ratio computed in log space", KernelUnderflowWarning)
    return float(ls[a] - ls[b])


def class_ratio(ds: KernelDataset, x, a: int, b: int) -> float:
    """Ratio of summed kernel similarity of ``x`` to class ``a`` over class ``b``."""
    return math.exp(class_log_ratio(ds, x, a, b))


def verify_assumption1(ds: KernelDataset, trials: int = 200, gamma=None, seed: int = 0,
                       classes: Optional[Sequence[int]] = None) -> dict:
    """Ratios ``lambda(x_a + x_b; a, b)`` over random cross-class pairs.

    ``classes`` pins the ordered class pair; by default each trial draws two
    distinct non-empty classes.  ``gamma`` may be a value, ``"auto"`` (median
    heuristic) or None (the dataset's own).
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    present = np.flatnonzero(ds.class_counts > 0)
    if len(present) < 2:
        raise ValueError("need at least two non-empty classes")
    if gamma == "auto":
        ds = ds.with_gamma(median_gamma(ds.samples))
    elif gamma is not None:
        ds = ds.with_gamma(float(gamma))
    rng = np.random.default_rng(seed)
    by_class = {int(k): np.flatnonzero(ds.labels == k) for k in present}
    log_ratios, pairs = [], []
    for _ in range(trials):
        pair = classes if classes is not None else rng.choice(present, size=2, replace=False)
        a, b = (int(c) for c in pair)
        ia = int(rng.choice(by_class[a]))
        ib = int(rng.choice(by_class[b]))
        x_add = ds.samples[ia] + ds.samples[ib]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", KernelUnderflowWarning)
            log_ratios.append(class_log_ratio(ds, x_add, a, b))
        pairs.append([a, b, ia, ib])
    lr = np.array(log_ratios)
    return {
        "gamma": ds.gamma,
        "trials": trials,
        "ratios": np.exp(lr).tolist(),
        "log_ratios": lr.tolist(),
        "geometric_mean": float(np.exp(lr.mean())),
        "max_abs_log_deviation": float(np.abs(lr).max()),
        "max_deviation": float(np.abs(np.exp(lr) - 1.0).max()),
        "pairs": pairs,
    }


def toy_gaussians(counts: Sequence[int], dim: int = 8, mean_norm: float = 2.0, std: float = 1.0,
                  seed: int = 0, means: Optional[np.ndarray] = None, gamma="auto") -> KernelDataset:
    """Isotropic Gaussian classes whose means share the norm ``mean_norm``.

    Default means are random orthogonal directions (so every pair of classes
    sits at the same distance).
    """
    rng = np.random.default_rng(seed)
    k = len(counts)
    if means is None:
        q, _ = np.linalg.qr(rng.standard_normal((dim, max(dim, k))))
        means = mean_norm * q[:, :k].T if k <= dim else mean_norm * rng.standard_normal((k, dim)) / math.sqrt(dim)
    means = np.asarray(means, dtype=np.float64)
    xs, ys = [], []
    for c, n in enumerate(counts):
        xs.append(means[c] + std * rng.standard_normal((n, dim)))
        ys.append(np.full(n, c))
    x = np.concatenate(xs)
    y = np.concatenate(ys)
    g = median_gamma(x) if gamma == "auto" else float(gamma)
    return KernelDataset(x, y, g, k)


def symmetric_pair_dataset(n: int = 20, dim: int = 4, seed: int = 0, gamma: float = 0.1) -> KernelDataset:
    """Two classes where class 1 is exactly the negation of class 0."""
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((n, dim)) + 1.0
    return KernelDataset(np.concatenate([a, -a]), np.repeat([0, 1], n), gamma, 2)
