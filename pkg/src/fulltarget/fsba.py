"""Feature-spanning trigger training.

Each sample's detail bands are swamped with another sample's (scaled by
``k``); the generator learns, conditioned on the sample's own class, a trigger
that pulls the perturbed sample back into that class's cluster of the frozen
proxy.
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
import torch

from .data import ImageDataset
from .losses import PSNR_THRESH, LossWeights, combined_loss, latent_space_loss, output_layer_loss, visual_loss
from .models import ClassifierSplit, TriggerGenerator, apply_trigger, generate_trigger, one_hot
from .training import FeatureCentroids
from .wavelet import perturb_midhigh

log = logging.getLogger(__name__)


class ProxyNotFrozenError(RuntimeError):
    pass


@dataclass(frozen=True)
class FsbaSchedule:
    k: float = 1.5
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-4
    weights: LossWeights = field(default_factory=LossWeights)
    psnr_thresh: float = PSNR_THRESH
    seed: int = 0

    def __post_init__(self):
        if self.k <= 1:
            raise ValueError(f"mixing gain k must be > 1, got {self.k}")
        if self.lr < 0:
            raise ValueError("learning rate must be >= 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not self.weights.has_visual:
            raise ValueError("feature-spanning training uses the visual term")


def parameter_digest(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def make_generator_optimizer(gen: TriggerGenerator, lr: float) -> torch.optim.Optimizer:
    return torch.optim.Adam(gen.parameters(), lr=lr)


def check_frozen(proxy: ClassifierSplit):
    if not proxy.frozen:
        raise ProxyNotFrozenError("proxy classifier must be frozen (eval mode, no trainable parameters)")


def generator_step(gen, proxy, cents: FeatureCentroids, inputs, cond, weights: LossWeights,
                   opt: torch.optim.Optimizer, psnr_thresh: float = PSNR_THRESH) -> Dict[str, float]:
    """One update on ``gen`` for ``inputs`` conditioned on classes ``cond``.

    All three terms are measured against ``cond``; the visual term compares
    ``inputs`` with their triggered version and is skipped when the weights
    omit it.
    """
    gen.train()
    trig = generate_trigger(gen, inputs, one_hot(cond, gen.num_classes))
    mixed = apply_trigger(inputs, trig)
    z = proxy.extract(mixed)
    logits = proxy.head(z)
    terms = {
        "output": output_layer_loss(logits, cond),
        "latent": latent_space_loss(z, cents.centroids[cond]),
    }
    if weights.has_visual:
        terms["visual"] = visual_loss(inputs, mixed, psnr_thresh)
    total = combined_loss(terms, weights)
    opt.zero_grad()
    total.backward()
    opt.step()
    report = {name: v.item() for name, v in terms.items()}
    report["all"] = total.item()
    report["hits"] = int((logits.argmax(1) == cond).sum())
    return report


def sample_references(labels_len: int, rng: np.random.Generator, images: Optional[np.ndarray] = None) -> np.ndarray:
    """Uniform reference index per sample, resampled until it differs from the sample.

    When ``images`` is given, duplicates with identical pixels are rejected too.
    """
    idx = np.arange(labels_len)
    refs = rng.integers(0, labels_len, size=labels_len)
    while True:
        bad = refs == idx
        if images is not None:
            same = np.flatnonzero(~bad)
            bad[same] = np.all(images[same] == images[refs[same]], axis=(1, 2, 3))
        if not bad.any():
            return refs
        refs[bad] = rng.integers(0, labels_len, size=int(bad.sum()))


def fsba_train_step(gen: TriggerGenerator, proxy: ClassifierSplit, cents: FeatureCentroids,
                    images: torch.Tensor, labels: torch.Tensor, refs: torch.Tensor, sched: FsbaSchedule,
                    opt: Optional[torch.optim.Optimizer] = None) -> Dict[str, float]:
    check_frozen(proxy)
    if images.shape != refs.shape:
        raise ValueError(f"batch/reference size mismatch: {tuple(images.shape)} vs {tuple(refs.shape)}")
    if opt is None:
        opt = make_generator_optimizer(gen, sched.lr)
    perturbed = torch.from_numpy(perturb_midhigh(images.numpy(), refs.numpy(), sched.k))
    return generator_step(gen, proxy, cents, perturbed, labels, sched.weights, opt, sched.psnr_thresh)


@dataclass
class TrainingLog:
    records: List[dict] = field(default_factory=list)

    def append(self, **rec):
        self.records.append(rec)

    def __len__(self):
        return len(self.records)


def _epoch_record(epoch, sums, n, hits, stage=None):
    rec = {"epoch": epoch}
    if stage is not None:
        rec["stage"] = stage
    rec["L_output"] = sums["output"] / n
    rec["L_latent"] = sums["latent"] / n
    if "visual" in sums:
        rec["L_visual"] = sums["visual"] / n
    rec["L_all"] = sums["all"] / n
    rec["recluster_rate"] = hits / n
    return rec


def _accumulate(sums, rep, bs):
    for key in ("output", "latent", "visual", "all"):
        if key in rep:
            sums[key] = sums.get(key, 0.0) + rep[key] * bs


def fsba_train(gen: TriggerGenerator, proxy: ClassifierSplit, cents: FeatureCentroids, dataset: ImageDataset,
               sched: FsbaSchedule):
    """Returns ``(gen, TrainingLog)``; ``gen`` is left in eval mode."""
    check_frozen(proxy)
    counts = dataset.class_counts()
    if (counts == 0).any():
        raise ValueError(f"class {int(np.flatnonzero(counts == 0)[0])} missing from the training set")
    rng = np.random.default_rng(sched.seed)
    torch.manual_seed(sched.seed)
    opt = make_generator_optimizer(gen, sched.lr)
    x, y = dataset.tensors()
    n = len(y)
    train_log = TrainingLog()
    for epoch in range(sched.epochs):
        refs = sample_references(n, rng, dataset.images)
        perm = rng.permutation(n)
        sums, hits, seen = {}, 0, 0
        for i in range(0, n, sched.batch_size):
            idx = perm[i:i + sched.batch_size]
            if len(idx) < 2:
                continue
            rep = fsba_train_step(gen, proxy, cents, x[idx], y[idx], x[refs[idx]], sched, opt)
            _accumulate(sums, rep, len(idx))
            hits += rep["hits"]
            seen += len(idx)
        rec = _epoch_record(epoch, sums, seen, hits)
        train_log.append(**rec)
        log.info("fsba epoch %d: %s", epoch, rec)
    gen.eval()
    return gen, train_log
