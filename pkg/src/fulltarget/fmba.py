"""Feature-migrating trigger training in two stages.

Stage 1 conditions the generator on a class other than the sample's own and
asks the trigger to migrate the sample into that class.  Stage 2 fine-tunes
on in-class samples with the output and latent terms only.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np
import torch

from .data import ImageDataset
from .fsba import (TrainingLog, _accumulate, _epoch_record, check_frozen, generator_step,
                   make_generator_optimizer)
from .losses import PSNR_THRESH, LossWeights, ScheduleError
from .models import ClassifierSplit, TriggerGenerator
from .training import FeatureCentroids

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FmbaSchedule:
    stage1_epochs: int = 20
    stage2_epochs: int = 10
    batch_size: int = 64
    lr: float = 1e-4
    stage1_weights: LossWeights = field(default_factory=LossWeights)
    stage2_weights: LossWeights = field(default_factory=lambda: LossWeights(gamma=None))
    psnr_thresh: float = PSNR_THRESH
    seed: int = 0

    def __post_init__(self):
        if self.stage1_epochs < 0 or self.stage2_epochs < 0:
            raise ValueError("stage epoch counts must be >= 0")
        if self.lr < 0:
            raise ValueError("learning rate must be >= 0")
        if not self.stage1_weights.has_visual:
            raise ValueError("stage 1 uses the visual term")
        if self.stage2_weights.has_visual:
            raise ScheduleError("stage 2 omits the visual term; gamma must not be set")

    @classmethod
    def split(cls, epochs: int, **kw) -> "FmbaSchedule":
        """Two thirds of ``epochs`` to stage 1, the rest to stage 2."""
        s1 = (2 * epochs + 2) // 3
        return cls(stage1_epochs=s1, stage2_epochs=epochs - s1, **kw)


def sample_out_of_class_targets(labels: np.ndarray, num_classes: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform target among the ``K - 1`` classes other than each label."""
    return (labels + rng.integers(1, num_classes, size=len(labels))) % num_classes


def fmba_stage1_step(gen: TriggerGenerator, proxy: ClassifierSplit, cents: FeatureCentroids,
                     images: torch.Tensor, labels: torch.Tensor, targets: torch.Tensor, sched: FmbaSchedule,
                     opt: Optional[torch.optim.Optimizer] = None) -> Dict[str, float]:
    check_frozen(proxy)
    targets = torch.as_tensor(targets, dtype=torch.long)
    if bool((targets == torch.as_tensor(labels)).any()):
        raise ValueError("stage 1 requires every target class to differ from the true label")
    if opt is None:
        opt = make_generator_optimizer(gen, sched.lr)
    return generator_step(gen, proxy, cents, images, targets, sched.stage1_weights, opt, sched.psnr_thresh)


def fmba_stage2_step(gen: TriggerGenerator, proxy: ClassifierSplit, cents: FeatureCentroids,
                     images: torch.Tensor, labels: torch.Tensor, sched: FmbaSchedule,
                     opt: Optional[torch.optim.Optimizer] = None,
                     weights: Optional[LossWeights] = None) -> Dict[str, float]:
    check_frozen(proxy)
    weights = sched.stage2_weights if weights is None else weights
    if weights.has_visual:
        raise ScheduleError("stage 2 omits the visual term; gamma must not be set")
    if opt is None:
        opt = make_generator_optimizer(gen, sched.lr)
    return generator_step(gen, proxy, cents, images, torch.as_tensor(labels, dtype=torch.long), weights, opt,
                          sched.psnr_thresh)


def fmba_train(gen: TriggerGenerator, proxy: ClassifierSplit, cents: FeatureCentroids, dataset: ImageDataset,
               sched: FmbaSchedule):
    """Stage 1 then stage 2; returns ``(gen, TrainingLog)`` with stage-labelled records."""
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
    for stage, epochs in ((1, sched.stage1_epochs), (2, sched.stage2_epochs)):
        for epoch in range(epochs):
            perm = rng.permutation(n)
            targets = sample_out_of_class_targets(dataset.labels, dataset.num_classes, rng) if stage == 1 else None
            sums, hits, seen = {}, 0, 0
            for i in range(0, n, sched.batch_size):
                idx = perm[i:i + sched.batch_size]
                if len(idx) < 2:
                    continue
                if stage == 1:
                    rep = fmba_stage1_step(gen, proxy, cents, x[idx], y[idx], torch.from_numpy(targets[idx]),
                                           sched, opt)
                else:
                    rep = fmba_stage2_step(gen, proxy, cents, x[idx], y[idx], sched, opt)
                _accumulate(sums, rep, len(idx))
                hits += rep["hits"]
                seen += len(idx)
            rec = _epoch_record(epoch, sums, seen, hits, stage=stage)
            train_log.append(**rec)
            log.info("fmba stage %d epoch %d: %s", stage, epoch, rec)
    gen.eval()
    return gen, train_log
