"""Classifier training (proxy and victim) and per-class latent centroids."""
from __future__ import annotations

import logging
from dataclasses import dataclass, asdict
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .data import ImageDataset
from .models import ClassifierSplit, build_classifier

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "sgd"
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0
    lr_decay: float = 0.1
    decay_every: int = 30
    epochs: int = 20
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be > 0")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def as_dict(self):
        return asdict(self)


def seed_everything(seed: int) -> torch.Generator:
    torch.manual_seed(seed)
    return torch.Generator().manual_seed(seed)


def make_optimizer(params, kind: str, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
    if kind == "sgd":
        return torch.optim.SGD(params, lr=lr, momentum=momentum, weight_decay=weight_decay)
    return torch.optim.Adam(params, lr=lr, weight_decay=weight_decay)


def train_classifier(dataset: ImageDataset, arch: str, cfg: TrainConfig, model: Optional[ClassifierSplit] = None,
                     history: Optional[list] = None):
    """Train a classifier from scratch (or continue ``model``); returns it frozen.

    The final training accuracy is stored on ``model.train_accuracy``; per-epoch
    records are appended to ``history`` when given.
    """
    dataset.validate_labels()
    g = seed_everything(cfg.seed)
    if model is None:
        model = build_classifier(arch, dataset.num_classes, dataset.image_shape[0], dataset.image_shape[1:])
    x, y = dataset.tensors()
    opt = make_optimizer(model.parameters(), cfg.optimizer, cfg.lr, cfg.momentum, cfg.weight_decay)
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=cfg.decay_every, gamma=cfg.lr_decay)
    n = len(y)
    for epoch in range(cfg.epochs):
        model.train()
        perm = torch.randperm(n, generator=g)
        total, correct = 0.0, 0
        for i in range(0, n, cfg.batch_size):
            idx = perm[i:i + cfg.batch_size]
            if len(idx) < 2:  # BatchNorm needs more than one sample
                continue
            logits = model(x[idx])
            loss = F.cross_entropy(logits, y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
            correct += int((logits.argmax(1) == y[idx]).sum())
        sched.step()
        log.debug("epoch %d loss %.4f acc %.4f", epoch, total / n, correct / n)
        if history is not None:
            history.append({"epoch": epoch, "loss": total / n, "train_acc": correct / n})
    model.freeze()
    model.train_accuracy = accuracy(model, dataset)
    return model


@torch.no_grad()
def predict(model: ClassifierSplit, images, batch_size: int = 512) -> torch.Tensor:
    images = torch.as_tensor(images)
    was_training = model.training
    model.eval()
    out = [model(images[i:i + batch_size]).argmax(1) for i in range(0, len(images), batch_size)]
    model.train(was_training)
    return torch.cat(out) if out else torch.empty(0, dtype=torch.long)


def accuracy(model: ClassifierSplit, dataset: ImageDataset) -> float:
    x, y = dataset.tensors()
    return float((predict(model, x) == y).float().mean())


@torch.no_grad()
def latents(model: ClassifierSplit, images, batch_size: int = 512) -> torch.Tensor:
    images = torch.as_tensor(images)
    return torch.cat([model.extract(images[i:i + batch_size]) for i in range(0, len(images), batch_size)])


@dataclass
class FeatureCentroids:
    centroids: torch.Tensor  # (K, d)

    def __getitem__(self, k):
        return self.centroids[k]

    @property
    def num_classes(self) -> int:
        return self.centroids.shape[0]


def compute_centroids(split: ClassifierSplit, dataset: ImageDataset, batch_size: int = 512) -> FeatureCentroids:
    if split.training:
        raise ValueError("feature extractor must be frozen (eval mode) to compute centroids")
    counts = dataset.class_counts()
    missing = np.flatnonzero(counts == 0)
    if len(missing):
        raise ValueError(f"class {int(missing[0])} has no samples")
    z = latents(split, dataset.images, batch_size).double()
    y = torch.from_numpy(dataset.labels)
    sums = torch.zeros(dataset.num_classes, z.shape[1], dtype=torch.float64).index_add_(0, y, z)
    cents = sums / torch.from_numpy(counts).double()[:, None]
    return FeatureCentroids(cents.float())
