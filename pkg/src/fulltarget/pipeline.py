"""Clean-label poisoning, attack evaluation and visual metrics."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .data import ImageDataset
from .fsba import parameter_digest
from .losses import psnr_batch
from .models import ClassifierSplit, TriggerGenerator, apply_trigger, generate_trigger, one_hot
from .training import accuracy, predict

PSNR_INF = math.inf


@dataclass(frozen=True)
class PoisonPlan:
    poison_rate: float = 0.004
    seed: int = 0
    generator_ref: Optional[str] = None

    def __post_init__(self):
        if not 0.0 <= self.poison_rate <= 1.0:
            raise ValueError(f"poison rate must be in [0, 1], got {self.poison_rate}")

    def per_class_count(self, n_total: int, num_classes: int) -> int:
        n_p = math.floor(self.poison_rate * n_total + 1e-9)
        return n_p // num_classes


@dataclass
class PoisonManifest:
    indices: List[int]
    classes: List[int]
    per_class_count: int
    plan_seed: int
    poison_rate: float
    generator_checksum: Optional[str]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@torch.no_grad()
def triggered(gen: TriggerGenerator, images: torch.Tensor, classes, batch_size: int = 512) -> torch.Tensor:
    """``apply_trigger(x, generate_trigger(gen, x, onehot(c)))`` in batches, generator in eval mode."""
    gen.eval()
    classes = torch.as_tensor(classes, dtype=torch.long).expand(len(images)) if np.ndim(classes) == 0 \
        else torch.as_tensor(classes, dtype=torch.long)
    out = []
    for i in range(0, len(images), batch_size):
        xb = images[i:i + batch_size]
        t = generate_trigger(gen, xb, one_hot(classes[i:i + batch_size], gen.num_classes))
        out.append(apply_trigger(xb, t))
    return torch.cat(out) if out else images.clone()


def select_poison_indices(labels: np.ndarray, num_classes: int, per_class: int, seed: int) -> np.ndarray:
    """The first ``per_class`` samples of each class under a seeded shuffle."""
    counts = np.bincount(labels, minlength=num_classes)
    if per_class > counts.min():
        raise ValueError(f"per-class poison count {per_class} exceeds smallest class size {counts.min()}")
    order = np.random.default_rng(seed).permutation(len(labels))
    chosen = [order[labels[order] == k][:per_class] for k in range(num_classes)]
    return np.sort(np.concatenate(chosen)) if chosen else np.empty(0, dtype=np.int64)


def build_poisoned_dataset(dataset: ImageDataset, gen: Optional[TriggerGenerator], plan: PoisonPlan):
    """Returns ``(poisoned dataset, manifest)``; labels are never modified."""
    per_class = plan.per_class_count(len(dataset), dataset.num_classes)
    idx = select_poison_indices(dataset.labels, dataset.num_classes, per_class, plan.seed)
    images = dataset.images.copy()
    checksum = None
    if len(idx):
        if gen is None:
            raise ValueError("a generator is required for a non-zero poison rate")
        checksum = parameter_digest(gen)
        cls = dataset.labels[idx]
        images[idx] = triggered(gen, torch.from_numpy(dataset.images[idx]), cls).numpy()
    poisoned = ImageDataset(images, dataset.labels.copy(), dataset.num_classes, dict(dataset.meta))
    manifest = PoisonManifest([int(i) for i in idx], [int(c) for c in dataset.labels[idx]], per_class,
                              plan.seed, plan.poison_rate, checksum)
    return poisoned, manifest


def label_edits(clean: ImageDataset, poisoned: ImageDataset) -> int:
    return int((clean.labels != poisoned.labels).sum())


# -- visual metrics ------------------------------------------------------------

def _gaussian_window(size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    ax = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-(ax ** 2) / (2 * sigma ** 2))
    g = g / g.sum()
    return torch.outer(g, g)


def ssim_batch(a: torch.Tensor, b: torch.Tensor, window: int = 11, sigma: float = 1.5,
               k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0) -> torch.Tensor:
    """Per-image SSIM of ``(N, C, H, W)`` batches: Gaussian window, valid region, channel mean."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if min(a.shape[-2:]) < window:
        raise ValueError(f"images smaller than the {window}x{window} SSIM window")
    a = a.double()
    b = b.double()
    c = a.shape[1]
    w = _gaussian_window(window, sigma).to(a)[None, None].repeat(c, 1, 1, 1)

    def filt(t):
        return F.conv2d(t, w, groups=c)

    mu_a, mu_b = filt(a), filt(b)
    s_aa = filt(a * a) - mu_a ** 2
    s_bb = filt(b * b) - mu_b ** 2
    s_ab = filt(a * b) - mu_a * mu_b
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    smap = ((2 * mu_a * mu_b + c1) * (2 * s_ab + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (s_aa + s_bb + c2))
    return smap.flatten(1).mean(dim=1)


def visual_report(clean, poisoned) -> dict:
    clean = torch.as_tensor(clean)
    poisoned = torch.as_tensor(poisoned)
    if clean.shape != poisoned.shape:
        raise ValueError(f"shape mismatch: {tuple(clean.shape)} vs {tuple(poisoned.shape)}")
    if len(clean) == 0:
        raise ValueError("no image pairs")
    p = psnr_batch(clean.double(), poisoned.double())
    s = ssim_batch(clean, poisoned)
    return {"psnr_mean": float(p.mean()), "ssim_mean": float(s.mean())}


# -- attack evaluation ---------------------------------------------------------

@dataclass
class AttackReport:
    asr_per_class: List[float]
    asr_avg: float
    ba: float
    dv: float
    psnr_mean: float
    ssim_mean: float
    adversarial_baseline_rate: Optional[float] = None

    def __post_init__(self):
        fracs = list(self.asr_per_class) + [self.asr_avg, self.ba]
        if any(not 0.0 <= v <= 1.0 for v in fracs):
            raise ValueError("ASR/BA fractions must lie in [0, 1]")

    def to_json(self) -> str:
        d = asdict(self)
        for key in ("psnr_mean",):
            if d[key] is not None and math.isinf(d[key]):
                d[key] = "inf"
        return json.dumps(d, indent=2, sort_keys=False)

    @classmethod
    def from_json(cls, text: str) -> "AttackReport":
        d = json.loads(text)
        if d.get("psnr_mean") == "inf":
            d["psnr_mean"] = math.inf
        return cls(**d)


def target_rates(model: ClassifierSplit, gen: TriggerGenerator, test: ImageDataset, collect=None) -> List[float]:
    """Fraction of non-target samples classified as each target after triggering."""
    x, y = test.tensors()
    rates = []
    for t in range(test.num_classes):
        mask = y != t
        if not bool(mask.any()):
            rates.append(0.0)
            continue
        xs = x[mask]
        xt = triggered(gen, xs, t)
        if collect is not None:
            collect(xs, xt)
        rates.append(float((predict(model, xt) == t).float().mean()))
    return rates


def evaluate_attack(victim: ClassifierSplit, gen: TriggerGenerator, test: ImageDataset,
                    clean_reference_ba: float, clean_model: Optional[ClassifierSplit] = None) -> AttackReport:
    if len(test) == 0:
        raise ValueError("empty test set")
    ba = accuracy(victim, test)
    psnrs, ssims = [], []

    def collect(xs, xt):
        psnrs.append(psnr_batch(xs.double(), xt.double()))
        ssims.append(ssim_batch(xs, xt))

    asr = target_rates(victim, gen, test, collect)
    adv = None
    if clean_model is not None:
        adv_rates = target_rates(clean_model, gen, test)
        adv = float(np.mean(adv_rates))
    return AttackReport(
        asr_per_class=asr,
        asr_avg=float(np.mean(asr)),
        ba=ba,
        dv=float(clean_reference_ba - ba),
        psnr_mean=float(torch.cat(psnrs).mean()),
        ssim_mean=float(torch.cat(ssims).mean()),
        adversarial_baseline_rate=adv,
    )


def poison_rate_sweep(run_rate: Callable[[float], AttackReport], rates: Sequence[float], tolerance: float = 0.05):
    """Run ``run_rate`` for each rate; returns rows and a monotonicity verdict."""
    rates = list(rates)
    if any(not 0.0 <= r <= 1.0 for r in rates):
        raise ValueError("poison rates must lie in [0, 1]")
    if rates != sorted(rates):
        raise ValueError("poison rates must be sorted ascending")
    rows = [{"rate": r, "asr_avg": run_rate(r).asr_avg} for r in rates]
    drops = [max(0.0, a["asr_avg"] - b["asr_avg"]) for a, b in zip(rows, rows[1:])]
    return {"rows": rows, "max_drop": max(drops, default=0.0),
            "monotone": all(d <= tolerance for d in drops), "tolerance": tolerance}
