"""STRIP entropy analysis and Fine-Pruning, evaluated on frozen model copies."""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.stats import ks_2samp

from .models import ClassifierSplit

HIST_BINS = 50


def _entropy(logits: torch.Tensor) -> torch.Tensor:
    logp = F.log_softmax(logits.double(), dim=1)
    return (-(logp.exp() * logp).sum(dim=1)).clamp_min(0.0)


@torch.no_grad()
def strip_entropies(model, inputs, overlay_pool, n: int = 16, blend: float = 0.5, seed: int = 0,
                    batch_size: int = 256) -> np.ndarray:
    """Mean prediction entropy of each input over ``n`` clean overlays."""
    if n < 1:
        raise ValueError("overlay count must be >= 1")
    if not 0.0 < blend < 1.0:
        raise ValueError("blend must lie in (0, 1)")
    pool = torch.as_tensor(overlay_pool)
    if len(pool) == 0:
        raise ValueError("overlay pool is empty")
    inputs = torch.as_tensor(inputs)
    g = torch.Generator().manual_seed(seed)
    picks = torch.randint(len(pool), (len(inputs), n), generator=g)
    model.eval()
    out = torch.empty(len(inputs), dtype=torch.float64)
    per = max(1, batch_size // n)
    for i in range(0, len(inputs), per):
        xb = inputs[i:i + per]
        mix = blend * xb[:, None] + (1.0 - blend) * pool[picks[i:i + per]]
        h = _entropy(model(mix.flatten(0, 1))).view(len(xb), n)
        out[i:i + per] = h.mean(dim=1)
    return out.numpy()


def strip_entropy(model, image, overlay_pool, n: int = 16, blend: float = 0.5, seed: int = 0) -> float:
    return float(strip_entropies(model, torch.as_tensor(image)[None], overlay_pool, n, blend, seed)[0])


@dataclass
class EntropyDistribution:
    entropies: np.ndarray
    population: str  # "clean" | "poisoned"
    num_classes: int

    def histogram(self, bins: int = HIST_BINS) -> dict:
        counts, edges = np.histogram(self.entropies, bins=bins, range=(0.0, math.log(self.num_classes)))
        return {"population": self.population, "counts": counts.tolist(), "edges": edges.tolist()}

    @property
    def degenerate(self) -> bool:
        return len(np.unique(self.entropies)) <= 1


def strip_compare(model, clean_inputs, poisoned_inputs, overlay_pool, n: int = 16, blend: float = 0.5,
                  seed: int = 0, frr: float = 0.01) -> dict:
    if len(clean_inputs) == 0 or len(poisoned_inputs) == 0:
        raise ValueError("both input sets must be non-empty")
    k = model.num_classes
    clean = EntropyDistribution(strip_entropies(model, clean_inputs, overlay_pool, n, blend, seed), "clean", k)
    pois = EntropyDistribution(strip_entropies(model, poisoned_inputs, overlay_pool, n, blend, seed + 1),
                               "poisoned", k)
    ks = float(ks_2samp(clean.entropies, pois.entropies).statistic)
    threshold = float(np.percentile(clean.entropies, 100 * frr))
    detection = float((pois.entropies < threshold).mean())
    return {
        "clean": clean,
        "poisoned": pois,
        "ks_statistic": ks,
        "threshold": threshold,
        "frr": frr,
        "detection_rate": detection,
        "degenerate": clean.degenerate or pois.degenerate,
    }


def strip_report_json(result: dict) -> dict:
    return {
        "clean_histogram": result["clean"].histogram(),
        "poisoned_histogram": result["poisoned"].histogram(),
        "ks_statistic": result["ks_statistic"],
        "threshold": result["threshold"],
        "frr": result["frr"],
        "detection_rate": result["detection_rate"],
        "degenerate": result["degenerate"],
    }


# -- fine-pruning --------------------------------------------------------------

@dataclass
class PrunePoint:
    fraction_pruned: float
    ba: float
    asr_avg: float
    pruned_channels: List[int] = field(default_factory=list)


@dataclass
class PruneCurve:
    points: List[PrunePoint]

    def as_json(self) -> List[dict]:
        return [{"fraction_pruned": p.fraction_pruned, "ba": p.ba, "asr_avg": p.asr_avg,
                 "pruned": len(p.pruned_channels)} for p in self.points]


class _ChannelMask:
    def __init__(self, module: torch.nn.Module, channels: int):
        self.mask = torch.ones(channels)
        self.handle = module.register_forward_hook(self)

    def __call__(self, module, inputs, output):
        return output * self.mask.to(output.dtype)[None, :, None, None]


@torch.no_grad()
def channel_activity(model: ClassifierSplit, layer: torch.nn.Module, images, batch_size: int = 512) -> torch.Tensor:
    """Mean absolute activation per output channel of ``layer`` over ``images``."""
    acc = []

    def hook(_m, _i, out):
        acc.append(out.abs().mean(dim=(0, 2, 3)) * len(out))

    h = layer.register_forward_hook(hook)
    model.eval()
    images = torch.as_tensor(images)
    try:
        for i in range(0, len(images), batch_size):
            model(images[i:i + batch_size])
    finally:
        h.remove()
    return torch.stack(acc).sum(0) / len(images)


def fine_prune(model: ClassifierSplit, clean_images, fractions: Sequence[float],
               eval_fn: Callable[[ClassifierSplit], Dict[str, float]], layer_name: str = "prune_layer") -> PruneCurve:
    """Zero the least active channels of the last conv layer, growing by ``fractions``.

    Works on a deep copy; ``model`` is left untouched.  ``eval_fn`` maps a
    model to ``{"ba": ..., "asr_avg": ...}``.
    """
    fractions = list(fractions)
    if any(f < 0 or f > 1 for f in fractions):
        raise ValueError("pruning fractions must lie in [0, 1]")
    if not fractions or fractions[0] != 0 or any(b <= a for a, b in zip(fractions, fractions[1:])):
        raise ValueError("fractions must start at 0 and increase strictly")
    pruned = copy.deepcopy(model)
    pruned.eval()
    layer = getattr(pruned, layer_name)
    activity = channel_activity(pruned, layer, clean_images)
    order = torch.argsort(activity, stable=True).tolist()
    mask = _ChannelMask(layer, len(order))
    points = []
    try:
        for f in fractions:
            count = int(math.floor(f * len(order) + 1e-9))
            mask.mask.fill_(1.0)
            mask.mask[order[:count]] = 0.0
            m = eval_fn(pruned)
            points.append(PrunePoint(f, float(m["ba"]), float(m["asr_avg"]), sorted(order[:count])))
    finally:
        mask.handle.remove()
    return PruneCurve(points)
