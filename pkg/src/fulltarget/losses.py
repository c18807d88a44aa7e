"""Trigger-generator objectives: output-layer, latent-space and visual terms.

All reductions are batch means so that the weights keep their meaning at any
batch size.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Optional

import torch
import torch.nn.functional as F

PSNR_THRESH = 35.0
PSNR_CAP = 100.0  # dB assigned to identical pairs inside the visual term


class ScheduleError(ValueError):
    """A loss term was supplied in a training stage that does not use it."""


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.5
    beta: float = 0.3
    # None means the visual term is omitted (second FMBA stage), not zero-weighted.
    gamma: Optional[float] = 0.5

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ValueError(f"loss weight {name} must be >= 0, got {v}")

    @property
    def has_visual(self) -> bool:
        return self.gamma is not None

    def without_visual(self) -> "LossWeights":
        return LossWeights(self.alpha, self.beta, None)

    def as_dict(self) -> dict:
        d = {"alpha": self.alpha, "beta": self.beta}
        if self.gamma is not None:
            d["gamma"] = self.gamma
        return d


def output_layer_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise ValueError(f"logits must be (batch, K>=2), got {tuple(logits.shape)}")
    target = torch.as_tensor(target, dtype=torch.long, device=logits.device)
    if target.numel() and (int(target.min()) < 0 or int(target.max()) >= logits.shape[1]):
        raise ValueError(f"target class out of range [0, {logits.shape[1]})")
    return F.cross_entropy(logits, target)


def latent_space_loss(latents: torch.Tensor, centroid: torch.Tensor) -> torch.Tensor:
    """Mean absolute deviation of each latent from its centroid.

    ``centroid`` is either one ``d``-vector or a per-row ``(batch, d)`` matrix.
    """
    centroid = torch.as_tensor(centroid, dtype=latents.dtype, device=latents.device)
    if centroid.shape[-1] != latents.shape[-1] or (centroid.ndim == 2 and centroid.shape[0] != latents.shape[0]):
        raise ValueError(f"latent/centroid mismatch: {tuple(latents.shape)} vs {tuple(centroid.shape)}")
    return (latents - centroid).abs().mean()


def psnr_batch(a: torch.Tensor, b: torch.Tensor, peak: float = 1.0, cap: Optional[float] = None) -> torch.Tensor:
    """Per-sample PSNR in dB over all non-batch axes.

    Without ``cap`` identical pairs give ``inf``; with it the result is
    bounded above by ``cap`` (and stays differentiable elsewhere).
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    mse = (a - b).pow(2).flatten(1).mean(dim=1)
    if cap is not None:
        floor = peak ** 2 * 10.0 ** (-cap / 10.0)
        mse = mse.clamp_min(floor)
    return 10.0 * torch.log10(peak ** 2 / mse)


def psnr(a, b, peak: float = 1.0) -> float:
    """PSNR between two images, ``inf`` when they are identical."""
    a = torch.as_tensor(a, dtype=torch.float64)
    b = torch.as_tensor(b, dtype=torch.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    mse = float((a - b).pow(2).mean())
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak ** 2 / mse)


def visual_loss(base: torch.Tensor, mixed: torch.Tensor, psnr_thresh: float = PSNR_THRESH) -> torch.Tensor:
    if psnr_thresh <= 0:
        raise ValueError("psnr_thresh must be positive")
    p = psnr_batch(base, mixed, cap=PSNR_CAP)
    return ((psnr_thresh - p) / psnr_thresh).mean()


def combined_loss(terms: Mapping[str, torch.Tensor], w: LossWeights):
    has_visual = terms.get("visual") is not None
    if has_visual and not w.has_visual:
        raise ScheduleError("visual term supplied to a schedule that omits it")
    if w.has_visual and not has_visual:
        raise ScheduleError("schedule expects a visual term but none was supplied")
    total = w.alpha * terms["output"] + w.beta * terms["latent"]
    if has_visual:
        total = total + w.gamma * terms["visual"]
    return total
