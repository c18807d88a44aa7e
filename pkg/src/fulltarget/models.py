"""Classifiers with an explicit feature/head split and the class-conditional
trigger generator."""
from __future__ import annotations

import itertools
import logging
from typing import Callable, Dict, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

log = logging.getLogger(__name__)

EPSILON_DEFAULT = 80.0 / 255.0


class GeneratorShapeError(ValueError):
    pass


class ClassifierSplit(nn.Module):
    """``forward(x) == head(extract(x))``.

    Subclasses build ``self.features`` (image -> latent vector) and expose
    ``self.prune_layer``, the module whose output channels fine-pruning masks.
    """

    arch_id = "base"

    def __init__(self, num_classes: int, latent_dim: int):
        super().__init__()
        if num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        self.num_classes = num_classes
        self.latent_dim = latent_dim
        self.head = nn.Linear(latent_dim, num_classes)

    def extract(self, x: torch.Tensor) -> torch.Tensor:
        return self.features(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.extract(x))

    def freeze(self) -> "ClassifierSplit":
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        return self

    @property
    def frozen(self) -> bool:
        return not self.training and not any(p.requires_grad for p in self.parameters())


def _conv_bn(cin, cout):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, padding=1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True))


class PlainCNN(ClassifierSplit):
    """VGG-style stack: two conv stages, flattened into a dense latent layer."""

    arch_id = "plain_cnn"

    def __init__(self, num_classes=10, in_channels=3, image_size=(16, 16), width=16, latent_dim=64):
        super().__init__(num_classes, latent_dim)
        h, w = image_size
        self.prune_layer = _conv_bn(width * 2, width * 2)
        self.features = nn.Sequential(
            _conv_bn(in_channels, width),
            _conv_bn(width, width),
            nn.MaxPool2d(2),
            _conv_bn(width, width * 2),
            self.prune_layer,
            nn.MaxPool2d(2),
            nn.Flatten(),
            nn.Linear(width * 2 * (h // 4) * (w // 4), latent_dim),
            nn.ReLU(inplace=True),
        )


class _ResBlock(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = nn.Sequential()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ResCNN(ClassifierSplit):
    """Small residual network ending in global average pooling."""

    arch_id = "res_cnn"

    def __init__(self, num_classes=10, in_channels=3, image_size=(16, 16), width=16, latent_dim=None):
        latent_dim = width * 4
        super().__init__(num_classes, latent_dim)
        self.prune_layer = _ResBlock(width * 2, width * 4, stride=2)
        self.features = nn.Sequential(
            nn.Conv2d(in_channels, width, 3, 1, 1, bias=False),
            nn.BatchNorm2d(width),
            nn.ReLU(inplace=True),
            _ResBlock(width, width),
            _ResBlock(width, width * 2, stride=2),
            self.prune_layer,
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
        )


ARCHITECTURES: Dict[str, Callable[..., ClassifierSplit]] = {
    PlainCNN.arch_id: PlainCNN,
    ResCNN.arch_id: ResCNN,
}


def build_classifier(arch: str, num_classes: int, in_channels: int, image_size: Tuple[int, int]) -> ClassifierSplit:
    try:
        cls = ARCHITECTURES[arch]
    except KeyError:
        raise ValueError(f"unknown architecture {arch!r}; known: {sorted(ARCHITECTURES)}") from None
    return cls(num_classes=num_classes, in_channels=in_channels, image_size=tuple(image_size))


# -- trigger generator ---------------------------------------------------------

def _conv_out(n, k, s, p):
    return (n + 2 * p - k) // s + 1


def _encoder_size(n: int) -> int:
    n = _conv_out(n, 3, 3, 1)
    n //= 2
    n = _conv_out(n, 3, 2, 1)
    return n // 2


def _deconv_out(n, k, s, p, op):
    return (n - 1) * s - 2 * p + k + op


def decoder_output_padding(n: int) -> Tuple[int, int, int]:
    """Output-padding triple that makes the decoder reproduce size ``n``."""
    z = _encoder_size(n)
    if z < 1:
        raise GeneratorShapeError(f"input size {n} collapses to nothing in the encoder")
    for op in itertools.product(range(2), range(3), range(2)):
        m = _deconv_out(z, 3, 2, 0, op[0])
        m = _deconv_out(m, 5, 3, 1, op[1])
        m = _deconv_out(m, 2, 2, 1, op[2])
        if m == n:
            return op
    raise GeneratorShapeError(f"no decoder output padding reproduces size {n}")


class TriggerGenerator(nn.Module):
    """Class-conditional autoencoder emitting an additive trigger.

    The one-hot class vector is broadcast to ``K`` constant planes and stacked
    onto the image channels.  The output is ``epsilon * tanh(.)`` so the
    l-infinity bound holds by construction.
    """

    conditioning = "one-hot vector broadcast to K constant planes, concatenated channel-wise at the encoder input"

    def __init__(self, num_classes: int, in_channels: int = 3, image_size=(16, 16), epsilon: float = EPSILON_DEFAULT,
                 final_bn_init: float = 1.0):
        super().__init__()
        if epsilon <= 0:
            raise ValueError("epsilon must be positive")
        self.num_classes = num_classes
        self.in_channels = in_channels
        self.image_size = tuple(image_size)
        self.epsilon = float(epsilon)
        ph = decoder_output_padding(self.image_size[0])
        pw = decoder_output_padding(self.image_size[1])
        self.output_padding = tuple(zip(ph, pw))
        log.info("generator output padding for %s: %s", self.image_size, self.output_padding)
        self.encoder = nn.Sequential(
            nn.Conv2d(in_channels + num_classes, 16, 3, stride=3, padding=1),
            nn.BatchNorm2d(16),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(2, 2),
            nn.Conv2d(16, 64, 3, stride=2, padding=1),
            nn.BatchNorm2d(64),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(2, 2),
        )
        op = self.output_padding
        self.decoder = nn.Sequential(
            nn.ConvTranspose2d(64, 128, 3, stride=2, output_padding=op[0]),
            nn.BatchNorm2d(128),
            nn.ReLU(inplace=True),
            nn.ConvTranspose2d(128, 64, 5, stride=3, padding=1, output_padding=op[1]),
            nn.BatchNorm2d(64),
            nn.ReLU(inplace=True),
        )
        self.final = nn.Sequential(
            nn.ConvTranspose2d(64, in_channels, 2, stride=2, padding=1, output_padding=op[2]),
            nn.BatchNorm2d(in_channels),
        )
        # a small initial scale starts training from a faint trigger
        nn.init.constant_(self.final[1].weight, final_bn_init)

    def forward(self, x: torch.Tensor, class_vec: torch.Tensor) -> torch.Tensor:
        planes = class_vec.to(x.dtype)[:, :, None, None].expand(-1, -1, x.shape[2], x.shape[3])
        h = self.encoder(torch.cat([x, planes], dim=1))
        return self.epsilon * torch.tanh(self.final(self.decoder(h)))


def one_hot(classes, num_classes: int) -> torch.Tensor:
    classes = torch.as_tensor(classes, dtype=torch.long)
    return F.one_hot(classes, num_classes).float()


def generate_trigger(gen: TriggerGenerator, image: torch.Tensor, class_vec: torch.Tensor) -> torch.Tensor:
    """Trigger for a batch ``(N, C, H, W)`` (or one ``(C, H, W)`` image)."""
    single = image.ndim == 3
    if single:
        image = image.unsqueeze(0)
        class_vec = class_vec.reshape(1, -1)
    if image.ndim != 4 or image.shape[1] != gen.in_channels or tuple(image.shape[2:]) != gen.image_size:
        raise GeneratorShapeError(
            f"image shape {tuple(image.shape)} incompatible with generator "
            f"(C={gen.in_channels}, size={gen.image_size})")
    cv = torch.as_tensor(class_vec, dtype=torch.float32)
    if cv.shape != (image.shape[0], gen.num_classes):
        raise ValueError(f"class vector shape {tuple(cv.shape)}, expected ({image.shape[0]}, {gen.num_classes})")
    if not bool(((cv == 0) | (cv == 1)).all()) or not bool((cv.sum(dim=1) == 1).all()):
        raise ValueError("class vector must be one-hot")
    t = gen(image, cv)
    return t[0] if single else t


def apply_trigger(image: torch.Tensor, trigger: torch.Tensor) -> torch.Tensor:
    if image.shape != trigger.shape:
        raise ValueError(f"shape mismatch: {tuple(image.shape)} vs {tuple(trigger.shape)}")
    return (image + trigger).clamp(0.0, 1.0)


# -- checkpoints ---------------------------------------------------------------

CHECKPOINT_FORMAT = "fulltarget-checkpoint"
CHECKPOINT_VERSION = 1


def save_checkpoint(model: nn.Module, path, **extra) -> None:
    if isinstance(model, TriggerGenerator):
        meta = {"kind": "generator", "num_classes": model.num_classes, "in_channels": model.in_channels,
                "image_size": list(model.image_size), "epsilon": model.epsilon,
                "conditioning": model.conditioning, "output_padding": [list(p) for p in model.output_padding]}
    elif isinstance(model, ClassifierSplit):
        meta = {"kind": "classifier", "arch": model.arch_id, "num_classes": model.num_classes,
                "in_channels": extra.pop("in_channels"), "image_size": list(extra.pop("image_size"))}
    else:
        raise TypeError(f"cannot checkpoint {type(model).__name__}")
    blob = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "meta": meta,
            "extra": extra, "state_dict": model.state_dict()}
    torch.save(blob, path)


def load_checkpoint(path):
    """Returns ``(model, meta, extra)``; the model is in eval mode."""
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(blob, dict) or blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a checkpoint")
    if blob["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {blob['version']}")
    meta = blob["meta"]
    if meta["kind"] == "generator":
        model = TriggerGenerator(meta["num_classes"], meta["in_channels"], tuple(meta["image_size"]), meta["epsilon"])
    else:
        model = build_classifier(meta["arch"], meta["num_classes"], meta["in_channels"], tuple(meta["image_size"]))
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, meta, blob.get("extra", {})
