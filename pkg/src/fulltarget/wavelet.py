"""Two-level orthonormal Haar decomposition and mid/high-frequency mixing.

Arrays are laid out ``(..., H, W)``; every leading axis (batch, channel) is
transformed independently.  ``H`` and ``W`` must both be divisible by 4.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple

import numpy as np

BAND_NAMES = ("HL1", "LH1", "HH1", "HL2", "LH2", "HH2")

PYRAMID_MAGIC = b"FFPY"
PYRAMID_VERSION = 1


class WaveletShapeError(ValueError):
    pass


@dataclass(frozen=True)
class WaveletPyramid:
    """Level-2 approximation band plus the six detail bands.

    ``yh`` is ordered ``(HL1, LH1, HH1, HL2, LH2, HH2)``; level-1 bands have
    half the source resolution, level-2 bands (and ``yl``) a quarter.
    """

    yl: np.ndarray
    yh: Tuple[np.ndarray, ...]
    source_shape: Tuple[int, ...]

    def scaled_detail(self, factor: float) -> "WaveletPyramid":
        return WaveletPyramid(self.yl, tuple(b * factor for b in self.yh), self.source_shape)

    def energy(self) -> float:
        return float(np.sum(self.yl.astype(np.float64) ** 2)
                     + sum(np.sum(b.astype(np.float64) ** 2) for b in self.yh))


def _haar_step(x: np.ndarray):
    a = x[..., 0::2, 0::2]
    b = x[..., 0::2, 1::2]
    c = x[..., 1::2, 0::2]
    d = x[..., 1::2, 1::2]
    ll = (a + b + c + d) / 2.0
    hl = (a + b - c - d) / 2.0
    lh = (a - b + c - d) / 2.0
    hh = (a - b - c + d) / 2.0
    return ll, hl, lh, hh


def _haar_step_inverse(ll, hl, lh, hh) -> np.ndarray:
    out_shape = ll.shape[:-2] + (ll.shape[-2] * 2, ll.shape[-1] * 2)
    out = np.empty(out_shape, dtype=np.result_type(ll, hl, lh, hh))
    out[..., 0::2, 0::2] = (ll + hl + lh + hh) / 2.0
    out[..., 0::2, 1::2] = (ll + hl - lh - hh) / 2.0
    out[..., 1::2, 0::2] = (ll - hl + lh - hh) / 2.0
    out[..., 1::2, 1::2] = (ll - hl - lh + hh) / 2.0
    return out


def sdwt_decompose(image) -> WaveletPyramid:
    x = np.asarray(image, dtype=np.float64)
    if x.ndim < 2 or x.size == 0:
        raise WaveletShapeError(f"expected a non-empty (..., H, W) array, got shape {x.shape}")
    h, w = x.shape[-2:]
    if h % 4 or w % 4:
        raise WaveletShapeError(f"height and width must be divisible by 4, got {h}x{w}")
    ll1, hl1, lh1, hh1 = _haar_step(x)
    ll2, hl2, lh2, hh2 = _haar_step(ll1)
    return WaveletPyramid(ll2, (hl1, lh1, hh1, hl2, lh2, hh2), tuple(x.shape))


def sdwt_reconstruct(pyramid: WaveletPyramid) -> np.ndarray:
    """Exact inverse of :func:`sdwt_decompose`. The output is not clamped."""
    shape = tuple(pyramid.source_shape)
    if len(pyramid.yh) != 6:
        raise WaveletShapeError(f"expected 6 detail bands, got {len(pyramid.yh)}")
    lead, (h, w) = shape[:-2], shape[-2:]
    expected = [lead + (h // 2, w // 2)] * 3 + [lead + (h // 4, w // 4)] * 3
    if pyramid.yl.shape != lead + (h // 4, w // 4):
        raise WaveletShapeError(f"yl shape {pyramid.yl.shape} inconsistent with source {shape}")
    for name, band, want in zip(BAND_NAMES, pyramid.yh, expected):
        if band.shape != want:
            raise WaveletShapeError(f"band {name} has shape {band.shape}, expected {want}")
    hl1, lh1, hh1, hl2, lh2, hh2 = pyramid.yh
    ll1 = _haar_step_inverse(pyramid.yl, hl2, lh2, hh2)
    return _haar_step_inverse(ll1, hl1, lh1, hh1)


def perturb_midhigh(x_c, x_r, k: float = 1.5) -> np.ndarray:
    """Blend the detail bands of ``x_r`` (gain ``k``) into ``x_c``.

    Keeps the low band of ``x_c``; result is clamped to [0, 1].
    """
    x_c = np.asarray(x_c)
    x_r = np.asarray(x_r)
    if x_c.shape != x_r.shape:
        raise WaveletShapeError(f"shape mismatch: {x_c.shape} vs {x_r.shape}")
    if k < 0:
        raise ValueError(f"mixing gain must be non-negative, got {k}")
    if k == 0:
        return np.clip(x_c, 0.0, 1.0).astype(x_c.dtype if x_c.dtype.kind == "f" else np.float64)
    pc = sdwt_decompose(x_c)
    pr = sdwt_decompose(x_r)
    mixed = WaveletPyramid(pc.yl, tuple(bc + k * br for bc, br in zip(pc.yh, pr.yh)), pc.source_shape)
    out = np.clip(sdwt_reconstruct(mixed), 0.0, 1.0)
    return out.astype(x_c.dtype) if x_c.dtype.kind == "f" else out


# -- binary dump ---------------------------------------------------------------
#
# Layout (little-endian):
#   magic  b"FFPY"
#   u16    version
#   u16    band count (7: yl then the six detail bands)
#   u16    ndim of source shape, then that many u32 dims
#   per band: u16 ndim, ndim x u32 dims, then prod(dims) float32 values

def save_pyramid(pyramid: WaveletPyramid, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    bands = (pyramid.yl,) + tuple(pyramid.yh)
    with open(path, "wb") as fh:
        fh.write(PYRAMID_MAGIC)
        fh.write(struct.pack("<HH", PYRAMID_VERSION, len(bands)))
        fh.write(struct.pack("<H", len(pyramid.source_shape)))
        fh.write(struct.pack(f"<{len(pyramid.source_shape)}I", *pyramid.source_shape))
        for band in bands:
            fh.write(struct.pack("<H", band.ndim))
            fh.write(struct.pack(f"<{band.ndim}I", *band.shape))
            fh.write(np.ascontiguousarray(band, dtype="<f4").tobytes())
    return path


def load_pyramid(path) -> WaveletPyramid:
    data = Path(path).read_bytes()
    if data[:4] != PYRAMID_MAGIC:
        raise ValueError(f"{path}: not a pyramid dump (bad magic)")
    version, count = struct.unpack_from("<HH", data, 4)
    if version != PYRAMID_VERSION:
        raise ValueError(f"{path}: unsupported pyramid dump version {version}")
    off = 8
    (nd,) = struct.unpack_from("<H", data, off)
    off += 2
    source_shape = struct.unpack_from(f"<{nd}I", data, off)
    off += 4 * nd
    bands = []
    for _ in range(count):
        (bnd,) = struct.unpack_from("<H", data, off)
        off += 2
        shape = struct.unpack_from(f"<{bnd}I", data, off)
        off += 4 * bnd
        n = int(np.prod(shape))
        bands.append(np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(shape).astype(np.float64))
        off += 4 * n
    return WaveletPyramid(bands[0], tuple(bands[1:]), tuple(source_shape))
