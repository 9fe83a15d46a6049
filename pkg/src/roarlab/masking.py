"""Exact-count attribution thresholding, pixel removal, and mask total variation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Mask:
    """Binary drop mask over the image plane.

    bits is (h, w) bool; drop_rate is the fraction of pixels set;
    popcount(bits) == round(drop_rate * h * w) always holds, and tv is the
    normalized anisotropic total variation of bits.
    """

    bits: np.ndarray
    drop_rate: float
    source_method: str
    tv: float

    def popcount(self) -> int:
        return int(self.bits.sum())


def total_variation(mask) -> float:
    """Anisotropic TV over interior neighbor pairs, normalized by pixel count.

    TV = (sum |m[i+1,j]-m[i,j]| + sum |m[i,j+1]-m[i,j]|) / (h*w).
    """
    bits = mask.bits if isinstance(mask, Mask) else np.asarray(mask)
    b = bits.astype(np.float64)
    if b.ndim != 2:
        raise ValueError(f"mask must be 2-d, got shape {b.shape}")
    v = np.abs(np.diff(b, axis=0)).sum() + np.abs(np.diff(b, axis=1)).sum()
    return float(v / b.size)


def total_variation_batch(bits: np.ndarray) -> np.ndarray:
    """TV of a stack of (n, h, w) binary masks."""
    b = bits.astype(np.float64)
    v = np.abs(np.diff(b, axis=1)).sum(axis=(1, 2)) + np.abs(np.diff(b, axis=2)).sum(axis=(1, 2))
    return v / (b.shape[1] * b.shape[2])


def mask_from_bits(bits: np.ndarray, source_method: str = "") -> Mask:
    bits = np.asarray(bits, dtype=bool)
    bits.setflags(write=False)
    return Mask(bits=bits, drop_rate=float(bits.sum()) / bits.size,
                source_method=source_method, tv=total_variation(bits))


def drop_count(t: float, size: int) -> int:
    """Pixels removed at drop rate t: round-half-even of t * size."""
    return int(np.rint(t * size))


def top_t_mask(values, t: float, source_method: str = "") -> Mask:
    """Mask the round(t*h*w) largest values; ties broken by ascending flat index.

    Equivalent to percentile thresholding whenever values are distinct, but
    with a deterministic drop count under ties.
    """
    if isinstance(values, np.ndarray):
        a = values
    else:
        a = values.values
        source_method = source_method or getattr(values, "method", "")
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"top_t_mask needs a 2-d map, got shape {a.shape}")
    if not 0 < t < 1:
        raise ValueError(f"drop rate must lie in (0, 1), got {t}")
    n_drop = drop_count(t, a.size)
    bits = np.zeros(a.size, dtype=bool)
    if n_drop:
        flat = a.reshape(-1)
        # Primary key: value descending; secondary: flat index ascending.
        order = np.lexsort((np.arange(a.size), -flat))
        bits[order[:n_drop]] = True
    bits = bits.reshape(a.shape)
    bits.setflags(write=False)
    return Mask(bits=bits, drop_rate=t, source_method=source_method,
                tv=total_variation(bits))


def top_t_bits_batch(maps: np.ndarray, t: float) -> np.ndarray:
    """Vectorized top_t_mask bits for a stack of (n, h, w) maps."""
    n, h, w = maps.shape
    if not 0 < t < 1:
        raise ValueError(f"drop rate must lie in (0, 1), got {t}")
    n_drop = drop_count(t, h * w)
    bits = np.zeros((n, h * w), dtype=bool)
    if n_drop:
        flat = maps.reshape(n, -1).astype(np.float64)
        idx = np.broadcast_to(np.arange(h * w), flat.shape)
        order = np.lexsort((idx, -flat), axis=1)
        np.put_along_axis(bits, order[:, :n_drop], True, axis=1)
    return bits.reshape(n, h, w)


def apply_mask(x: np.ndarray, mask: Mask) -> np.ndarray:
    """Zero the masked pixels of one (c, h, w) sample, all channels."""
    x = np.asarray(x)
    if x.ndim != 3 or x.shape[1:] != mask.bits.shape:
        raise ValueError(f"sample shape {x.shape} does not match mask {mask.bits.shape}")
    return x * ~mask.bits


def apply_mask_batch(images: np.ndarray, bits: np.ndarray) -> np.ndarray:
    """Zero per-sample masked pixels of an (n, c, h, w) batch."""
    if images.shape[0] != bits.shape[0] or images.shape[2:] != bits.shape[1:]:
        raise ValueError(f"batch shape {images.shape} does not match masks {bits.shape}")
    return images * ~bits[:, None, :, :]
