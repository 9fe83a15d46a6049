"""Model/data-agnostic attribution post-processing.

The transforms here see only the attribution values: a 2-d map goes in, a
2-d map comes out, with no access to the input image, the classifier, or
the estimator that produced the map. Channel reduction and nearest
upsampling (for feature-map-resolution attributions) also live here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .attribution import AttributionMap

POSTPROC_KINDS = ("plain", "gaussian", "maxpool")


@dataclass(frozen=True)
class PostprocSpec:
    kind: str = "plain"
    sigma: float = 1.0
    kernel: int = 3
    truncate: float = 4.0

    def __post_init__(self):
        if self.kind not in POSTPROC_KINDS:
            raise ValueError(f"unknown post-processing {self.kind!r}; known: {POSTPROC_KINDS}")
        if self.kind == "gaussian" and self.sigma <= 0:
            raise ValueError("gaussian sigma must be > 0")
        if self.kind == "maxpool" and (self.kernel < 3 or self.kernel % 2 == 0):
            raise ValueError("maxpool kernel must be odd and >= 3")


def gaussian_kernel_1d(sigma: float, truncate: float = 4.0) -> np.ndarray:
    """Sampled, normalized Gaussian taps with radius ceil(truncate * sigma)."""
    radius = math.ceil(truncate * sigma)
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (xs / sigma) ** 2)
    return k / k.sum()


def _filter_axis(stack: np.ndarray, taps: np.ndarray, axis: int) -> np.ndarray:
    radius = (len(taps) - 1) // 2
    pad = [(0, 0)] * stack.ndim
    pad[axis] = (radius, radius)
    padded = np.pad(stack, pad, mode="symmetric")
    out = np.zeros_like(stack)
    length = stack.shape[axis]
    sl = [slice(None)] * stack.ndim
    for i, tap in enumerate(taps):
        sl[axis] = slice(i, i + length)
        out += tap * padded[tuple(sl)]
    return out


def gaussian_filter_batch(maps: np.ndarray, sigma: float, truncate: float = 4.0) -> np.ndarray:
    """Separable Gaussian blur with reflected (edge-repeating) boundaries
    on a stack of (n, h, w) maps."""
    taps = gaussian_kernel_1d(sigma, truncate)
    return _filter_axis(_filter_axis(maps, taps, axis=-2), taps, axis=-1)


def max_filter_batch(maps: np.ndarray, kernel: int) -> np.ndarray:
    """Sliding-window maximum (stride 1, resolution preserving), reflected
    boundaries, on a stack of (n, h, w) maps."""
    radius = kernel // 2

    def one_axis(stack, axis):
        pad = [(0, 0)] * stack.ndim
        pad[axis] = (radius, radius)
        padded = np.pad(stack, pad, mode="symmetric")
        out = None
        length = stack.shape[axis]
        sl = [slice(None)] * stack.ndim
        for i in range(kernel):
            sl[axis] = slice(i, i + length)
            window = padded[tuple(sl)]
            out = window.copy() if out is None else np.maximum(out, window)
        return out

    return one_axis(one_axis(maps, -2), -1)


def apply_batch(spec: PostprocSpec, maps: np.ndarray) -> np.ndarray:
    """Post-process a stack of (n, h, w) maps; depends on the values alone."""
    maps = np.asarray(maps, dtype=np.float64)
    if spec.kind == "plain":
        return maps.copy()
    if spec.kind == "gaussian":
        return gaussian_filter_batch(maps, spec.sigma, spec.truncate)
    return max_filter_batch(maps, spec.kernel)


def apply(spec: PostprocSpec, a) -> AttributionMap | np.ndarray:
    """Post-process one 2-d attribution map (AttributionMap or bare array)."""
    values = a.values if isinstance(a, AttributionMap) else np.asarray(a, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError(
            f"post-processing expects a 2-d map, got shape {values.shape}; reduce channels first"
        )
    out = apply_batch(spec, values[None])[0]
    if isinstance(a, AttributionMap):
        meta = dict(a.meta)
        meta["postproc"] = spec.kind
        return AttributionMap(out, method=a.method, squared=a.squared,
                              sample_id=a.sample_id, seed=a.seed, meta=meta)
    return out


def reduce_channels(a) -> AttributionMap | np.ndarray:
    """Per-pixel sum over channels: (c, h, w) -> (h, w). 2-d maps pass through."""
    values = a.values if isinstance(a, AttributionMap) else np.asarray(a, dtype=np.float64)
    if values.ndim == 3:
        out = values.sum(axis=0)
    elif values.ndim == 2:
        out = values.copy()
    else:
        raise ValueError(f"expected (c, h, w) or (h, w) map, got shape {values.shape}")
    if isinstance(a, AttributionMap):
        return AttributionMap(out, method=a.method, squared=a.squared,
                              sample_id=a.sample_id, seed=a.seed, meta=dict(a.meta))
    return out


def upsample_nearest_batch(maps: np.ndarray, height: int, width: int) -> np.ndarray:
    """Nearest-neighbor upsampling of (n, h, w) maps: src row = floor(i*h/height)."""
    n, h, w = maps.shape
    if height < h or width < w:
        raise ValueError(f"target {height}x{width} smaller than source {h}x{w}")
    rows = (np.arange(height) * h) // height
    cols = (np.arange(width) * w) // width
    return maps[:, rows][:, :, cols]


def upsample_nearest(a, height: int, width: int) -> AttributionMap | np.ndarray:
    values = a.values if isinstance(a, AttributionMap) else np.asarray(a, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError(f"upsampling expects a 2-d map, got shape {values.shape}")
    out = upsample_nearest_batch(values[None], height, width)[0]
    if isinstance(a, AttributionMap):
        return AttributionMap(out, method=a.method, squared=a.squared,
                              sample_id=a.sample_id, seed=a.seed, meta=dict(a.meta))
    return out
