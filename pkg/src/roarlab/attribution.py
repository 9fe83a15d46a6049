"""Feature-importance estimators and the model-free random baselines.

Gradient-family estimators (input-gradient, gradient*input, integrated
gradients, the smoothed ensemble family, class-activation maps) plus the
model-independent Sobel-energy, per-pixel-random and rectangle-random
score maps. Each estimator is deterministic given (model, input, target,
config, seed); stochastic ones derive one RNG stream per sample so batch
composition never changes results.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .masking import drop_count
from .network import Model, batch_input_gradients, predict
from .seeding import rng_for


@dataclass(frozen=True)
class EstimatorConfig:
    ig_steps: int = 25
    ensemble_n: int = 15
    sg_noise_frac: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if self.ig_steps < 1:
            raise ValueError("ig_steps must be >= 1")
        if self.ensemble_n < 1:
            raise ValueError("ensemble_n must be >= 1")
        if self.sg_noise_frac < 0:
            raise ValueError("sg_noise_frac must be >= 0")


@dataclass
class AttributionMap:
    """Per-pixel importance scores with provenance.

    values is (c, h, w) for input-space methods or (h', w') for the
    feature-map method; squared maps are elementwise nonnegative.
    """

    values: np.ndarray
    method: str
    squared: bool = False
    sample_id: int = -1
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if not np.all(np.isfinite(self.values)):
            raise ValueError("attribution values must be finite")


def _target(model: Model, x: np.ndarray, y: int | None) -> int:
    if y is None:
        return int(predict(model, x[None])[0])
    if not 0 <= y < model.num_classes:
        raise ValueError(f"class index {y} out of range [0, {model.num_classes})")
    return int(y)


def _single(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3:
        raise ValueError(f"expected one (c, h, w) sample, got shape {x.shape}")
    return x


# ---------------------------------------------------------------------------
# gradient family


def grad(model: Model, x, y: int | None = None, sample_id: int = -1) -> AttributionMap:
    """Raw input gradient of the target logit."""
    x = _single(x)
    y = _target(model, x, y)
    g = batch_input_gradients(model, x[None], np.array([y]))[0]
    return AttributionMap(g, method="grad", sample_id=sample_id)


def grad_times_input(model: Model, x, y: int | None = None, sample_id: int = -1) -> AttributionMap:
    x = _single(x)
    y = _target(model, x, y)
    g = batch_input_gradients(model, x[None], np.array([y]))[0]
    return AttributionMap(g * x, method="grad_input", sample_id=sample_id)


def integrated_gradients(model: Model, x, y: int | None = None,
                         cfg: EstimatorConfig = EstimatorConfig(),
                         sample_id: int = -1) -> AttributionMap:
    """Path-integrated gradients from a zero baseline.

    Right-endpoint Riemann sum over scales j/k, j = 1..k: exact for linear
    models at any k, and satisfies the completeness identity as k grows.
    """
    x = _single(x)
    y = _target(model, x, y)
    g = batch_ig(model, x[None], np.array([y]), cfg)[0]
    return AttributionMap(g, method="intgrad", sample_id=sample_id, seed=cfg.seed)


def batch_ig(model: Model, images: np.ndarray, labels: np.ndarray,
             cfg: EstimatorConfig) -> np.ndarray:
    total = np.zeros(images.shape, dtype=np.float64)
    k = cfg.ig_steps
    for j in range(1, k + 1):
        total += batch_input_gradients(model, images * (j / k), labels)
    return total * images / k


def _noise_scales(images: np.ndarray, frac: float) -> np.ndarray:
    flat = images.reshape(images.shape[0], -1)
    return frac * (flat.max(axis=1) - flat.min(axis=1))


def _ensemble_moments(model: Model, images: np.ndarray, labels: np.ndarray,
                      cfg: EstimatorConfig, sample_ids) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Mean and mean-of-squares of gradients over noisy copies, plus sigma.

    Noise for sample i, copy j comes from stream (seed, "sg_noise", id_i)
    in copy order, so results do not depend on batching.
    """
    n = images.shape[0]
    sigma = _noise_scales(images, cfg.sg_noise_frac)
    rngs = [rng_for(cfg.seed, "sg_noise", int(sid)) for sid in sample_ids]
    g_sum = np.zeros(images.shape, dtype=np.float64)
    g_sqsum = np.zeros(images.shape, dtype=np.float64)
    for _ in range(cfg.ensemble_n):
        noisy = images.astype(np.float64).copy()
        for i in range(n):
            if sigma[i] > 0:
                noisy[i] += sigma[i] * rngs[i].standard_normal(images.shape[1:])
        g = batch_input_gradients(model, noisy, labels)
        g_sum += g
        g_sqsum += g * g
    return g_sum / cfg.ensemble_n, g_sqsum / cfg.ensemble_n, sigma


def batch_smoothgrad(model: Model, images: np.ndarray, labels: np.ndarray,
                     cfg: EstimatorConfig, sample_ids, kind: str) -> np.ndarray:
    """kind: "mean" (smoothed gradient), "mean_sq" (pre-squared), "var" (ensemble variance)."""
    if kind == "var" and cfg.ensemble_n < 2:
        raise ValueError("variance needs ensemble_n >= 2")
    if cfg.sg_noise_frac == 0 or np.all(_noise_scales(images, cfg.sg_noise_frac) == 0):
        # Zero noise: every copy is the clean gradient; degenerate closed forms.
        g = batch_input_gradients(model, images, labels)
        if kind == "mean":
            return g
        if kind == "mean_sq":
            return g * g
        return np.zeros_like(g)
    mean, mean_sq, _ = _ensemble_moments(model, images, labels, cfg, sample_ids)
    if kind == "mean":
        return mean
    if kind == "mean_sq":
        return mean_sq
    # Unbiased variance from moments: n/(n-1) * (E[g^2] - E[g]^2).
    nn = cfg.ensemble_n
    return np.maximum(mean_sq - mean * mean, 0.0) * (nn / (nn - 1))


def smoothgrad(model: Model, x, y: int | None = None,
               cfg: EstimatorConfig = EstimatorConfig(), sample_id: int = 0) -> AttributionMap:
    x = _single(x)
    y = _target(model, x, y)
    g = batch_smoothgrad(model, x[None], np.array([y]), cfg, [sample_id], "mean")[0]
    return AttributionMap(g, method="smoothgrad", sample_id=sample_id, seed=cfg.seed)


def smoothgrad_sq(model: Model, x, y: int | None = None,
                  cfg: EstimatorConfig = EstimatorConfig(), sample_id: int = 0) -> AttributionMap:
    x = _single(x)
    y = _target(model, x, y)
    g = batch_smoothgrad(model, x[None], np.array([y]), cfg, [sample_id], "mean_sq")[0]
    return AttributionMap(g, method="smoothgrad_sq", squared=True, sample_id=sample_id, seed=cfg.seed)


def vargrad(model: Model, x, y: int | None = None,
            cfg: EstimatorConfig = EstimatorConfig(), sample_id: int = 0) -> AttributionMap:
    if cfg.ensemble_n < 2:
        raise ValueError("vargrad needs ensemble_n >= 2")
    x = _single(x)
    y = _target(model, x, y)
    g = batch_smoothgrad(model, x[None], np.array([y]), cfg, [sample_id], "var")[0]
    return AttributionMap(g, method="vargrad", squared=True, sample_id=sample_id, seed=cfg.seed)


def gradcam(model: Model, x, y: int | None = None, sample_id: int = -1) -> AttributionMap:
    """Feature-map attribution at native conv resolution (not upsampled here)."""
    x = _single(x)
    y = _target(model, x, y)
    cam = batch_gradcam(model, x[None], np.array([y]))[0]
    return AttributionMap(cam, method="cam", sample_id=sample_id)


def batch_gradcam(model: Model, images: np.ndarray, labels: np.ndarray,
                  chunk: int = 256) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    n = images.shape[0]
    h2, w2 = images.shape[2] // 2, images.shape[3] // 2
    out = np.empty((n, h2, w2))
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        logits, feats = model.forward_with_features(images[lo:hi])
        ad.backward(ad.select_sum(logits, labels[lo:hi]))
        weights = feats.grad.mean(axis=(1, 2))                  # (b, k)
        cam = np.einsum("nk,nhwk->nhw", weights, feats.data)    # NHWC features
        out[lo:hi] = np.maximum(cam, 0.0)
        model.zero_grads()
    return out


# ---------------------------------------------------------------------------
# model-free baselines

_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_SOBEL_Y = _SOBEL_X.T


def batch_sobel(images: np.ndarray) -> np.ndarray:
    """Squared Sobel edge energy gx^2 + gy^2 on the channel-mean image."""
    gray = np.asarray(images, dtype=np.float64).mean(axis=1)
    padded = np.pad(gray, ((0, 0), (1, 1), (1, 1)), mode="symmetric")
    h, w = gray.shape[1], gray.shape[2]
    gx = np.zeros_like(gray)
    gy = np.zeros_like(gray)
    for di in range(3):
        for dj in range(3):
            patch = padded[:, di:di + h, dj:dj + w]
            if _SOBEL_X[di, dj]:
                gx += _SOBEL_X[di, dj] * patch
            if _SOBEL_Y[di, dj]:
                gy += _SOBEL_Y[di, dj] * patch
    return gx * gx + gy * gy


def sobel(x, sample_id: int = -1) -> AttributionMap:
    x = _single(x)
    return AttributionMap(batch_sobel(x[None])[0], method="sobel", squared=True,
                          sample_id=sample_id)


def pixel_random(shape: tuple[int, int], seed: int, sample_id: int = 0) -> AttributionMap:
    """I.i.d. uniform scores: top-t thresholding drops a uniform random t-fraction."""
    h, w = shape
    values = rng_for(seed, "pixel_random", int(sample_id)).random((h, w))
    return AttributionMap(values, method="pixel_random", sample_id=sample_id, seed=seed)


@lru_cache(maxsize=4096)
def _block_order(shape: tuple[int, int], rects: tuple[tuple[int, int, int, int], ...]) -> np.ndarray:
    """Rank array whose every prefix is 4-connected and whose prefix at each
    rect's area is exactly that rect. Regions are visited in sequence via FIFO
    BFS seeded from pixels adjacent to the already-ranked set."""
    h, w = shape
    order = np.full((h, w), -1, dtype=np.int64)
    visited = np.zeros((h, w), dtype=bool)
    rank = 0
    regions = list(rects) + [(0, 0, h, w)]
    for ri, (top, left, rh, rw) in enumerate(regions):
        region = np.zeros((h, w), dtype=bool)
        region[top:top + rh, left:left + rw] = True
        todo = region & ~visited
        if not todo.any():
            continue
        if rank == 0:
            seeds = [(top + rh // 2, left + rw // 2)]
        else:
            adj = np.zeros((h, w), dtype=bool)
            adj[1:, :] |= visited[:-1, :]
            adj[:-1, :] |= visited[1:, :]
            adj[:, 1:] |= visited[:, :-1]
            adj[:, :-1] |= visited[:, 1:]
            seeds = [tuple(p) for p in np.argwhere(todo & adj)]
        queue = list(seeds)
        queued = np.zeros((h, w), dtype=bool)
        for p in seeds:
            queued[p] = True
        qi = 0
        while qi < len(queue):
            i, j = queue[qi]
            qi += 1
            order[i, j] = rank
            visited[i, j] = True
            rank += 1
            for ni, nj in ((i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1)):
                if 0 <= ni < h and 0 <= nj < w and todo[ni, nj] and not queued[ni, nj]:
                    queued[ni, nj] = True
                    queue.append((ni, nj))
    return order


_ASPECT_LIMIT = 4.0


def _rect_dims(target: int, min_h: int, min_w: int, max_h: int, max_w: int) -> tuple[int, int]:
    """Feasible rectangle dims nearest in area to target.

    Candidates are limited to aspect ratios within _ASPECT_LIMIT (dropping
    the bound only if nothing qualifies), then ranked by area error, then
    squareness."""
    def search(limit):
        best = None
        for rh in range(min_h, max_h + 1):
            for rw in range(min_w, max_w + 1):
                aspect = max(rh, rw) / min(rh, rw)
                if limit is not None and aspect > limit:
                    continue
                key = (abs(rh * rw - target), aspect, rh)
                if best is None or key < best[0]:
                    best = (key, (rh, rw))
        return best

    best = search(_ASPECT_LIMIT) or search(None)
    return best[1]


def block_random(shape: tuple[int, int], seed: int, sample_id: int = 0,
                 drop_rates: tuple[float, ...] = (0.1, 0.3, 0.5)) -> AttributionMap:
    """Score map whose top-t set is one axis-aligned rectangle for each
    configured drop rate simultaneously (nested rectangles around a random
    center). When round(t*h*w) has no feasible factorization the nearest
    achievable area is used and recorded in the map metadata."""
    h, w = shape
    targets = sorted({drop_count(t, h * w) for t in drop_rates} - {0, h * w})
    dims: list[tuple[int, int]] = []
    min_h = min_w = 1
    for tgt in targets:
        rh, rw = _rect_dims(tgt, min_h, min_w, h, w)
        dims.append((rh, rw))
        min_h, min_w = rh, rw
    rng = rng_for(seed, "block_random", int(sample_id))
    if dims:
        big_h, big_w = dims[-1]
    else:
        big_h, big_w = 1, 1
    top = int(rng.integers(0, h - big_h + 1))
    left = int(rng.integers(0, w - big_w + 1))
    rects = tuple(
        (top + (big_h - rh) // 2, left + (big_w - rw) // 2, rh, rw) for rh, rw in dims
    )
    order = _block_order((h, w), rects)
    values = (h * w - order).astype(np.float64)
    achieved = {tgt: rh * rw for tgt, (rh, rw) in zip(targets, dims)}
    meta = {"rect_areas": achieved}
    if any(tgt != area for tgt, area in achieved.items()):
        meta["area_fallback"] = True
    return AttributionMap(values, method="block_random", sample_id=sample_id,
                          seed=seed, meta=meta)


def square(a: AttributionMap) -> AttributionMap:
    """Elementwise square; refused for already-squared maps and for the
    variance estimator (it is inherently a squaring method)."""
    if a.method == "vargrad":
        raise ValueError("squaring does not apply to the variance estimator")
    if a.squared:
        raise ValueError(f"map (method={a.method}) is already squared")
    return AttributionMap(a.values * a.values, method=a.method, squared=True,
                          sample_id=a.sample_id, seed=a.seed, meta=dict(a.meta))


# ---------------------------------------------------------------------------
# method tokens used by the protocol sweeps


@dataclass(frozen=True)
class MethodSpec:
    token: str
    family: str
    square_after: bool


METHODS: dict[str, MethodSpec] = {
    spec.token: spec
    for spec in (
        MethodSpec("grad", "grad", False),
        MethodSpec("grad2", "grad", True),
        MethodSpec("gi", "grad_input", False),
        MethodSpec("gi2", "grad_input", True),
        MethodSpec("ig", "intgrad", False),
        MethodSpec("ig2", "intgrad", True),
        MethodSpec("sg", "smoothgrad", False),
        MethodSpec("sg2", "smoothgrad", True),
        MethodSpec("sgsq", "smoothgrad_sq", False),
        MethodSpec("vg", "vargrad", False),
        MethodSpec("gc", "cam", False),
        MethodSpec("gc2", "cam", True),
        MethodSpec("sobel2", "sobel", False),
        MethodSpec("pixel_random", "pixel_random", False),
        MethodSpec("block_random", "block_random", False),
    )
}

METHOD_ALIASES = {"rand": "pixel_random"}


def resolve_token(token: str) -> MethodSpec:
    token = METHOD_ALIASES.get(token, token)
    if token not in METHODS:
        raise ValueError(f"unknown attribution method {token!r}; known: {sorted(METHODS)}")
    return METHODS[token]


def batch_raw_maps(model: Model, images: np.ndarray, labels: np.ndarray, token: str,
                   cfg: EstimatorConfig, sample_ids,
                   drop_rates: tuple[float, ...] = (0.1, 0.3, 0.5)) -> np.ndarray:
    """Stack of raw (pre-squaring) maps for a whole split.

    Input-space families give (n, c, h, w); the feature-map family gives
    (n, h/2, w/2); baselines give (n, h, w).
    """
    spec = resolve_token(token)
    fam = spec.family
    if fam == "grad":
        return batch_input_gradients(model, images, labels)
    if fam == "grad_input":
        g = batch_input_gradients(model, images, labels)
        return g * images
    if fam == "intgrad":
        return batch_ig(model, images, labels, cfg)
    if fam == "smoothgrad":
        return batch_smoothgrad(model, images, labels, cfg, sample_ids, "mean")
    if fam == "smoothgrad_sq":
        return batch_smoothgrad(model, images, labels, cfg, sample_ids, "mean_sq")
    if fam == "vargrad":
        return batch_smoothgrad(model, images, labels, cfg, sample_ids, "var")
    if fam == "cam":
        return batch_gradcam(model, images, labels)
    if fam == "sobel":
        return batch_sobel(images)
    shape = images.shape[2:]
    if fam == "pixel_random":
        return np.stack([pixel_random(shape, cfg.seed, sid).values for sid in sample_ids])
    if fam == "block_random":
        return np.stack([
            block_random(shape, cfg.seed, sid, drop_rates).values for sid in sample_ids
        ])
    raise AssertionError(f"unhandled family {fam}")
