"""The fixed two-conv CNN classifier, SGD training loop, and gradient checks.

Architecture: conv3x3(8) -> ReLU -> maxpool2 -> conv3x3(16) -> ReLU ->
global average pool -> dense(num_classes). The second ReLU output is the
feature map exposed for class-activation attribution.

The public API is channels-first: batches are (n, c, h, w). Internally
activations are NHWC (see autodiff module); conversion happens once per
forward call and is a pure reshape for single-channel inputs.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .seeding import derive_seed

CONV1_CHANNELS = 8
CONV2_CHANNELS = 16


class TrainingDivergedError(RuntimeError):
    """Training loss became non-finite."""

    def __init__(self, epoch: int):
        super().__init__(f"training diverged (non-finite loss) at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 8
    batch_size: int = 128
    learning_rate: float = 0.08
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_schedule: str = "constant"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")


def _to_nhwc(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1))


def _to_nchw(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2))


class Model:
    """Two-conv CNN classifier with He-uniform, seed-determined init."""

    def __init__(self, in_channels: int, num_classes: int, seed: int = 0):
        if in_channels < 1 or num_classes < 2:
            raise ValueError("need in_channels >= 1 and num_classes >= 2")
        self.in_channels = in_channels
        self.num_classes = num_classes
        self.seed = seed
        rng = np.random.default_rng(seed)

        def he_uniform(shape, fan_in):
            lim = math.sqrt(6.0 / fan_in)
            return rng.uniform(-lim, lim, size=shape)

        self.w1 = Tensor(he_uniform((CONV1_CHANNELS, in_channels, 3, 3), in_channels * 9), requires_grad=True)
        self.b1 = Tensor(np.zeros(CONV1_CHANNELS), requires_grad=True)
        self.w2 = Tensor(he_uniform((CONV2_CHANNELS, CONV1_CHANNELS, 3, 3), CONV1_CHANNELS * 9), requires_grad=True)
        self.b2 = Tensor(np.zeros(CONV2_CHANNELS), requires_grad=True)
        self.w3 = Tensor(he_uniform((CONV2_CHANNELS, num_classes), CONV2_CHANNELS), requires_grad=True)
        self.b3 = Tensor(np.zeros(num_classes), requires_grad=True)

    @property
    def params(self) -> list[Tensor]:
        return [self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]

    def num_params(self) -> int:
        return sum(p.data.size for p in self.params)

    def _check_input(self, x: np.ndarray) -> None:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ValueError(
                f"expected batch shape (n, {self.in_channels}, h, w), got {x.shape}"
            )
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise ValueError("spatial dims must be even for 2x2 pooling")

    def forward(self, x) -> Tensor:
        logits, _ = self.forward_with_features(x)
        return logits

    def forward_with_features(self, x) -> tuple[Tensor, Tensor]:
        """Forward pass returning (logits, post-ReLU conv2 features).

        Accepts an (n, c, h, w) array or an already-taped Tensor of that
        shape. Features come back as an NHWC Tensor (n, h/2, w/2, 16).
        """
        if isinstance(x, Tensor):
            self._check_input(x.data)
            xt = _transpose_op(x)
        else:
            x = np.asarray(x, dtype=np.float64)
            self._check_input(x)
            xt = Tensor(_to_nhwc(x))
        h1 = ad.relu(ad.conv3x3(xt, self.w1, self.b1))
        p1 = ad.maxpool2(h1)
        feats = ad.relu(ad.conv3x3(p1, self.w2, self.b2))
        pooled = ad.global_avg_pool(feats)
        logits = ad.dense(pooled, self.w3, self.b3)
        return logits, feats

    def decision_pattern(self, x: np.ndarray) -> tuple[np.ndarray, ...]:
        """ReLU sign masks and pool winners for a batch; used to detect kink crossings."""
        x = np.asarray(x, dtype=np.float64)
        self._check_input(x)
        xn = _to_nhwc(x)
        pre1 = _conv3x3_np(xn, self.w1.data, self.b1.data)
        a1 = np.maximum(pre1, 0.0)
        n, h, w, c = a1.shape
        windows = a1.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(
            n, h // 2, w // 2, c, 4)
        winners = windows.argmax(axis=-1)
        p1 = np.take_along_axis(windows, winners[..., None], axis=-1)[..., 0]
        pre2 = _conv3x3_np(p1, self.w2.data, self.b2.data)
        return (pre1 > 0, winners, pre2 > 0)

    def param_checksum(self) -> str:
        h = hashlib.blake2b(digest_size=16)
        for p in self.params:
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def zero_grads(self) -> None:
        for p in self.params:
            p.grad = None


def _transpose_op(x: Tensor) -> Tensor:
    """NCHW -> NHWC as a taped op so input gradients come back channels-first."""
    out = Tensor(_to_nhwc(x.data))
    if x.requires_grad:
        out.requires_grad = True
        out._parents = (x,)

        def backward_fn(g: np.ndarray) -> None:
            ad._accumulate(x, _to_nchw(g))

        out._backward_fn = backward_fn
    return out


def _conv3x3_np(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Plain numpy NHWC conv used by the kink detector (no tape)."""
    n, h, wd, c_in = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))
    col = np.ascontiguousarray(win).reshape(n * h * wd, c_in * 9)
    return (col @ w.reshape(w.shape[0], -1).T + b).reshape(n, h, wd, w.shape[0])


def forward(model: Model, batch) -> Tensor:
    """Logits for a batch; records the tape for a later backward pass."""
    return model.forward(batch)


def input_gradient(model: Model, x, y: int) -> np.ndarray:
    """Gradient of the class-y logit with respect to a single input sample.

    Accepts (c, h, w) or (1, c, h, w); returns the same shape. Model
    parameters keep their values; their accumulated grads are cleared.
    """
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    if x.shape[0] != 1:
        raise ValueError("input_gradient takes a single sample")
    if not 0 <= y < model.num_classes:
        raise ValueError(f"class index {y} out of range [0, {model.num_classes})")
    xt = Tensor(x, requires_grad=True)
    logits = model.forward(xt)
    ad.backward(ad.select_sum(logits, np.array([y])))
    g = xt.grad.copy()
    model.zero_grads()
    return g[0] if squeeze else g


def batch_input_gradients(model: Model, images: np.ndarray, labels: np.ndarray,
                          chunk: int = 256) -> np.ndarray:
    """Per-sample gradients of each sample's own target logit, batched."""
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    out = np.empty_like(images)
    for lo in range(0, images.shape[0], chunk):
        hi = min(lo + chunk, images.shape[0])
        xt = Tensor(images[lo:hi], requires_grad=True)
        logits = model.forward(xt)
        ad.backward(ad.select_sum(logits, labels[lo:hi]))
        out[lo:hi] = xt.grad
        model.zero_grads()
    return out


def predict(model: Model, images: np.ndarray, chunk: int = 512) -> np.ndarray:
    """Argmax class per sample; ties resolve to the lowest class index."""
    images = np.asarray(images, dtype=np.float64)
    preds = np.empty(images.shape[0], dtype=np.int64)
    for lo in range(0, images.shape[0], chunk):
        hi = min(lo + chunk, images.shape[0])
        logits = model.forward(Tensor(images[lo:hi]))
        preds[lo:hi] = logits.data.argmax(axis=1)
    return preds


def evaluate(model: Model, dataset) -> float:
    """Fraction of samples whose argmax logit equals the label."""
    if len(dataset.labels) == 0:
        raise ValueError("dataset is empty")
    return float((predict(model, dataset.images) == dataset.labels).mean())


def _epoch_lr(cfg: TrainConfig, epoch: int) -> float:
    if cfg.lr_schedule == "cosine":
        return cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * epoch / cfg.epochs))
    return cfg.learning_rate


def train(model: Model, dataset, cfg: TrainConfig) -> Model:
    """Train a fresh parameter set from scratch with SGD + momentum.

    The incoming model supplies only the architecture; initialization and
    shuffling are fully determined by cfg.seed, so identical inputs give
    bitwise-identical parameters. Raises TrainingDivergedError on a
    non-finite loss.
    """
    n = len(dataset.labels)
    if n == 0:
        raise ValueError("dataset is empty")
    labels = np.asarray(dataset.labels, dtype=np.int64)
    if labels.min() < 0 or labels.max() >= model.num_classes:
        raise ValueError("labels out of range for the model's class count")

    trained = Model(model.in_channels, model.num_classes, seed=derive_seed(cfg.seed, "init"))
    shuffle_rng = np.random.default_rng(derive_seed(cfg.seed, "shuffle"))
    images = np.asarray(dataset.images, dtype=np.float64)
    velocity = [np.zeros_like(p.data) for p in trained.params]

    for epoch in range(cfg.epochs):
        lr = _epoch_lr(cfg, epoch)
        perm = shuffle_rng.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            idx = perm[lo:lo + cfg.batch_size]
            logits = trained.forward(Tensor(images[idx]))
            loss = ad.cross_entropy(logits, labels[idx])
            if not np.isfinite(loss.data):
                raise TrainingDivergedError(epoch)
            ad.backward(loss)
            for p, v in zip(trained.params, velocity):
                v *= cfg.momentum
                v += p.grad + cfg.weight_decay * p.data
                p.data -= lr * v
            trained.zero_grads()
    return trained


@dataclass(frozen=True)
class GradientCheckReport:
    max_rel_error: float
    tol: float
    passed: bool
    n_checked: int
    n_excluded: int


def gradient_check(model: Model, x, tol: float, *, label: int = 0, h: float = 1e-3,
                   max_coords: int | None = None, seed: int = 0) -> GradientCheckReport:
    """Compare autodiff gradients against central finite differences.

    The checked scalar is the class-``label`` logit, which is piecewise
    linear in every coordinate, so away from ReLU/pool kinks the central
    difference is exact up to rounding. Coordinates whose +-h evaluations
    land on different linearity pieces are excluded, not failed.
    """
    if tol <= 0:
        raise ValueError("tol must be > 0")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]

    xt = Tensor(x.copy(), requires_grad=True)
    logits = model.forward(xt)
    ad.backward(ad.select_sum(logits, np.array([label])))
    targets = [(xt.data, xt.grad)] + [(p.data, p.grad) for p in model.params]
    model.zero_grads()

    coords = [(ti, flat) for ti, (arr, _) in enumerate(targets) for flat in range(arr.size)]
    if max_coords is not None and max_coords < len(coords):
        pick = np.random.default_rng(seed).choice(len(coords), size=max_coords, replace=False)
        coords = [coords[i] for i in sorted(pick)]

    def eval_logit(batch: np.ndarray) -> tuple[float, tuple]:
        value = model.forward(Tensor(batch)).data[0, label]
        pattern = model.decision_pattern(batch)
        return float(value), pattern

    max_err = 0.0
    n_excluded = 0
    for ti, flat in coords:
        arr, grad = targets[ti]
        view = arr.reshape(-1)
        orig = view[flat]
        view[flat] = orig + h
        f_plus, pat_plus = eval_logit(xt.data)
        view[flat] = orig - h
        f_minus, pat_minus = eval_logit(xt.data)
        view[flat] = orig
        if any(not np.array_equal(a, b) for a, b in zip(pat_plus, pat_minus)):
            n_excluded += 1
            continue
        g_fd = (f_plus - f_minus) / (2 * h)
        g_ad = grad.reshape(-1)[flat]
        denom = max(abs(g_fd), abs(g_ad))
        err = abs(g_ad - g_fd) if denom < 1e-8 else abs(g_ad - g_fd) / denom
        max_err = max(float(max_err), float(err))

    return GradientCheckReport(
        max_rel_error=max_err,
        tol=tol,
        passed=max_err <= tol,
        n_checked=len(coords) - n_excluded,
        n_excluded=n_excluded,
    )
