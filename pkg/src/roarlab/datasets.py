"""Deterministic synthetic image datasets and the RLAB binary container.

Three dataset families with known salient pixels:

* ``shapes``: one of C glyphs drawn at a random position over noise; the
  glyph pixels are the ground truth.
* ``block-signal``: the class value written redundantly into every pixel
  of one contiguous block at a random position.
* ``scatter-signal``: the same redundant value encoding, but spread over
  spatially scattered single pixels.

The RLAB container is a little-endian binary format: magic ``RLAB``, u32
fields (version=1, n, channels, height, width, num_classes), then per
sample channels*height*width float32 values followed by a u32 label.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .masking import Mask, mask_from_bits
from .seeding import derive_seed

RLAB_MAGIC = b"RLAB"
RLAB_VERSION = 1
_MAX_DIM = 1 << 16
_MAX_ELEMENTS = 1 << 31


class RlabFormatError(ValueError):
    """Raised on malformed RLAB files; the message names the bad offset or field."""


_GLYPH_ART = {
    "plus": [
        "..###..",
        "..###..",
        "#######",
        "#######",
        "#######",
        "..###..",
        "..###..",
    ],
    "box": [
        "#######",
        "#######",
        "##...##",
        "##...##",
        "##...##",
        "#######",
        "#######",
    ],
    "tee": [
        "#######",
        "#######",
        "..###..",
        "..###..",
        "..###..",
        "..###..",
        "..###..",
    ],
    "diag": [
        "##....#",
        "###..##",
        ".###.#.",
        "..###..",
        ".#.###.",
        "##..###",
        "#....##",
    ],
    "bars": [
        "#######",
        "#######",
        ".......",
        "#######",
        ".......",
        "#######",
        "#######",
    ],
    "diamond": [
        "...#...",
        "..###..",
        ".##.##.",
        "###.###",
        ".##.##.",
        "..###..",
        "...#...",
    ],
}

GLYPH_NAMES = tuple(_GLYPH_ART)

_GLYPH_PAD = 2
_GLYPH_SOFT_SIGMA = 1.1
_GLYPH_CUTOFF = 0.02


def _glyph_templates(height: int = 16, width: int = 16) -> list[np.ndarray]:
    """Soft glyph templates: padded stencils blurred to give every stroke a
    graded halo, so neighboring pixels carry redundant class information
    the way natural-image objects do. Peak value is 1; tails below the
    cutoff are zeroed so the support (= ground-truth mask) stays compact.
    The halo padding shrinks on grids too small for the full template.
    """
    from .postproc import gaussian_filter_batch

    stencil_side = len(next(iter(_GLYPH_ART.values())))
    pad = max(0, min(_GLYPH_PAD, (min(height, width) - stencil_side) // 2))
    out = []
    for name in GLYPH_NAMES:
        rows = _GLYPH_ART[name]
        stencil = np.array([[c == "#" for c in row] for row in rows], dtype=np.float64)
        soft = gaussian_filter_batch(np.pad(stencil, pad)[None], _GLYPH_SOFT_SIGMA)[0]
        soft /= soft.max()
        soft[soft < _GLYPH_CUTOFF] = 0.0
        out.append(soft)
    return out


@dataclass
class Dataset:
    """Immutable image classification dataset.

    images: (n, channels, h, w) float32 in [0, 1]; labels: (n,) int64.
    """

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = ""
    seed: int = 0

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (n, c, h, w), got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise ValueError("labels do not match image count")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels out of range")
        if len(self.labels) and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("pixel values must lie in [0, 1]")
        self.images.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self) -> int:
        return len(self.labels)

    def replace_images(self, images: np.ndarray, suffix: str) -> "Dataset":
        return Dataset(images, self.labels.copy(), self.num_classes,
                       name=f"{self.name}{suffix}", seed=self.seed)


@dataclass(frozen=True)
class SynthSpec:
    kind: str = "shapes"
    height: int = 16
    width: int = 16
    num_classes: int = 4
    n_train: int = 2000
    n_test: int = 500
    noise_std: float = 0.1
    seed: int = 0
    block_size: int = 4
    scatter_count: int = 16

    def __post_init__(self):
        if self.kind not in ("shapes", "block-signal", "scatter-signal"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if self.height < 8 or self.width < 8:
            raise ValueError("height and width must be >= 8")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.kind == "shapes" and self.num_classes > len(GLYPH_NAMES):
            raise ValueError(
                f"shapes supports at most {len(GLYPH_NAMES)} classes, got {self.num_classes}"
            )


def _render_split(spec: SynthSpec, n: int, rng: np.random.Generator,
                  templates) -> tuple[np.ndarray, np.ndarray, list[Mask]]:
    h, w, c = spec.height, spec.width, spec.num_classes
    images = np.zeros((n, 1, h, w), dtype=np.float64)
    labels = rng.integers(0, c, size=n)
    masks: list[Mask] = []
    for i in range(n):
        canvas = np.zeros((h, w))
        bits = np.zeros((h, w), dtype=bool)
        if spec.kind == "shapes":
            tpl = templates[labels[i]]
            gh, gw = tpl.shape
            top = rng.integers(0, h - gh + 1)
            left = rng.integers(0, w - gw + 1)
            canvas[top:top + gh, left:left + gw] = tpl
            bits[top:top + gh, left:left + gw] = tpl > 0
        else:
            value = (labels[i] + 1) / c
            if spec.kind == "block-signal":
                bs = spec.block_size
                top = rng.integers(0, h - bs + 1)
                left = rng.integers(0, w - bs + 1)
                canvas[top:top + bs, left:left + bs] = value
                bits[top:top + bs, left:left + bs] = True
            else:
                flat = rng.choice(h * w, size=spec.scatter_count, replace=False)
                canvas.reshape(-1)[flat] = value
                bits.reshape(-1)[flat] = True
        if spec.noise_std > 0:
            canvas += rng.normal(0.0, spec.noise_std, size=(h, w))
        images[i, 0] = np.clip(canvas, 0.0, 1.0)
        masks.append(mask_from_bits(bits, source_method="ground_truth"))
    return images.astype(np.float32), labels, masks


def generate(spec: SynthSpec) -> tuple[Dataset, Dataset, list[Mask]]:
    """Build (train, test, ground_truth_masks); masks are train-then-test order.

    Splits draw from independent RNG streams derived from spec.seed, so the
    two sets are disjoint with probability 1 whenever noise_std > 0.
    """
    templates = _glyph_templates(spec.height, spec.width)
    train_rng = np.random.default_rng(derive_seed(spec.seed, spec.kind, "train"))
    test_rng = np.random.default_rng(derive_seed(spec.seed, spec.kind, "test"))
    tr_img, tr_lab, tr_masks = _render_split(spec, spec.n_train, train_rng, templates)
    te_img, te_lab, te_masks = _render_split(spec, spec.n_test, test_rng, templates)
    if spec.noise_std > 0:
        train_hashes = {img.tobytes() for img in tr_img}
        overlap = sum(img.tobytes() in train_hashes for img in te_img)
        if overlap:
            raise AssertionError(f"{overlap} identical train/test images despite noise")
    train = Dataset(tr_img, tr_lab, spec.num_classes, name=f"{spec.kind}-train", seed=spec.seed)
    test = Dataset(te_img, te_lab, spec.num_classes, name=f"{spec.kind}-test", seed=spec.seed)
    return train, test, tr_masks + te_masks


def write_rlab(path, arrays: np.ndarray, labels: np.ndarray, num_classes: int) -> None:
    """Write float32 tensors + u32 labels in the RLAB container."""
    arrays = np.asarray(arrays, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.uint32)
    n, c, h, w = arrays.shape
    with open(path, "wb") as f:
        f.write(RLAB_MAGIC)
        f.write(struct.pack("<5I", RLAB_VERSION, n, c, h, w))
        f.write(struct.pack("<I", num_classes))
        for i in range(n):
            f.write(arrays[i].astype("<f4").tobytes())
            f.write(struct.pack("<I", labels[i]))


def read_rlab(path) -> tuple[np.ndarray, np.ndarray, int]:
    """Read an RLAB container back into (arrays, labels, num_classes)."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != RLAB_MAGIC:
        raise RlabFormatError(f"bad magic at offset 0: {blob[:4]!r}")
    if len(blob) < 28:
        raise RlabFormatError(f"truncated header: {len(blob)} bytes")
    version, n, c, h, w, num_classes = struct.unpack_from("<6I", blob, 4)
    if version != RLAB_VERSION:
        raise RlabFormatError(f"unsupported version {version}")
    for dim_name, dim in (("n", n), ("channels", c), ("height", h), ("width", w)):
        if dim > _MAX_DIM:
            raise RlabFormatError(f"dimension overflow: {dim_name}={dim}")
    if n * c * h * w > _MAX_ELEMENTS:
        raise RlabFormatError(f"dimension overflow: {n}x{c}x{h}x{w} elements")
    sample_bytes = c * h * w * 4 + 4
    expected = 28 + n * sample_bytes
    if len(blob) < expected:
        raise RlabFormatError(f"truncated file: have {len(blob)} bytes, need {expected}")
    arrays = np.empty((n, c, h, w), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    off = 28
    for i in range(n):
        arrays[i] = np.frombuffer(blob, dtype="<f4", count=c * h * w, offset=off).reshape(c, h, w)
        off += c * h * w * 4
        labels[i] = struct.unpack_from("<I", blob, off)[0]
        off += 4
    return arrays, labels, num_classes


def save(dataset: Dataset, path) -> None:
    write_rlab(path, dataset.images, dataset.labels, dataset.num_classes)


def load(path, name: str = "", seed: int = 0) -> Dataset:
    arrays, labels, num_classes = read_rlab(path)
    return Dataset(arrays, labels, num_classes, name=name or str(path), seed=seed)


def to_csv(dataset: Dataset, path) -> None:
    """Debug export: one row per sample, label then flattened pixels."""
    with open(path, "w", newline="\n") as f:
        for img, lab in zip(dataset.images, dataset.labels):
            f.write(",".join([str(int(lab))] + [f"{v:.6f}" for v in img.reshape(-1)]))
            f.write("\n")
