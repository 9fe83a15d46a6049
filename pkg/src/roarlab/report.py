"""Regression analysis, CSV/PGM emission, and run-table parsing."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

CSV_HEADER = "dataset,method,postproc,drop_rate,trial,accuracy,mask_tv,mode,seed"


@dataclass(frozen=True)
class RegressionResult:
    slope: float
    intercept: float
    r_squared: float
    n_points: int


def linear_fit(points) -> RegressionResult:
    """Ordinary least squares of y on x for (x, y) pairs.

    Requires n >= 3 and non-degenerate x variance. A constant y gives
    r_squared = 0 by convention.
    """
    pts = [(float(x), float(y)) for x, y in points]
    if len(pts) < 3:
        raise ValueError(f"need at least 3 points, got {len(pts)}")
    x = np.array([p[0] for p in pts])
    y = np.array([p[1] for p in pts])
    sxx = ((x - x.mean()) ** 2).sum()
    if sxx <= 0 or not np.isfinite(sxx):
        raise ValueError("x values are all equal; slope is undefined")
    slope = float(((x - x.mean()) * (y - y.mean())).sum() / sxx)
    intercept = float(y.mean() - slope * x.mean())
    ss_tot = float(((y - y.mean()) ** 2).sum())
    ss_res = float(((y - (intercept + slope * x)) ** 2).sum())
    r_squared = 0.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    r_squared = min(max(r_squared, 0.0), 1.0)
    return RegressionResult(slope=slope, intercept=intercept,
                            r_squared=r_squared, n_points=len(pts))


def _fmt(value: float) -> str:
    return f"{value:.6f}"


def write_csv(records, path) -> None:
    """One fixed-format row per run record; 6-decimal reals, LF endings.

    Failed cells carry accuracy nan. Output bytes depend only on the
    records, so equal runs give byte-identical files.
    """
    with open(path, "w", newline="\n") as f:
        f.write(CSV_HEADER + "\n")
        for r in records:
            f.write(",".join([
                r.dataset, r.method, r.postproc, _fmt(r.drop_rate), str(r.trial),
                _fmt(r.accuracy), _fmt(r.mask_tv), r.mode, str(r.seed),
            ]) + "\n")


def read_csv(path):
    """Parse a run table written by write_csv back into RunRecord rows."""
    from .pipeline import RunRecord

    records = []
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != CSV_HEADER.split(","):
            raise ValueError(f"unexpected CSV header in {path}: {reader.fieldnames}")
        for row in reader:
            acc = float(row["accuracy"])
            records.append(RunRecord(
                dataset=row["dataset"], method=row["method"], postproc=row["postproc"],
                drop_rate=float(row["drop_rate"]), trial=int(row["trial"]),
                accuracy=acc, mask_tv=float(row["mask_tv"]), mode=row["mode"],
                seed=int(row["seed"]), failed=math.isnan(acc),
            ))
    return records


def write_pgm(map_or_mask, path) -> None:
    """Binary (P5) graymap, min-max scaled to 0..255.

    A constant map maps to the midpoint 128. The scale used is recorded in
    a comment line so values remain recoverable.
    """
    values = getattr(map_or_mask, "values", None)
    if values is None:
        values = getattr(map_or_mask, "bits", map_or_mask)
    a = np.asarray(values, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"PGM dump needs a 2-d array, got shape {a.shape}")
    lo, hi = float(a.min()), float(a.max())
    if hi > lo:
        scaled = np.rint((a - lo) / (hi - lo) * 255.0).astype(np.uint8)
    else:
        scaled = np.full(a.shape, 128, dtype=np.uint8)
    h, w = a.shape
    with open(path, "wb") as f:
        f.write(b"P5\n")
        f.write(f"# scale {lo:.9g} {hi:.9g}\n".encode())
        f.write(f"{w} {h}\n255\n".encode())
        f.write(scaled.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read back a P5 graymap written by write_pgm (for round-trip checks)."""
    with open(path, "rb") as f:
        blob = f.read()
    parts = blob.split(b"\n", 4)
    if parts[0] != b"P5":
        raise ValueError(f"not a binary PGM: {parts[0]!r}")
    idx = 1
    while parts[idx].startswith(b"#"):
        idx += 1
    w, h = (int(v) for v in parts[idx].split())
    maxval = int(parts[idx + 1])
    data = b"\n".join(parts[idx + 2:])
    if maxval != 255:
        raise ValueError(f"unsupported maxval {maxval}")
    return np.frombuffer(data[:h * w], dtype=np.uint8).reshape(h, w)


def tv_accuracy_fits(records, postproc: str = "plain") -> dict[float, RegressionResult]:
    """Per-drop-rate OLS of mean accuracy on mean mask TV across methods.

    One point per attribution method (trial means), restricted to one
    post-processing (the headline fit uses unprocessed maps).
    """
    from .pipeline import aggregate

    stats = aggregate(records)
    rates = sorted({key[2] for key in stats})
    fits = {}
    for t in rates:
        points = []
        for (method, pp, tt), cell in sorted(stats.items()):
            if pp == postproc and tt == t:
                points.append((cell.mean_tv, cell.mean_accuracy))
        if len(points) >= 3:
            fits[t] = linear_fit(points)
    return fits


def format_aggregate_table(records) -> str:
    """Human-readable mean/std table grouped by (method, postproc, rate)."""
    from .pipeline import aggregate

    stats = aggregate(records)
    lines = [f"{'method':<14} {'postproc':<9} {'rate':>5} {'acc_mean':>9} "
             f"{'acc_std':>8} {'tv_mean':>8} {'n':>3}"]
    for (method, pp, t), cell in sorted(stats.items()):
        lines.append(
            f"{method:<14} {pp:<9} {t:>5.2f} {cell.mean_accuracy:>9.4f} "
            f"{cell.std_accuracy:>8.4f} {cell.mean_tv:>8.4f} {cell.count:>3d}"
        )
    return "\n".join(lines)
