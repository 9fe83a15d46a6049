"""Remove-and-retrain (ROAR) and remove-and-debias (ROAD) protocol runners.

One trial trains a base classifier, attributes every split at the
predicted class once per method, post-processes the maps, thresholds them
at each drop rate, and then either retrains from a fresh seed on the
masked data (ROAR) or imputes the masked test pixels and re-evaluates the
untouched base model (ROAD). Per-cell RNG streams are derived from
(seed, method, postproc, rate, trial), so adding methods or reordering
work never perturbs existing cells.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .attribution import EstimatorConfig, batch_raw_maps, resolve_token
from .datasets import Dataset, SynthSpec, generate
from .masking import apply_mask_batch, top_t_bits_batch, total_variation_batch
from .network import Model, TrainConfig, TrainingDivergedError, evaluate, predict, train
from .postproc import PostprocSpec, apply_batch, upsample_nearest_batch
from .seeding import derive_seed


class JacobiConvergenceError(RuntimeError):
    def __init__(self, iterations: int, residual: float):
        super().__init__(
            f"linear imputation did not reach residual 1e-06 in {iterations} iterations "
            f"(residual {residual:.3e})"
        )
        self.iterations = iterations
        self.residual = residual


@dataclass(frozen=True)
class ProtocolConfig:
    methods: tuple[str, ...] = ("grad2",)
    postprocs: tuple[str, ...] = ("plain",)
    drop_rates: tuple[float, ...] = (0.1, 0.3, 0.5)
    trials: int = 5
    mode: str = "roar"
    road_noise_std: float = 0.01
    seed: int = 0
    ig_steps: int = 25
    ensemble_n: int = 15
    sg_noise_frac: float = 0.15

    def __post_init__(self):
        for t in self.drop_rates:
            if not 0 < t < 1:
                raise ValueError(f"drop rates must lie in (0, 1), got {t}")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.mode not in ("roar", "road"):
            raise ValueError(f"mode must be roar or road, got {self.mode!r}")
        for token in self.methods:
            resolve_token(token)
        for pp in self.postprocs:
            PostprocSpec(kind=pp)


@dataclass(frozen=True)
class RunRecord:
    dataset: str
    method: str
    postproc: str
    drop_rate: float
    trial: int
    accuracy: float
    mask_tv: float
    mode: str
    seed: int
    wall_time: float = 0.0
    failed: bool = False

    def key(self) -> tuple:
        return (self.method, self.postproc, self.drop_rate, self.trial)


@dataclass(frozen=True)
class CellStats:
    mean_accuracy: float
    std_accuracy: float
    mean_tv: float
    count: int


def aggregate(records) -> dict[tuple[str, str, float], CellStats]:
    """Trial mean/std per (method, postproc, drop_rate); order-invariant.

    Failed cells are excluded; a single trial reports std 0 with count 1.
    """
    groups: dict[tuple, list[RunRecord]] = {}
    for r in records:
        if r.failed:
            continue
        groups.setdefault((r.method, r.postproc, r.drop_rate), []).append(r)
    out = {}
    for key, rows in groups.items():
        accs = np.array([r.accuracy for r in rows])
        tvs = np.array([r.mask_tv for r in rows])
        std = float(accs.std(ddof=1)) if len(rows) > 1 else 0.0
        out[key] = CellStats(float(accs.mean()), std, float(tvs.mean()), len(rows))
    return out


def _processed_maps(model: Model, images: np.ndarray, token: str,
                    est_cfg: EstimatorConfig, pp: PostprocSpec,
                    id_offset: int, drop_rates) -> np.ndarray:
    """Attribute at the predicted class, square per token, reduce channels,
    post-process, and (for feature-map attributions) upsample last."""
    labels = predict(model, images)
    raw = batch_raw_maps(model, images.astype(np.float64), labels, token, est_cfg,
                         sample_ids=range(id_offset, id_offset + images.shape[0]),
                         drop_rates=tuple(drop_rates))
    if resolve_token(token).square_after:
        raw = raw * raw
    maps = raw.sum(axis=1) if raw.ndim == 4 else raw
    maps = apply_batch(pp, maps)
    if maps.shape[1:] != images.shape[2:]:
        maps = upsample_nearest_batch(maps, images.shape[2], images.shape[3])
    return maps


def _reduced_raw_maps(model: Model, images: np.ndarray, token: str,
                      est_cfg: EstimatorConfig, id_offset: int, drop_rates) -> np.ndarray:
    labels = predict(model, images)
    raw = batch_raw_maps(model, images.astype(np.float64), labels, token, est_cfg,
                         sample_ids=range(id_offset, id_offset + images.shape[0]),
                         drop_rates=tuple(drop_rates))
    if resolve_token(token).square_after:
        raw = raw * raw
    return raw.sum(axis=1) if raw.ndim == 4 else raw


@dataclass(frozen=True)
class _CellJob:
    dataset: str
    method: str
    postproc: str
    drop_rate: float
    trial: int
    master_seed: int
    train_images: np.ndarray
    train_labels: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray
    num_classes: int
    in_channels: int
    train_cfg: TrainConfig
    mask_tv: float


def _run_roar_cell(job: _CellJob) -> RunRecord:
    start = time.perf_counter()
    cell_seed = derive_seed(job.master_seed, job.method, job.postproc,
                            job.drop_rate, job.trial)
    d_train = Dataset(job.train_images, job.train_labels, job.num_classes)
    d_test = Dataset(job.test_images, job.test_labels, job.num_classes)
    arch = Model(job.in_channels, job.num_classes, seed=0)
    cfg = replace(job.train_cfg, seed=cell_seed)
    try:
        retrained = train(arch, d_train, cfg)
        accuracy = evaluate(retrained, d_test)
        failed = False
    except TrainingDivergedError:
        accuracy = float("nan")
        failed = True
    return RunRecord(
        dataset=job.dataset, method=job.method, postproc=job.postproc,
        drop_rate=job.drop_rate, trial=job.trial, accuracy=accuracy,
        mask_tv=job.mask_tv, mode="roar", seed=job.master_seed,
        wall_time=time.perf_counter() - start, failed=failed,
    )


class _Checkpoint:
    """Append-only CSV of finished cells so interrupted sweeps resume."""

    def __init__(self, path):
        from . import report

        self.path = path
        self.done: dict[tuple, RunRecord] = {}
        if path is not None and os.path.exists(path):
            for r in report.read_csv(path):
                self.done[r.key()] = r
        elif path is not None:
            with open(path, "w", newline="\n") as f:
                from .report import CSV_HEADER

                f.write(CSV_HEADER + "\n")

    def record(self, r: RunRecord) -> None:
        if self.path is None:
            return
        from .report import _fmt

        with open(self.path, "a", newline="\n") as f:
            f.write(",".join([
                r.dataset, r.method, r.postproc, _fmt(r.drop_rate), str(r.trial),
                _fmt(r.accuracy), _fmt(r.mask_tv), r.mode, str(r.seed),
            ]) + "\n")


def roar_run(protocol: ProtocolConfig, data_spec: SynthSpec, train_cfg: TrainConfig,
             jobs: int = 1, checkpoint_path=None, progress=None) -> list[RunRecord]:
    """Full remove-and-retrain sweep; returns one record per
    (method, postproc, drop_rate, trial), sorted by that key.

    Lower retrained accuracy means the protocol scores the attribution as
    better. Per trial the base model is trained once and every method's
    attribution is computed once, then reused across post-processings and
    drop rates. Retraining always starts from a fresh seed-derived
    initialization of the same architecture, never from the base weights.
    """
    if protocol.mode != "roar":
        raise ValueError("protocol mode must be 'roar'")
    train_ds, test_ds, _ = generate(data_spec)
    checkpoint = _Checkpoint(checkpoint_path)
    records = list(checkpoint.done.values())

    def run_wave(pool, wave):
        results = pool.map(_run_roar_cell, wave, chunksize=1) if pool else map(_run_roar_cell, wave)
        for rec in results:
            checkpoint.record(rec)
            records.append(rec)
            if progress:
                progress(rec)

    pool = ProcessPoolExecutor(max_workers=jobs) if jobs > 1 else None
    try:
        # One wave of cells per trial keeps at most one trial's masked
        # copies of the data in memory at a time.
        for trial in range(protocol.trials):
            trial_keys = [
                (m, pp, t, trial)
                for m in protocol.methods for pp in protocol.postprocs
                for t in protocol.drop_rates
            ]
            if all(key in checkpoint.done for key in trial_keys):
                continue
            base_cfg = replace(train_cfg, seed=derive_seed(protocol.seed, "base", trial))
            base = train(Model(train_ds.images.shape[1], train_ds.num_classes, 0),
                         train_ds, base_cfg)
            est = EstimatorConfig(ig_steps=protocol.ig_steps, ensemble_n=protocol.ensemble_n,
                                  sg_noise_frac=protocol.sg_noise_frac,
                                  seed=derive_seed(protocol.seed, "est", trial))
            wave: list[_CellJob] = []
            for method in protocol.methods:
                raw_tr = _reduced_raw_maps(base, train_ds.images, method, est, 0,
                                           protocol.drop_rates)
                raw_te = _reduced_raw_maps(base, test_ds.images, method, est,
                                           len(train_ds), protocol.drop_rates)
                for pp_name in protocol.postprocs:
                    pp = PostprocSpec(kind=pp_name)
                    maps_tr = apply_batch(pp, raw_tr)
                    maps_te = apply_batch(pp, raw_te)
                    if maps_tr.shape[1:] != train_ds.images.shape[2:]:
                        h, w = train_ds.images.shape[2:]
                        maps_tr = upsample_nearest_batch(maps_tr, h, w)
                        maps_te = upsample_nearest_batch(maps_te, h, w)
                    for t in protocol.drop_rates:
                        if (method, pp_name, t, trial) in checkpoint.done:
                            continue
                        bits_tr = top_t_bits_batch(maps_tr, t)
                        bits_te = top_t_bits_batch(maps_te, t)
                        wave.append(_CellJob(
                            dataset=data_spec.kind, method=method, postproc=pp_name,
                            drop_rate=t, trial=trial, master_seed=protocol.seed,
                            train_images=apply_mask_batch(train_ds.images, bits_tr),
                            train_labels=train_ds.labels,
                            test_images=apply_mask_batch(test_ds.images, bits_te),
                            test_labels=test_ds.labels,
                            num_classes=train_ds.num_classes,
                            in_channels=train_ds.images.shape[1],
                            train_cfg=train_cfg,
                            mask_tv=float(total_variation_batch(bits_tr).mean()),
                        ))
            run_wave(pool, wave)
    finally:
        if pool:
            pool.shutdown()
    return sorted(records, key=lambda r: r.key())


def noisy_linear_impute(images: np.ndarray, bits: np.ndarray, noise_std: float,
                        rng: np.random.Generator, tol: float = 1e-6,
                        max_iter: int | None = None) -> np.ndarray:
    """Fill masked pixels by solving the discrete Laplace equation.

    Each masked pixel converges to the mean of its in-grid 4-neighbors with
    unmasked pixels as boundary values (Jacobi iteration, max-update
    residual below tol), then i.i.d. Gaussian noise of the given std is
    added to the imputed pixels. An empty mask returns the input unchanged.
    """
    images = np.asarray(images, dtype=np.float64)
    bits = np.asarray(bits, dtype=bool)
    n, c, h, w = images.shape
    if bits.shape != (n, h, w):
        raise ValueError(f"mask stack {bits.shape} does not match images {images.shape}")
    if not bits.any():
        return images.copy()
    if max_iter is None:
        max_iter = 10 * h * w

    unknown = np.repeat(bits[:, None], c, axis=1)
    known_mean = np.array([
        img[:, ~b].mean() if (~b).any() else 0.5 for img, b in zip(images, bits)
    ])
    u = np.where(unknown, known_mean[:, None, None, None], images)

    deg = np.zeros((h, w))
    deg[1:, :] += 1
    deg[:-1, :] += 1
    deg[:, 1:] += 1
    deg[:, :-1] += 1

    residual = np.inf
    for _ in range(max_iter):
        s = np.zeros_like(u)
        s[:, :, 1:, :] += u[:, :, :-1, :]
        s[:, :, :-1, :] += u[:, :, 1:, :]
        s[:, :, :, 1:] += u[:, :, :, :-1]
        s[:, :, :, :-1] += u[:, :, :, 1:]
        new = s / deg
        residual = float(np.abs(new[unknown] - u[unknown]).max())
        u[unknown] = new[unknown]
        if residual < tol:
            break
    else:
        raise JacobiConvergenceError(max_iter, residual)

    if noise_std > 0:
        u[unknown] += noise_std * rng.standard_normal(int(unknown.sum()))
    return u


def road_run(protocol: ProtocolConfig, data_spec: SynthSpec, train_cfg: TrainConfig,
             checkpoint_path=None, progress=None) -> list[RunRecord]:
    """Retrain-free sweep: masked test pixels are imputed (noisy linear
    imputation, most-relevant-first removal) and the *original* trained
    model is evaluated. Base parameters are checksummed before and after
    every trial; any mutation is a bug."""
    if protocol.mode != "road":
        raise ValueError("protocol mode must be 'road'")
    train_ds, test_ds, _ = generate(data_spec)
    checkpoint = _Checkpoint(checkpoint_path)
    records = list(checkpoint.done.values())

    for trial in range(protocol.trials):
        trial_keys = [
            (m, pp, t, trial)
            for m in protocol.methods for pp in protocol.postprocs
            for t in protocol.drop_rates
        ]
        if all(key in checkpoint.done for key in trial_keys):
            continue
        base_cfg = replace(train_cfg, seed=derive_seed(protocol.seed, "base", trial))
        base = train(Model(train_ds.images.shape[1], train_ds.num_classes, 0),
                     train_ds, base_cfg)
        checksum_before = base.param_checksum()
        est = EstimatorConfig(ig_steps=protocol.ig_steps, ensemble_n=protocol.ensemble_n,
                              sg_noise_frac=protocol.sg_noise_frac,
                              seed=derive_seed(protocol.seed, "est", trial))
        for method in protocol.methods:
            raw_te = _reduced_raw_maps(base, test_ds.images, method, est, len(train_ds),
                                       protocol.drop_rates)
            for pp_name in protocol.postprocs:
                pp = PostprocSpec(kind=pp_name)
                maps_te = apply_batch(pp, raw_te)
                if maps_te.shape[1:] != test_ds.images.shape[2:]:
                    h, w = test_ds.images.shape[2:]
                    maps_te = upsample_nearest_batch(maps_te, h, w)
                for t in protocol.drop_rates:
                    if (method, pp_name, t, trial) in checkpoint.done:
                        continue
                    start = time.perf_counter()
                    bits_te = top_t_bits_batch(maps_te, t)
                    rng = np.random.default_rng(derive_seed(
                        protocol.seed, method, pp_name, t, trial, "road_noise"))
                    imputed = noisy_linear_impute(
                        test_ds.images, bits_te, protocol.road_noise_std, rng)
                    masked_test = Dataset(np.clip(imputed, 0.0, 1.0).astype(np.float32),
                                          test_ds.labels, test_ds.num_classes)
                    rec = RunRecord(
                        dataset=data_spec.kind, method=method, postproc=pp_name,
                        drop_rate=t, trial=trial,
                        accuracy=evaluate(base, masked_test),
                        mask_tv=float(total_variation_batch(bits_te).mean()),
                        mode="road", seed=protocol.seed,
                        wall_time=time.perf_counter() - start,
                    )
                    checkpoint.record(rec)
                    records.append(rec)
                    if progress:
                        progress(rec)
        if base.param_checksum() != checksum_before:
            raise RuntimeError("base model parameters changed during a road trial")
    return sorted(records, key=lambda r: r.key())
