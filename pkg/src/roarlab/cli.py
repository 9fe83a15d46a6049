"""Command-line driver for data generation, training, attribution dumps,
protocol sweeps, the discrete information-theory checks, and reporting.

Exit codes: 0 success, 1 usage error, 2 runtime failure. Option precedence
is flags > config file (plain key=value lines) > built-in defaults.
"""

from __future__ import annotations

import os

# Tiny matmuls thrash multi-threaded BLAS; pin before numpy loads.
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

import argparse
import sys
from dataclasses import replace
from pathlib import Path


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _load_config_file(path: str) -> dict[str, str]:
    values = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, value = line.partition("=")
            values[key.strip()] = value.strip()
    return values


def _merge_config(args: argparse.Namespace) -> argparse.Namespace:
    """Fill flag defaults from the config file; explicit flags win."""
    if not getattr(args, "config", None):
        return args
    file_values = _load_config_file(args.config)
    for key, raw in file_values.items():
        attr = key.replace("-", "_")
        if not hasattr(args, attr):
            continue
        if attr in args._explicit:
            continue
        current = getattr(args, attr)
        if isinstance(current, bool):
            setattr(args, attr, raw.lower() in ("1", "true", "yes"))
        elif isinstance(current, int):
            setattr(args, attr, int(raw))
        elif isinstance(current, float):
            setattr(args, attr, float(raw))
        else:
            setattr(args, attr, raw)
    return args


def _csv_list(text: str) -> list[str]:
    return [item for item in (part.strip() for part in text.split(",")) if item]


def _build_parser() -> _Parser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="plain-text key=value config file")
    common.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    common.add_argument("--out-dir", default=".", help="output directory (default .)")
    common.add_argument("--jobs", type=int, default=1,
                        help="parallel retraining cells (default 1)")
    common.add_argument("--drop-rates", default="0.1,0.3,0.5",
                        help="comma-separated drop rates (default 0.1,0.3,0.5)")
    common.add_argument("--methods", default="grad2",
                        help="comma-separated attribution methods (default grad2)")
    common.add_argument("--postprocs", default="plain",
                        help="comma-separated post-processings (default plain)")

    data_opts = argparse.ArgumentParser(add_help=False)
    data_opts.add_argument("--dataset", default="shapes",
                           choices=("shapes", "block-signal", "scatter-signal"))
    data_opts.add_argument("--size", type=int, default=16, help="image side (default 16)")
    data_opts.add_argument("--classes", type=int, default=4)
    data_opts.add_argument("--n-train", type=int, default=2000)
    data_opts.add_argument("--n-test", type=int, default=500)
    data_opts.add_argument("--noise-std", type=float, default=0.1)

    train_opts = argparse.ArgumentParser(add_help=False)
    train_opts.add_argument("--epochs", type=int, default=10)
    train_opts.add_argument("--batch-size", type=int, default=32)
    train_opts.add_argument("--learning-rate", type=float, default=0.15)
    train_opts.add_argument("--momentum", type=float, default=0.9)
    train_opts.add_argument("--weight-decay", type=float, default=1e-4)
    train_opts.add_argument("--lr-schedule", default="cosine",
                            choices=("constant", "cosine"))

    parser = _Parser(
        prog="roarlab",
        description="Desk-scale remove-and-retrain attribution benchmarking. "
                    "Option precedence: command-line flags > --config file "
                    "(key=value lines) > built-in defaults.")
    sub = parser.add_subparsers(dest="command")

    sub.add_parser("gen-data", parents=[common, data_opts],
                   help="generate a synthetic dataset pair and write RLAB files")
    sub.add_parser("train", parents=[common, data_opts, train_opts],
                   help="train the fixed CNN and report train/test accuracy")
    p_attr = sub.add_parser("attribute", parents=[common, data_opts, train_opts],
                            help="dump attribution maps as PGM images + RLAB tensors")
    p_attr.add_argument("--samples", type=int, default=8,
                        help="number of test samples to dump (default 8)")
    p_roar = sub.add_parser("roar", parents=[common, data_opts, train_opts],
                            help="run the remove-and-retrain sweep, write CSV")
    p_roar.add_argument("--trials", type=int, default=5)
    p_roar.add_argument("--checkpoint", help="per-cell resume file")
    p_road = sub.add_parser("road", parents=[common, data_opts, train_opts],
                            help="run the retrain-free imputation sweep, write CSV")
    p_road.add_argument("--trials", type=int, default=5)
    p_road.add_argument("--noise-std-road", type=float, default=0.01)
    p_road.add_argument("--checkpoint", help="per-cell resume file")
    p_mi = sub.add_parser("mi-check", parents=[common],
                          help="discrete-world information checks and witness search")
    p_mi.add_argument("--world", default="default",
                      help="'default' or path to a world file")
    p_mi.add_argument("--sweep", type=int, default=1000,
                      help="random (world, coarsening) pairs to verify (default 1000)")
    p_rep = sub.add_parser("report", parents=[common],
                           help="aggregate a run CSV and fit accuracy against mask TV")
    p_rep.add_argument("--csv", required=True, help="run table produced by roar/road")
    return parser


def _track_explicit(parser: _Parser, argv: list[str]) -> argparse.Namespace:
    args = parser.parse_args(argv)
    explicit = set()
    for token in argv:
        if token.startswith("--"):
            explicit.add(token[2:].split("=", 1)[0].replace("-", "_"))
    args._explicit = explicit
    return args


def _synth_spec(args):
    from .datasets import SynthSpec

    return SynthSpec(kind=args.dataset, height=args.size, width=args.size,
                     num_classes=args.classes, n_train=args.n_train,
                     n_test=args.n_test, noise_std=args.noise_std, seed=args.seed)


def _train_cfg(args):
    from .network import TrainConfig

    return TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                       learning_rate=args.learning_rate, momentum=args.momentum,
                       weight_decay=args.weight_decay, lr_schedule=args.lr_schedule,
                       seed=args.seed)


def _cmd_gen_data(args) -> int:
    from . import datasets

    spec = _synth_spec(args)
    train_ds, test_ds, _ = datasets.generate(spec)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_path = out / f"{spec.kind}-train.rlab"
    test_path = out / f"{spec.kind}-test.rlab"
    datasets.save(train_ds, train_path)
    datasets.save(test_ds, test_path)
    print(f"wrote {train_path} ({len(train_ds)} samples) and "
          f"{test_path} ({len(test_ds)} samples)")
    return 0


def _cmd_train(args) -> int:
    from . import datasets, network

    spec = _synth_spec(args)
    train_ds, test_ds, _ = datasets.generate(spec)
    model = network.Model(1, spec.num_classes, 0)
    trained = network.train(model, train_ds, _train_cfg(args))
    print(f"train accuracy: {network.evaluate(trained, train_ds):.4f}")
    print(f"test accuracy:  {network.evaluate(trained, test_ds):.4f}")
    return 0


def _cmd_attribute(args) -> int:
    import numpy as np

    from . import datasets, network, report
    from .attribution import EstimatorConfig, batch_raw_maps, resolve_token
    from .postproc import PostprocSpec, apply_batch, upsample_nearest_batch

    from .masking import apply_mask_batch, top_t_bits_batch

    spec = _synth_spec(args)
    train_ds, test_ds, _ = datasets.generate(spec)
    trained = network.train(network.Model(1, spec.num_classes, 0), train_ds,
                            _train_cfg(args))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    count = min(args.samples, len(test_ds))
    images = test_ds.images[:count]
    labels = network.predict(trained, images)
    est = EstimatorConfig(seed=args.seed)
    rates = tuple(float(t) for t in _csv_list(args.drop_rates))
    for i in range(count):
        report.write_pgm(images[i, 0], out / f"input-{i:03d}.pgm")
    for token in _csv_list(args.methods):
        raw = batch_raw_maps(trained, images.astype(np.float64), labels, token, est,
                             sample_ids=range(count), drop_rates=rates)
        if resolve_token(token).square_after:
            raw = raw * raw
        maps = raw.sum(axis=1) if raw.ndim == 4 else raw
        for pp_name in _csv_list(args.postprocs):
            processed = apply_batch(PostprocSpec(kind=pp_name), maps)
            if processed.shape[1:] != images.shape[2:]:
                processed = upsample_nearest_batch(processed, images.shape[2], images.shape[3])
            stem = f"attr-{token}-{pp_name}"
            datasets.write_rlab(out / f"{stem}.rlab", processed[:, None, :, :],
                                labels, spec.num_classes)
            bits = top_t_bits_batch(processed, rates[0])
            masked = apply_mask_batch(images, bits)
            for i in range(count):
                report.write_pgm(processed[i], out / f"{stem}-{i:03d}.pgm")
                report.write_pgm(bits[i], out / f"{stem}-{i:03d}-mask.pgm")
                report.write_pgm(masked[i, 0], out / f"{stem}-{i:03d}-masked.pgm")
        print(f"dumped {token}: {count} samples x {args.postprocs}")
    return 0


def _cmd_roar(args) -> int:
    from . import report
    from .pipeline import ProtocolConfig, aggregate, roar_run

    protocol = ProtocolConfig(
        methods=tuple(_csv_list(args.methods)),
        postprocs=tuple(_csv_list(args.postprocs)),
        drop_rates=tuple(float(t) for t in _csv_list(args.drop_rates)),
        trials=args.trials, mode="roar", seed=args.seed,
    )
    records = roar_run(protocol, _synth_spec(args), _train_cfg(args),
                       jobs=args.jobs, checkpoint_path=args.checkpoint)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"roar-{args.dataset}-seed{args.seed}.csv"
    report.write_csv(records, csv_path)
    print(report.format_aggregate_table(records))
    print(f"\nwrote {csv_path} ({len(records)} rows)")
    return 0


def _cmd_road(args) -> int:
    from . import report
    from .pipeline import ProtocolConfig, road_run

    protocol = ProtocolConfig(
        methods=tuple(_csv_list(args.methods)),
        postprocs=tuple(_csv_list(args.postprocs)),
        drop_rates=tuple(float(t) for t in _csv_list(args.drop_rates)),
        trials=args.trials, mode="road", seed=args.seed,
        road_noise_std=args.noise_std_road,
    )
    records = road_run(protocol, _synth_spec(args), _train_cfg(args),
                       checkpoint_path=args.checkpoint)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / f"road-{args.dataset}-seed{args.seed}.csv"
    report.write_csv(records, csv_path)
    print(report.format_aggregate_table(records))
    print(f"\nwrote {csv_path} ({len(records)} rows)")
    return 0


def _cmd_mi_check(args) -> int:
    import numpy as np

    from . import infotheory as it

    world = it.default_world() if args.world == "default" else it.load_world(args.world)
    print(f"world: {world.name} ({world.num_pixels} pixels, "
          f"{world.num_classes} classes, {len(world.p_e)} explainers, drop {world.drop})")

    rng = np.random.default_rng(args.seed)
    violations = 0
    for _ in range(args.sweep):
        rand_world = it.random_world(rng)
        k = it.random_coarsening(rand_world, rng)
        if not it.dpi_check(rand_world, k).holds:
            violations += 1
    print(f"processing-inequality sweep: {args.sweep} random (world, coarsening) "
          f"pairs, {violations} violations")

    result = it.conjecture_search(world)
    if result.witness is None:
        status = "exhausted" if result.exhausted else "budget exceeded (partial search)"
        print(f"witness search: none found after {result.maps_checked} maps ({status})")
        print(f"  masked-input information {result.mi_raw:.6f} bits, "
              f"best accuracy {result.bayes_raw:.6f}")
    else:
        w = result.witness
        print("witness search: FOUND a coarsening that improves the removal score")
        print(f"  masked-input information: raw {w.mi_raw:.6f} -> coarsened "
              f"{w.mi_coarse:.6f} bits")
        print(f"  best attainable accuracy: raw {w.bayes_raw:.6f} -> coarsened "
              f"{w.bayes_coarse:.6f}")
        print(f"  explainer information (given input): raw {w.dpi.lhs:.6f} >= "
              f"coarsened {w.dpi.rhs:.6f} (inequality holds: {w.dpi.holds})")
        for src, dst in w.k.mapping.items():
            print(f"    ranking {src} -> {dst}")
    if violations:
        raise RuntimeError(f"{violations} processing-inequality violations")
    return 0


def _cmd_report(args) -> int:
    from . import report

    records = report.read_csv(args.csv)
    print(report.format_aggregate_table(records))
    fits = report.tv_accuracy_fits(records, postproc="plain")
    if fits:
        print("\naccuracy vs mask-TV regression (plain maps, one point per method):")
        for t, fit in sorted(fits.items()):
            print(f"  rate {t:.2f}: slope {fit.slope:+.4f}  intercept {fit.intercept:.4f}  "
                  f"R^2 {fit.r_squared:.4f}  ({fit.n_points} methods)")
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "attribute": _cmd_attribute,
    "roar": _cmd_roar,
    "road": _cmd_road,
    "mi-check": _cmd_mi_check,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = _build_parser()
    try:
        args = _track_explicit(parser, argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return 1
        args = _merge_config(args)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except Exception as exc:  # runtime failures -> exit 2 with a message
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
