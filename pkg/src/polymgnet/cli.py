"""Command-line entry point.

Exit codes: 0 success, 1 a verification failed, 2 bad usage or input.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import spectral
from .config import SMOKE, ConfigError, RunConfig, config_from_mapping, parse_config
from .data import DatasetUnavailable, ChecksumError, load_dataset, synthetic_dataset
from .network import FAMILIES, build_model, count_weights, level_kernel
from .train import emit_tradeoff_report, evaluate, load_checkpoint, read_records, run_experiment

__all__ = ["main", "dispatch", "UsageError"]

log = logging.getLogger("polymgnet")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _load_config(args) -> RunConfig:
    if args.config is None:
        run = config_from_mapping({})
    else:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file {path} not found")
        run = parse_config(path)
    overrides_arch = {k: v for k, v in (("family", getattr(args, "family", None)),
                                        ("channel_scale", getattr(args, "scale", None))) if v is not None}
    overrides_train = {k: v for k, v in (("epochs", getattr(args, "epochs", None)),
                                         ("seeds", getattr(args, "seeds", None))) if v is not None}
    if overrides_arch or overrides_train or getattr(args, "smoke", False):
        data = run.to_dict()
        if "family" in overrides_arch:
            # a different family brings its own channel, block and placement defaults
            data["arch"] = {"channel_scale": data["arch"]["channel_scale"]}
        if getattr(args, "smoke", False):
            data["mode"]["smoke"] = True
            data["arch"]["channel_scale"] = SMOKE["channel_scale"]
            data["train"].update({k: SMOKE[k] for k in ("epochs", "train_subset", "test_subset")})
        data["arch"].update(overrides_arch)
        data["train"].update(overrides_train)
        run = config_from_mapping(data, run.source)
    return run


def _dataset(run: RunConfig):
    if run.io.dataset == "synthetic":
        return synthetic_dataset()
    return load_dataset(run.io.data_root, download=run.io.download)


def _parse_kernel_ref(ref: str) -> tuple[np.ndarray, str]:
    """``path.pt:level1`` / ``path.pt:1`` (1-based level) or a ``.npy`` array."""
    if ref.endswith(".npy"):
        return np.load(ref), Path(ref).stem
    if ":" not in ref:
        raise UsageError(f"kernel reference {ref!r} must look like <checkpoint>:level<k> or <file>.npy")
    path, level = ref.rsplit(":", 1)
    level = level.removeprefix("level")
    if not level.isdigit() or int(level) < 1:
        raise UsageError(f"bad level {level!r} in {ref!r}; levels are numbered from 1")
    if not Path(path).is_file():
        raise UsageError(f"checkpoint {path} not found")
    model, _ = load_checkpoint(path)
    try:
        return level_kernel(model, int(level) - 1), f"{Path(path).name}:level{level}"
    except (IndexError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def cmd_train(args) -> int:
    run = _load_config(args)
    out = Path(args.out or run.io.checkpoint_dir)
    record = run_experiment(run.arch, run.train, _dataset(run), out_dir=out, config_digest=run.digest,
                            deterministic=run.mode.deterministic)
    for r in record.runs:
        print(f"seed {r.seed}: {r.status} test={r.test_accuracy} train={r.train_accuracy}")
    print(f"mean test {record.mean_test} std {record.std_test}  digest {record.digest}"
          f"{'  (partial)' if record.partial else ''}")
    print(f"record appended to {out / 'records.jsonl'}")
    return 0


def cmd_eval(args) -> int:
    if not Path(args.checkpoint).is_file():
        raise UsageError(f"checkpoint {args.checkpoint} not found")
    run = _load_config(args)
    model, meta = load_checkpoint(args.checkpoint)
    ds = _dataset(run)
    split = ds.test if args.split == "test" else ds.train
    acc = evaluate(model, split, ds.mean, ds.std)
    print(f"{args.checkpoint} [{meta['arch']['family']}, epoch {meta['epoch']}, config {meta['config_digest']}]"
          f" {args.split} accuracy {acc:.2f}%")
    return 0


def cmd_spectrum(args) -> int:
    kernel, kid = _parse_kernel_ref(args.kernel)
    spec = spectral.estimate_spectrum(kernel, args.grid, kernel_id=kid)
    lam = spec.eigenvalues
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if out.suffix.lower() == ".csv":
        with open(out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["re", "im"])
            w.writerows(zip(lam.real.tolist(), lam.imag.tolist()))
    else:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(5, 5))
        ax.scatter(lam.real, lam.imag, s=4)
        if args.family:
            roots = _roots_for(spec, args.family)
            pts = np.array([complex(x) for x in _root_points(roots)])
            ax.scatter(pts.real, pts.imag, marker="x", c="r", s=50, label="initial roots")
            ax.legend()
        ax.set_xlabel("Re")
        ax.set_ylabel("Im")
        ax.set_title(f"{kid}, {args.grid}x{args.grid} grid")
        fig.tight_layout()
        fig.savefig(out, dpi=120)
        plt.close(fig)
    lo, hi = spec.real_range
    print(f"{lam.size} eigenvalues of {kid}: Re in [{lo:.4g}, {hi:.4g}], max|Im| {np.abs(lam.imag).max():.4g}"
          f" -> {out}")
    return 0


def _roots_for(spec, family: str):
    name = family.removeprefix("poly_")
    if len(name) < 2 or name[0] not in "qg" or not name[1:].isdigit():
        raise UsageError(f"family must look like q2, q4, g4, g6, g8 (got {family!r})")
    try:
        return spectral.select_initial_roots(spec, int(name[1:]), name[0])
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _root_points(roots):
    for kind, v in roots:
        if kind is spectral.RootKind.CONJUGATE_PAIR:
            yield v
            yield v.conjugate()
        elif kind is spectral.RootKind.REAL_SQUARED:
            yield v
            yield -v
        else:
            yield v


def cmd_roots(args) -> int:
    kernel, kid = _parse_kernel_ref(args.kernel)
    spec = spectral.estimate_spectrum(kernel, args.grid, kernel_id=kid)
    roots = _roots_for(spec, args.family)
    print(f"{args.family} roots for {kid} (degree {roots.degree}, grid {args.grid}):")
    for line in roots.describe():
        print("  " + line)
    _, q = spectral.eval_poly_on_spectrum(roots, spec)
    print(f"max |q| over the spectrum: {q.max():.4g}")
    return 0


def cmd_verify(args) -> int:
    from .verify import format_table, run_suite

    results = run_suite(seed=args.seed)
    print(format_table(results))
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


def cmd_describe(args) -> int:
    run = _load_config(args)
    model = build_model(run.arch, initialize=False)
    report = count_weights(model)
    print(f"{run.arch.family}  scale {run.arch.channel_scale:g}  placement {run.arch.placement.code() or 'none'}"
          f"  config {run.digest}")
    print(report.table())
    return 0


def cmd_report(args) -> int:
    paths = [Path(p) for p in args.records]
    for p in paths:
        if not p.is_file():
            raise UsageError(f"records file {p} not found")
    records = [r for p in paths for r in read_records(p)]
    if not records:
        raise UsageError("no records found")
    csv_path, png = emit_tradeoff_report(records, args.out, plot=not args.no_plot)
    print(f"{len(records)} records -> {csv_path}" + (f", {png}" if png else ""))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="polymgnet", description="Polynomial multigrid residual networks")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(sp, overrides=True):
        sp.add_argument("--config", help="TOML run configuration")
        if overrides:
            sp.add_argument("--family", choices=FAMILIES)
            sp.add_argument("--scale", type=float, help="channel scale factor")
            sp.add_argument("--smoke", action="store_true", help="20 epochs, quarter channels, data subset")

    sp = sub.add_parser("train", help="train one model per seed and append an experiment record")
    with_config(sp)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--seeds", type=int, nargs="+")
    sp.add_argument("--out", help="output directory (default: io.checkpoint_dir)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="accuracy of a checkpoint")
    sp.add_argument("checkpoint")
    sp.add_argument("--split", choices=("test", "train"), default="test")
    with_config(sp, overrides=False)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("spectrum", help="eigenvalues of a level's shared convolution")
    sp.add_argument("--kernel", required=True, help="<checkpoint>:level<k> or <kernel>.npy")
    sp.add_argument("--grid", type=int, default=spectral.DEFAULT_GRID)
    sp.add_argument("--out", required=True, help=".csv for (re, im) rows, otherwise an image file")
    sp.add_argument("--family", help="overlay initial roots of this family on the plot")
    sp.set_defaults(func=cmd_spectrum)

    sp = sub.add_parser("roots", help="spectral initial roots for a family")
    sp.add_argument("--family", required=True)
    sp.add_argument("--kernel", required=True)
    sp.add_argument("--grid", type=int, default=spectral.DEFAULT_GRID)
    sp.set_defaults(func=cmd_roots)

    sp = sub.add_parser("verify", help="dense-oracle verification table")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("describe", help="per-level weight table")
    with_config(sp)
    sp.set_defaults(func=cmd_describe)

    sp = sub.add_parser("report", help="accuracy/weight trade-off CSV and plot")
    sp.add_argument("records", nargs="+", help="records.jsonl files")
    sp.add_argument("--out", default="reports")
    sp.add_argument("--no-plot", action="store_true")
    sp.set_defaults(func=cmd_report)
    return p


def dispatch(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, DatasetUnavailable, ChecksumError, spectral.SpectrumError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main(argv: list[str] | None = None) -> None:
    sys.exit(dispatch(argv))


if __name__ == "__main__":
    main()
