"""``specquant`` command line: the full pipeline as subcommands.

Exit codes: 0 success, 1 configuration error, 2 numerical failure.  Errors go
to stderr as ``ERROR[<code>]: message``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .decomposition import explained_variance, fit_pca
from .errors import ConfigurationError, SpecquantError
from .evaluation import (
    ModelSpec,
    export_plot_data,
    fit_model,
    kfold_evaluate,
    load_result,
    out_of_range_study,
    sweep_pc_count,
    sweep_snr,
    sweep_training_size,
)
from .library import load_library, synthesize_library
from .model_io import load_model, save_model
from .quantifiers import estimate_system_noise
from .spectral import WavelengthGrid, write_spectra_csv
from .synth import (
    DEFAULT_PATH_LENGTH_CM,
    ConcentrationScheme,
    NoiseSpec,
    generate_dataset,
    load_dataset,
    save_dataset,
)

log = logging.getLogger("specquant")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigurationError(f"{self.prog}: {message}")


def _int_list(text: str) -> list[int]:
    """``"1-20"`` or ``"10,20,50"`` (ranges and lists may be mixed)."""
    out = []
    try:
        for part in text.split(","):
            if "-" in part:
                lo, hi = part.split("-")
                out.extend(range(int(lo), int(hi) + 1))
            elif part:
                out.append(int(part))
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer list: {text!r}") from None
    return out


def _default_threads() -> int:
    env = os.environ.get("SPECQUANT_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigurationError(f"SPECQUANT_THREADS={env!r} is not an integer") from None
    return os.cpu_count() or 1


# --------------------------------------------------------------------------
# shared option groups


def _add_common(p: argparse.ArgumentParser, seed: bool = True) -> None:
    if seed:
        p.add_argument("--seed", type=int, default=0, help="seed for every random draw (default 0)")
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads (default: $SPECQUANT_THREADS, else all cores)")
    p.add_argument("--log-level", default="WARNING",
                   choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="logging verbosity")


def _add_model_options(p: argparse.ArgumentParser, kinds: Sequence[str]) -> None:
    p.add_argument("--model", required=True, choices=list(kinds), help="quantifier to use")
    p.add_argument("--components", type=int, default=None,
                   help="PCs for lr/direct (default K) or latent variables for plsr (default 20)")
    p.add_argument("--flavor", choices=["fpca", "pca"], default="fpca",
                   help="functional (trapezoid-weighted) or plain PCA")
    p.add_argument("--uncentered", action="store_true", help="lr/direct: do not subtract the mean spectrum")
    p.add_argument("--retain", type=int, default=1, help="direct: leading Lambda entries kept per gas")
    p.add_argument("--b-mode", choices=["known", "learn"], default="learn",
                   help="tf: take the path length from the dataset or learn it")
    p.add_argument("--noise-mode", choices=["zero", "learn"], default="learn",
                   help="tf: assume zero noise projections or learn them")
    p.add_argument("--no-recalibrate", action="store_true",
                   help="tf: skip the per-gas gain/shift recalibration")
    p.add_argument("--library", help="library directory (required for tf)")


def _spec_from(args, kind: Optional[str] = None) -> ModelSpec:
    kind = kind or args.model
    return ModelSpec(
        kind=kind,
        n_components=args.components,
        flavor="functional" if args.flavor == "fpca" else "plain",
        centered=not args.uncentered,
        retain=args.retain if kind == "direct" else None,
        known_b=args.b_mode == "known",
        tf_noise=args.noise_mode,
        recalibrate=not args.no_recalibrate,
        external_path=getattr(args, "predictions", None) if kind == "external" else None,
    )


def _library(args, required: bool):
    if getattr(args, "library", None):
        return load_library(args.library)
    if required:
        raise ConfigurationError("--library is required for this model")
    return None


def _needs_library(kinds) -> bool:
    return any(k == "tf" for k in kinds)


def _write_config(args, target: Path, resolved: dict) -> Path:
    """Resolved-config JSON next to the outputs (``config.json`` in a directory)."""
    cfg = {k: v for k, v in vars(args).items() if k != "func"}
    cfg.update(resolved)
    cfg["specquant_version"] = __version__
    path = target / "config.json" if target.is_dir() else target.with_name(target.name + ".config.json")
    path.write_text(json.dumps(cfg, indent=2, sort_keys=True, default=str) + "\n")
    return path


def _out_dir(path: str) -> Path:
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    return d


# --------------------------------------------------------------------------
# subcommands


def cmd_gen_library(args) -> dict:
    grid = WavelengthGrid.uniform(args.start, args.stop, args.points)
    lib = synthesize_library(args.seed, grid)
    out = _out_dir(args.out)
    lib.export(out)
    return {"out_dir": out, "fingerprint": lib.fingerprint}


def cmd_gen_dataset(args) -> dict:
    lib = load_library(args.library)
    scheme = ConcentrationScheme.group(args.group, args.group3_high)
    noise = None if args.snr_db is None else NoiseSpec(args.snr_db)
    ds = generate_dataset(lib, scheme, args.n, args.path_length, noise, args.seed, args.threads)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out)
    return {"out_file": out, "library_fingerprint": lib.fingerprint}


def cmd_fit_pca(args) -> dict:
    ds = load_dataset(args.dataset)
    basis = fit_pca(ds.absorbances, ds.grid, args.flavor, not args.uncentered, args.components)
    out = _out_dir(args.out)
    basis.export(out)
    iev, cev = explained_variance(basis)
    with open(out / "explained_variance.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["component", "iev", "cev"])
        for i, (a, b) in enumerate(zip(iev, cev)):
            w.writerow([i + 1, format(a, ".17g"), format(b, ".17g")])
    return {"out_dir": out, "basis_fingerprint": basis.fingerprint}


def cmd_fit(args) -> dict:
    ds = load_dataset(args.dataset)
    spec = _spec_from(args)
    lib = _library(args, spec.kind == "tf")
    model = fit_model(spec, ds, lib)
    out = _out_dir(args.out)
    save_model(model, out)
    return {"out_dir": out, "model_fingerprint": model.fingerprint}


def _write_predictions(path: Path, names, pred: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(names))
        for row in pred:
            w.writerow([format(float(x), ".17g") for x in row])


def cmd_predict(args) -> dict:
    model = load_model(args.model_dir)
    ds = load_dataset(args.dataset)
    if tuple(model.gas_names) != ds.gas_names:
        raise ConfigurationError("model and dataset describe different gases")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _write_predictions(out, ds.gas_names, model.predict(ds))
    return {"out_file": out}


def cmd_evaluate(args) -> dict:
    ds = load_dataset(args.dataset)
    spec = _spec_from(args)
    lib = _library(args, spec.kind == "tf")
    report = kfold_evaluate(spec, ds, args.folds, args.seed, lib, args.threads)
    out = _out_dir(args.out)
    export_plot_data(report, out)
    if report.predictions is not None:
        _write_predictions(out / "predictions.csv", ds.gas_names, report.predictions)
    return {"out_dir": out, "mean_rmse": report.mean_rmse}


def _model_specs(args) -> list[ModelSpec]:
    kinds = [k for k in args.models.split(",") if k]
    return [_spec_from(args, k) for k in kinds]


def cmd_sweep(args) -> dict:
    out = _out_dir(args.out)
    if args.kind == "pcs":
        ds = load_dataset(args.dataset[0])
        result = sweep_pc_count(ds, args.l_range, args.folds, args.seed,
                                "functional" if args.flavor == "fpca" else "plain",
                                not args.uncentered, args.threads)
    elif args.kind == "snr":
        datasets = [load_dataset(p) for p in args.dataset]
        specs = _model_specs(args)
        lib = _library(args, _needs_library(s.kind for s in specs))
        result = sweep_snr(datasets, specs, args.folds, args.seed, lib, args.threads)
    else:
        ds = load_dataset(args.dataset[0])
        specs = _model_specs(args)
        lib = _library(args, _needs_library(s.kind for s in specs))
        seeds = [args.seed + i for i in range(args.repeats)]
        result = sweep_training_size(ds, specs, args.sizes, args.test_fraction, seeds, lib,
                                     args.threads)
    export_plot_data(result, out)
    return {"out_dir": out}


def cmd_out_of_range(args) -> dict:
    train = load_dataset(args.train)
    test = load_dataset(args.test)
    specs = _model_specs(args)
    lib = _library(args, _needs_library(s.kind for s in specs))
    study = out_of_range_study(train, test, specs, args.bins, args.folds, args.seed, lib,
                               args.threads)
    out = _out_dir(args.out)
    export_plot_data(study, out)
    flagged = study.empty_bins()
    (out / "empty_bins.json").write_text(json.dumps(
        [dict(zip(("model", "gas", "bin", "population"), f)) for f in flagged], indent=2) + "\n")
    return {"out_dir": out, "empty_bins": len(flagged)}


def cmd_noise_estimate(args) -> dict:
    model = load_model(args.model_dir)
    if model.kind != "tf":
        raise ConfigurationError("noise estimation needs a tf model")
    ds = load_dataset(args.dataset)
    noise = estimate_system_noise(model, ds)
    out = _out_dir(args.out)
    write_spectra_csv(out / "noise_mean.csv", ds.grid, {
        "mean": noise.noise_spectra.mean(axis=0), "std": noise.noise_spectra.std(axis=0)})
    power = np.einsum("ij,ij->i", noise.noise_spectra, noise.noise_spectra)
    with open(out / "noise_power.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample", "power"])
        for i, p in enumerate(power):
            w.writerow([i, format(float(p), ".17g")])
    (out / "noise.json").write_text(json.dumps({"mean_power": noise.mean_power, "n": ds.n},
                                               indent=2) + "\n")
    return {"out_dir": out, "mean_power": noise.mean_power}


def cmd_export(args) -> dict:
    result = load_result(args.result)
    out = _out_dir(args.out)
    export_plot_data(result, out)
    return {"out_dir": out}


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="specquant", allow_abbrev=False,
                     description="Synthesize absorption spectra, decompose them and quantify gases.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_, description=help_, allow_abbrev=False)
        p.set_defaults(func=func)
        return p

    p = add("gen-library", cmd_gen_library, "synthesize a gas extinction library")
    _add_common(p)
    p.add_argument("--points", type=int, default=1000, help="wavelength samples (default 1000)")
    p.add_argument("--start", type=float, default=2.5, help="first wavelength in µm (default 2.5)")
    p.add_argument("--stop", type=float, default=14.0, help="last wavelength in µm (default 14)")
    p.add_argument("--out", required=True, help="output directory")

    p = add("gen-dataset", cmd_gen_dataset, "generate a labelled spectra dataset")
    _add_common(p)
    p.add_argument("--library", required=True, help="library directory")
    p.add_argument("--group", type=int, choices=[1, 2, 3], default=1, help="concentration group")
    p.add_argument("--group3-high", type=float, default=1e-3,
                   help="upper concentration bound of group 3 in M (default 1e-3)")
    p.add_argument("--n", type=int, default=10000, help="number of samples")
    p.add_argument("--snr-db", type=float, default=None, help="RIN SNR in dB (omit for noiseless)")
    p.add_argument("--path-length", type=float, default=DEFAULT_PATH_LENGTH_CM,
                   help=f"optical path length b in cm (default {DEFAULT_PATH_LENGTH_CM:g})")
    p.add_argument("--out", required=True, help="output dataset file")

    p = add("fit-pca", cmd_fit_pca, "fit a principal component basis")
    _add_common(p, seed=False)
    p.add_argument("--dataset", required=True, help="dataset file")
    p.add_argument("--flavor", choices=["fpca", "pca"], default="fpca", help="PCA flavor")
    p.add_argument("--components", type=int, default=None, help="components kept (default all)")
    p.add_argument("--uncentered", action="store_true", help="do not subtract the mean spectrum")
    p.add_argument("--out", required=True, help="output directory")

    p = add("fit", cmd_fit, "train a quantifier on a dataset")
    _add_common(p, seed=False)
    _add_model_options(p, ["lr", "direct", "tf", "plsr"])
    p.add_argument("--dataset", required=True, help="training or calibration dataset")
    p.add_argument("--out", required=True, help="output model directory")

    p = add("predict", cmd_predict, "predict concentrations with a saved model")
    _add_common(p, seed=False)
    p.add_argument("--model-dir", required=True, help="saved model directory")
    p.add_argument("--dataset", required=True, help="dataset file")
    p.add_argument("--out", required=True, help="output predictions CSV")

    p = add("evaluate", cmd_evaluate, "k-fold evaluation of a model")
    _add_common(p)
    _add_model_options(p, ["lr", "direct", "tf", "plsr", "mean", "external"])
    p.add_argument("--dataset", required=True, help="dataset file")
    p.add_argument("--predictions", help="external: CSV of predictions aligned with dataset rows")
    p.add_argument("--folds", type=int, default=10, help="number of folds (default 10)")
    p.add_argument("--out", required=True, help="output directory")

    p = add("sweep", cmd_sweep, "PC-count, SNR or training-size sweep")
    p.add_argument("kind", choices=["pcs", "snr", "train-size"], help="sweep type")
    _add_common(p)
    p.add_argument("--dataset", required=True, action="append",
                   help="dataset file (repeat for the snr sweep)")
    p.add_argument("--models", default="lr", help="comma-separated model kinds (snr, train-size)")
    p.add_argument("--components", type=int, default=None, help="as for fit")
    p.add_argument("--flavor", choices=["fpca", "pca"], default="fpca", help="PCA flavor")
    p.add_argument("--uncentered", action="store_true", help="do not subtract the mean spectrum")
    p.add_argument("--retain", type=int, default=1, help="direct: leading entries kept")
    p.add_argument("--b-mode", choices=["known", "learn"], default="learn", help="tf path length")
    p.add_argument("--noise-mode", choices=["zero", "learn"], default="learn", help="tf noise")
    p.add_argument("--no-recalibrate", action="store_true", help="tf: skip gain recalibration")
    p.add_argument("--library", help="library directory (required for tf)")
    p.add_argument("--l-range", type=_int_list, default=list(range(1, 21)),
                   help="pcs: component counts, e.g. 1-20 (default 1-20)")
    p.add_argument("--sizes", type=_int_list, default=[10, 20, 50, 100, 200, 500, 1000],
                   help="train-size: training sizes, e.g. 10,20,50")
    p.add_argument("--test-fraction", type=float, default=0.1, help="train-size: held-out fraction")
    p.add_argument("--repeats", type=int, default=1,
                   help="train-size: number of split seeds (seed, seed+1, ...)")
    p.add_argument("--folds", type=int, default=10, help="folds for pcs/snr (default 10)")
    p.add_argument("--out", required=True, help="output directory")

    p = add("out-of-range", cmd_out_of_range, "train on group 2, test on the wider group 3")
    _add_common(p)
    p.add_argument("--train", required=True, help="group-2 dataset")
    p.add_argument("--test", required=True, help="group-3 dataset")
    p.add_argument("--models", default="tf", help="comma-separated model kinds (default tf)")
    p.add_argument("--components", type=int, default=None, help="as for fit")
    p.add_argument("--flavor", choices=["fpca", "pca"], default="fpca", help="PCA flavor")
    p.add_argument("--uncentered", action="store_true", help="do not subtract the mean spectrum")
    p.add_argument("--retain", type=int, default=1, help="direct: leading entries kept")
    p.add_argument("--b-mode", choices=["known", "learn"], default="learn", help="tf path length")
    p.add_argument("--noise-mode", choices=["zero", "learn"], default="learn", help="tf noise")
    p.add_argument("--no-recalibrate", action="store_true", help="tf: skip gain recalibration")
    p.add_argument("--library", help="library directory (required for tf)")
    p.add_argument("--bins", type=int, default=20, help="log-spaced concentration bins")
    p.add_argument("--folds", type=int, default=10, help="number of folds (default 10)")
    p.add_argument("--out", required=True, help="output directory")

    p = add("noise-estimate", cmd_noise_estimate, "residual system noise of a tf model")
    _add_common(p, seed=False)
    p.add_argument("--model-dir", required=True, help="saved tf model directory")
    p.add_argument("--dataset", required=True, help="dataset file")
    p.add_argument("--out", required=True, help="output directory")

    p = add("export", cmd_export, "re-export plot data from a saved result.json")
    _add_common(p, seed=False)
    p.add_argument("--result", required=True, help="result.json from an earlier run")
    p.add_argument("--out", required=True, help="output directory")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
        if args.threads is None:
            args.threads = _default_threads()
        if args.threads < 1:
            raise ConfigurationError("--threads must be at least 1")
        # BLAS stays single-threaded; parallelism comes from our own job pool
        with threadpool_limits(limits=1):
            resolved = args.func(args)
        target = resolved.get("out_dir") or resolved.get("out_file")
        _write_config(args, Path(target), {k: v for k, v in resolved.items()
                                           if k not in ("out_dir", "out_file")})
        log.info("done: %s", target)
        return 0
    except SpecquantError as exc:
        print(f"ERROR[{exc.code}]: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"ERROR[io]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
