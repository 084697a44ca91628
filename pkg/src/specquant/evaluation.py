"""Experiment protocols: k-fold evaluation, sweeps, the out-of-range study and
tidy plot-data export."""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .decomposition import fit_pca, project
from .errors import (
    ConditioningError,
    ConfigurationError,
    FingerprintMismatchError,
    SchemaError,
    UnderdeterminedError,
)
from .library import GasLibrary
from .quantifiers import fit_lr, fit_plsr, fit_tf, sparsify_to_direct, _lstsq_with_intercept
from .spectral import array_fingerprint
from .synth import MICROMOLAR, SpectraDataset

_TINY = 1e-300


# --------------------------------------------------------------------------
# model specifications


@dataclass(frozen=True)
class ModelSpec:
    """What to train inside each fold.

    ``kind`` is one of ``lr``, ``direct``, ``tf``, ``plsr``, ``mean``,
    ``truth`` (oracle returning the true concentrations) or ``external``
    (predictions read from a CSV aligned with the dataset rows).
    """

    kind: str
    n_components: Optional[int] = None
    flavor: str = "functional"
    centered: bool = True
    retain: Optional[Union[int, tuple[int, ...]]] = None
    known_b: bool = False
    tf_noise: str = "learn"
    recalibrate: bool = True
    external_path: Optional[str] = None
    label: Optional[str] = None

    KINDS = ("lr", "direct", "tf", "plsr", "mean", "truth", "external")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ConfigurationError(f"unknown model kind {self.kind!r}")
        if self.kind == "external" and not self.external_path:
            raise ConfigurationError("external model needs a predictions CSV path")

    @property
    def name(self) -> str:
        return self.label or self.kind

    def describe(self) -> dict:
        d = asdict(self)
        d["name"] = self.name
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = {k: v for k, v in d.items() if k != "name"}
        if isinstance(d.get("retain"), list):
            d["retain"] = tuple(d["retain"])
        return cls(**d)


class MeanPredictor:
    kind = "mean"

    def __init__(self, means: np.ndarray):
        self.means = np.asarray(means)

    @property
    def fingerprint(self) -> str:
        return array_fingerprint(self.means)

    def predict(self, data) -> np.ndarray:
        n = np.atleast_2d(getattr(data, "absorbances", data)).shape[0]
        return np.tile(self.means, (n, 1))


class TruthPredictor:
    kind = "truth"
    fingerprint = "truth"

    def predict(self, data: SpectraDataset) -> np.ndarray:
        return np.array(data.concentrations)


def read_external_predictions(path, n: int, k: int) -> np.ndarray:
    """Predicted concentrations (M), one row per dataset row, optional header."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    try:
        float(rows[0][0])
    except (ValueError, IndexError):
        rows = rows[1:]
    table = np.array([[float(x) for x in r] for r in rows])
    if table.shape != (n, k):
        raise SchemaError(f"external predictions have shape {table.shape}, expected {(n, k)}")
    return table


def fit_model(spec: ModelSpec, train: SpectraDataset, library: Optional[GasLibrary] = None):
    """Train the model described by ``spec`` on ``train`` only."""
    k = train.k
    if spec.kind in ("lr", "direct"):
        l = spec.n_components or k
        if train.n <= l + 1:
            raise UnderdeterminedError(
                f"linear regression on {l} components needs more than {l + 1} samples, got {train.n}")
        basis = fit_pca(train.absorbances, train.grid, spec.flavor, spec.centered, l)
        model = fit_lr(basis, train)
        if spec.kind == "direct":
            model = sparsify_to_direct(model, spec.retain or 1, train)
        return model
    if spec.kind == "tf":
        if library is None:
            raise ConfigurationError("the TF model needs the gas library")
        if library.fingerprint != train.library_fingerprint:
            raise FingerprintMismatchError("dataset was not generated from this library")
        b = train.path_length_b if spec.known_b else None
        needs_cal = b is None or spec.tf_noise == "learn" or spec.recalibrate
        return fit_tf(library, b=b, noise=spec.tf_noise, calibration=train if needs_cal else None,
                      flavor=spec.flavor, centered=False, recalibrate=spec.recalibrate)
    if spec.kind == "plsr":
        return fit_plsr(train, spec.n_components or 20)
    if spec.kind == "mean":
        return MeanPredictor(train.concentrations.mean(axis=0))
    if spec.kind == "truth":
        return TruthPredictor()
    raise ConfigurationError(f"{spec.kind} models are not trainable")


# --------------------------------------------------------------------------
# splits and metrics


def fold_indices(n: int, folds: int, seed: int) -> list[np.ndarray]:
    """Seeded permutation cut into equal folds; the last fold takes the remainder."""
    if folds < 2:
        raise ConfigurationError("need at least 2 folds")
    if n < folds:
        raise ConfigurationError(f"{n} samples cannot be split into {folds} folds")
    perm = np.random.default_rng(seed).permutation(n)
    size = n // folds
    return [perm[f * size:(f + 1) * size] if f < folds - 1 else perm[f * size:]
            for f in range(folds)]


def holdout_split(n: int, test_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    n_test = max(1, int(round(n * test_fraction)))
    return perm[n_test:], perm[:n_test]


def rmse_per_gas(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    return np.sqrt(np.mean((np.asarray(pred) - np.asarray(truth)) ** 2, axis=0))


def ape(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Absolute percentage error as a fraction; NaN where the truth is zero."""
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.abs(pred - truth) / truth
    out[truth == 0] = np.nan
    return out


def mape_per_gas(pred: np.ndarray, truth: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    e = ape(np.asarray(pred), np.asarray(truth))
    valid = ~np.isnan(e)
    with np.errstate(invalid="ignore"):
        m = np.where(valid.any(axis=0), np.nansum(e, axis=0) / np.maximum(valid.sum(axis=0), 1), np.nan)
    return m, (~valid).sum(axis=0)


def _run(jobs: Sequence[Callable], threads: int) -> list:
    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(lambda f: f(), jobs))
    return [f() for f in jobs]


# --------------------------------------------------------------------------
# k-fold evaluation


@dataclass
class EvalReport:
    model: dict
    dataset: dict
    gas_names: tuple[str, ...]
    per_gas_rmse: np.ndarray
    per_gas_mape: np.ndarray
    mape_excluded: np.ndarray
    random_guess_rmse: np.ndarray
    per_fold_rmse: np.ndarray  # (folds, K)
    fold_fingerprints: list[str]
    predictions: Optional[np.ndarray] = None

    kind = "eval"

    @property
    def mean_rmse(self) -> float:
        return float(np.mean(self.per_gas_rmse))

    @property
    def fold_count(self) -> int:
        return self.per_fold_rmse.shape[0]

    @property
    def per_fold_mean_rmse(self) -> np.ndarray:
        return self.per_fold_rmse.mean(axis=1)

    def to_dict(self) -> dict:
        return {
            "type": self.kind,
            "model": self.model,
            "dataset": self.dataset,
            "gas_names": list(self.gas_names),
            "per_gas_rmse": self.per_gas_rmse.tolist(),
            "mean_rmse": self.mean_rmse,
            "per_gas_mape": self.per_gas_mape.tolist(),
            "mape_excluded": self.mape_excluded.tolist(),
            "random_guess_rmse": self.random_guess_rmse.tolist(),
            "per_fold_rmse": self.per_fold_rmse.tolist(),
            "fold_fingerprints": self.fold_fingerprints,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(d["model"], d["dataset"], tuple(d["gas_names"]), np.array(d["per_gas_rmse"]),
                   np.array(d["per_gas_mape"], dtype=float), np.array(d["mape_excluded"]),
                   np.array(d["random_guess_rmse"]), np.array(d["per_fold_rmse"]),
                   list(d["fold_fingerprints"]))

    def tables(self) -> dict:
        name = self.model.get("name", "model")
        rows = []
        for f in range(self.fold_count):
            for g, gas in enumerate(self.gas_names):
                rows.append([name, gas, f + 1, self.per_fold_rmse[f, g] / MICROMOLAR])
        summary = [[name, gas, "all", self.per_gas_rmse[g] / MICROMOLAR, self.per_gas_mape[g],
                    self.random_guess_rmse[g] / MICROMOLAR]
                   for g, gas in enumerate(self.gas_names)]
        return {
            "eval_fold_rmse.csv": (["model", "gas", "fold", "rmse_uM"], rows,
                                   "per-fold test RMSE (µM) by gas"),
            "eval_summary.csv": (["model", "gas", "fold", "rmse_uM", "mape", "random_guess_rmse_uM"],
                                 summary, "pooled held-out RMSE (µM), MAPE (fraction), "
                                          "constant-mean baseline RMSE (µM)"),
        }


def kfold_evaluate(spec: ModelSpec, dataset: SpectraDataset, folds: int = 10, seed: int = 0,
                   library: Optional[GasLibrary] = None, threads: int = 1,
                   keep_predictions: bool = True) -> EvalReport:
    """Fit on each 90 % split (basis included) and score the held-out 10 %."""
    splits = fold_indices(dataset.n, folds, seed)
    external = None
    if spec.kind == "external":
        external = read_external_predictions(spec.external_path, dataset.n, dataset.k)

    def job(f):
        test = splits[f]
        if external is not None:
            return f, external[test], "external"
        train = np.concatenate([splits[j] for j in range(folds) if j != f])
        model = fit_model(spec, dataset.subset(train), library)
        return f, model.predict(dataset.subset(test)), model.fingerprint

    results = _run([lambda f=f: job(f) for f in range(folds)], threads)
    pred = np.empty_like(dataset.concentrations)
    per_fold = np.zeros((folds, dataset.k))
    prints = [""] * folds
    for f, p, fp in results:
        pred[splits[f]] = p
        per_fold[f] = rmse_per_gas(p, dataset.concentrations[splits[f]])
        prints[f] = fp
    truth = dataset.concentrations
    mape, excluded = mape_per_gas(pred, truth)
    return EvalReport(spec.describe(), dataset.describe(), dataset.gas_names,
                      rmse_per_gas(pred, truth), mape, excluded, truth.std(axis=0), per_fold,
                      prints, pred if keep_predictions else None)


# --------------------------------------------------------------------------
# sweeps


@dataclass
class PcSweep:
    gas_names: tuple[str, ...]
    n_components: np.ndarray
    rmse: np.ndarray  # (len(n_components), K)
    delta: np.ndarray  # RMSE(l) - RMSE(l-1)
    model: str = "lr"

    kind = "pc-sweep"

    @property
    def mean_rmse(self) -> np.ndarray:
        return self.rmse.mean(axis=1)

    def to_dict(self) -> dict:
        return {"type": self.kind, "gas_names": list(self.gas_names), "model": self.model,
                "n_components": self.n_components.tolist(), "rmse": self.rmse.tolist(),
                "delta": self.delta.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["gas_names"]), np.array(d["n_components"]), np.array(d["rmse"]),
                   np.array(d["delta"]), d.get("model", "lr"))

    def tables(self) -> dict:
        rows, drows = [], []
        for i, l in enumerate(self.n_components):
            for g, gas in enumerate(self.gas_names):
                rows.append([self.model, gas, int(l), self.rmse[i, g] / MICROMOLAR])
                drows.append([self.model, gas, int(l), self.delta[i, g] / MICROMOLAR])
        return {
            "pc_sweep_rmse.csv": (["model", "gas", "n_components", "rmse"], rows,
                                  "held-out RMSE (µM) vs number of components"),
            "pc_sweep_delta.csv": (["model", "gas", "n_components", "delta_rmse"], drows,
                                   "RMSE(l) - RMSE(l-1) in µM"),
        }


def sweep_pc_count(dataset: SpectraDataset, l_range: Sequence[int], folds: int = 10, seed: int = 0,
                   flavor: str = "functional", centered: bool = True, threads: int = 1) -> PcSweep:
    """LR refitted for every component count; one basis per fold, truncated.

    ``RMSE(0)`` (intercept only) is computed so the first decrement is defined.
    """
    l_range = sorted(int(l) for l in l_range)
    l_max = l_range[-1]
    splits = fold_indices(dataset.n, folds, seed)
    limit = min(dataset.n - 1, len(dataset.grid))
    if l_range[0] < 1 or l_max > limit:
        raise ConfigurationError(f"component counts must lie in [1, {limit}]")

    def job(f):
        train_idx = np.concatenate([splits[j] for j in range(folds) if j != f])
        train, test = dataset.subset(train_idx), dataset.subset(splits[f])
        basis = fit_pca(train.absorbances, train.grid, flavor, centered, l_max)
        s_tr = project(basis, train).scores
        s_te = project(basis, test).scores
        sq = np.zeros((l_max + 1, dataset.k))
        for l in range(0, min(l_max, basis.n_components) + 1):
            w, b, _, _ = _lstsq_with_intercept(s_tr[:, :l], train.concentrations, "pc sweep")
            sq[l] = np.sum((s_te[:, :l] @ w + b - test.concentrations) ** 2, axis=0)
        sq[basis.n_components + 1:] = sq[basis.n_components]
        return sq

    total = sum(_run([lambda f=f: job(f) for f in range(folds)], threads))
    rmse_all = np.sqrt(total / dataset.n)
    idx = np.array(l_range)
    return PcSweep(dataset.gas_names, idx, rmse_all[idx], rmse_all[idx] - rmse_all[idx - 1])


@dataclass
class SnrSweep:
    gas_names: tuple[str, ...]
    models: list[str]
    snr_db: np.ndarray
    rmse: np.ndarray  # (models, snrs, K)

    kind = "snr-sweep"

    @property
    def mean_rmse(self) -> np.ndarray:
        return self.rmse.mean(axis=2)

    def to_dict(self):
        return {"type": self.kind, "gas_names": list(self.gas_names), "models": self.models,
                "snr_db": self.snr_db.tolist(), "rmse": self.rmse.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["gas_names"]), list(d["models"]), np.array(d["snr_db"], dtype=float),
                   np.array(d["rmse"]))

    def tables(self):
        rows = []
        for m, model in enumerate(self.models):
            for s, snr in enumerate(self.snr_db):
                for g, gas in enumerate(self.gas_names):
                    rows.append([model, gas, snr, self.rmse[m, s, g] / MICROMOLAR])
        return {"snr_sweep_rmse.csv": (["model", "gas", "snr_db", "rmse"], rows,
                                       "k-fold RMSE (µM) vs SNR (dB)")}


def sweep_snr(datasets: Sequence[SpectraDataset], specs: Sequence[ModelSpec], folds: int = 10,
              seed: int = 0, library: Optional[GasLibrary] = None, threads: int = 1) -> SnrSweep:
    snrs = np.array([np.nan if d.noise is None else d.noise.snr_db for d in datasets])
    rmse = np.array([[kfold_evaluate(s, d, folds, seed, library, threads, False).per_gas_rmse
                      for d in datasets] for s in specs])
    return SnrSweep(datasets[0].gas_names, [s.name for s in specs], snrs, rmse)


@dataclass
class TrainingSizeSweep:
    gas_names: tuple[str, ...]
    models: list[str]
    sizes: np.ndarray
    rmse: np.ndarray  # (seeds, models, sizes, K); NaN where a model cannot be fitted
    seeds: list[int] = field(default_factory=list)

    kind = "train-size-sweep"

    @property
    def mean_rmse(self) -> np.ndarray:
        """Median over seeds of the all-gas mean RMSE, shape (models, sizes)."""
        return np.median(self.rmse.mean(axis=3), axis=0)

    def to_dict(self):
        return {"type": self.kind, "gas_names": list(self.gas_names), "models": self.models,
                "sizes": self.sizes.tolist(), "rmse": self.rmse.tolist(), "seeds": self.seeds}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["gas_names"]), list(d["models"]), np.array(d["sizes"]),
                   np.array(d["rmse"], dtype=float), list(d["seeds"]))

    def tables(self):
        rows = []
        for si, seed in enumerate(self.seeds):
            for m, model in enumerate(self.models):
                for z, size in enumerate(self.sizes):
                    rows.append([model, "all", int(size), self.rmse[si, m, z].mean() / MICROMOLAR, seed])
        return {"train_size_sweep.csv": (["model", "gas", "n_train", "mean_rmse", "fold"], rows,
                                         "all-gas mean RMSE (µM) vs training samples; "
                                         "fold column holds the split seed")}


def sweep_training_size(dataset: SpectraDataset, specs: Sequence[ModelSpec], sizes: Sequence[int],
                        test_fraction: float = 0.1, seeds: Sequence[int] = (0,),
                        library: Optional[GasLibrary] = None, threads: int = 1) -> TrainingSizeSweep:
    """Train on deterministic prefixes of the training pool, score one fixed test split.

    Sizes at which a model is underdetermined (for example LR with
    ``size <= K + 1``) are recorded as NaN.
    """
    sizes = np.array(sorted(int(s) for s in sizes))
    out = np.full((len(seeds), len(specs), len(sizes), dataset.k), np.nan)
    for si, seed in enumerate(seeds):
        pool, test_idx = holdout_split(dataset.n, test_fraction, seed)
        if sizes[-1] > pool.size:
            raise ConfigurationError(f"size {sizes[-1]} exceeds the training pool of {pool.size}")
        test = dataset.subset(test_idx)

        def job(m, z):
            try:
                model = fit_model(specs[m], dataset.subset(pool[:sizes[z]]), library)
            except (UnderdeterminedError, ConditioningError, ConfigurationError):
                return m, z, None
            return m, z, rmse_per_gas(model.predict(test), test.concentrations)

        jobs = [lambda m=m, z=z: job(m, z) for m in range(len(specs)) for z in range(len(sizes))]
        for m, z, r in _run(jobs, threads):
            if r is not None:
                out[si, m, z] = r
    return TrainingSizeSweep(dataset.gas_names, [s.name for s in specs], sizes, out, list(seeds))


# --------------------------------------------------------------------------
# out-of-range study


@dataclass
class SaturationFit:
    """``MAPE(c) ~ max(gamma, a / c)`` fitted on log-binned medians."""

    gamma: float
    a: float
    c_th: float
    residual: float  # RMS log-residual over all bins
    plateau_residual: float  # RMS of (m - gamma) / gamma over plateau bins
    n_plateau: int

    def model(self, c) -> np.ndarray:
        return np.maximum(self.gamma, self.a / np.asarray(c, dtype=float))


def fit_saturation(centers: np.ndarray, values: np.ndarray) -> SaturationFit:
    """Least squares in log space over every split into an inverse branch and a plateau."""
    c = np.asarray(centers, dtype=float)
    v = np.asarray(values, dtype=float)
    ok = np.isfinite(v) & (c > 0)
    c, v = c[ok], v[ok]
    order = np.argsort(c)
    c, v = c[order], v[order]
    n = c.size
    if n == 0:
        return SaturationFit(float("nan"), float("nan"), float("nan"), float("nan"), float("nan"), 0)
    x, y = np.log(c), np.log(np.maximum(v, _TINY))
    best = None
    # scan from "no plateau" down so exact ties keep the simpler inverse branch
    for s in range(n, -1, -1):
        log_a = np.mean(y[:s] + x[:s]) if s > 0 else -np.inf
        log_g = np.mean(y[s:]) if s < n else -np.inf
        pred = np.maximum(log_g, log_a - x)
        sse = float(np.sum((y - pred) ** 2))
        if best is None or sse < best[0] - 1e-15:
            best = (sse, log_a, log_g)
    sse, log_a, log_g = best
    gamma = float(np.exp(log_g)) if np.isfinite(log_g) else 0.0
    a = float(np.exp(log_a)) if np.isfinite(log_a) else 0.0
    if gamma > 0 and a > 0:
        c_th = a / gamma
    elif gamma > 0:
        c_th = float(c[0])
    else:
        c_th = float("inf")
    plateau = c > c_th
    if gamma > 0 and plateau.any():
        pres = float(np.sqrt(np.mean(((v[plateau] - gamma) / gamma) ** 2)))
    else:
        pres = float("nan")
    return SaturationFit(gamma, a, c_th, float(np.sqrt(sse / n)), pres, int(plateau.sum()))


@dataclass
class OutOfRangeStudy:
    models: list[str]
    gas_names: tuple[str, ...]
    edges: np.ndarray  # log-spaced bin edges (M)
    mape_in: np.ndarray  # (models, folds, K, bins) per-fold binned MAPE (NaN when empty)
    mape_out: np.ndarray
    count_in: np.ndarray  # (models, folds, K, bins)
    count_out: np.ndarray
    median_in: np.ndarray  # (models, K, bins) median APE pooled over folds
    median_out: np.ndarray
    fits: dict  # model -> gas -> SaturationFit (pooled out-of-range medians)
    fold_fits: dict  # model -> gas -> list of per-fold SaturationFit

    kind = "out-of-range"

    @property
    def centers(self) -> np.ndarray:
        return np.sqrt(self.edges[:-1] * self.edges[1:])

    def fold_stats(self, population: str = "in"):
        """Across-fold mean and standard deviation of the binned MAPE."""
        arr = self.mape_in if population == "in" else self.mape_out
        with np.errstate(invalid="ignore"), _quiet():
            return np.nanmean(arr, axis=1), np.nanstd(arr, axis=1, ddof=1)

    def gray_box(self, model: str, gas: str) -> dict:
        """gamma +/- 3 sigma over folds and the 20-80 % quantiles of per-fold c_th."""
        fits = self.fold_fits[model][gas]
        g = np.array([f.gamma for f in fits])
        cth = np.array([f.c_th for f in fits if np.isfinite(f.c_th)])
        sd = float(np.std(g, ddof=1)) if g.size > 1 else 0.0
        q = np.quantile(cth, [0.2, 0.8]) if cth.size else [float("nan")] * 2
        return {"gamma_low": float(np.mean(g) - 3 * sd), "gamma_high": float(np.mean(g) + 3 * sd),
                "c_th_q20": float(q[0]), "c_th_q80": float(q[1])}

    def empty_bins(self) -> list[tuple[str, str, int, str]]:
        flagged = []
        for m, model in enumerate(self.models):
            for g, gas in enumerate(self.gas_names):
                for b in range(self.edges.size - 1):
                    for pop, cnt in (("in", self.count_in), ("out", self.count_out)):
                        if cnt[m, :, g, b].sum() == 0:
                            flagged.append((model, gas, b, pop))
        return flagged

    def to_dict(self):
        fit = lambda f: asdict(f)
        return {
            "type": self.kind, "models": self.models, "gas_names": list(self.gas_names),
            "edges": self.edges.tolist(), "mape_in": self.mape_in.tolist(),
            "mape_out": self.mape_out.tolist(), "count_in": self.count_in.tolist(),
            "count_out": self.count_out.tolist(), "median_in": self.median_in.tolist(),
            "median_out": self.median_out.tolist(),
            "fits": {m: {g: fit(f) for g, f in d.items()} for m, d in self.fits.items()},
            "fold_fits": {m: {g: [fit(f) for f in fl] for g, fl in d.items()}
                          for m, d in self.fold_fits.items()},
        }

    @classmethod
    def from_dict(cls, d):
        arr = lambda key: np.array(d[key], dtype=float)
        return cls(list(d["models"]), tuple(d["gas_names"]), arr("edges"), arr("mape_in"),
                   arr("mape_out"), np.array(d["count_in"]), np.array(d["count_out"]),
                   arr("median_in"), arr("median_out"),
                   {m: {g: SaturationFit(**f) for g, f in dd.items()} for m, dd in d["fits"].items()},
                   {m: {g: [SaturationFit(**f) for f in fl] for g, fl in dd.items()}
                    for m, dd in d["fold_fits"].items()})

    def tables(self):
        rows, fit_rows = [], []
        centers = self.centers
        for m, model in enumerate(self.models):
            for g, gas in enumerate(self.gas_names):
                for b, cen in enumerate(centers):
                    for f in range(self.mape_in.shape[1]):
                        for pop, arr, cnt in (("in", self.mape_in, self.count_in),
                                              ("out", self.mape_out, self.count_out)):
                            if cnt[m, f, g, b]:
                                rows.append([model, gas, cen / MICROMOLAR, arr[m, f, g, b], f + 1,
                                             pop, int(cnt[m, f, g, b])])
                sf = self.fits[model][gas]
                box = self.gray_box(model, gas)
                fit_rows.append([model, gas, sf.gamma, sf.a / MICROMOLAR, sf.c_th / MICROMOLAR,
                                 sf.residual, sf.plateau_residual, box["gamma_low"],
                                 box["gamma_high"], box["c_th_q20"] / MICROMOLAR,
                                 box["c_th_q80"] / MICROMOLAR])
        return {
            "out_of_range_mape.csv": (["model", "gas", "concentration_uM", "mape", "fold",
                                       "population", "count"], rows,
                                      "binned MAPE (fraction) vs bin-centre concentration (µM); "
                                      "population in = held-out training range, out = wide range"),
            "out_of_range_saturation.csv": (["model", "gas", "gamma", "a_uM", "c_th_uM", "residual",
                                             "plateau_residual", "gamma_low", "gamma_high",
                                             "c_th_q20_uM", "c_th_q80_uM"], fit_rows,
                                            "max(gamma, a/c) fits; gray-box bounds from fold spread"),
        }


class _quiet:
    def __enter__(self):
        import warnings
        self._w = warnings.catch_warnings()
        self._w.__enter__()
        warnings.simplefilter("ignore", RuntimeWarning)

    def __exit__(self, *exc):
        self._w.__exit__(*exc)


def _binned(values: np.ndarray, truth: np.ndarray, edges: np.ndarray, reducer) -> tuple:
    """Reduce APE per (gas, bin); returns (stat, count) each of shape (K, bins)."""
    k = truth.shape[1]
    nb = edges.size - 1
    stat = np.full((k, nb), np.nan)
    count = np.zeros((k, nb), dtype=int)
    for g in range(k):
        c = truth[:, g]
        present = c > 0
        idx = np.digitize(c[present], edges) - 1
        vals = values[present, g]
        for b in range(nb):
            sel = vals[idx == b]
            count[g, b] = sel.size
            if sel.size:
                stat[g, b] = reducer(sel)
    return stat, count


def out_of_range_study(train: SpectraDataset, test: SpectraDataset, specs: Sequence[ModelSpec],
                       n_bins: int = 20, folds: int = 10, seed: int = 0,
                       library: Optional[GasLibrary] = None, threads: int = 1,
                       edges: Optional[np.ndarray] = None, min_count: int = 5) -> OutOfRangeStudy:
    """Train on folds of the narrow-range set, test in-range and on the wide-range set.

    Zero concentrations are excluded from every bin.  The saturation fit uses
    pooled out-of-range medians in bins holding at least ``min_count`` samples.
    """
    if train.gas_names != test.gas_names:
        raise SchemaError("train and test datasets describe different gases")
    if edges is None:
        pos = np.concatenate([train.concentrations[train.concentrations > 0],
                              test.concentrations[test.concentrations > 0]])
        edges = np.geomspace(pos.min(), pos.max() * (1 + 1e-12), n_bins + 1)
    edges = np.asarray(edges, dtype=float)
    nb = edges.size - 1
    splits = fold_indices(train.n, folds, seed)
    k = train.k

    def job(m, f):
        tr = train.subset(np.concatenate([splits[j] for j in range(folds) if j != f]))
        te = train.subset(splits[f])
        model = fit_model(specs[m], tr, library)
        e_in = ape(model.predict(te), te.concentrations)
        e_out = ape(model.predict(test), test.concentrations)
        return m, f, e_in, splits[f], e_out

    shape = (len(specs), folds, k, nb)
    mape_in, mape_out = np.full(shape, np.nan), np.full(shape, np.nan)
    count_in, count_out = np.zeros(shape, dtype=int), np.zeros(shape, dtype=int)
    ape_in = [[None] * folds for _ in specs]
    ape_out = [[None] * folds for _ in specs]
    jobs = [lambda m=m, f=f: job(m, f) for m in range(len(specs)) for f in range(folds)]
    for m, f, e_in, rows, e_out in _run(jobs, threads):
        mape_in[m, f], count_in[m, f] = _binned(e_in, train.concentrations[rows], edges, np.mean)
        mape_out[m, f], count_out[m, f] = _binned(e_out, test.concentrations, edges, np.mean)
        ape_in[m][f], ape_out[m][f] = (e_in, rows), e_out

    centers = np.sqrt(edges[:-1] * edges[1:])
    median_in = np.full((len(specs), k, nb), np.nan)
    median_out = np.full((len(specs), k, nb), np.nan)
    fits, fold_fits = {}, {}
    for m, spec in enumerate(specs):
        pooled_in = np.vstack([ape_in[m][f][0] for f in range(folds)])
        truth_in = np.vstack([train.concentrations[ape_in[m][f][1]] for f in range(folds)])
        median_in[m], _ = _binned(pooled_in, truth_in, edges, np.median)
        pooled_out = np.vstack([ape_out[m][f] for f in range(folds)])
        truth_out = np.vstack([test.concentrations] * folds)
        median_out[m], cnt = _binned(pooled_out, truth_out, edges, np.median)
        fits[spec.name], fold_fits[spec.name] = {}, {}
        for g, gas in enumerate(train.gas_names):
            keep = cnt[g] >= min_count * folds
            fits[spec.name][gas] = fit_saturation(centers[keep], median_out[m, g, keep])
            per_fold = []
            for f in range(folds):
                med, c = _binned(ape_out[m][f], test.concentrations, edges, np.median)
                kf = c[g] >= min_count
                per_fold.append(fit_saturation(centers[kf], med[g, kf]))
            fold_fits[spec.name][gas] = per_fold
    return OutOfRangeStudy([s.name for s in specs], train.gas_names, edges, mape_in, mape_out,
                           count_in, count_out, median_in, median_out, fits, fold_fits)


# --------------------------------------------------------------------------
# export

RESULT_TYPES = {cls.kind: cls for cls in (EvalReport, PcSweep, SnrSweep, TrainingSizeSweep,
                                          OutOfRangeStudy)}


def _cell(x) -> str:
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    if isinstance(x, (np.integer,)):
        return str(int(x))
    return str(x)


def export_plot_data(result, directory) -> list[Path]:
    """Write one tidy CSV per table plus ``manifest.json``; returns all paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    manifest = {"result_type": result.kind, "files": []}
    for name, (header, rows, semantics) in sorted(result.tables().items()):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_cell(x) for x in r])
        path = directory / name
        path.write_text(buf.getvalue())
        written.append(path)
        manifest["files"].append({"file": name, "columns": header, "semantics": semantics})
    (directory / "result.json").write_text(json.dumps(result.to_dict(), sort_keys=True) + "\n")
    mpath = directory / "manifest.json"
    mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return written + [directory / "result.json", mpath]


def load_result(path):
    d = json.loads(Path(path).read_text())
    try:
        cls = RESULT_TYPES[d["type"]]
    except KeyError:
        raise SchemaError(f"unknown result type {d.get('type')!r}") from None
    return cls.from_dict(d)
