"""Functional and plain principal component analysis of spectra matrices.

The functional flavor is PCA under the trapezoidal inner product: columns are
scaled by ``sqrt(w_j)`` before the SVD and the right singular vectors are
unscaled afterwards, so components are orthonormal under ``sum_j w_j f_j g_j``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Optional

import numpy as np

from .errors import BoundError, ConfigurationError, DimensionError, SchemaError
from .spectral import WavelengthGrid, array_fingerprint, read_spectra_csv, write_spectra_csv

Flavor = Literal["functional", "plain"]

RANK_TOL = 1e-12

_FLAVOR_ALIASES = {"fpca": "functional", "functional": "functional", "pca": "plain", "plain": "plain"}


def resolve_flavor(name: str) -> Flavor:
    try:
        return _FLAVOR_ALIASES[name]  # type: ignore[return-value]
    except KeyError:
        raise ConfigurationError(f"unknown PCA flavor {name!r}") from None


@dataclass(frozen=True, eq=False)
class PcBasis:
    grid: WavelengthGrid
    components: np.ndarray  # (L, M)
    mean: np.ndarray  # (M,)
    eigenvalues: np.ndarray  # (L,)
    flavor: Flavor
    centered: bool
    total_variance: float
    n_samples: int
    effective_rank: int

    def __post_init__(self):
        comps = np.array(self.components, dtype=np.float64, ndmin=2)
        if comps.size == 0:
            comps = comps.reshape(0, len(self.grid))
        mean = np.array(self.mean, dtype=np.float64)
        eig = np.array(self.eigenvalues, dtype=np.float64).ravel()
        if comps.shape[1] != len(self.grid) or mean.shape != (len(self.grid),):
            raise DimensionError("basis arrays do not match the grid")
        if eig.shape != (comps.shape[0],):
            raise DimensionError("one eigenvalue per component is required")
        for arr in (comps, mean, eig):
            arr.setflags(write=False)
        object.__setattr__(self, "components", comps)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "eigenvalues", eig)

    @property
    def n_components(self) -> int:
        return self.components.shape[0]

    @property
    def weighting(self) -> str:
        return "trapezoidal" if self.flavor == "functional" else "unit"

    @property
    def weights(self) -> np.ndarray:
        return self.grid.weights(self.weighting)

    @property
    def fingerprint(self) -> str:
        return array_fingerprint(self.grid.points, self.components, self.mean, self.eigenvalues,
                                 extra=(self.flavor, str(self.centered)))

    def truncated(self, n_components: int) -> "PcBasis":
        if not 0 <= n_components <= self.n_components:
            raise BoundError(f"basis has {self.n_components} components, asked for {n_components}")
        return PcBasis(self.grid, self.components[:n_components], self.mean,
                       self.eigenvalues[:n_components], self.flavor, self.centered,
                       self.total_variance, self.n_samples, self.effective_rank)

    def gram(self) -> np.ndarray:
        """Inner products between components under the basis weighting."""
        return (self.components * self.weights) @ self.components.T

    def export(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        cols = {"mean": self.mean}
        cols.update({f"pc{i + 1}": c for i, c in enumerate(self.components)})
        write_spectra_csv(directory / "basis.csv", self.grid, cols)
        meta = {
            "eigenvalues": [float(x) for x in self.eigenvalues],
            "flavor": self.flavor,
            "centered": self.centered,
            "total_variance": float(self.total_variance),
            "n_samples": int(self.n_samples),
            "effective_rank": int(self.effective_rank),
            "fingerprint": self.fingerprint,
        }
        (directory / "basis.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_basis(directory) -> PcBasis:
    directory = Path(directory)
    meta = json.loads((directory / "basis.json").read_text())
    grid, cols = read_spectra_csv(directory / "basis.csv")
    n = len(meta["eigenvalues"])
    names = [f"pc{i + 1}" for i in range(n)]
    if "mean" not in cols or any(nm not in cols for nm in names):
        raise SchemaError("basis.csv columns do not match basis.json")
    comps = np.stack([cols[nm].values for nm in names]) if n else np.zeros((0, len(grid)))
    basis = PcBasis(grid, comps, cols["mean"].values, meta["eigenvalues"], meta["flavor"],
                    bool(meta["centered"]), float(meta["total_variance"]),
                    int(meta["n_samples"]), int(meta["effective_rank"]))
    if meta.get("fingerprint") not in (None, basis.fingerprint):
        raise SchemaError("basis fingerprint does not match its contents")
    return basis


def _fix_signs(components: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(components), axis=1)
    signs = np.sign(components[np.arange(components.shape[0]), idx])
    signs[signs == 0] = 1.0
    return components * signs[:, None]


def fit_pca(data: np.ndarray, grid: WavelengthGrid, flavor: Flavor = "functional",
            centered: bool = True, max_components: Optional[int] = None) -> PcBasis:
    """Fit up to ``max_components`` principal components of the rows of ``data``.

    Eigenvalues are ``s_l**2 / (N - 1)``.  Singular values below
    ``1e-12 * s_max`` are treated as numerically zero, so fewer components
    than requested come back for rank-deficient data (see ``effective_rank``).
    """
    flavor = resolve_flavor(flavor)
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != len(grid):
        raise DimensionError("data must be an N x M matrix on the basis grid")
    n, m = x.shape
    if n < 2:
        raise ConfigurationError("PCA needs at least 2 samples")
    limit = min(n, m)
    max_components = limit if max_components is None else int(max_components)
    if not 0 <= max_components <= limit:
        raise BoundError(f"max_components must lie in [0, {limit}]")

    mean = x.mean(axis=0) if centered else np.zeros(m)
    w = grid.weights("trapezoidal" if flavor == "functional" else "unit")
    sw = np.sqrt(w)
    xs = (x - mean) * sw
    total = float(np.einsum("ij,ij->", xs, xs)) / (n - 1)
    _, s, vt = np.linalg.svd(xs, full_matrices=False)
    rank = int(np.sum(s > RANK_TOL * s[0])) if s.size and s[0] > 0 else 0
    keep = min(max_components, rank)
    comps = _fix_signs(vt[:keep] / sw)
    eig = np.maximum(s[:keep] ** 2 / (n - 1), 0.0)
    return PcBasis(grid, comps, mean, eig, flavor, centered, total, n, rank)


def explained_variance(basis: PcBasis, up_to: Optional[int] = None) -> tuple[np.ndarray, np.ndarray]:
    """Individual and cumulative explained-variance fractions.

    The denominator is the total variance of the fitted data, truncated tail
    included.
    """
    up_to = basis.n_components if up_to is None else up_to
    if up_to > basis.n_components:
        raise BoundError(f"basis has only {basis.n_components} components")
    if basis.total_variance <= 0:
        return np.zeros(up_to), np.zeros(up_to)
    iev = basis.eigenvalues[:up_to] / basis.total_variance
    cev = np.minimum(np.cumsum(iev), 1.0)
    return iev, cev


@dataclass(frozen=True, eq=False)
class ScoreMatrix:
    scores: np.ndarray
    basis_fingerprint: str


def project(basis: PcBasis, data) -> ScoreMatrix:
    """``beta_{l,i} = <phi_l | A_i - u>`` under the basis weighting."""
    x = np.atleast_2d(np.asarray(getattr(data, "absorbances", data), dtype=np.float64))
    grid = getattr(data, "grid", None)
    if (grid is not None and grid != basis.grid) or x.shape[1] != len(basis.grid):
        raise DimensionError("data grid does not match the basis grid")
    scores = (x - basis.mean) @ (basis.components * basis.weights).T
    return ScoreMatrix(scores, basis.fingerprint)


def reconstruct(basis: PcBasis, scores, up_to: Optional[int] = None) -> np.ndarray:
    beta = np.atleast_2d(np.asarray(getattr(scores, "scores", scores), dtype=np.float64))
    up_to = basis.n_components if up_to is None else up_to
    if up_to > basis.n_components or up_to > beta.shape[1] or up_to < 0:
        raise BoundError(f"cannot reconstruct with {up_to} components")
    return basis.mean + beta[:, :up_to] @ basis.components[:up_to]


@dataclass(frozen=True)
class ReconstructionMetrics:
    rmse: float
    delta_rho: float
    excluded: int


def reconstruction_metrics(original: np.ndarray, reconstructed: np.ndarray) -> ReconstructionMetrics:
    """Mean per-sample RMSE and residual correlation ``1 - rho``.

    Rows where either spectrum has zero norm have no defined ``rho``; they
    are left out of ``delta_rho`` and counted in ``excluded``.
    """
    a = np.atleast_2d(np.asarray(original, dtype=np.float64))
    r = np.atleast_2d(np.asarray(reconstructed, dtype=np.float64))
    if a.shape != r.shape:
        raise DimensionError("original and reconstructed shapes differ")
    rmse = float(np.mean(np.sqrt(np.mean((r - a) ** 2, axis=1))))
    num = np.einsum("ij,ij->i", r, a)
    den = np.sqrt(np.einsum("ij,ij->i", r, r) * np.einsum("ij,ij->i", a, a))
    ok = den > 0
    delta = float(np.mean(1.0 - num[ok] / den[ok])) if ok.any() else float("nan")
    return ReconstructionMetrics(rmse, delta, int((~ok).sum()))


def compare_flavors(basis_a: PcBasis, basis_b: PcBasis,
                    up_to: Optional[int] = None) -> list[tuple[float, float]]:
    """Per-component (RMSE, r^2) between two bases on the same grid.

    Components are rescaled to unit plain norm so the two flavors are
    comparable, and b's component is flipped when it anti-correlates with a's.
    """
    if basis_a.grid != basis_b.grid:
        raise DimensionError("bases live on different grids")
    up_to = min(basis_a.n_components, basis_b.n_components) if up_to is None else up_to
    out = []
    for fa, fb in zip(basis_a.components[:up_to], basis_b.components[:up_to]):
        fa = fa / np.linalg.norm(fa)
        fb = fb / np.linalg.norm(fb)
        r = np.corrcoef(fa, fb)[0, 1]
        if r < 0:
            fb, r = -fb, -r
        out.append((float(np.sqrt(np.mean((fa - fb) ** 2))), float(r * r)))
    return out
