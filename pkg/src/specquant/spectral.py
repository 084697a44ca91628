"""Spectra on a shared wavelength grid, inner products and the CSV format."""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

from .errors import DimensionError, ParseError

Weighting = Literal["unit", "trapezoidal"]

DEFAULT_RANGE_UM = (2.5, 14.0)
DEFAULT_POINTS = 1000


def _frozen(values) -> np.ndarray:
    arr = np.array(values, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class WavelengthGrid:
    """Strictly increasing wavelength samples in µm."""

    points: np.ndarray
    spacing_mode: Literal["uniform", "explicit"] = "explicit"

    def __post_init__(self):
        pts = _frozen(self.points)
        if pts.ndim != 1 or pts.size < 2:
            raise DimensionError("a wavelength grid needs at least 2 points")
        if not np.all(np.isfinite(pts)) or np.any(pts <= 0):
            raise ParseError("wavelengths must be finite and positive")
        if np.any(np.diff(pts) <= 0):
            raise ParseError("wavelengths must be strictly increasing")
        object.__setattr__(self, "points", pts)

    @classmethod
    def uniform(cls, start: float = DEFAULT_RANGE_UM[0], stop: float = DEFAULT_RANGE_UM[1],
                n: int = DEFAULT_POINTS) -> "WavelengthGrid":
        return cls(np.linspace(start, stop, n), spacing_mode="uniform")

    def __len__(self) -> int:
        return self.points.size

    def __eq__(self, other) -> bool:
        if not isinstance(other, WavelengthGrid):
            return NotImplemented
        return self.points.shape == other.points.shape and bool(np.all(self.points == other.points))

    def __hash__(self) -> int:
        return hash(self.points.tobytes())

    @property
    def span(self) -> tuple[float, float]:
        return float(self.points[0]), float(self.points[-1])

    def weights(self, weighting: Weighting = "unit") -> np.ndarray:
        """Quadrature weights ``w_j`` so that ``<f|g> = sum_j w_j f_j g_j``."""
        if weighting == "unit":
            return np.ones(self.points.size)
        if weighting == "trapezoidal":
            d = np.diff(self.points)
            w = np.zeros(self.points.size)
            w[:-1] += 0.5 * d
            w[1:] += 0.5 * d
            return w
        raise ValueError(f"unknown weighting {weighting!r}")


@dataclass(frozen=True, eq=False)
class Spectrum:
    grid: WavelengthGrid
    values: np.ndarray

    def __post_init__(self):
        vals = _frozen(self.values)
        if vals.shape != (len(self.grid),):
            raise DimensionError(
                f"spectrum has {vals.size} values but the grid has {len(self.grid)} points")
        if not np.all(np.isfinite(vals)):
            raise ValueError("spectrum values must be finite")
        object.__setattr__(self, "values", vals)


def inner_product(f: Spectrum, g: Spectrum, weighting: Weighting = "unit") -> float:
    if f.grid != g.grid:
        raise DimensionError("spectra live on different grids")
    w = f.grid.weights(weighting)
    return float(np.sum(w * (f.values * g.values)))


def norm(f: Spectrum, weighting: Weighting = "unit") -> float:
    return math.sqrt(max(inner_product(f, f, weighting), 0.0))


def weighted_gram(rows_a: np.ndarray, rows_b: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Matrix of inner products between the rows of two stacked spectra arrays."""
    return (np.asarray(rows_a) * weights) @ np.asarray(rows_b).T


def array_fingerprint(*arrays: np.ndarray, extra: Sequence[str] = ()) -> str:
    """SHA-256 over the raw little-endian bytes of the arrays plus text tags."""
    h = hashlib.sha256()
    for arr in arrays:
        a = np.ascontiguousarray(arr, dtype="<f8")
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    for tag in extra:
        h.update(tag.encode())
        h.update(b"\0")
    return h.hexdigest()


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_spectra_csv(path, grid: WavelengthGrid, spectra: dict[str, np.ndarray]) -> None:
    """Write named spectra as ``wavelength_um,<name1>,...`` columns."""
    names = list(spectra)
    cols = [np.asarray(spectra[n], dtype=np.float64) for n in names]
    for n, c in zip(names, cols):
        if c.shape != (len(grid),):
            raise DimensionError(f"column {n!r} does not match the grid length")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["wavelength_um", *names])
        for j, lam in enumerate(grid.points):
            w.writerow([_fmt(lam), *(_fmt(c[j]) for c in cols)])


def read_spectra_csv(path) -> tuple[WavelengthGrid, dict[str, Spectrum]]:
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ParseError(f"{path}: empty file", row=1)
    header = [h.strip() for h in rows[0]]
    if not header or header[0] != "wavelength_um":
        raise ParseError("header must start with 'wavelength_um'", row=1)
    names = header[1:]
    if len(set(names)) != len(names):
        raise ParseError("duplicate column names", row=1)
    data = np.empty((len(rows) - 1, len(header)))
    for i, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} cells, found {len(row)}", row=i)
        for j, cell in enumerate(row):
            try:
                data[i - 2, j] = float(cell)
            except ValueError:
                raise ParseError(f"non-numeric cell {cell!r}", row=i) from None
    if data.shape[0] < 2:
        raise ParseError("need at least 2 wavelength rows", row=len(rows))
    lam = data[:, 0]
    bad = np.flatnonzero(np.diff(lam) <= 0)
    if bad.size:
        raise ParseError("wavelengths are not strictly increasing", row=int(bad[0]) + 3)
    grid = WavelengthGrid(lam)
    spectra = {n: Spectrum(grid, data[:, j + 1]) for j, n in enumerate(names)}
    return grid, spectra
