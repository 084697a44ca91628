"""Normalized molar extinction spectra for the mixture constituents.

The default profile mimics a nine-gas mid-infrared mixture.  Line shapes are
seeded Lorentzian sets (real line lists are not shipped); the magnitudes
``||eps_k||`` are the published extinction norms in M^-1 cm^-1.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, DegenerateGasError, SchemaError
from .spectral import WavelengthGrid, array_fingerprint, read_spectra_csv, write_spectra_csv

# name, norm (M^-1 cm^-1), band centre (µm), band spread (µm)
DEFAULT_GASES: tuple[tuple[str, float, float, float], ...] = (
    ("N2O", 1166.4, 7.80, 0.12),
    ("CO", 569.1, 4.70, 0.10),
    ("H2O", 371.2, 6.30, 0.15),
    ("NO", 219.7, 5.30, 0.10),
    ("CH4", 162.0, 3.30, 0.08),
    ("HCl", 160.7, 3.42, 0.08),
    ("HF", 126.9, 2.80, 0.07),
    ("C2H6", 103.1, 12.20, 0.15),
    ("HBr", 30.5, 3.90, 0.07),
)

COUPLED_PAIR = ("CH4", "HCl")

MAX_DEFAULT_OVERLAP = 0.3
_MIN_PAIR_OVERLAP = 0.1
_EXCLUSIVE_FRACTION = 0.6
_MAX_REDRAWS = 200


@dataclass(frozen=True)
class GasDefinition:
    name: str
    line_centers: Sequence[float]
    line_widths: Sequence[float]
    line_strengths: Sequence[float]
    target_norm: float

    def __post_init__(self):
        n = len(self.line_centers)
        if n < 1 or len(self.line_widths) != n or len(self.line_strengths) != n:
            raise ConfigurationError(f"{self.name}: line lists must have equal length >= 1")
        if min(self.line_widths) <= 0 or min(self.line_strengths) <= 0:
            raise ConfigurationError(f"{self.name}: line widths and strengths must be positive")
        if not self.target_norm > 0:
            raise ConfigurationError(f"{self.name}: target norm must be positive")

    def evaluate(self, grid: WavelengthGrid) -> np.ndarray:
        """Sum of peak-normalized Lorentzians on the grid (unnormalized)."""
        lam = grid.points[:, None]
        c = np.asarray(self.line_centers, dtype=float)[None, :]
        w = np.asarray(self.line_widths, dtype=float)[None, :]
        s = np.asarray(self.line_strengths, dtype=float)
        return (w**2 / ((lam - c) ** 2 + w**2)) @ s


@dataclass(frozen=True, eq=False)
class GasLibrary:
    """K unit-norm extinction spectra (rows) with their norms, sorted by norm."""

    grid: WavelengthGrid
    names: tuple[str, ...]
    spectra: np.ndarray
    norms: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        spectra = np.array(self.spectra, dtype=np.float64, ndmin=2)
        norms = np.array(self.norms, dtype=np.float64).ravel()
        names = tuple(self.names)
        if spectra.shape != (len(names), len(self.grid)) or norms.shape != (len(names),):
            raise SchemaError("library dimensions are inconsistent")
        if len(set(names)) != len(names):
            raise ConfigurationError("gas names must be unique")
        order = np.argsort(-norms, kind="stable")
        spectra, norms = spectra[order], norms[order]
        names = tuple(names[i] for i in order)
        spectra.setflags(write=False)
        norms.setflags(write=False)
        object.__setattr__(self, "spectra", spectra)
        object.__setattr__(self, "norms", norms)
        object.__setattr__(self, "names", names)

    @property
    def k(self) -> int:
        return len(self.names)

    @property
    def fingerprint(self) -> str:
        return array_fingerprint(self.grid.points, self.spectra, self.norms, extra=self.names)

    @property
    def extinction(self) -> np.ndarray:
        """Unnormalized spectra ``||eps_k|| * eps_hat_k``, shape (K, M)."""
        return self.norms[:, None] * self.spectra

    def index(self, name: str) -> int:
        return self.names.index(name)

    def export(self, directory) -> Path:
        """Write ``library.csv`` (unnormalized spectra) plus the ``library.json`` sidecar."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        csv_path = directory / "library.csv"
        write_spectra_csv(csv_path, self.grid, dict(zip(self.names, self.extinction)))
        sidecar = {
            "norms": {n: float(v) for n, v in zip(self.names, self.norms)},
            "fingerprint": self.fingerprint,
            "metadata": self.metadata,
        }
        (directory / "library.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
        return csv_path


def normalize_rows(raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    raw = np.atleast_2d(np.asarray(raw, dtype=np.float64))
    norms = np.sqrt(np.einsum("ij,ij->i", raw, raw))
    if np.any(norms == 0):
        raise DegenerateGasError("zero-norm extinction spectrum")
    return raw / norms[:, None], norms


def _draw_default(rng: np.random.Generator, grid: WavelengthGrid) -> list[GasDefinition]:
    lo, hi = grid.span
    gases = []
    for name, target, centre, spread in DEFAULT_GASES:
        n_lines = int(rng.integers(5, 41))
        centers = np.clip(centre + spread * rng.standard_normal(n_lines), lo, hi)
        widths = rng.uniform(0.006, 0.02, n_lines)
        strengths = rng.lognormal(0.0, 0.7, n_lines)
        gases.append(GasDefinition(name, centers.tolist(), widths.tolist(),
                                   strengths.tolist(), target))
    return gases


def _exclusive_enough(gases: Sequence[GasDefinition]) -> bool:
    for g in gases:
        c = np.asarray(g.line_centers)
        s = np.asarray(g.line_strengths)
        for h in gases:
            if h is g:
                continue
            j = int(np.argmax(h.line_strengths))
            hc, hw = h.line_centers[j], h.line_widths[j]
            inside = np.abs(c - hc) <= 3 * hw
            if s[~inside].sum() < _EXCLUSIVE_FRACTION * s.sum():
                return False
    return True


def _build(grid: WavelengthGrid, gases: Sequence[GasDefinition], metadata: dict) -> GasLibrary:
    lo, hi = grid.span
    names = [g.name for g in gases]
    if len(set(names)) != len(names):
        raise ConfigurationError("duplicate gas names in profile")
    for g in gases:
        if min(g.line_centers) < lo or max(g.line_centers) > hi:
            raise ConfigurationError(f"{g.name}: line centre outside the grid span {lo}-{hi} µm")
    raw = np.stack([g.evaluate(grid) for g in gases])
    shapes, _ = normalize_rows(raw)
    return GasLibrary(grid, tuple(names), shapes, [g.target_norm for g in gases], metadata)


def synthesize_library(seed: int = 0, grid: WavelengthGrid | None = None,
                       profile: str | Sequence[GasDefinition] = "default") -> GasLibrary:
    """Build a library from Lorentzian line sets.

    With the default profile, line sets are redrawn from the same seeded
    stream until every gas keeps most of its strength away from the other
    gases' strongest lines, all cross-overlaps stay below 0.3, and the
    CH4/HCl analogs overlap enough to couple.
    """
    grid = grid or WavelengthGrid.uniform()
    if not isinstance(profile, str):
        return _build(grid, list(profile), {"profile": "custom", "seed": int(seed)})
    if profile != "default":
        raise ConfigurationError(f"unknown library profile {profile!r}")

    rng = np.random.default_rng(np.random.SeedSequence(int(seed) & (2**63 - 1), spawn_key=(0x11B,)))
    for attempt in range(_MAX_REDRAWS):
        gases = _draw_default(rng, grid)
        if not _exclusive_enough(gases):
            continue
        lib = _build(grid, gases, {"profile": "default", "seed": int(seed), "draws": attempt + 1})
        ov = overlap_matrix(lib)
        off = np.abs(ov - np.eye(lib.k))
        pair = abs(ov[lib.index(COUPLED_PAIR[0]), lib.index(COUPLED_PAIR[1])])
        if off.max() < MAX_DEFAULT_OVERLAP and pair >= _MIN_PAIR_OVERLAP:
            return lib
    raise ConfigurationError("could not draw a default library meeting the overlap constraints")


def overlap_matrix(lib: GasLibrary) -> np.ndarray:
    """``<eps_hat_j|eps_hat_k>`` for all gas pairs (unit weighting)."""
    ov = lib.spectra @ lib.spectra.T
    ov = 0.5 * (ov + ov.T)
    np.fill_diagonal(ov, 1.0)
    return ov


def load_library(path) -> GasLibrary:
    """Load ``library.csv`` + ``library.json`` (a directory or the CSV path).

    Columns are normalized on load and their raw norm is recorded.  A column
    that is already unit-norm takes its magnitude from the sidecar instead,
    which is how pre-normalized shape files are ingested.
    """
    path = Path(path)
    csv_path = path / "library.csv" if path.is_dir() else path
    json_path = csv_path.with_suffix(".json")
    if not json_path.exists():
        raise SchemaError(f"missing sidecar metadata {json_path}")
    sidecar = json.loads(json_path.read_text())
    meta_norms = sidecar.get("norms")
    if not isinstance(meta_norms, dict):
        raise SchemaError("sidecar must contain a 'norms' mapping")
    grid, spectra = read_spectra_csv(csv_path)
    if set(meta_norms) != set(spectra):
        raise SchemaError(
            f"sidecar names {sorted(meta_norms)} do not match CSV columns {sorted(spectra)}")
    names = list(spectra)
    raw = np.stack([spectra[n].values for n in names])
    zero = [n for n, row in zip(names, raw) if not np.any(row)]
    if zero:
        raise DegenerateGasError(f"zero-norm column(s): {', '.join(zero)}")
    shapes, norms = normalize_rows(raw)
    for i, n in enumerate(names):
        if abs(norms[i] - 1.0) < 1e-9 and abs(float(meta_norms[n]) - 1.0) > 1e-9:
            norms[i] = float(meta_norms[n])
    metadata = dict(sidecar.get("metadata") or {})
    metadata["source"] = str(csv_path)
    return GasLibrary(grid, tuple(names), shapes, norms, metadata)
