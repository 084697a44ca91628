"""Mixture sampling, the Beer-Lambert forward model with source RIN, and the
binary dataset container."""

from __future__ import annotations

import hashlib
import json
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal, Optional

import numpy as np

from .errors import (
    ConfigurationError,
    DimensionError,
    DomainError,
    FingerprintMismatchError,
    FormatError,
    TruncationError,
    VersionMismatchError,
)
from .library import GasLibrary
from .spectral import Spectrum, WavelengthGrid

LN10 = math.log(10.0)
DEFAULT_PATH_LENGTH_CM = 12.0
MICROMOLAR = 1e-6

FORMAT_MAGIC = b"SPQDSET\x00"
FORMAT_VERSION = 1

# spawn-key tags keep the concentration and noise streams independent
_CONC_STREAM = 0xC0C
_NOISE_STREAM = 0x401


@dataclass(frozen=True)
class NoiseSpec:
    """Relative intensity noise of the source, ``sigma = 10**(-snr_db/10)``."""

    snr_db: float

    def __post_init__(self):
        if not (self.snr_db > 0 and math.isfinite(self.snr_db)):
            raise ConfigurationError("snr_db must be a positive finite number")

    @property
    def sigma(self) -> float:
        return 10.0 ** (-self.snr_db / 10.0)

    @classmethod
    def from_sigma(cls, sigma: float) -> "NoiseSpec":
        if not 0 < sigma < 1:
            raise ConfigurationError("sigma must lie in (0, 1)")
        return cls(-10.0 * math.log10(sigma))


@dataclass(frozen=True)
class ConcentrationScheme:
    mode: Literal["uniform", "log-uniform"]
    low: float
    high: float
    presence_prob: float = 1.0

    def __post_init__(self):
        if self.mode not in ("uniform", "log-uniform"):
            raise ConfigurationError(f"unknown concentration mode {self.mode!r}")
        if not 0 < self.low < self.high:
            raise ConfigurationError("concentration bounds must satisfy 0 < low < high")
        if not 0 < self.presence_prob <= 1:
            raise ConfigurationError("presence_prob must lie in (0, 1]")

    @classmethod
    def group(cls, number: int, group3_high: float = 1e-3) -> "ConcentrationScheme":
        """Presets for the three dataset groups (concentrations in M)."""
        if number == 1:
            return cls("uniform", float(np.finfo(float).eps), 10e-6, 1.0)
        if number == 2:
            return cls("log-uniform", 100e-12, 10e-6, 0.5)
        if number == 3:
            return cls("log-uniform", 10e-12, group3_high, 0.5)
        raise ConfigurationError(f"unknown dataset group {number}")


def _row_rng(seed: int, stream: int, index: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence(int(seed) & (2**63 - 1), spawn_key=(stream, int(index))))


def _concentration_row(scheme: ConcentrationScheme, k: int, seed: int, i: int) -> np.ndarray:
    # draws are (presence, value) pairs per gas so column k never depends on K
    u = _row_rng(seed, _CONC_STREAM, i).random(2 * k).reshape(k, 2)
    if scheme.mode == "uniform":
        c = scheme.low + (scheme.high - scheme.low) * u[:, 1]
    else:
        lo, hi = math.log10(scheme.low), math.log10(scheme.high)
        c = 10.0 ** (lo + (hi - lo) * u[:, 1])
    c[u[:, 0] >= scheme.presence_prob] = 0.0
    return c


def sample_concentrations(scheme: ConcentrationScheme, n: int, k: int, seed: int,
                          start: int = 0) -> np.ndarray:
    """N x K molar concentrations; entry (i, k) depends only on (seed, i, k)."""
    if n < 1 or k < 1:
        raise ConfigurationError("n and k must be at least 1")
    return np.stack([_concentration_row(scheme, k, seed, i) for i in range(start, start + n)])


def noiseless_absorbance(lib: GasLibrary, concentrations: np.ndarray, b: float) -> np.ndarray:
    """``A0 = sum_k b c_k ||eps_k|| eps_hat_k`` for each row of ``concentrations``."""
    c = np.asarray(concentrations, dtype=np.float64)
    return (b * c * lib.norms) @ lib.spectra


def rin_noise(m: int, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Absorbance noise ``-log10(1 + rho)`` with ``rho ~ N(0, sigma)``.

    Draws with ``1 + rho <= 0`` are redrawn so the logarithm stays defined.
    """
    rho = sigma * rng.standard_normal(m)
    bad = rho <= -1.0
    while bad.any():
        rho[bad] = sigma * rng.standard_normal(int(bad.sum()))
        bad = rho <= -1.0
    return -np.log1p(rho) / LN10


def forward_spectrum(lib: GasLibrary, c, b: float = DEFAULT_PATH_LENGTH_CM,
                     noise: Optional[NoiseSpec] = None, noise_seed: int = 0) -> Spectrum:
    c = np.asarray(c, dtype=np.float64)
    if c.shape != (lib.k,):
        raise DimensionError(f"expected {lib.k} concentrations, got shape {c.shape}")
    if np.any(c < 0) or not np.all(np.isfinite(c)):
        raise DomainError("concentrations must be finite and non-negative")
    if not b > 0:
        raise DomainError("path length must be positive")
    a = noiseless_absorbance(lib, c, b)
    if noise is not None:
        a = a + rin_noise(len(lib.grid), noise.sigma, np.random.default_rng(noise_seed))
    return Spectrum(lib.grid, a)


@dataclass(frozen=True, eq=False)
class SpectraDataset:
    grid: WavelengthGrid
    absorbances: np.ndarray
    concentrations: np.ndarray
    path_length_b: float
    noise: Optional[NoiseSpec]
    library_fingerprint: str
    seed: int
    gas_names: tuple[str, ...]
    scheme: Optional[ConcentrationScheme] = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        a = np.array(self.absorbances, dtype=np.float64, ndmin=2)
        c = np.array(self.concentrations, dtype=np.float64, ndmin=2)
        if a.shape[1] != len(self.grid):
            raise DimensionError("absorbance width does not match the grid")
        if c.shape != (a.shape[0], len(self.gas_names)):
            raise DimensionError("concentration matrix shape is inconsistent")
        if np.any(c < 0):
            raise DomainError("concentrations must be non-negative")
        a.setflags(write=False)
        c.setflags(write=False)
        object.__setattr__(self, "absorbances", a)
        object.__setattr__(self, "concentrations", c)
        object.__setattr__(self, "gas_names", tuple(self.gas_names))

    @property
    def n(self) -> int:
        return self.absorbances.shape[0]

    @property
    def k(self) -> int:
        return len(self.gas_names)

    def subset(self, rows) -> "SpectraDataset":
        rows = np.asarray(rows)
        return SpectraDataset(self.grid, self.absorbances[rows], self.concentrations[rows],
                              self.path_length_b, self.noise, self.library_fingerprint,
                              self.seed, self.gas_names, self.scheme,
                              {**self.extra, "parent_rows": int(self.n)})

    def describe(self) -> dict:
        return {
            "n": self.n,
            "k": self.k,
            "m": len(self.grid),
            "seed": self.seed,
            "path_length_b": self.path_length_b,
            "snr_db": None if self.noise is None else self.noise.snr_db,
            "scheme": None if self.scheme is None else asdict(self.scheme),
            "library_fingerprint": self.library_fingerprint,
        }


def _chunks(n: int, threads: int) -> list[tuple[int, int]]:
    size = max(1, -(-n // max(1, threads * 4)))
    return [(a, min(n, a + size)) for a in range(0, n, size)]


def generate_dataset(lib: GasLibrary, scheme: ConcentrationScheme, n: int,
                     b: float = DEFAULT_PATH_LENGTH_CM, noise: Optional[NoiseSpec] = None,
                     seed: int = 0, threads: int = 1) -> SpectraDataset:
    """Draw ``n`` mixtures and push them through the forward model.

    Each row has its own RNG streams derived from ``(seed, row)``, so the
    result is identical for any ``threads`` value.
    """
    if n < 1:
        raise ConfigurationError("n must be at least 1")
    if not b > 0:
        raise DomainError("path length must be positive")
    m = len(lib.grid)
    absorb = np.empty((n, m))
    conc = np.empty((n, lib.k))

    def work(bounds):
        lo, hi = bounds
        c = sample_concentrations(scheme, hi - lo, lib.k, seed, start=lo)
        a = noiseless_absorbance(lib, c, b)
        if noise is not None:
            sigma = noise.sigma
            for r, i in enumerate(range(lo, hi)):
                a[r] += rin_noise(m, sigma, _row_rng(seed, _NOISE_STREAM, i))
        absorb[lo:hi] = a
        conc[lo:hi] = c

    chunks = _chunks(n, threads)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(work, chunks))
    else:
        for ch in chunks:
            work(ch)
    return SpectraDataset(lib.grid, absorb, conc, float(b), noise, lib.fingerprint, int(seed),
                          lib.names, scheme)


def _header(ds: SpectraDataset, payload_digest: str) -> dict:
    return {
        "format": "specquant-dataset",
        "version": FORMAT_VERSION,
        "n": ds.n,
        "m": len(ds.grid),
        "k": ds.k,
        "dtype": "<f8",
        "order": "row-major; absorbances then concentrations",
        "seed": ds.seed,
        "path_length_b": ds.path_length_b,
        "noise": None if ds.noise is None else {"snr_db": ds.noise.snr_db, "sigma": ds.noise.sigma},
        "scheme": None if ds.scheme is None else asdict(ds.scheme),
        "library_fingerprint": ds.library_fingerprint,
        "gas_names": list(ds.gas_names),
        "grid_um": [float(x) for x in ds.grid.points],
        "payload_sha256": payload_digest,
        "extra": ds.extra,
    }


def save_dataset(ds: SpectraDataset, path) -> None:
    """Magic, uint64 header length, JSON header, then little-endian float64 payload."""
    payload = (np.ascontiguousarray(ds.absorbances, dtype="<f8").tobytes()
               + np.ascontiguousarray(ds.concentrations, dtype="<f8").tobytes())
    header = json.dumps(_header(ds, hashlib.sha256(payload).hexdigest()), sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(FORMAT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(payload)


def load_dataset(path, library: Optional[GasLibrary] = None) -> SpectraDataset:
    blob = Path(path).read_bytes()
    if len(blob) < len(FORMAT_MAGIC) + 8:
        raise TruncationError(f"{path}: file too short for a dataset header")
    if blob[: len(FORMAT_MAGIC)] != FORMAT_MAGIC:
        raise FormatError(f"{path}: not a specquant dataset")
    (hlen,) = struct.unpack("<Q", blob[len(FORMAT_MAGIC): len(FORMAT_MAGIC) + 8])
    start = len(FORMAT_MAGIC) + 8
    if len(blob) < start + hlen:
        raise TruncationError(f"{path}: header truncated")
    try:
        header = json.loads(blob[start: start + hlen])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable header ({exc})") from None
    if header.get("format") != "specquant-dataset":
        raise FormatError(f"{path}: not a specquant dataset")
    if header.get("version") != FORMAT_VERSION:
        raise VersionMismatchError(
            f"{path}: format version {header.get('version')} (expected {FORMAT_VERSION})")
    n, m, k = int(header["n"]), int(header["m"]), int(header["k"])
    if len(header["grid_um"]) != m or len(header["gas_names"]) != k:
        raise DimensionError(f"{path}: header dimensions disagree with grid/gas lists")
    payload = blob[start + hlen:]
    row_bytes = (m + k) * 8
    if len(payload) != n * row_bytes:
        if len(payload) % row_bytes == 0:
            raise DimensionError(
                f"{path}: header declares {n} rows but the payload holds {len(payload) // row_bytes}")
        raise TruncationError(
            f"{path}: payload has {len(payload)} bytes, expected {n * row_bytes}")
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise FormatError(f"{path}: payload checksum mismatch")
    values = np.frombuffer(payload, dtype="<f8")
    absorb = values[: n * m].reshape(n, m).astype(np.float64)
    conc = values[n * m:].reshape(n, k).astype(np.float64)
    if library is not None and library.fingerprint != header["library_fingerprint"]:
        raise FingerprintMismatchError(f"{path}: dataset was generated from a different library")
    noise = None if header["noise"] is None else NoiseSpec(header["noise"]["snr_db"])
    scheme = None if header["scheme"] is None else ConcentrationScheme(**header["scheme"])
    return SpectraDataset(WavelengthGrid(header["grid_um"]), absorb, conc,
                          float(header["path_length_b"]), noise, header["library_fingerprint"],
                          int(header["seed"]), tuple(header["gas_names"]), scheme,
                          header.get("extra") or {})
