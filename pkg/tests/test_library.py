import json

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from specquant.errors import ConfigurationError, DegenerateGasError, SchemaError
from specquant.library import (
    DEFAULT_GASES,
    GasDefinition,
    GasLibrary,
    load_library,
    normalize_rows,
    overlap_matrix,
    synthesize_library,
)
from specquant.spectral import WavelengthGrid, write_spectra_csv


def test_table_norms_and_order(lib):
    norms = dict(zip(lib.names, lib.norms))
    assert norms["N2O"] == 1166.4
    assert norms["HBr"] == 30.5
    assert list(lib.norms) == sorted(lib.norms, reverse=True)
    assert lib.names == tuple(g[0] for g in DEFAULT_GASES)


def test_unit_norm_rows(lib):
    assert_allclose(np.sum(lib.spectra**2, axis=1), 1.0, atol=1e-10)
    n2o = lib.extinction[lib.index("N2O")]
    assert np.linalg.norm(n2o) == pytest.approx(1166.4, rel=1e-12)


def test_deterministic():
    a, b = synthesize_library(5), synthesize_library(5)
    assert_array_equal(a.spectra, b.spectra)
    assert a.fingerprint == b.fingerprint
    assert synthesize_library(6).fingerprint != a.fingerprint


def test_overlap_gate(lib):
    ov = overlap_matrix(lib)
    assert_allclose(ov, ov.T)
    assert_array_equal(np.diag(ov), 1.0)
    off = np.abs(ov - np.eye(lib.k))
    assert off.max() < 0.3
    assert ov[lib.index("CH4"), lib.index("HCl")] >= 0.1


def test_overlap_disjoint_and_single():
    grid = WavelengthGrid([1.0, 2.0, 3.0, 4.0])
    lib2 = GasLibrary(grid, ("a", "b"), [[0.6, 0.8, 0, 0], [0, 0, 1.0, 0]], [2.0, 1.0])
    assert overlap_matrix(lib2)[0, 1] == 0.0
    a = GasDefinition("a", [2.0], [0.01], [1.0], 2.0)
    single = synthesize_library(0, WavelengthGrid.uniform(1.0, 10.0, 50), [a])
    assert_array_equal(overlap_matrix(single), [[1.0]])


def test_custom_profile_errors():
    grid = WavelengthGrid.uniform(1.0, 10.0, 100)
    out = GasDefinition("x", [20.0], [0.01], [1.0], 1.0)
    with pytest.raises(ConfigurationError):
        synthesize_library(0, grid, [out])
    ok = GasDefinition("x", [2.0], [0.01], [1.0], 1.0)
    with pytest.raises(ConfigurationError):
        synthesize_library(0, grid, [ok, ok])
    with pytest.raises(ConfigurationError):
        GasDefinition("y", [2.0], [-0.1], [1.0], 1.0)


def test_normalize_idempotent(lib):
    once, _ = normalize_rows(lib.extinction)
    twice, norms = normalize_rows(once)
    assert_allclose(twice, once, rtol=0, atol=1e-15)
    assert_allclose(norms, 1.0, rtol=1e-14)


def test_export_round_trip(lib, tmp_path):
    lib.export(tmp_path)
    back = load_library(tmp_path)
    assert back.names == lib.names
    assert_allclose(back.norms, lib.norms, rtol=1e-12)
    assert_allclose(back.spectra, lib.spectra, rtol=1e-12, atol=1e-15)


def _write(tmp_path, cols, norms):
    grid = WavelengthGrid([1.0, 2.0, 3.0])
    write_spectra_csv(tmp_path / "library.csv", grid, cols)
    (tmp_path / "library.json").write_text(json.dumps({"norms": norms}))


def test_load_scaled_column(tmp_path):
    shape = np.array([0.6, 0.0, 0.8])
    _write(tmp_path, {"g": 2 * shape, "h": np.array([0.0, 3.0, 0.0])}, {"g": 2.0, "h": 3.0})
    lib = load_library(tmp_path / "library.csv")
    assert lib.names == ("h", "g")
    assert lib.norms[1] == pytest.approx(2.0)
    assert_allclose(lib.spectra[1], shape)


def test_load_zero_column(tmp_path):
    _write(tmp_path, {"g": np.zeros(3)}, {"g": 1.0})
    with pytest.raises(DegenerateGasError):
        load_library(tmp_path)


def test_load_name_mismatch(tmp_path):
    _write(tmp_path, {"g": np.ones(3)}, {"other": 1.0})
    with pytest.raises(SchemaError):
        load_library(tmp_path)
