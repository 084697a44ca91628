import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from numpy.testing import assert_allclose, assert_array_equal
from scipy.integrate import trapezoid

from specquant.errors import DimensionError, ParseError
from specquant.spectral import (
    Spectrum,
    WavelengthGrid,
    inner_product,
    norm,
    read_spectra_csv,
    write_spectra_csv,
)

finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False).filter(
    lambda x: x == 0 or abs(x) > 1e-100)


def spec(values, grid=None):
    values = np.asarray(values, dtype=float)
    return Spectrum(grid or WavelengthGrid(np.arange(1.0, values.size + 1)), values)


class TestGrid:
    def test_default_window(self):
        g = WavelengthGrid.uniform()
        assert len(g) == 1000
        assert g.span == (2.5, 14.0)
        assert g.spacing_mode == "uniform"

    @pytest.mark.parametrize("pts", [[1.0], [2.0, 1.0], [1.0, 1.0], [0.0, 1.0], [1.0, np.nan]])
    def test_invalid(self, pts):
        with pytest.raises((ParseError, DimensionError)):
            WavelengthGrid(pts)

    def test_trapezoid_weights_match_scipy(self):
        g = WavelengthGrid(np.sort(np.random.default_rng(0).uniform(1, 5, 30)))
        f = np.sin(g.points)
        assert_allclose(np.sum(g.weights("trapezoidal") * f), trapezoid(f, g.points), rtol=1e-13)

    def test_immutable(self):
        g = WavelengthGrid.uniform(n=5)
        with pytest.raises(ValueError):
            g.points[0] = 9.0


class TestInnerProduct:
    def test_unit_norm(self):
        v = np.array([3.0, 4.0]) / 5.0
        assert inner_product(spec(v), spec(v)) == pytest.approx(1.0)

    def test_zero(self):
        assert inner_product(spec([0, 0, 0]), spec([1, 2, 3])) == 0.0

    def test_direct_sum(self):
        assert inner_product(spec([1, 2, 3]), spec([1, 1, 1])) == 6.0

    def test_grid_mismatch(self):
        g2 = WavelengthGrid([1.0, 2.0, 4.0])
        with pytest.raises(DimensionError):
            inner_product(spec([1, 2, 3]), spec([1, 2, 3], g2))

    def test_norm_examples(self):
        assert norm(spec([3, 4])) == 5.0
        assert norm(spec([0, 0])) == 0.0

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            Spectrum(WavelengthGrid([1.0, 2.0]), np.ones(3))

    @settings(max_examples=50, deadline=None)
    @given(arrays(float, 12, elements=finite), arrays(float, 12, elements=finite),
           arrays(float, 12, elements=finite), finite,
           st.sampled_from(["unit", "trapezoidal"]))
    def test_bilinear(self, f, g, h, a, weighting):
        grid = WavelengthGrid(np.linspace(1, 3, 12))
        lhs = inner_product(spec(a * f + g, grid), spec(h, grid), weighting)
        rhs = a * inner_product(spec(f, grid), spec(h, grid), weighting) \
            + inner_product(spec(g, grid), spec(h, grid), weighting)
        w = grid.weights(weighting)
        scale = np.sum(w * (np.abs(a * f) + np.abs(g)) * np.abs(h)) + 1e-300
        assert abs(lhs - rhs) <= 1e-12 * scale

    @settings(max_examples=50, deadline=None)
    @given(arrays(float, 9, elements=finite), arrays(float, 9, elements=finite),
           st.sampled_from(["unit", "trapezoidal"]))
    def test_cauchy_schwarz_and_symmetry(self, f, g, weighting):
        grid = WavelengthGrid(np.geomspace(1, 10, 9))
        fs, gs = spec(f, grid), spec(g, grid)
        ip = inner_product(fs, gs, weighting)
        assert ip == inner_product(gs, fs, weighting)
        bound = norm(fs, weighting) * norm(gs, weighting)
        assert abs(ip) <= bound * (1 + 1e-12)


class TestCsv:
    def test_parse_small(self, tmp_path):
        p = tmp_path / "s.csv"
        p.write_text("wavelength_um,A,B\n1.0,0.5,1\n2.0,0.25,2\n3.0,0.125,3\n")
        grid, spectra = read_spectra_csv(p)
        assert len(grid) == 3
        assert list(spectra) == ["A", "B"]
        assert_array_equal(spectra["B"].values, [1, 2, 3])

    @pytest.mark.parametrize("body,row", [
        ("1.0,1\n2.0\n", 3),
        ("1.0,1\n2.0,x\n", 3),
        ("2.0,1\n1.0,2\n", 3),
    ])
    def test_parse_errors_report_row(self, tmp_path, body, row):
        p = tmp_path / "bad.csv"
        p.write_text("wavelength_um,A\n" + body)
        with pytest.raises(ParseError) as exc:
            read_spectra_csv(p)
        assert exc.value.row == row

    @settings(max_examples=30, deadline=None)
    @given(arrays(float, (7, 2), elements=st.floats(allow_nan=False, allow_infinity=False)))
    def test_round_trip_identity(self, tmp_path_factory, values):
        grid = WavelengthGrid(np.geomspace(0.3, 30, 7))
        p = tmp_path_factory.mktemp("rt") / "x.csv"
        write_spectra_csv(p, grid, {"a": values[:, 0], "b": values[:, 1]})
        g2, s = read_spectra_csv(p)
        assert_array_equal(g2.points, grid.points)
        assert_array_equal(s["a"].values, values[:, 0])
        assert_array_equal(s["b"].values, values[:, 1])
