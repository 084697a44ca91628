import csv
import json
import math

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from specquant.errors import ConfigurationError
from specquant.evaluation import (
    ModelSpec,
    PcSweep,
    export_plot_data,
    fit_model,
    fit_saturation,
    fold_indices,
    kfold_evaluate,
    load_result,
    out_of_range_study,
    sweep_pc_count,
    sweep_snr,
    sweep_training_size,
)
from specquant.synth import ConcentrationScheme, NoiseSpec, generate_dataset, load_dataset, save_dataset

UM = 1e-6


@pytest.fixture(scope="module")
def g1(lib):
    return generate_dataset(lib, ConcentrationScheme.group(1), 10_000, noise=NoiseSpec(40), seed=41)


@pytest.fixture(scope="module")
def small(lib):
    return generate_dataset(lib, ConcentrationScheme.group(1), 400, noise=NoiseSpec(30), seed=42)


@pytest.fixture(scope="module")
def g23_30(lib):
    tr = generate_dataset(lib, ConcentrationScheme.group(2), 2000, noise=NoiseSpec(30), seed=43)
    te = generate_dataset(lib, ConcentrationScheme.group(3), 2000, noise=NoiseSpec(30), seed=44)
    return tr, te


def test_fold_partition():
    folds = fold_indices(1003, 10, seed=3)
    assert [f.size for f in folds] == [100] * 9 + [103]
    assert_array_equal(np.sort(np.concatenate(folds)), np.arange(1003))
    with pytest.raises(ConfigurationError):
        fold_indices(5, 10, 0)


def test_truth_oracle(small):
    r = kfold_evaluate(ModelSpec("truth"), small)
    assert np.all(r.per_gas_rmse == 0) and r.mean_rmse == 0
    assert np.all(r.per_gas_mape == 0)
    assert r.fold_count == 10 and r.per_fold_rmse.shape == (10, 9)


def test_mean_predictor_is_random_guess(g1):
    r = kfold_evaluate(ModelSpec("mean"), g1)
    np.testing.assert_allclose(r.per_gas_rmse, r.random_guess_rmse, rtol=0.02)
    np.testing.assert_allclose(r.per_gas_rmse, 10 * UM / math.sqrt(12), rtol=0.02)


def test_mape_excludes_zeros(lib):
    d = generate_dataset(lib, ConcentrationScheme.group(2), 300, noise=NoiseSpec(40), seed=7)
    r = kfold_evaluate(ModelSpec("lr"), d)
    assert_array_equal(r.mape_excluded, (d.concentrations == 0).sum(axis=0))
    assert np.all(r.per_gas_mape >= 0)


def test_too_few_samples(small):
    with pytest.raises(ConfigurationError):
        kfold_evaluate(ModelSpec("lr"), small.subset(np.arange(5)))


def test_no_leakage(small, tmp_path):
    """A model refit from a file holding only the training rows is identical."""
    r = kfold_evaluate(ModelSpec("lr"), small, folds=5, seed=9)
    folds = fold_indices(small.n, 5, 9)
    train = np.concatenate(folds[1:])
    save_dataset(small.subset(train), tmp_path / "train.bin")
    model = fit_model(ModelSpec("lr"), load_dataset(tmp_path / "train.bin"))
    assert model.fingerprint == r.fold_fingerprints[0]


def test_thread_determinism(small, lib):
    for spec in (ModelSpec("lr"), ModelSpec("tf"), ModelSpec("plsr", n_components=4)):
        a = kfold_evaluate(spec, small, library=lib, threads=1)
        b = kfold_evaluate(spec, small, library=lib, threads=8)
        assert_array_equal(a.predictions, b.predictions)
        assert a.fold_fingerprints == b.fold_fingerprints


def test_external_hook(small, tmp_path):
    path = tmp_path / "pred.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(small.gas_names)
        w.writerows(small.concentrations.tolist())
    r = kfold_evaluate(ModelSpec("external", external_path=str(path)), small)
    assert r.mean_rmse == 0.0


def test_pc_sweep_noiseless(lib):
    d = generate_dataset(lib, ConcentrationScheme.group(1), 300, seed=8)
    sw = sweep_pc_count(d, range(1, 13), folds=5)
    assert np.all(sw.rmse[8] / UM <= 1e-8)
    assert np.any(sw.rmse[:8] / UM > 1e-4)
    assert_array_equal(sw.delta[1:], sw.rmse[1:] - sw.rmse[:-1])
    with pytest.raises(ConfigurationError):
        sweep_pc_count(d, [0, 1])


def test_training_size_sweep(small, lib):
    specs = [ModelSpec("lr"), ModelSpec("tf", known_b=True, recalibrate=False)]
    sw = sweep_training_size(small, specs, [5, 10, 11, 50, 200], library=lib)
    lr = sw.rmse[0, 0].mean(axis=1)
    assert np.isnan(lr[:2]).all() and np.isfinite(lr[2:]).all()
    assert np.isfinite(sw.rmse[0, 1]).all()
    with pytest.raises(ConfigurationError):
        sweep_training_size(small, specs, [10, 5000])


def test_snr_sweep_shapes(lib):
    ds = [generate_dataset(lib, ConcentrationScheme.group(1), 100, noise=NoiseSpec(s), seed=s)
          for s in (20, 40)]
    sw = sweep_snr(ds, [ModelSpec("lr"), ModelSpec("mean")], folds=4)
    assert sw.rmse.shape == (2, 2, 9)
    assert sw.mean_rmse[0, 1] < sw.mean_rmse[0, 0]


class TestSaturation:
    def test_recovers_exact_curve(self):
        c = np.geomspace(1e-11, 1e-3, 25)
        fit = fit_saturation(c, np.maximum(0.02, 1e-9 / c))
        assert fit.gamma == pytest.approx(0.02, rel=1e-9)
        assert fit.c_th == pytest.approx(1e-9 / 0.02, rel=1e-9)
        assert fit.residual < 1e-12

    def test_no_plateau(self):
        c = np.geomspace(1e-9, 1e-6, 10)
        fit = fit_saturation(c, 1e-12 / c)
        assert fit.gamma <= 1e-6 and fit.c_th > 0

    def test_noiseless_tf_no_plateau(self, lib):
        tr = generate_dataset(lib, ConcentrationScheme.group(2), 500, seed=45)
        te = generate_dataset(lib, ConcentrationScheme.group(3), 500, seed=46)
        spec = ModelSpec("tf", known_b=True, tf_noise="zero", recalibrate=False)
        st = out_of_range_study(tr, te, [spec], n_bins=12, library=lib, min_count=1)
        assert np.nanmax(st.median_out) < 1e-6
        assert all(f.gamma <= 1e-6 for f in st.fits["tf"].values())

    def test_empty_bins_flagged(self, g23_30, lib):
        tr, te = g23_30
        edges = np.geomspace(1e-13, 1e-2, 12)
        st = out_of_range_study(tr, te, [ModelSpec("tf")], library=lib, edges=edges)
        flagged = st.empty_bins()
        assert ("tf", "N2O", 0, "out") in flagged
        assert ("tf", "N2O", 0, "in") in flagged

    @pytest.mark.xfail(strict=True, reason="finer bins give noisier medians; the RMS log "
                                            "residual grows from 10 to 30 bins (ledgered)")
    def test_residual_drops_with_more_bins(self, g23_30, lib):
        tr, te = g23_30
        r = {nb: np.mean([f.residual for f in out_of_range_study(
            tr, te, [ModelSpec("tf")], n_bins=nb, library=lib).fits["tf"].values()])
            for nb in (10, 30)}
        assert r[30] < r[10]

    def test_gray_box(self, g23_30, lib):
        tr, te = g23_30
        st = out_of_range_study(tr, te, [ModelSpec("tf")], library=lib)
        box = st.gray_box("tf", "N2O")
        gamma = st.fits["tf"]["N2O"].gamma
        assert box["gamma_low"] <= gamma <= box["gamma_high"]
        assert box["c_th_q20"] <= box["c_th_q80"]


class TestExport:
    def test_pc_sweep_schema_and_determinism(self, small, tmp_path):
        sw = sweep_pc_count(small, range(1, 6), folds=4)
        files = export_plot_data(sw, tmp_path / "a")
        again = export_plot_data(sw, tmp_path / "b")
        for f, g in zip(files, again):
            assert f.read_bytes() == g.read_bytes()
        header = (tmp_path / "a" / "pc_sweep_rmse.csv").read_text().splitlines()[0]
        assert header == "model,gas,n_components,rmse"
        manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
        csvs = [p for p in (tmp_path / "a").iterdir() if p.suffix == ".csv"]
        assert len(manifest["files"]) == len(csvs)

    def test_result_round_trip(self, small, g23_30, lib, tmp_path):
        results = [kfold_evaluate(ModelSpec("lr"), small, folds=4),
                   sweep_pc_count(small, range(1, 4), folds=4),
                   out_of_range_study(*g23_30, [ModelSpec("tf")], folds=3, library=lib)]
        for i, res in enumerate(results):
            d1, d2 = tmp_path / f"r{i}", tmp_path / f"s{i}"
            export_plot_data(res, d1)
            export_plot_data(load_result(d1 / "result.json"), d2)
            for f in sorted(d1.iterdir()):
                assert f.read_bytes() == (d2 / f.name).read_bytes(), f.name

    def test_pc_sweep_type(self, small):
        assert isinstance(sweep_pc_count(small, [1, 2], folds=3), PcSweep)
