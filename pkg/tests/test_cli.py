import json
import os

import numpy as np
import pytest

from specquant.cli import build_parser, main
from specquant.evaluation import RESULT_TYPES
from specquant.synth import load_dataset


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert run("gen-library", "--seed", 7, "--out", d / "lib") == 0
    assert run("gen-dataset", "--library", d / "lib", "--group", 1, "--snr-db", 40, "--n", 300,
               "--seed", 1, "--out", d / "g1.bin") == 0
    return d


def test_gen_library_reproducible(tmp_path):
    for _ in range(2):
        assert run("gen-library", "--seed", 7, "--out", tmp_path / "lib") == 0
    first = {p.name: p.read_bytes() for p in (tmp_path / "lib").iterdir()}
    assert run("gen-library", "--seed", 7, "--out", tmp_path / "lib") == 0
    assert first == {p.name: p.read_bytes() for p in (tmp_path / "lib").iterdir()}
    assert run("gen-library", "--seed", 7, "--out", tmp_path / "other") == 0
    for name in ("library.csv", "library.json"):
        assert (tmp_path / "other" / name).read_bytes() == first[name]


def test_underdetermined_fit(work, capsys):
    assert run("gen-dataset", "--library", work / "lib", "--n", 5, "--out", work / "tiny.bin") == 0
    code = run("fit", "--model", "lr", "--components", 9, "--dataset", work / "tiny.bin",
               "--out", work / "m")
    assert code == 1
    err = capsys.readouterr().err
    assert err.startswith("ERROR[underdetermined]:")


def test_pipeline_smoke(work):
    assert run("fit", "--model", "tf", "--library", work / "lib", "--dataset", work / "g1.bin",
               "--out", work / "tf") == 0
    assert run("predict", "--model-dir", work / "tf", "--dataset", work / "g1.bin",
               "--out", work / "pred.csv") == 0
    pred = np.loadtxt(work / "pred.csv", delimiter=",", skiprows=1)
    truth = load_dataset(work / "g1.bin").concentrations
    assert np.sqrt(np.mean((pred - truth) ** 2)) < 0.1e-6
    assert run("evaluate", "--model", "tf", "--library", work / "lib", "--dataset",
               work / "g1.bin", "--out", work / "ev") == 0
    lines = (work / "ev" / "eval_summary.csv").read_text().splitlines()
    assert lines[0] == "model,gas,fold,rmse_uM,mape,random_guess_rmse_uM"
    assert len(lines) == 10
    cfg = json.loads((work / "ev" / "config.json").read_text())
    assert cfg["model"] == "tf" and cfg["folds"] == 10 and cfg["seed"] == 0


@pytest.mark.parametrize("argv", [
    ["fit-pca", "--flavor", "pca", "--components", 5],
    ["sweep", "pcs", "--l-range", "1-10", "--folds", 3],
    ["sweep", "train-size", "--models", "lr,mean", "--sizes", "20,50,100"],
    ["sweep", "snr", "--models", "lr", "--folds", 3],
])
def test_subcommands_write_bundles(work, argv):
    out = work / ("out_" + "_".join(str(a) for a in argv[:2]))
    assert run(*argv, "--dataset", work / "g1.bin", "--out", out) == 0
    assert (out / "config.json").exists()
    if argv[0] == "sweep":
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["result_type"] in RESULT_TYPES


def test_out_of_range_and_noise(work):
    for g, seed in ((2, 3), (3, 4)):
        assert run("gen-dataset", "--library", work / "lib", "--group", g, "--snr-db", 30,
                   "--n", 300, "--seed", seed, "--out", work / f"g{g}.bin") == 0
    assert run("out-of-range", "--train", work / "g2.bin", "--test", work / "g3.bin",
               "--library", work / "lib", "--bins", 8, "--folds", 3, "--out", work / "oor") == 0
    assert (work / "oor" / "out_of_range_saturation.csv").exists()
    assert run("fit", "--model", "tf", "--b-mode", "known", "--noise-mode", "zero",
               "--no-recalibrate", "--library", work / "lib", "--dataset", work / "g2.bin",
               "--out", work / "tf0") == 0
    assert run("noise-estimate", "--model-dir", work / "tf0", "--dataset", work / "g2.bin",
               "--out", work / "nz") == 0
    power = json.loads((work / "nz" / "noise.json").read_text())["mean_power"]
    sigma = 10 ** -3
    assert power == pytest.approx(1000 * sigma**2 / np.log(10) ** 2, rel=0.1)


def test_export_reproduces(work):
    assert run("sweep", "pcs", "--dataset", work / "g1.bin", "--l-range", "1-4", "--folds", 3,
               "--out", work / "sw") == 0
    assert run("export", "--result", work / "sw" / "result.json", "--out", work / "sw2") == 0
    for name in ("pc_sweep_rmse.csv", "pc_sweep_delta.csv", "manifest.json"):
        assert (work / "sw" / name).read_bytes() == (work / "sw2" / name).read_bytes()


def test_thread_count_does_not_change_output(work):
    for t in (1, 8):
        assert run("gen-dataset", "--library", work / "lib", "--group", 2, "--snr-db", 20,
                   "--n", 200, "--seed", 5, "--threads", t, "--out", work / f"t{t}.bin") == 0
        assert run("evaluate", "--model", "lr", "--dataset", work / f"t{t}.bin", "--threads", t,
                   "--out", work / f"e{t}") == 0
    assert (work / "t1.bin").read_bytes() == (work / "t8.bin").read_bytes()
    for name in ("eval_summary.csv", "eval_fold_rmse.csv", "predictions.csv"):
        assert (work / "e1" / name).read_bytes() == (work / "e8" / name).read_bytes()


def test_env_thread_fallback(work, monkeypatch):
    monkeypatch.setenv("SPECQUANT_THREADS", "3")
    assert run("gen-dataset", "--library", work / "lib", "--n", 10, "--out", work / "env.bin") == 0
    cfg = json.loads((work / "env.bin.config.json").read_text())
    assert cfg["threads"] == 3
    monkeypatch.setenv("SPECQUANT_THREADS", "many")
    assert run("gen-dataset", "--library", work / "lib", "--n", 10, "--out", work / "env.bin") == 1


def test_numerical_error_exit_code(work, tmp_path, capsys):
    lib = (work / "lib" / "library.csv").read_text().splitlines()
    rows = [line.split(",")[:2] for line in lib]
    rows[0] = ["wavelength_um", "a", "b"]
    text = "\n".join(",".join(r[:2] + [r[1]]) if i else "wavelength_um,a,b"
                     for i, r in enumerate(rows)) + "\n"
    (tmp_path / "library.csv").write_text(text)
    (tmp_path / "library.json").write_text(json.dumps({"norms": {"a": 1.0, "b": 1.0}}))
    assert run("gen-dataset", "--library", tmp_path, "--n", 20, "--out", tmp_path / "d.bin") == 0
    code = run("fit", "--model", "tf", "--b-mode", "known", "--noise-mode", "zero",
               "--no-recalibrate", "--library", tmp_path, "--dataset", tmp_path / "d.bin",
               "--out", tmp_path / "m")
    assert code == 2
    assert capsys.readouterr().err.startswith("ERROR[")


@pytest.mark.parametrize("argv", [
    ["fit", "--model", "lr", "--bogus"],
    ["nope"],
    ["gen-dataset", "--libr", "x", "--out", "y"],
    ["gen-library", "--out", "x", "--seed", "abc"],
])
def test_bad_arguments(argv, capsys):
    assert main(argv) == 1
    assert capsys.readouterr().err.startswith("ERROR[config]:")


def test_missing_file(tmp_path, capsys):
    assert run("fit-pca", "--dataset", tmp_path / "none.bin", "--out", tmp_path / "o") == 1
    assert capsys.readouterr().err.startswith("ERROR[io]:")


def test_help_documents_every_flag():
    parser = build_parser()
    sub = next(a for a in parser._actions if a.__class__.__name__ == "_SubParsersAction")
    assert set(sub.choices) == {"gen-library", "gen-dataset", "fit-pca", "fit", "predict",
                                "evaluate", "sweep", "out-of-range", "noise-estimate", "export"}
    for name, p in sub.choices.items():
        text = p.format_help()
        for action in p._actions:
            for opt in action.option_strings:
                assert opt in text, (name, opt)
            if action.option_strings and action.dest != "help":
                assert action.help, (name, action.dest)
