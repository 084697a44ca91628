"""Save and load trained quantifiers: ``model.json`` plus one CSV per matrix.

Values are written with 17 significant digits (CSV) or shortest round-trip
repr (JSON), so a save/load cycle is bit-exact.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .decomposition import load_basis
from .errors import FormatError, SchemaError, VersionMismatchError
from .quantifiers import DirectModel, LrModel, PlsrModel, TfModel
from .spectral import WavelengthGrid

MODEL_FORMAT_VERSION = 1


def write_matrix(path, matrix: np.ndarray) -> None:
    m = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"c{j}" for j in range(m.shape[1])])
        for row in m:
            w.writerow([format(float(x), ".17g") for x in row])


def read_matrix(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FormatError(f"{path}: empty matrix file")
    width = len(rows[0])
    body = rows[1:]
    if any(len(r) != width for r in body):
        raise FormatError(f"{path}: ragged matrix")
    return np.array([[float(x) for x in r] for r in body], dtype=np.float64).reshape(len(body), width)


def _vec(x) -> list[float]:
    return [float(v) for v in np.ravel(x)]


def save_model(model, directory) -> Path:
    """Write ``model`` to ``directory``; returns the ``model.json`` path."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    meta = {"format_version": MODEL_FORMAT_VERSION, "kind": model.kind,
            "gas_names": list(model.gas_names), "fingerprint": model.fingerprint}
    if isinstance(model, (LrModel, DirectModel, TfModel)):
        model.basis.export(d / "basis")
        meta["basis_fingerprint"] = model.basis.fingerprint
    if isinstance(model, LrModel):
        write_matrix(d / "lambda.csv", model.lam)
        meta.update(kappa=_vec(model.kappa), train_residual=model.train_residual,
                    condition_number=model.condition_number)
    elif isinstance(model, DirectModel):
        write_matrix(d / "lambda.csv", model.lam_sparse)
        meta.update(kappa=_vec(model.kappa), masks=np.asarray(model.masks).astype(int).tolist(),
                    retain_counts=list(model.retain_counts))
    elif isinstance(model, TfModel):
        write_matrix(d / "beta_prime.csv", model.beta_prime)
        meta.update(eps_norms=_vec(model.eps_norms), b=float(model.b), n_prime=_vec(model.n_prime),
                    gain=_vec(model.gain), shift=_vec(model.shift), b_learned=model.b_learned,
                    noise_learned=model.noise_learned, ridge=model.ridge,
                    condition_number=model.condition_number,
                    library_fingerprint=model.library_fingerprint)
    elif isinstance(model, PlsrModel):
        for name in ("x_weights", "x_loadings", "y_loadings", "x_scores", "coef"):
            write_matrix(d / f"{name}.csv", getattr(model, name))
        meta.update(n_components=model.n_components, x_mean=_vec(model.x_mean),
                    y_mean=_vec(model.y_mean), iterations=list(model.iterations),
                    grid_um=None if model.grid is None else _vec(model.grid.points))
    else:
        raise SchemaError(f"cannot serialize {type(model).__name__}")
    path = d / "model.json"
    path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def load_model(directory):
    d = Path(directory)
    try:
        meta = json.loads((d / "model.json").read_text())
    except FileNotFoundError:
        raise SchemaError(f"{d}: no model.json") from None
    if meta.get("format_version") != MODEL_FORMAT_VERSION:
        raise VersionMismatchError(f"{d}: model format {meta.get('format_version')}")
    kind = meta["kind"]
    names = tuple(meta["gas_names"])
    if kind in ("lr", "direct", "tf"):
        basis = load_basis(d / "basis")
        if basis.fingerprint != meta["basis_fingerprint"]:
            raise SchemaError("basis fingerprint does not match model.json")
    if kind == "lr":
        model = LrModel(read_matrix(d / "lambda.csv"), np.array(meta["kappa"]), basis, names,
                        meta["train_residual"], meta["condition_number"])
    elif kind == "direct":
        model = DirectModel(read_matrix(d / "lambda.csv"), np.array(meta["kappa"]),
                            np.array(meta["masks"], dtype=bool), tuple(meta["retain_counts"]),
                            basis, names)
    elif kind == "tf":
        model = TfModel(basis, read_matrix(d / "beta_prime.csv"), np.array(meta["eps_norms"]),
                        meta["b"], np.array(meta["n_prime"]), names, meta["library_fingerprint"],
                        np.array(meta["gain"]), np.array(meta["shift"]), meta["b_learned"],
                        meta["noise_learned"], meta["ridge"], meta["condition_number"])
    elif kind == "plsr":
        m = {n: read_matrix(d / f"{n}.csv")
             for n in ("x_weights", "x_loadings", "y_loadings", "x_scores", "coef")}
        grid = None if meta["grid_um"] is None else WavelengthGrid(meta["grid_um"])
        model = PlsrModel(meta["n_components"], m["x_weights"], m["x_loadings"], m["y_loadings"],
                          m["x_scores"], np.array(meta["x_mean"]), np.array(meta["y_mean"]),
                          m["coef"], names, grid, tuple(meta["iterations"]))
    else:
        raise SchemaError(f"unknown model kind {kind!r}")
    if model.fingerprint != meta["fingerprint"]:
        raise SchemaError("model fingerprint does not match its contents")
    return model
