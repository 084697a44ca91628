"""Concentration models on top of principal component scores.

* ``fit_lr`` / ``predict_lr`` -- affine map from the top-L scores to the K
  concentrations, learned by ordinary least squares.
* ``sparsify_to_direct`` -- the same map keeping only the leading entries of
  each gas row, refitted.
* ``fit_tf`` / ``predict_tf`` -- components taken from the extinction spectra
  themselves; at most the path length and the noise projections are learned.
* ``fit_plsr`` / ``predict_plsr`` -- NIPALS PLS2 baseline on full spectra.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, NamedTuple, Optional, Sequence, Union

import numpy as np
import scipy.linalg

from .decomposition import PcBasis, Flavor, fit_pca, project, resolve_flavor
from .errors import (
    ConditioningError,
    ConfigurationError,
    ConvergenceError,
    DegenerateLibraryError,
    DimensionError,
    UnderdeterminedError,
)
from .library import GasLibrary
from .spectral import array_fingerprint
from .synth import SpectraDataset

# least-squares systems with a larger condition number are reported as singular
MAX_CONDITION = 1e12


def _spectra(data) -> np.ndarray:
    return np.atleast_2d(np.asarray(getattr(data, "absorbances", data), dtype=np.float64))


def _check_grid(data, grid) -> None:
    g = getattr(data, "grid", None)
    if g is not None and g != grid:
        raise DimensionError("spectra grid does not match the model grid")
    if _spectra(data).shape[1] != len(grid):
        raise DimensionError("spectra width does not match the model grid")


def _lstsq_with_intercept(x: np.ndarray, y: np.ndarray, what: str):
    """Solve ``y ~ x @ W + b``; returns (W, b, rms residual, condition number)."""
    design = np.column_stack([x, np.ones(x.shape[0])])
    # column scaling keeps the condition number about geometry, not units
    scale = np.linalg.norm(design, axis=0)
    scale[scale == 0] = 1.0
    ds = design / scale
    s = np.linalg.svd(ds, compute_uv=False)
    cond = float(s[0] / s[-1]) if s[-1] > 0 else float("inf")
    if not cond < MAX_CONDITION:
        raise ConditioningError(f"{what}: design matrix is rank deficient", cond)
    coef, *_ = np.linalg.lstsq(ds, y, rcond=None)
    coef = coef / scale[:, None] if coef.ndim == 2 else coef / scale
    resid = y - design @ coef
    return coef[:-1], coef[-1], float(np.sqrt(np.mean(resid**2))), cond


# --------------------------------------------------------------------------
# overlap / noise estimation


class OverlapEstimate(NamedTuple):
    b_psi_eps: np.ndarray  # (L, K): b * <phi_p|eps_hat_k> * ||eps_k||
    n_exp: np.ndarray  # (L,): expected noise projection E{<phi_p|n>}
    residual: float


def estimate_overlap_noise(basis: PcBasis, training: SpectraDataset) -> OverlapEstimate:
    """Least-squares fit of ``beta_i = (b psi eps) C_i + (N - u)`` over all samples.

    The constant term is ``E{<phi_p|n>} - <phi_p|u>``; the mean projection is
    added back so ``n_exp`` is the noise expectation itself.
    """
    k = training.k
    if training.n <= k + 1:
        raise UnderdeterminedError(
            f"need more than K+1 = {k + 1} samples to estimate the overlap matrix, got {training.n}")
    beta = project(basis, training).scores
    g, d, resid, _ = _lstsq_with_intercept(training.concentrations, beta, "overlap estimation")
    u_proj = (basis.components * basis.weights) @ basis.mean
    return OverlapEstimate(g.T, d + u_proj, resid)


# --------------------------------------------------------------------------
# fPCA-LR


@dataclass(frozen=True, eq=False)
class LrModel:
    lam: np.ndarray  # (K, L)
    kappa: np.ndarray  # (K,)
    basis: PcBasis
    gas_names: tuple[str, ...]
    train_residual: float = 0.0
    condition_number: float = 1.0

    kind = "lr"

    @property
    def fingerprint(self) -> str:
        return array_fingerprint(self.lam, self.kappa, extra=(self.basis.fingerprint,))

    def predict(self, spectra) -> np.ndarray:
        return predict_lr(self, spectra)


def fit_lr(basis: PcBasis, training: SpectraDataset, n_components: Optional[int] = None) -> LrModel:
    """Least-squares ``C_i = Lambda beta_i + kappa`` on the training scores."""
    if n_components is not None:
        basis = basis.truncated(n_components)
    l = basis.n_components
    if training.n <= l + 1:
        raise UnderdeterminedError(
            f"linear regression on {l} components needs more than {l + 1} samples, "
            f"got {training.n}")
    beta = project(basis, training).scores
    w, b, resid, cond = _lstsq_with_intercept(beta, training.concentrations, "linear regression")
    return LrModel(w.T, b, basis, training.gas_names, resid, cond)


def predict_lr(model: LrModel, spectra) -> np.ndarray:
    _check_grid(spectra, model.basis.grid)
    beta = project(model.basis, _spectra(spectra)).scores
    return beta @ model.lam.T + model.kappa


# --------------------------------------------------------------------------
# direct quantification


@dataclass(frozen=True, eq=False)
class DirectModel:
    lam_sparse: np.ndarray  # (K, L), masked entries exactly zero
    kappa: np.ndarray
    masks: np.ndarray  # (K, L) bool
    retain_counts: tuple[int, ...]
    basis: PcBasis
    gas_names: tuple[str, ...]

    kind = "direct"

    @property
    def fingerprint(self) -> str:
        return array_fingerprint(self.lam_sparse, self.kappa, extra=(self.basis.fingerprint,))

    def predict(self, spectra) -> np.ndarray:
        _check_grid(spectra, self.basis.grid)
        beta = project(self.basis, _spectra(spectra)).scores
        return beta @ self.lam_sparse.T + self.kappa


def sparsify_to_direct(model: LrModel, retain: Union[int, Sequence[int]],
                       training: SpectraDataset) -> DirectModel:
    """Keep the ``m`` largest-magnitude entries per gas row of Lambda and refit.

    The refit is a per-gas least squares on the retained training scores plus
    an intercept.
    """
    k, l = model.lam.shape
    counts = [int(retain)] * k if np.isscalar(retain) else [int(r) for r in retain]
    if len(counts) != k or any(not 1 <= m <= l for m in counts):
        raise ConfigurationError(f"retain counts must lie in [1, {l}] for each of {k} gases")
    beta = project(model.basis, training).scores
    scaled = np.abs(model.lam)
    lam = np.zeros_like(model.lam)
    kappa = np.zeros(k)
    masks = np.zeros((k, l), dtype=bool)
    for g, m in enumerate(counts):
        keep = np.sort(np.argsort(-scaled[g], kind="stable")[:m])
        masks[g, keep] = True
        w, b, _, _ = _lstsq_with_intercept(beta[:, keep], training.concentrations[:, g],
                                           "direct quantification")
        lam[g, keep] = w
        kappa[g] = b
    return DirectModel(lam, kappa, masks, tuple(counts), model.basis, model.gas_names)


# --------------------------------------------------------------------------
# training-free model


@dataclass(frozen=True, eq=False)
class TfModel:
    basis: PcBasis
    beta_prime: np.ndarray  # (K gases, K components): <phi_p|eps_hat_k>
    eps_norms: np.ndarray
    b: float
    n_prime: np.ndarray
    gas_names: tuple[str, ...]
    library_fingerprint: str
    gain: np.ndarray = None  # per-gas recalibration slope (ones when unused)
    shift: np.ndarray = None  # per-gas recalibration intercept (zeros when unused)
    b_learned: bool = False
    noise_learned: bool = False
    ridge: float = 0.0
    condition_number: float = field(default=1.0)

    kind = "tf"

    def __post_init__(self):
        k = len(self.gas_names)
        if self.gain is None:
            object.__setattr__(self, "gain", np.ones(k))
        if self.shift is None:
            object.__setattr__(self, "shift", np.zeros(k))
        if np.any(np.asarray(self.eps_norms) <= 0):
            raise DegenerateLibraryError("extinction norms must be positive")

    @property
    def system_matrix(self) -> np.ndarray:
        """``b * beta'^T * eps`` mapping concentrations to component projections."""
        return self.b * self.beta_prime.T * self.eps_norms[None, :]

    @property
    def offset(self) -> np.ndarray:
        """Bias of the affine prediction map, ``-(b beta'^T eps)^-1 N'``."""
        return -self._solve(self.n_prime[:, None])[:, 0]

    @property
    def plateau(self) -> np.ndarray:
        """Relative bias at high concentration implied by the recalibration gain."""
        return np.abs(1.0 - self.gain)

    @property
    def fingerprint(self) -> str:
        return array_fingerprint(self.beta_prime, self.eps_norms, np.array([self.b]), self.n_prime,
                                 self.gain, self.shift, extra=(self.basis.fingerprint,))

    def _solve(self, rhs: np.ndarray) -> np.ndarray:
        a = self.system_matrix
        if self.ridge:
            rhs = a.T @ rhs
            a = a.T @ a + self.ridge * np.eye(a.shape[0]) * np.trace(a.T @ a) / a.shape[0]
        return scipy.linalg.lu_solve(scipy.linalg.lu_factor(a), rhs)

    def projections(self, spectra) -> np.ndarray:
        """``<phi_p|A>`` (no mean subtraction) for each spectrum."""
        return _spectra(spectra) @ (self.basis.components * self.basis.weights).T

    def predict_raw(self, spectra) -> np.ndarray:
        a = self.projections(spectra) - self.n_prime
        return self._solve(a.T).T

    def predict(self, spectra) -> np.ndarray:
        return predict_tf(self, spectra)


def _tf_basis(lib: GasLibrary, flavor: Flavor, centered: bool) -> PcBasis:
    k = lib.k
    if not centered:
        basis = fit_pca(lib.spectra, lib.grid, flavor, centered=False, max_components=k)
        if basis.n_components < k:
            raise DegenerateLibraryError(
                f"extinction spectra span only {basis.n_components} of {k} dimensions")
        return basis
    # K centered samples give K-1 components; the mean's residual completes the span
    basis = fit_pca(lib.spectra, lib.grid, flavor, centered=True, max_components=k - 1)
    if basis.n_components < k - 1:
        raise DegenerateLibraryError("extinction spectra are linearly dependent")
    w = basis.weights
    resid = basis.mean - basis.components.T @ ((basis.components * w) @ basis.mean)
    rn = np.sqrt(np.sum(w * resid**2))
    if rn < 1e-10 * np.sqrt(np.sum(w * basis.mean**2)):
        raise DegenerateLibraryError("library mean lies in the span of the centered components")
    comps = np.vstack([basis.components, resid / rn])
    return PcBasis(basis.grid, comps, basis.mean, np.append(basis.eigenvalues, 0.0), basis.flavor,
                   True, basis.total_variance, basis.n_samples, basis.effective_rank + 1)


def fit_tf(lib: GasLibrary, b: Optional[float] = None, noise: Literal["zero", "learn"] = "zero",
           calibration: Optional[SpectraDataset] = None, flavor: Flavor = "functional",
           centered: bool = False, recalibrate: bool = False, ridge: float = 0.0) -> TfModel:
    """Training-free quantifier built from the library's extinction spectra.

    ``b=None`` learns the path length from ``calibration``; ``noise="learn"``
    learns the K noise projections ``N'``.  Both come from one linear least
    squares on ``<phi|A_i> = b * (beta'^T eps C_i) + N'``.  With
    ``recalibrate`` a per-gas slope and intercept are then fitted in
    concentration space on the same calibration samples.
    """
    flavor = resolve_flavor(flavor)
    if noise not in ("zero", "learn"):
        raise ConfigurationError(f"unknown noise mode {noise!r}")
    learn_b = b is None
    learning = learn_b or noise == "learn" or recalibrate
    if learning:
        if calibration is None or calibration.n < 2:
            raise UnderdeterminedError(
                "learning the path length, noise projections or gains needs >= 2 calibration samples")
        if calibration.gas_names != lib.names or calibration.grid != lib.grid:
            raise DimensionError("calibration data does not match the library")
    if not learn_b and not b > 0:
        raise ConfigurationError("known path length must be positive")

    basis = _tf_basis(lib, flavor, centered)
    beta_prime = (lib.spectra * basis.weights) @ basis.components.T  # beta_{k,p} + <phi_p|u>
    m_unit = beta_prime.T * lib.norms[None, :]
    cond = float(np.linalg.cond(m_unit))
    if not cond < MAX_CONDITION and not ridge:
        raise DegenerateLibraryError("extinction overlap system is singular", cond)

    k = lib.k
    n_prime = np.zeros(k)
    b_val = float(b) if not learn_b else 1.0
    if learn_b or noise == "learn":
        proj = calibration.absorbances @ (basis.components * basis.weights).T
        y = calibration.concentrations @ m_unit.T  # (N, K) unit-path projections
        if learn_b and noise == "learn":
            design = np.zeros((calibration.n * k, k + 1))
            design[:, 0] = y.ravel()
            design[:, 1:] = np.tile(np.eye(k), (calibration.n, 1))
            sol, *_ = np.linalg.lstsq(design, proj.ravel(), rcond=None)
            if np.linalg.matrix_rank(design) < k + 1:
                raise UnderdeterminedError("calibration concentrations do not identify b and N'")
            b_val, n_prime = float(sol[0]), sol[1:]
        elif learn_b:
            denom = float(np.sum(y * y))
            if denom == 0:
                raise UnderdeterminedError("calibration samples carry no absorbance signal")
            b_val = float(np.sum(y * proj) / denom)
        else:
            n_prime = np.mean(proj - b_val * y, axis=0)
        if not b_val > 0:
            raise ConditioningError(f"learned path length {b_val:.4g} is not positive")

    model = TfModel(basis, beta_prime, lib.norms.copy(), b_val, n_prime, lib.names,
                    lib.fingerprint, b_learned=learn_b, noise_learned=noise == "learn",
                    ridge=float(ridge), condition_number=cond)
    if recalibrate:
        raw = model.predict_raw(calibration)
        gain = np.ones(k)
        shift = np.zeros(k)
        for g in range(k):
            w, s, _, _ = _lstsq_with_intercept(raw[:, g:g + 1], calibration.concentrations[:, g],
                                               "gain recalibration")
            gain[g], shift[g] = w[0], s
        model = TfModel(basis, beta_prime, lib.norms.copy(), b_val, n_prime, lib.names,
                        lib.fingerprint, gain, shift, learn_b, noise == "learn", float(ridge), cond)
    return model


def predict_tf(model: TfModel, spectra) -> np.ndarray:
    """``C = (b beta'^T eps)^-1 (A - N')``, then the optional per-gas recalibration."""
    _check_grid(spectra, model.basis.grid)
    return model.predict_raw(spectra) * model.gain + model.shift


class SystemNoise(NamedTuple):
    noise_spectra: np.ndarray
    mean_power: float


def estimate_system_noise(model: TfModel, samples: SpectraDataset) -> SystemNoise:
    """Residual spectra ``A_i - b * sum_k c_k ||eps_k|| eps_hat_k`` with the
    extinction shapes rebuilt from the model's components."""
    _check_grid(samples, model.basis.grid)
    shapes = model.beta_prime @ model.basis.components  # eps_hat_k in the model span
    fitted = (model.b * samples.concentrations * model.eps_norms) @ shapes
    noise = samples.absorbances - fitted
    power = float(np.mean(np.einsum("ij,ij->i", noise, noise)))
    return SystemNoise(noise, power)


# --------------------------------------------------------------------------
# PLSR baseline


@dataclass(frozen=True, eq=False)
class PlsrModel:
    n_components: int
    x_weights: np.ndarray  # (M, A)
    x_loadings: np.ndarray  # (M, A)
    y_loadings: np.ndarray  # (K, A)
    x_scores: np.ndarray  # (N, A)
    x_mean: np.ndarray
    y_mean: np.ndarray
    coef: np.ndarray  # (M, K)
    gas_names: tuple[str, ...]
    grid: object = None
    iterations: tuple[int, ...] = ()

    kind = "plsr"

    @property
    def fingerprint(self) -> str:
        return array_fingerprint(self.coef, self.x_mean, self.y_mean)

    def predict(self, spectra) -> np.ndarray:
        return predict_plsr(self, spectra)


def fit_plsr(training: SpectraDataset, n_components: int, tol: float = 1e-10,
             max_iter: int = 500) -> PlsrModel:
    """NIPALS PLS2 with X and Y deflation.

    The inner loop starts from ``u = Y v`` with ``v`` the dominant eigenvector
    of ``Y'X X'Y`` (a K x K problem); the NIPALS fixed point is unchanged but
    near-degenerate responses no longer stall the power iteration.
    """
    x = training.absorbances
    y = training.concentrations
    n, m = x.shape
    if not 1 <= n_components <= min(n - 1, m):
        raise ConfigurationError(f"PLSR components must lie in [1, {min(n - 1, m)}]")
    x_mean, y_mean = x.mean(axis=0), y.mean(axis=0)
    xr = x - x_mean
    yr = y - y_mean
    k = y.shape[1]
    w_all = np.zeros((m, n_components))
    p_all = np.zeros((m, n_components))
    q_all = np.zeros((k, n_components))
    t_all = np.zeros((n, n_components))
    iters = []
    x_scale = np.linalg.norm(xr)
    for a in range(n_components):
        xty = xr.T @ yr
        _, vecs = np.linalg.eigh(xty.T @ xty)
        u = yr @ vecs[:, -1]
        if not np.any(u):
            u = xr @ xr[np.argmax(np.einsum("ij,ij->i", xr, xr))]
        t_old = None
        for it in range(1, max_iter + 1):
            w = xr.T @ u
            wn = np.linalg.norm(w)
            if wn == 0:
                raise ConvergenceError("X residual is orthogonal to the Y scores", a + 1)
            w /= wn
            t = xr @ w
            tt = float(t @ t)
            q = yr.T @ t / tt if tt > 0 else np.zeros(k)
            qq = float(q @ q)
            if qq == 0:
                break
            u = yr @ q / qq
            if t_old is not None and np.linalg.norm(t - t_old) <= tol * max(np.linalg.norm(t), 1e-300):
                break
            t_old = t
        else:
            raise ConvergenceError(f"inner loop did not converge in {max_iter} iterations", a + 1)
        iters.append(it)
        if tt <= (tol * x_scale) ** 2:
            raise ConvergenceError("X residual exhausted before the requested components", a + 1)
        p = xr.T @ t / tt
        xr = xr - np.outer(t, p)
        yr = yr - np.outer(t, q)
        w_all[:, a], p_all[:, a], q_all[:, a], t_all[:, a] = w, p, q, t
    coef = w_all @ np.linalg.solve(p_all.T @ w_all, q_all.T)
    return PlsrModel(n_components, w_all, p_all, q_all, t_all, x_mean, y_mean, coef,
                     training.gas_names, training.grid, tuple(iters))


def predict_plsr(model: PlsrModel, spectra) -> np.ndarray:
    if model.grid is not None:
        _check_grid(spectra, model.grid)
    x = _spectra(spectra)
    if x.shape[1] != model.x_mean.size:
        raise DimensionError("spectra width does not match the PLSR model")
    return (x - model.x_mean) @ model.coef + model.y_mean
