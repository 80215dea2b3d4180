"""Voxelwise encoding models: PCA reduction, ridge with per-voxel CV, metrics
and noise-ceiling handling.

Arrays follow the stimuli-by-columns convention: features are ``(S, F)``,
responses ``(S, V)`` and trial repeats ``(S, V, T)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, SingularFitError, UndefinedMetricError

DEFAULT_LAMBDAS = tuple(np.logspace(-3, 5, 10))
NC_THRESHOLD = 0.10


@dataclass
class FeatureMatrix:
    data: np.ndarray
    model_id: str = "model"
    layer_id: str = "layer"

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or self.data.shape[0] < 2:
            raise InputError("feature matrix must be (S, F) with S >= 2")
        if not np.isfinite(self.data).all():
            raise InputError("feature matrix contains non-finite values")


@dataclass
class ResponseMatrix:
    data: np.ndarray
    repeats: np.ndarray = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or self.data.shape[1] < 1:
            raise InputError("responses must be (S, V) with V >= 1")
        if self.repeats is not None:
            self.repeats = np.asarray(self.repeats, dtype=np.float64)
            if self.repeats.shape[:2] != self.data.shape or self.repeats.ndim != 3:
                raise InputError("repeats must be (S, V, T) matching the responses")

    @classmethod
    def from_repeats(cls, repeats):
        repeats = np.asarray(repeats, dtype=np.float64)
        return cls(repeats.mean(axis=2), repeats)


@dataclass
class PcaModel:
    mean: np.ndarray
    components: np.ndarray  # (K, F), orthonormal rows
    explained_variance: np.ndarray  # (K,), descending

    @property
    def n_components(self):
        return self.components.shape[0]


@dataclass
class RidgeFit:
    weights: np.ndarray  # (K, V)
    intercept: np.ndarray  # (V,)
    lambda_per_voxel: np.ndarray  # (V,)


@dataclass
class SplitConfig:
    train_fraction: float = 0.85
    cv_folds: int = 7
    lambda_grid: tuple = DEFAULT_LAMBDAS
    seed: int = 0

    def __post_init__(self):
        self.lambda_grid = tuple(float(x) for x in self.lambda_grid)
        if not 0 < self.train_fraction < 1:
            raise InputError("train_fraction must lie in (0, 1)")
        if self.cv_folds < 2:
            raise InputError("cv_folds must be >= 2")
        if not self.lambda_grid or min(self.lambda_grid) < 0:
            raise InputError("lambda grid must be non-empty and non-negative")
        if list(self.lambda_grid) != sorted(self.lambda_grid):
            raise InputError("lambda grid must be sorted ascending")


def _as_2d(x):
    x = np.asarray(x, dtype=np.float64)
    return x[:, None] if x.ndim == 1 else x


# -- PCA ----------------------------------------------------------------------

def fit_pca(X, n_components):
    """Principal axes of mean-centred ``X`` via a thin SVD."""
    X = _as_2d(getattr(X, "data", X) if isinstance(X, FeatureMatrix) else X)
    s, f = X.shape
    if not 1 <= n_components <= min(s - 1, f):
        raise InputError(f"n_components={n_components} must be in [1, min(S-1, F)={min(s - 1, f)}]")
    mean = X.mean(axis=0)
    _, sv, vt = np.linalg.svd(X - mean, full_matrices=False)
    # deterministic sign: largest-magnitude loading of each component is positive
    signs = np.sign(vt[np.arange(len(vt)), np.abs(vt).argmax(axis=1)])
    signs[signs == 0] = 1.0
    vt = vt * signs[:, None]
    k = n_components
    return PcaModel(mean, vt[:k].copy(), sv[:k] ** 2 / (s - 1))


def pca_project(model, X):
    X = _as_2d(X.data if isinstance(X, FeatureMatrix) else X)
    if X.shape[1] != model.mean.shape[0]:
        raise InputError(f"expected {model.mean.shape[0]} feature columns, got {X.shape[1]}")
    return (X - model.mean) @ model.components.T


def pca_reconstruct(model, Z):
    return np.asarray(Z) @ model.components + model.mean


def numerical_rank(X):
    X = _as_2d(X)
    sv = np.linalg.svd(X - X.mean(axis=0), compute_uv=False)
    if sv.size == 0 or sv[0] == 0:
        return 0
    return int((sv > sv[0] * max(X.shape) * np.finfo(np.float64).eps).sum())


# -- ridge --------------------------------------------------------------------

@dataclass
class RidgePath:
    """Ridge solutions for every lambda in a grid, sharing one SVD."""

    lambdas: np.ndarray  # (L,)
    weights: np.ndarray  # (L, K, V)
    intercepts: np.ndarray  # (L, V)


def _svd_factors(Xtr):
    x_mean = Xtr.mean(axis=0)
    u, s, vt = np.linalg.svd(Xtr - x_mean, full_matrices=False)
    tol = (s[0] if s.size else 0.0) * max(Xtr.shape) * np.finfo(np.float64).eps
    return x_mean, u, s, vt, tol


def _shrink(s, lam, tol):
    """Spectral filter s / (s^2 + lam); zero for null directions."""
    keep = s > tol
    out = np.zeros_like(s)
    out[keep] = s[keep] / (s[keep] ** 2 + lam)
    return out


def ridge_path_fit(Xtr, Ytr, lambda_grid):
    """Fit ``argmin ||Y - XW||^2 + lam ||W||^2`` for every ``lam``.

    Columns of ``Xtr`` and ``Ytr`` are centred internally and the returned
    intercepts satisfy ``Y_hat = X W + intercept`` in the original units. A
    zero lambda gives the minimum-norm least-squares solution.
    """
    Xtr = _as_2d(Xtr)
    Ytr = _as_2d(Ytr)
    if Xtr.shape[0] != Ytr.shape[0] or Xtr.shape[0] < 2:
        raise InputError("Xtr and Ytr need the same number (>= 2) of rows")
    lambdas = np.asarray(lambda_grid, dtype=np.float64).reshape(-1)
    x_mean, u, s, vt, tol = _svd_factors(Xtr)
    y_mean = Ytr.mean(axis=0)
    if not (s > tol).any() and (lambdas == 0).any():
        raise SingularFitError("design matrix is zero after centering; lambda=0 is singular")
    uty = u.T @ (Ytr - y_mean)
    weights = np.empty((len(lambdas), Xtr.shape[1], Ytr.shape[1]))
    intercepts = np.empty((len(lambdas), Ytr.shape[1]))
    for i, lam in enumerate(lambdas):
        w = vt.T @ (_shrink(s, lam, tol)[:, None] * uty)
        weights[i] = w
        intercepts[i] = y_mean - x_mean @ w
    return RidgePath(lambdas, weights, intercepts)


def _column_r2(y, yhat):
    """Column-wise R^2 about each column's own mean; NaN where y is constant."""
    ss_res = ((y - yhat) ** 2).sum(axis=0)
    ss_tot = ((y - y.mean(axis=0)) ** 2).sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(ss_tot > 0, 1.0 - ss_res / ss_tot, np.nan)


def kfold_indices(n, folds, seed):
    """Seeded shuffle of ``range(n)`` cut into contiguous, balanced folds."""
    order = np.random.default_rng(seed).permutation(n)
    return np.array_split(order, folds)


def cv_ridge_scores(Xtr, Ytr, cfg):
    """Mean held-out R^2 for every (lambda, voxel), shape ``(L, V)``."""
    Xtr = _as_2d(Xtr)
    Ytr = _as_2d(Ytr)
    n = Xtr.shape[0]
    if n < cfg.cv_folds:
        raise InputError(f"{n} rows cannot be split into {cfg.cv_folds} folds")
    lambdas = np.asarray(cfg.lambda_grid)
    total = np.zeros((len(lambdas), Ytr.shape[1]))
    count = np.zeros_like(total)
    for held in kfold_indices(n, cfg.cv_folds, cfg.seed):
        train = np.setdiff1d(np.arange(n), held)
        x_mean, u, s, vt, tol = _svd_factors(Xtr[train])
        y_mean = Ytr[train].mean(axis=0)
        uty = u.T @ (Ytr[train] - y_mean)
        xv = (Xtr[held] - x_mean) @ vt.T
        for i, lam in enumerate(lambdas):
            pred = xv @ (_shrink(s, lam, tol)[:, None] * uty) + y_mean
            r2 = _column_r2(Ytr[held], pred)
            ok = np.isfinite(r2)
            total[i, ok] += r2[ok]
            count[i, ok] += 1
    with np.errstate(invalid="ignore"):
        return np.where(count > 0, total / np.maximum(count, 1), -np.inf)


def cv_select_lambda(Xtr, Ytr, cfg):
    """Per-voxel lambda maximising mean held-out R^2; ties go to the smaller lambda."""
    scores = cv_ridge_scores(Xtr, Ytr, cfg)
    # argmax returns the first maximum, i.e. the smallest lambda on an ascending grid
    return np.asarray(cfg.lambda_grid)[np.argmax(scores, axis=0)]


def fit_ridge(Xtr, Ytr, lambda_per_voxel):
    """Ridge fit with an individual lambda for each response column."""
    Ytr = _as_2d(Ytr)
    lam = np.broadcast_to(np.asarray(lambda_per_voxel, dtype=np.float64), (Ytr.shape[1],))
    uniq, which = np.unique(lam, return_inverse=True)
    path = ridge_path_fit(Xtr, Ytr, uniq)
    cols = np.arange(Ytr.shape[1])
    return RidgeFit(path.weights[which, :, cols].T.copy(), path.intercepts[which, cols].copy(),
                    lam.copy())


def predict(fit, Xte):
    Xte = _as_2d(Xte)
    if Xte.shape[1] != fit.weights.shape[0]:
        raise InputError(f"expected {fit.weights.shape[0]} columns, got {Xte.shape[1]}")
    return Xte @ fit.weights + fit.intercept


# -- metrics ------------------------------------------------------------------

def pearson_r(y, yhat):
    """Pearson correlation. Raises for constant ``y``; returns 0 for constant ``yhat``."""
    y = np.asarray(y, dtype=np.float64).ravel()
    yhat = np.asarray(yhat, dtype=np.float64).ravel()
    if y.shape != yhat.shape or y.size < 2:
        raise InputError("pearson_r needs two equal-length vectors of length >= 2")
    yc = y - y.mean()
    hc = yhat - yhat.mean()
    sy = np.sqrt(yc @ yc)
    if sy == 0:
        raise UndefinedMetricError("correlation is undefined for a constant target")
    sh = np.sqrt(hc @ hc)
    if sh == 0:
        return 0.0
    return float(np.clip((yc @ hc) / (sy * sh), -1.0, 1.0))


def r_squared(y, yhat):
    """Coefficient of determination with the total sum of squares about mean(y)."""
    y = np.asarray(y, dtype=np.float64).ravel()
    yhat = np.asarray(yhat, dtype=np.float64).ravel()
    if y.shape != yhat.shape or y.size < 2:
        raise InputError("r_squared needs two equal-length vectors of length >= 2")
    ss_tot = float(((y - y.mean()) ** 2).sum())
    if ss_tot == 0:
        raise UndefinedMetricError("R^2 is undefined for a constant target")
    return 1.0 - float(((y - yhat) ** 2).sum()) / ss_tot


def column_pearson_r(Y, Yhat):
    """Vectorised :func:`pearson_r` over columns; NaN where a column of ``Y`` is constant."""
    Y = _as_2d(Y)
    Yhat = _as_2d(Yhat)
    yc = Y - Y.mean(axis=0)
    hc = Yhat - Yhat.mean(axis=0)
    sy = np.sqrt((yc ** 2).sum(axis=0))
    sh = np.sqrt((hc ** 2).sum(axis=0))
    num = (yc * hc).sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(sh > 0, num / (sy * sh), 0.0)
    return np.where(sy > 0, np.clip(r, -1.0, 1.0), np.nan)


column_r_squared = _column_r2


# -- noise ceiling ------------------------------------------------------------

@dataclass
class NoiseCeiling:
    nc: np.ndarray
    ncsnr: np.ndarray = field(default=None)


def estimate_noise_ceiling(repeats):
    """Per-voxel noise ceiling for trial-averaged responses.

    With trial variance ``n2`` averaged over stimuli and ``s2`` the variance of
    the stimulus means minus ``n2 / T`` (floored at 0), the signal-to-noise
    ratio is ``sqrt(s2 / n2)`` and the ceiling ``snr^2 / (snr^2 + 1/T)``.
    """
    repeats = np.asarray(repeats, dtype=np.float64)
    if repeats.ndim != 3:
        raise InputError("repeats must be (S, V, T)")
    t = repeats.shape[2]
    if t < 2:
        raise InputError("noise ceiling needs at least two repeats per stimulus")
    noise_var = repeats.var(axis=2, ddof=1).mean(axis=0)
    signal_var = np.maximum(0.0, repeats.mean(axis=2).var(axis=0, ddof=1) - noise_var / t)
    with np.errstate(divide="ignore", invalid="ignore"):
        snr2 = np.where(noise_var > 0, signal_var / noise_var,
                        np.where(signal_var > 0, np.inf, 0.0))
        nc = np.where(np.isinf(snr2), 1.0, snr2 / (snr2 + 1.0 / t))
    return NoiseCeiling(np.clip(nc, 0.0, 1.0), np.sqrt(snr2))


def noise_corrected_r2(r2, nc):
    """``r2 / nc``; NaN wherever ``nc <= 0`` (voxel excluded). Not clipped."""
    r2 = np.asarray(r2, dtype=np.float64)
    nc = np.asarray(nc, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(nc > 0, r2 / nc, np.nan)
    return float(out) if out.ndim == 0 else out


def filter_voxels(nc, threshold=NC_THRESHOLD):
    return np.asarray(nc, dtype=np.float64) >= threshold


# -- full protocol ------------------------------------------------------------

def train_test_indices(n_stimuli, cfg):
    """One seeded shuffle split shared by every model fitted on these stimuli."""
    order = np.random.default_rng(cfg.seed).permutation(n_stimuli)
    n_train = int(round(cfg.train_fraction * n_stimuli))
    n_train = min(max(n_train, 2), n_stimuli - 1)
    return np.sort(order[:n_train]), np.sort(order[n_train:])


@dataclass
class EncodingResult:
    lambdas: np.ndarray  # (V,)
    cv_r2: np.ndarray  # (V,), mean CV R^2 at the selected lambda
    test_r: np.ndarray  # (V,)
    test_r2: np.ndarray  # (V,)
    n_components: int
    fit: RidgeFit = field(repr=False, default=None)
    pca: PcaModel = field(repr=False, default=None)


def fit_encoding_model(features, responses, cfg, n_components=1000, split=None):
    """PCA -> per-voxel CV ridge -> held-out r and R^2.

    ``n_components`` is clamped to the numerical rank of the training
    features. ``split`` overrides the seeded train/test split.
    """
    X = features.data if isinstance(features, FeatureMatrix) else _as_2d(features)
    Y = responses.data if isinstance(responses, ResponseMatrix) else _as_2d(responses)
    if X.shape[0] != Y.shape[0]:
        raise InputError("features and responses disagree on the number of stimuli")
    train, test = split if split is not None else train_test_indices(X.shape[0], cfg)
    k = min(int(n_components), numerical_rank(X[train]), len(train) - 1, X.shape[1])
    if k < 1:
        raise InputError("training features have rank 0")
    pca = fit_pca(X[train], k)
    ztr = pca_project(pca, X[train])
    zte = pca_project(pca, X[test])
    scores = cv_ridge_scores(ztr, Y[train], cfg)
    best = np.argmax(scores, axis=0)
    lambdas = np.asarray(cfg.lambda_grid)[best]
    fit = fit_ridge(ztr, Y[train], lambdas)
    yhat = predict(fit, zte)
    return EncodingResult(lambdas, scores[best, np.arange(Y.shape[1])],
                          column_pearson_r(Y[test], yhat), _column_r2(Y[test], yhat), k, fit, pca)
