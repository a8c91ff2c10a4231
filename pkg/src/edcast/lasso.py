"""AR-Lasso baselines.

Plain Lasso with the regularization level chosen to bound the fraction of
decoy (permuted-copy) features among selections, plus a locally weighted
variant whose RBF length scale is picked on the week of data preceding the
forecast day.

The solver is cyclic coordinate descent with cached column norms and
residual updates, iterating active-set sweeps between full passes until the
largest coefficient change falls below ``tol``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .normalize import Normalizer

DEFAULT_CANDIDATE_SCALES = (6.0, 12.0, 24.0, 48.0, 96.0, 168.0, 336.0, 720.0)


@dataclass(frozen=True)
class LassoConfig:
    lam: float = 0.0
    fp_target: float = 0.10
    decoy_count: int | None = None  # None -> one decoy per real column
    lambda_grid: tuple[float, ...] | None = None  # None -> geomspace(lmax, lmax/100, 16)
    grid_size: int = 16

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if not (0.0 < self.fp_target < 1.0):
            raise ValueError("fp_target must lie in (0, 1)")
        if self.decoy_count is not None and self.decoy_count < 1:
            raise ValueError("decoy_count must be positive")
        if self.lambda_grid is not None:
            grid = tuple(float(v) for v in self.lambda_grid)
            if any(b >= a for a, b in zip(grid, grid[1:])):
                raise ValueError("lambda_grid must be strictly descending")
            if any(v <= 0 for v in grid):
                raise ValueError("lambda_grid values must be positive")
            object.__setattr__(self, "lambda_grid", grid)


@dataclass(frozen=True)
class LocalWeightConfig:
    length_scale: float = 168.0
    candidate_scales: tuple[float, ...] = DEFAULT_CANDIDATE_SCALES
    validation_span: float = 168.0

    def __post_init__(self):
        if self.length_scale <= 0:
            raise ValueError("length_scale must be positive")
        if len(self.candidate_scales) == 0:
            raise ValueError("candidate grid must be non-empty")
        if self.validation_span < 24.0:
            raise ValueError("validation span must be at least 24 hours")


@dataclass(frozen=True)
class LassoFit:
    coef: np.ndarray
    intercept: float
    lam: float
    sweeps: int
    converged: bool
    dropped: tuple[int, ...]

    @property
    def active(self) -> np.ndarray:
        return np.flatnonzero(self.coef)


@njit(cache=True)
def _cd_solve(X, y, w, lam, beta, tol, max_sweeps):
    """Cyclic coordinate descent on 1/(2n) sum w_i r_i^2 + lam ||beta||_1.

    X is Fortran-ordered (columns contiguous); beta is updated in place.
    Returns (sweeps, converged).
    """
    n, p = X.shape
    col_sq = np.empty(p)
    for j in range(p):
        acc = 0.0
        for i in range(n):
            acc += w[i] * X[i, j] * X[i, j]
        col_sq[j] = acc / n

    r = y.copy()
    for j in range(p):
        if beta[j] != 0.0:
            bj = beta[j]
            for i in range(n):
                r[i] -= bj * X[i, j]

    active = np.zeros(p, dtype=np.bool_)
    for j in range(p):
        active[j] = beta[j] != 0.0

    sweeps = 0
    converged = False
    full_pass = True
    while sweeps < max_sweeps:
        sweeps += 1
        max_delta = 0.0
        for j in range(p):
            if not full_pass and not active[j]:
                continue
            q = col_sq[j]
            if q == 0.0:
                continue
            rho = 0.0
            for i in range(n):
                rho += X[i, j] * w[i] * r[i]
            rho = rho / n + q * beta[j]
            if rho > lam:
                new = (rho - lam) / q
            elif rho < -lam:
                new = (rho + lam) / q
            else:
                new = 0.0
            delta = new - beta[j]
            if delta != 0.0:
                for i in range(n):
                    r[i] -= delta * X[i, j]
                beta[j] = new
                active[j] = new != 0.0
                ad = abs(delta)
                if ad > max_delta:
                    max_delta = ad
        if max_delta < tol:
            if full_pass:
                converged = True
                break
            full_pass = True
        else:
            full_pass = False
    return sweeps, converged


def fit_lasso(design: np.ndarray, labels: np.ndarray, lam: float,
              sample_weights: np.ndarray | None = None,
              tol: float = 1e-8, max_sweeps: int = 10_000,
              warm_beta: np.ndarray | None = None) -> LassoFit:
    """Weighted Lasso: minimizes (1/2n) sum w_i (y_i - x_i b)^2 + lam ||b||_1.

    Labels are centered internally (weighted mean becomes the intercept);
    design columns are expected normalized with training-window statistics.
    Weights are rescaled to mean 1, so all-ones weights reproduce the
    unweighted fit bit for bit.  Zero-variance columns are dropped with a
    warning and carry zero weight in the result.
    """
    X = np.asarray(design, dtype=float)
    y = np.asarray(labels, dtype=float)
    if X.ndim != 2 or y.ndim != 1 or X.shape[0] != len(y):
        raise ValueError("design/labels shapes disagree")
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    n, p = X.shape
    if sample_weights is None:
        w = np.ones(n)
    else:
        w = np.asarray(sample_weights, dtype=float)
        if w.shape != (n,):
            raise ValueError("sample_weights length must match rows")
        if np.any(w < 0):
            raise ValueError("sample_weights must be non-negative")
        total = float(np.sum(w))
        if total == 0.0:
            raise ValueError("sample_weights must not all be zero")
        w = w * (n / total)

    intercept = float(np.sum(w * y) / np.sum(w))
    yc = y - intercept

    spread = np.ptp(X, axis=0)
    dropped = tuple(int(j) for j in np.flatnonzero(spread == 0.0))
    if dropped:
        warnings.warn(f"dropping {len(dropped)} zero-variance design columns",
                      RuntimeWarning, stacklevel=2)

    Xf = np.asfortranarray(X)
    beta = np.zeros(p) if warm_beta is None else np.asarray(warm_beta, dtype=float).copy()
    # zero-variance columns never enter: their col_sq is 0 only if the column
    # is identically zero, so explicitly zero any warm coefficients on them
    for j in dropped:
        beta[j] = 0.0
    Xwork = Xf.copy() if dropped else Xf
    for j in dropped:
        Xwork[:, j] = 0.0
    sweeps, converged = _cd_solve(Xwork, yc, w, float(lam), beta,
                                  float(tol), int(max_sweeps))
    if not converged:
        warnings.warn(f"coordinate descent hit the sweep cap ({max_sweeps})",
                      RuntimeWarning, stacklevel=2)
    return LassoFit(beta, intercept, float(lam), int(sweeps), bool(converged), dropped)


@njit(cache=True)
def _max_abs_col_dot(X, w, r):
    """max_j |sum_i X[i,j] w[i] r[i]|, accumulated exactly as _cd_solve does."""
    n, p = X.shape
    worst = 0.0
    for j in range(p):
        acc = 0.0
        for i in range(n):
            acc += X[i, j] * w[i] * r[i]
        a = abs(acc)
        if a > worst:
            worst = a
    return worst


def lambda_max(design: np.ndarray, labels: np.ndarray,
               sample_weights: np.ndarray | None = None) -> float:
    """Smallest lambda at which the Lasso solution is identically zero.

    Uses the solver's own accumulation order so the bound is exact: fitting
    at this value (or above) yields bitwise-zero coefficients.
    """
    X = np.asarray(design, dtype=float)
    y = np.asarray(labels, dtype=float)
    n = len(y)
    if sample_weights is None:
        w = np.ones(n)
    else:
        w = np.asarray(sample_weights, dtype=float)
        w = w * (n / float(np.sum(w)))
    yc = y - float(np.sum(w * y) / np.sum(w))
    return float(_max_abs_col_dot(np.asfortranarray(X), w, yc)) / n


def kkt_residual(design: np.ndarray, labels: np.ndarray, lam: float,
                 fit: LassoFit, sample_weights: np.ndarray | None = None) -> float:
    """Max KKT violation: 0 at an exact optimum of the Lasso objective."""
    X = np.asarray(design, dtype=float)
    y = np.asarray(labels, dtype=float)
    n = len(y)
    w = np.ones(n) if sample_weights is None else np.asarray(sample_weights, dtype=float)
    w = w * (n / float(np.sum(w)))
    r = (y - fit.intercept) - X @ fit.coef
    g = -(X.T @ (w * r)) / n
    worst = 0.0
    for j in range(X.shape[1]):
        if j in fit.dropped:
            continue
        if fit.coef[j] == 0.0:
            worst = max(worst, max(0.0, abs(g[j]) - lam))
        else:
            worst = max(worst, abs(g[j] + lam * np.sign(fit.coef[j])))
    return float(worst)


def predict_lasso(fit: LassoFit, feature_row: np.ndarray,
                  label_normalizer: Normalizer) -> float:
    """De-normalized census estimate for one normalized feature row."""
    row = np.asarray(feature_row, dtype=float)
    if row.shape != fit.coef.shape:
        raise ValueError(
            f"feature row has {row.shape} entries, model expects {fit.coef.shape}")
    return float(label_normalizer.de_normalize(fit.intercept + row @ fit.coef))


# ---------------------------------------------------------------------------
# lambda selection with permuted-copy decoys
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LambdaSelection:
    lam: float
    flagged: bool
    grid: tuple[float, ...]
    fdp: tuple[float, ...]
    n_selected: tuple[int, ...]
    selected_decoys_at_lam: int
    selected_real_at_lam: int


def make_decoys(design: np.ndarray, decoy_count: int, rng: np.random.Generator) -> np.ndarray:
    """Row-permuted copies of (randomly chosen) real columns."""
    n, p = design.shape
    cols = np.arange(p) if decoy_count == p else rng.choice(p, size=decoy_count, replace=True)
    decoys = np.empty((n, decoy_count))
    for k, j in enumerate(cols):
        decoys[:, k] = design[rng.permutation(n), j]
    return decoys


def select_lambda_fp(design: np.ndarray, labels: np.ndarray,
                     config: LassoConfig, seed: int = 0) -> LambdaSelection:
    """Smallest grid lambda keeping the decoy share of selections at or
    under ``fp_target``; lambda_max with a flag when nothing qualifies.

    Decoy columns only steer the choice of lambda; they are excluded from
    any model later fitted at the returned value.
    """
    X = np.asarray(design, dtype=float)
    y = np.asarray(labels, dtype=float)
    n, p = X.shape
    rng = np.random.default_rng(seed)
    decoy_count = p if config.decoy_count is None else config.decoy_count
    X_aug = np.hstack([X, make_decoys(X, decoy_count, rng)])

    lmax = lambda_max(X_aug, y)
    if config.lambda_grid is not None:
        grid = np.asarray(config.lambda_grid, dtype=float)
    else:
        grid = np.geomspace(lmax, lmax / 100.0, config.grid_size)

    fdp = np.empty(len(grid))
    n_sel = np.empty(len(grid), dtype=int)
    n_dec = np.empty(len(grid), dtype=int)
    beta = np.zeros(X_aug.shape[1])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for i, lam in enumerate(grid):  # descending: warm-start along the path
            fit = fit_lasso(X_aug, y, float(lam), warm_beta=beta)
            beta = fit.coef
            active = fit.active
            dec = int(np.sum(active >= p))
            tot = len(active)
            fdp[i] = (dec / tot) if tot > 0 else 0.0
            n_sel[i] = tot
            n_dec[i] = dec

    ok = np.flatnonzero(fdp <= config.fp_target)
    if len(ok) == 0:
        idx, flagged = int(np.argmax(grid)), True
    else:
        idx, flagged = int(ok[np.argmin(grid[ok])]), False
    return LambdaSelection(float(grid[idx]), flagged, tuple(grid), tuple(fdp),
                           tuple(int(v) for v in n_sel), int(n_dec[idx]),
                           int(n_sel[idx] - n_dec[idx]))


# ---------------------------------------------------------------------------
# local weighting
# ---------------------------------------------------------------------------


def local_weights(train_times: np.ndarray, forecast_time: float,
                  length_scale: float) -> np.ndarray:
    """RBF weights exp(-(T - t)^2 / (2 l^2)); 1 at the forecast time."""
    if length_scale <= 0:
        raise ValueError("length_scale must be positive")
    t = np.asarray(train_times, dtype=float)
    return np.exp(-((forecast_time - t) ** 2) / (2.0 * length_scale**2))


def select_length_scale(times: np.ndarray, raw_design: np.ndarray,
                        labels: np.ndarray, config: LocalWeightConfig,
                        lam: float) -> float:
    """Validation-week MSE selection of the local RBF length scale.

    The last ``validation_span`` hours form the validation week; for each
    candidate scale a weighted Lasso is fitted on the earlier rows (weights
    centered on the validation start) and scored on the week.  Ties break
    toward the larger scale.
    """
    t = np.asarray(times, dtype=float)
    X = np.asarray(raw_design, dtype=float)
    y = np.asarray(labels, dtype=float)
    val_start = t[-1] - config.validation_span + 1
    train_mask = t < val_start
    val_mask = ~train_mask
    if train_mask.sum() < 24:
        raise ValueError(
            "insufficient history: need at least 24 training hours before "
            f"the {config.validation_span:.0f}-hour validation span")

    norm = Normalizer.fit(X[train_mask], axis=0)
    Xn_train = norm.normalize(X[train_mask])
    Xn_val = norm.normalize(X[val_mask])
    y_norm = Normalizer.fit(y[train_mask])
    yn_train = y_norm.normalize(y[train_mask])
    y_val = y[val_mask]

    best_scale, best_mse = None, np.inf
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for scale in sorted(config.candidate_scales):
            w = local_weights(t[train_mask], val_start, scale)
            fit = fit_lasso(Xn_train, yn_train, lam, sample_weights=w)
            preds = y_norm.de_normalize(fit.intercept + Xn_val @ fit.coef)
            mse = float(np.mean((preds - y_val) ** 2))
            if mse <= best_mse:
                best_scale, best_mse = scale, mse
    return float(best_scale)
