"""Exact GP regression with Gaussian noise.

Hyperparameters (kernel params plus a learned noise variance) are fitted by
maximizing the exact marginal log-likelihood with Adam.  The optimizer keeps
the best iterate seen, so the accepted trace is monotone and the returned
model is never worse than its initialization; training stops once an
iteration fails to improve the best likelihood by the configured tolerance.

One model is fitted per forecasting lead; models are immutable after fit
and share no state.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular
from scipy.special import ndtri

from . import kernels
from .kernels import KernelParams, KernelSpec, softplus, softplus_inv
from .normalize import Normalizer

log = logging.getLogger("edcast.gp")

LOG_2PI = math.log(2.0 * math.pi)

# Base factorization jitter relative to the mean prior variance; escalated
# x10 up to three retries before giving up.
FACTOR_JITTER_REL = 1e-10
JITTER_RETRIES = 3

PARAMS_SCHEMA_VERSION = 1
DEFAULT_NOISE_VARIANCE = 0.1


class GPTrainingError(RuntimeError):
    """Factorization failed even after jitter escalation."""


@dataclass(frozen=True)
class OptConfig:
    learning_rate: float = 0.1
    mll_tolerance: float = 1e-3
    max_iters: int = 250
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.mll_tolerance <= 0:
            raise ValueError("mll_tolerance must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be a positive integer")


@dataclass(frozen=True)
class GPWindow:
    """Ordered training rows with normalized targets.

    ``t`` is hours since the window start (re-zeroed whenever the window
    moves), ``X`` the normalized feature block, ``y`` the normalized targets
    with their normalizer stored alongside.
    """

    t: np.ndarray
    X: np.ndarray
    y: np.ndarray
    y_norm: Normalizer

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        X = np.asarray(self.X, dtype=float)
        y = np.asarray(self.y, dtype=float)
        if t.ndim != 1 or y.ndim != 1 or X.ndim != 2:
            raise ValueError("window arrays have wrong dimensionality")
        if not (len(t) == len(y) == X.shape[0]):
            raise ValueError("window arrays disagree on row count")
        if np.any(np.diff(t) < 0):
            raise ValueError("time index must be monotone non-decreasing")
        if np.any(t < 0):
            raise ValueError("time index must be non-negative")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @classmethod
    def from_raw(cls, t, X, y_raw) -> "GPWindow":
        norm = Normalizer.fit(np.asarray(y_raw, dtype=float))
        return cls(t, X, norm.normalize(y_raw), norm)

    @property
    def n(self) -> int:
        return len(self.y)

    def rows(self) -> np.ndarray:
        return np.column_stack([self.t, self.X])


@dataclass(frozen=True)
class GPInit:
    params: KernelParams
    noise_raw: float
    source: str  # "warm" or "default"


@dataclass(frozen=True)
class GPModel:
    spec: KernelSpec
    params: KernelParams
    noise_raw: float
    window: GPWindow
    factor: np.ndarray
    alpha: np.ndarray
    jitter: float
    mll: float
    status: str = "conditioned"
    iterations: int = 0
    accepted_mlls: tuple[float, ...] = ()
    noise_floor: float = 0.0

    @property
    def noise_variance(self) -> float:
        return self.noise_floor + float(softplus(self.noise_raw))

    @property
    def flagged(self) -> bool:
        return self.status.startswith("aborted")


def default_init(spec: KernelSpec, noise_variance: float = DEFAULT_NOISE_VARIANCE,
                 noise_floor: float = 0.0) -> GPInit:
    free = max(noise_variance - noise_floor, 1e-3)
    return GPInit(kernels.default_params(spec), float(softplus_inv(free)), "default")


def warm_start(previous: GPModel | None, spec: KernelSpec) -> GPInit:
    """Previous day's unconstrained hyperparameters (and noise) as init.

    Falls back to the default initialization when there is no predecessor.
    """
    if previous is None:
        log.warning("warm start unavailable, falling back to default initialization")
        return default_init(spec)
    return GPInit(previous.params, previous.noise_raw, "warm")


def _chol_with_escalation(K: np.ndarray, noise: float):
    """Cholesky of K + (noise + jitter) I, escalating jitter on failure."""
    if not np.all(np.isfinite(K)):
        raise GPTrainingError("gram matrix contains non-finite entries")
    base = FACTOR_JITTER_REL * float(np.mean(np.diag(K)))
    jitter = base if base > 0 else FACTOR_JITTER_REL
    n = K.shape[0]
    for attempt in range(JITTER_RETRIES + 1):
        try:
            L = cholesky(K + (noise + jitter) * np.eye(n), lower=True)
            return L, jitter
        except np.linalg.LinAlgError:
            jitter *= 10.0
        except ValueError:
            jitter *= 10.0
    eigs = np.linalg.eigvalsh(K + noise * np.eye(n))
    raise GPTrainingError(
        f"factorization failed after {JITTER_RETRIES} jitter escalations "
        f"(n={n}, min eig={eigs[0]:.3e}, mean diag={np.mean(np.diag(K)):.3e})"
    )


def condition(spec: KernelSpec, params: KernelParams, noise_raw: float,
              window: GPWindow, status: str = "conditioned",
              iterations: int = 0, accepted_mlls: tuple[float, ...] = (),
              noise_floor: float = 0.0) -> GPModel:
    """Factorize the noisy Gram on the window and cache the solved weights.

    ``noise_floor`` adds a fixed lower bound under the learned (softplus)
    noise term; the default 0 reproduces the plain learned-noise model.
    """
    if window.n < 1:
        raise ValueError("window must be non-empty")
    K = kernels.eval_gram(spec, params, window.rows())
    noise = noise_floor + float(softplus(noise_raw))
    L, jitter = _chol_with_escalation(K, noise)
    alpha = cho_solve((L, True), window.y)
    mll = _mll_from_factor(L, alpha, window.y)
    return GPModel(spec, params, float(noise_raw), window, L, alpha,
                   jitter, mll, status, iterations, accepted_mlls, noise_floor)


def _mll_from_factor(L: np.ndarray, alpha: np.ndarray, y: np.ndarray) -> float:
    n = len(y)
    return float(-0.5 * y @ alpha - np.sum(np.log(np.diag(L))) - 0.5 * n * LOG_2PI)


def log_marginal_likelihood(model: GPModel) -> float:
    """-1/2 y'a - sum(log diag L) - n/2 log 2pi from the cached factor."""
    return _mll_from_factor(model.factor, model.alpha, model.window.y)


def mll_value_and_grad(spec: KernelSpec, theta: np.ndarray, window: GPWindow,
                       noise_floor: float = 0.0):
    """MLL and its gradient w.r.t. [kernel raw params..., noise_raw].

    Raises GPTrainingError when the Gram cannot be factorized.
    """
    params = KernelParams(spec.param_keys, theta[:-1])
    noise_raw = float(theta[-1])
    noise = noise_floor + float(softplus(noise_raw))
    parts = kernels._gram_parts(spec, params, window.rows(), None)
    L, _ = _chol_with_escalation(parts.K, noise)
    alpha = cho_solve((L, True), window.y)
    mll = _mll_from_factor(L, alpha, window.y)
    Kinv = cho_solve((L, True), np.eye(window.n))
    W = 0.5 * (np.outer(alpha, alpha) - Kinv)
    grad = np.empty(len(theta))
    for i, (_key, mat) in enumerate(parts.grad_matrices()):
        grad[i] = float(np.sum(W * mat))
    grad[-1] = float(np.trace(W)) * float(kernels._sigmoid(noise_raw))
    return mll, grad


def fit(spec: KernelSpec, window: GPWindow, init_params: GPInit | KernelParams,
        opt_config: OptConfig | None = None,
        noise_raw: float | None = None, noise_floor: float = 0.0) -> GPModel:
    """Adam ascent on the marginal log-likelihood, keeping the best iterate.

    Stops when an iteration improves the best MLL by less than
    ``mll_tolerance`` (a worsening step counts as zero improvement), at
    ``max_iters``, or on a non-finite likelihood/gradient, in which case the
    last finite best iterate is returned with a flagged status.
    """
    if window.n < 2:
        raise ValueError("fit requires a window with at least 2 rows")
    opt = opt_config or OptConfig()
    if isinstance(init_params, GPInit):
        params0, nraw0 = init_params.params, init_params.noise_raw
    else:
        params0 = init_params
        nraw0 = noise_raw if noise_raw is not None else float(softplus_inv(DEFAULT_NOISE_VARIANCE))
    theta = np.append(params0.raw, nraw0)

    mll0, grad = mll_value_and_grad(spec, theta, window, noise_floor)
    if not (np.isfinite(mll0) and np.all(np.isfinite(grad))):
        raise GPTrainingError("non-finite marginal likelihood at initialization")
    best_theta, best_mll = theta.copy(), mll0
    accepted = [mll0]

    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    status = "max_iters"
    iters = 0
    for k in range(1, opt.max_iters + 1):
        iters = k
        m = opt.beta1 * m + (1 - opt.beta1) * grad
        v = opt.beta2 * v + (1 - opt.beta2) * grad**2
        mhat = m / (1 - opt.beta1**k)
        vhat = v / (1 - opt.beta2**k)
        theta = theta + opt.learning_rate * mhat / (np.sqrt(vhat) + opt.eps)
        try:
            mll_k, grad = mll_value_and_grad(spec, theta, window, noise_floor)
        except GPTrainingError:
            status = "aborted_factorization"
            break
        if not (np.isfinite(mll_k) and np.all(np.isfinite(grad))):
            status = "aborted_non_finite"
            break
        improvement = max(0.0, mll_k - best_mll)
        if mll_k > best_mll:
            best_mll, best_theta = mll_k, theta.copy()
            accepted.append(mll_k)
        if improvement < opt.mll_tolerance:
            status = "converged"
            break

    params = KernelParams(spec.param_keys, best_theta[:-1])
    return condition(spec, params, float(best_theta[-1]), window,
                     status=status, iterations=iters, accepted_mlls=tuple(accepted),
                     noise_floor=noise_floor)


def posterior_predict(model: GPModel, query_rows: np.ndarray):
    """Posterior mean and variance (normalized units) at the query rows.

    Variance includes the noise term and is clamped to
    [noise, prior + noise] against roundoff.
    """
    q = np.asarray(query_rows, dtype=float)
    kstar = kernels.eval_gram(model.spec, model.params, model.window.rows(), q)
    mean = kstar.T @ model.alpha
    vmat = solve_triangular(model.factor, kstar, lower=True)
    prior = kernels.eval_diag(model.spec, model.params, q)
    latent = np.clip(prior - np.sum(vmat * vmat, axis=0), 0.0, prior)
    var = latent + model.noise_variance
    return mean, var


def predict_percentile(model: GPModel, query_rows: np.ndarray, q: float) -> np.ndarray:
    """De-normalized census value at Gaussian quantile q of the posterior."""
    if not (0.0 < q < 1.0):
        raise ValueError(f"percentile must be in (0, 1), got {q}")
    mean, var = posterior_predict(model, query_rows)
    z = float(ndtri(q))
    return model.window.y_norm.de_normalize(mean + z * np.sqrt(var))


def predict_census(model: GPModel, query_rows: np.ndarray):
    """De-normalized posterior mean and variance in census units."""
    mean, var = posterior_predict(model, query_rows)
    norm = model.window.y_norm
    return norm.de_normalize(mean), var * float(norm.std) ** 2


# ---------------------------------------------------------------------------
# hyperparameter persistence (one text document per lead and retrain date)
# ---------------------------------------------------------------------------


def params_document(params: KernelParams, noise_raw: float) -> str:
    lines = [
        f"schema_version = {PARAMS_SCHEMA_VERSION}",
        "kind = edcast.gp_params",
        f"noise_raw = {float(noise_raw)!r}",
    ]
    return "\n".join(lines) + "\n" + params.to_text()


def parse_params_document(text: str, spec: KernelSpec) -> tuple[KernelParams, float]:
    entries: dict[str, str] = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"malformed params document line: {line!r}")
        key, _, val = line.partition("=")
        entries[key.strip()] = val.strip()
    version = entries.pop("schema_version", None)
    if version != str(PARAMS_SCHEMA_VERSION):
        raise ValueError(f"unsupported params schema_version {version!r}")
    entries.pop("kind", None)
    noise_raw = float(entries.pop("noise_raw"))
    params = KernelParams.from_items({k: float(v) for k, v in entries.items()}, spec)
    return params, noise_raw


def load_init(path, spec: KernelSpec) -> GPInit:
    """Warm-start init from a persisted document, default on missing/corrupt."""
    try:
        text = path.read_text()
        params, noise_raw = parse_params_document(text, spec)
        return GPInit(params, noise_raw, "warm")
    except FileNotFoundError:
        log.warning("no persisted params at %s, using default initialization", path)
    except (ValueError, KeyError) as exc:
        log.warning("corrupt params document at %s (%s), using default initialization",
                    path, exc)
    return default_init(spec)
