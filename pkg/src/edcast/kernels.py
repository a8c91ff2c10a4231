"""Composite covariance kernel for hourly census forecasting.

The covariance combines cosine, linear, and RBF components over a time
index ``t`` (hours since the start of the current training window) and
grouped feature vectors ``x_g``:

    K1 = Cos1(t, t') + Lin1(t, t') + sum_g RBF1g(x_g, x_g')
    K2 = Cos2(t, t') * Lin2(t, t') + sum_g RBF2g(x_g, x_g') * Lin2g(t, t')
    K  = K1 + K2 + K1 * K2

All positive hyperparameters (scales, periods, lengthscales) are stored in
unconstrained form and mapped through a softplus; linear offsets are
unconstrained reals.  Gradients returned by :func:`grad_gram` are taken
with respect to the unconstrained parameters, chain rule included.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

TWO_PI = 2.0 * math.pi

# Broadcasted pairwise differences are exact but O(n*m*d) in memory; above
# this element count fall back to the gemm expansion and re-symmetrize.
_SQDIST_BROADCAST_LIMIT = 4_000_000


class GroupId(str, enum.Enum):
    """Feature groups fed to the per-group RBF components."""

    CENSUS_STATS = "census_stats"
    ARRIVALS_DISCHARGES = "arrivals_discharges"
    HOUR_OF_DAY = "hour_of_day"
    ACUITY_SHARES = "acuity_shares"
    ARRIVAL_METHOD_SHARES = "arrival_method_shares"
    PHYSICIAN_COUNT = "physician_count"


@dataclass(frozen=True)
class FeatureGroup:
    group_id: GroupId
    columns: tuple[int, ...]

    def __post_init__(self):
        if len(self.columns) == 0:
            raise ValueError(f"group {self.group_id} has no columns")
        if any(c < 0 for c in self.columns):
            raise ValueError(f"group {self.group_id} has negative column index")


@dataclass(frozen=True)
class FeatureLayout:
    """Disjoint, exhaustive partition of the feature columns into groups.

    Kernel input rows are laid out as ``[t, f_0, ..., f_{F-1}]``: column 0 is
    the time index, the remaining ``n_feature_columns`` are indexed by the
    groups' ``columns`` (0-based within the feature block).
    """

    groups: tuple[FeatureGroup, ...]
    n_feature_columns: int

    def __post_init__(self):
        seen: set[int] = set()
        for g in self.groups:
            for c in g.columns:
                if c >= self.n_feature_columns:
                    raise ValueError(
                        f"group {g.group_id} column {c} out of range "
                        f"(layout has {self.n_feature_columns} feature columns)"
                    )
                if c in seen:
                    raise ValueError(f"column {c} assigned to more than one group")
                seen.add(c)
        if len(seen) != self.n_feature_columns:
            missing = sorted(set(range(self.n_feature_columns)) - seen)
            raise ValueError(f"feature columns not covered by any group: {missing}")

    @property
    def n_columns(self) -> int:
        """Total row width including the leading time column."""
        return 1 + self.n_feature_columns


@dataclass(frozen=True)
class KernelSpec:
    """The fixed K1 + K2 + K1*K2 expression tree over a feature layout."""

    layout: FeatureLayout

    @property
    def param_keys(self) -> tuple[str, ...]:
        return spec_param_keys(self.layout)

    @property
    def n_params(self) -> int:
        return len(self.param_keys)


def spec_param_keys(layout: FeatureLayout) -> tuple[str, ...]:
    keys = ["k1.cos.scale", "k1.cos.period", "k1.lin.scale", "k1.lin.offset"]
    gids = [g.group_id.value for g in layout.groups]
    for gid in gids:
        keys += [f"k1.rbf.{gid}.scale", f"k1.rbf.{gid}.lengthscale"]
    keys += ["k2.cos.scale", "k2.cos.period", "k2.lin.scale", "k2.lin.offset"]
    for gid in gids:
        keys += [f"k2.rbf.{gid}.scale", f"k2.rbf.{gid}.lengthscale"]
    for gid in gids:
        keys += [f"k2.linmix.{gid}.scale", f"k2.linmix.{gid}.offset"]
    return tuple(keys)


def _is_offset_key(key: str) -> bool:
    return key.endswith(".offset")


def softplus(x):
    """Numerically stable log(1 + exp(x))."""
    x = np.asarray(x, dtype=float)
    out = np.where(x > 30.0, x, np.log1p(np.exp(np.minimum(x, 30.0))))
    return out if out.ndim else float(out)


def softplus_inv(y):
    """Inverse of :func:`softplus` for y > 0."""
    y = np.asarray(y, dtype=float)
    if np.any(y <= 0):
        raise ValueError("softplus_inv requires strictly positive input")
    out = np.where(y > 30.0, y, y + np.log(-np.expm1(-np.minimum(y, 30.0))))
    return out if out.ndim else float(out)


def _sigmoid(x):
    x = np.asarray(x, dtype=float)
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.clip(x, -60, 60))),
                    np.exp(np.clip(x, -60, 60)) / (1.0 + np.exp(np.clip(x, -60, 60))))


@dataclass(frozen=True)
class KernelParams:
    """Unconstrained hyperparameter vector, keyed per the kernel spec.

    ``raw`` holds softplus pre-images for positive parameters and raw reals
    for linear offsets.  The vector is ordered exactly as ``keys``; two
    params objects with equal keys and bit-equal raw vectors evaluate to
    bit-identical kernels.
    """

    keys: tuple[str, ...]
    raw: np.ndarray

    def __post_init__(self):
        raw = np.asarray(self.raw, dtype=float)
        if raw.shape != (len(self.keys),):
            raise ValueError(
                f"raw vector has shape {raw.shape}, expected ({len(self.keys)},)"
            )
        raw = raw.copy()
        raw.setflags(write=False)
        object.__setattr__(self, "raw", raw)

    def index(self, key: str) -> int:
        try:
            return self.keys.index(key)
        except ValueError:
            raise KeyError(f"unknown kernel parameter {key!r}") from None

    def value(self, key: str) -> float:
        """Constrained (model-space) value of one parameter."""
        i = self.index(key)
        r = self.raw[i]
        return r if _is_offset_key(key) else softplus(r)

    def constrained(self) -> np.ndarray:
        vals = np.array([self.raw[i] if _is_offset_key(k) else softplus(self.raw[i])
                         for i, k in enumerate(self.keys)])
        return vals

    def with_raw(self, raw: np.ndarray) -> "KernelParams":
        return KernelParams(self.keys, np.asarray(raw, dtype=float))

    def with_value(self, key: str, value: float) -> "KernelParams":
        raw = self.raw.copy()
        i = self.index(key)
        raw[i] = value if _is_offset_key(key) else softplus_inv(value)
        return KernelParams(self.keys, raw)

    def to_text(self) -> str:
        """Flat ordered key/value document; floats use full-precision repr."""
        lines = [f"{k} = {float(self.raw[i])!r}" for i, k in enumerate(self.keys)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, spec: "KernelSpec") -> "KernelParams":
        values: dict[str, float] = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"malformed params line {lineno}: {line!r}")
            key, _, val = line.partition("=")
            values[key.strip()] = float(val.strip())
        return cls.from_items(values, spec)

    @classmethod
    def from_items(cls, values: dict[str, float], spec: "KernelSpec") -> "KernelParams":
        expected = spec.param_keys
        if set(values) != set(expected):
            raise ValueError(
                "params document keys do not match the kernel spec "
                f"(missing {sorted(set(expected) - set(values))}, "
                f"unexpected {sorted(set(values) - set(expected))})"
            )
        return cls(expected, np.array([float(values[k]) for k in expected]))


def default_params(spec: KernelSpec) -> KernelParams:
    """Cold-start initialization: unit scales and lengthscales, zero offsets,
    a daily period on kernel 1 and a weekly period on kernel 2."""
    keys = spec.param_keys
    raw = np.empty(len(keys))
    for i, k in enumerate(keys):
        if _is_offset_key(k):
            raw[i] = 0.0
        elif k == "k1.cos.period":
            raw[i] = softplus_inv(24.0)
        elif k == "k2.cos.period":
            raw[i] = softplus_inv(168.0)
        else:
            raw[i] = softplus_inv(1.0)
    return KernelParams(keys, raw)


# ---------------------------------------------------------------------------
# base kernels (scalar form)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CosineParams:
    scale: float
    period: float

    def __post_init__(self):
        if self.scale <= 0 or self.period <= 0:
            raise ValueError("cosine scale and period must be positive")


@dataclass(frozen=True)
class LinearParams:
    scale: float
    offset: float

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError("linear scale must be positive")


@dataclass(frozen=True)
class RbfParams:
    scale: float
    lengthscale: float

    def __post_init__(self):
        if self.scale <= 0 or self.lengthscale <= 0:
            raise ValueError("rbf scale and lengthscale must be positive")


def _check_finite_scalar(name, v):
    if not np.all(np.isfinite(v)):
        bad = np.flatnonzero(~np.isfinite(np.atleast_1d(v)))
        raise ValueError(f"non-finite value in {name} at position {bad[0]}")


def eval_base(kind: str, params, a, b) -> float:
    """Evaluate one base kernel at a single pair of inputs.

    ``a``/``b`` are scalar time indices for ``"cosine"`` and ``"linear"``,
    and group feature vectors for ``"rbf"``.  Symmetric in (a, b).
    """
    _check_finite_scalar("first input", a)
    _check_finite_scalar("second input", b)
    if kind == "cosine":
        return params.scale * math.cos(TWO_PI * (float(a) - float(b)) / params.period)
    if kind == "linear":
        return params.scale * (float(a) - params.offset) * (float(b) - params.offset)
    if kind == "rbf":
        av = np.atleast_1d(np.asarray(a, dtype=float))
        bv = np.atleast_1d(np.asarray(b, dtype=float))
        if av.shape != bv.shape:
            raise ValueError(f"rbf inputs have mismatched shapes {av.shape} vs {bv.shape}")
        sq = float(np.sum((av - bv) ** 2))
        return params.scale * math.exp(-0.5 * sq / params.lengthscale**2)
    raise ValueError(f"unknown base kernel kind {kind!r}")


# ---------------------------------------------------------------------------
# gram evaluation
# ---------------------------------------------------------------------------


def _validate_rows(layout: FeatureLayout, X: np.ndarray, name: str) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {X.shape}")
    if X.shape[1] != layout.n_columns:
        raise ValueError(
            f"{name} has {X.shape[1]} columns but the layout declares "
            f"{layout.n_columns} (time + {layout.n_feature_columns} features)"
        )
    if not np.all(np.isfinite(X)):
        bad = np.argwhere(~np.isfinite(X))[0]
        col = "time" if bad[1] == 0 else f"feature column {bad[1] - 1}"
        raise ValueError(f"non-finite value in {name} row {bad[0]}, {col}")
    return X


def _sqdist(A: np.ndarray, B: np.ndarray, same: bool) -> np.ndarray:
    n, m, d = A.shape[0], B.shape[0], A.shape[1]
    if n * m * d <= _SQDIST_BROADCAST_LIMIT:
        diff = A[:, None, :] - B[None, :, :]
        return np.einsum("ijk,ijk->ij", diff, diff)
    sq = np.sum(A * A, axis=1)[:, None] + np.sum(B * B, axis=1)[None, :] - 2.0 * (A @ B.T)
    if same:
        sq = 0.5 * (sq + sq.T)
    return np.maximum(sq, 0.0)


class _Decoded:
    """Constrained parameter values unpacked from a KernelParams vector."""

    __slots__ = ("c1s", "c1p", "l1s", "l1c", "r1s", "r1l",
                 "c2s", "c2p", "l2s", "l2c", "r2s", "r2l", "m2s", "m2c")

    def __init__(self, spec: KernelSpec, params: KernelParams):
        if params.keys != spec.param_keys:
            raise ValueError("params keys do not match the kernel spec")
        sp = softplus(params.raw)
        raw = params.raw
        idx = {k: i for i, k in enumerate(params.keys)}
        get = lambda k: sp[idx[k]]
        self.c1s, self.c1p = get("k1.cos.scale"), get("k1.cos.period")
        self.l1s, self.l1c = get("k1.lin.scale"), raw[idx["k1.lin.offset"]]
        self.c2s, self.c2p = get("k2.cos.scale"), get("k2.cos.period")
        self.l2s, self.l2c = get("k2.lin.scale"), raw[idx["k2.lin.offset"]]
        gids = [g.group_id.value for g in spec.layout.groups]
        self.r1s = np.array([get(f"k1.rbf.{g}.scale") for g in gids])
        self.r1l = np.array([get(f"k1.rbf.{g}.lengthscale") for g in gids])
        self.r2s = np.array([get(f"k2.rbf.{g}.scale") for g in gids])
        self.r2l = np.array([get(f"k2.rbf.{g}.lengthscale") for g in gids])
        self.m2s = np.array([get(f"k2.linmix.{g}.scale") for g in gids])
        self.m2c = np.array([raw[idx[f"k2.linmix.{g}.offset"]] for g in gids])


class _GramParts:
    """Cached intermediate matrices shared by value and gradient assembly."""

    def __init__(self, spec: KernelSpec, params: KernelParams,
                 X: np.ndarray, Y: np.ndarray | None):
        layout = spec.layout
        X = _validate_rows(layout, X, "X_rows")
        same = Y is None
        Y = X if same else _validate_rows(layout, Y, "Y_rows")
        p = _Decoded(spec, params)
        self.spec, self.p, self.same = spec, p, same
        self._raw_vec = params.raw
        self.ta, self.tb = X[:, 0], Y[:, 0]
        Fa, Fb = X[:, 1:], Y[:, 1:]
        self.dt = self.ta[:, None] - self.tb[None, :]

        self.cos1_unit = np.cos(TWO_PI * self.dt / p.c1p)
        self.cos2_unit = np.cos(TWO_PI * self.dt / p.c2p)
        self.lin1_unit = (self.ta - p.l1c)[:, None] * (self.tb - p.l1c)[None, :]
        self.lin2_unit = (self.ta - p.l2c)[:, None] * (self.tb - p.l2c)[None, :]

        self.sq = []
        self.rbf1_unit, self.rbf2_unit, self.linmix_unit = [], [], []
        for gi, g in enumerate(layout.groups):
            cols = list(g.columns)
            S = _sqdist(np.ascontiguousarray(Fa[:, cols]),
                        np.ascontiguousarray(Fb[:, cols]), same)
            self.sq.append(S)
            self.rbf1_unit.append(np.exp(-0.5 * S / p.r1l[gi] ** 2))
            self.rbf2_unit.append(np.exp(-0.5 * S / p.r2l[gi] ** 2))
            self.linmix_unit.append(
                (self.ta - p.m2c[gi])[:, None] * (self.tb - p.m2c[gi])[None, :]
            )

        self.cos2 = p.c2s * self.cos2_unit
        self.lin2 = p.l2s * self.lin2_unit
        K1 = p.c1s * self.cos1_unit + p.l1s * self.lin1_unit
        for gi in range(len(layout.groups)):
            K1 = K1 + p.r1s[gi] * self.rbf1_unit[gi]
        K2 = self.cos2 * self.lin2
        for gi in range(len(layout.groups)):
            K2 = K2 + (p.r2s[gi] * self.rbf2_unit[gi]) * (p.m2s[gi] * self.linmix_unit[gi])
        self.K1, self.K2 = K1, K2
        self.K = K1 + K2 + K1 * K2

    def grad_matrices(self) -> Iterable[tuple[str, np.ndarray]]:
        """Yield (key, dK/d theta_raw) in spec parameter order."""
        p, spec = self.p, self.spec
        one_plus_K2 = 1.0 + self.K2
        one_plus_K1 = 1.0 + self.K1
        raw = {k: i for i, k in enumerate(spec.param_keys)}

        def chain(key, constrained_grad, raw_vec):
            i = raw[key]
            mult = 1.0 if _is_offset_key(key) else _sigmoid(raw_vec[i])
            return constrained_grad * mult

        raw_vec = self._raw_vec
        # K1 components: dK = dK1 * (1 + K2)
        yield "k1.cos.scale", chain("k1.cos.scale", self.cos1_unit * one_plus_K2, raw_vec)
        dcos1_dp = p.c1s * np.sin(TWO_PI * self.dt / p.c1p) * (TWO_PI * self.dt / p.c1p**2)
        yield "k1.cos.period", chain("k1.cos.period", dcos1_dp * one_plus_K2, raw_vec)
        yield "k1.lin.scale", chain("k1.lin.scale", self.lin1_unit * one_plus_K2, raw_vec)
        dlin1_dc = -p.l1s * ((self.ta - p.l1c)[:, None] + (self.tb - p.l1c)[None, :])
        yield "k1.lin.offset", chain("k1.lin.offset", dlin1_dc * one_plus_K2, raw_vec)
        for gi, g in enumerate(spec.layout.groups):
            gid = g.group_id.value
            yield (f"k1.rbf.{gid}.scale",
                   chain(f"k1.rbf.{gid}.scale", self.rbf1_unit[gi] * one_plus_K2, raw_vec))
            dl = p.r1s[gi] * self.rbf1_unit[gi] * self.sq[gi] / p.r1l[gi] ** 3
            yield (f"k1.rbf.{gid}.lengthscale",
                   chain(f"k1.rbf.{gid}.lengthscale", dl * one_plus_K2, raw_vec))
        # K2 components: dK = dK2 * (1 + K1)
        yield "k2.cos.scale", chain("k2.cos.scale", self.cos2_unit * self.lin2 * one_plus_K1, raw_vec)
        dcos2_dp = p.c2s * np.sin(TWO_PI * self.dt / p.c2p) * (TWO_PI * self.dt / p.c2p**2)
        yield "k2.cos.period", chain("k2.cos.period", dcos2_dp * self.lin2 * one_plus_K1, raw_vec)
        yield "k2.lin.scale", chain("k2.lin.scale", self.cos2 * self.lin2_unit * one_plus_K1, raw_vec)
        dlin2_dc = -p.l2s * ((self.ta - p.l2c)[:, None] + (self.tb - p.l2c)[None, :])
        yield "k2.lin.offset", chain("k2.lin.offset", self.cos2 * dlin2_dc * one_plus_K1, raw_vec)
        for gi, g in enumerate(spec.layout.groups):
            gid = g.group_id.value
            linmix = p.m2s[gi] * self.linmix_unit[gi]
            yield (f"k2.rbf.{gid}.scale",
                   chain(f"k2.rbf.{gid}.scale", self.rbf2_unit[gi] * linmix * one_plus_K1, raw_vec))
            dl = p.r2s[gi] * self.rbf2_unit[gi] * self.sq[gi] / p.r2l[gi] ** 3
            yield (f"k2.rbf.{gid}.lengthscale",
                   chain(f"k2.rbf.{gid}.lengthscale", dl * linmix * one_plus_K1, raw_vec))
        for gi, g in enumerate(spec.layout.groups):
            gid = g.group_id.value
            rbf2 = p.r2s[gi] * self.rbf2_unit[gi]
            yield (f"k2.linmix.{gid}.scale",
                   chain(f"k2.linmix.{gid}.scale", rbf2 * self.linmix_unit[gi] * one_plus_K1, raw_vec))
            dmix_dc = -p.m2s[gi] * ((self.ta - p.m2c[gi])[:, None] + (self.tb - p.m2c[gi])[None, :])
            yield (f"k2.linmix.{gid}.offset",
                   chain(f"k2.linmix.{gid}.offset", rbf2 * dmix_dc * one_plus_K1, raw_vec))


def eval_gram(spec: KernelSpec, params: KernelParams,
              X_rows: np.ndarray, Y_rows: np.ndarray | None = None) -> np.ndarray:
    """Full composite Gram matrix K(X, Y).

    Parameters
    ----------
    X_rows, Y_rows
        Arrays of shape (n, 1 + F) laid out per ``spec.layout`` (time index
        in column 0).  With ``Y_rows=None`` the symmetric Gram K(X, X) is
        returned.
    """
    return _gram_parts(spec, params, X_rows, Y_rows).K


def eval_gram_parts(spec: KernelSpec, params: KernelParams,
                    X_rows: np.ndarray, Y_rows: np.ndarray | None = None):
    """(K, K1, K2) for the fixed tree K = K1 + K2 + K1*K2."""
    parts = _gram_parts(spec, params, X_rows, Y_rows)
    return parts.K, parts.K1, parts.K2


def eval_diag(spec: KernelSpec, params: KernelParams, X_rows: np.ndarray) -> np.ndarray:
    """k(x, x) per row; the prior variance at each input."""
    X = _validate_rows(spec.layout, X_rows, "X_rows")
    p = _Decoded(spec, params)
    t = X[:, 0]
    k1 = p.c1s + p.l1s * (t - p.l1c) ** 2 + float(np.sum(p.r1s))
    k2 = p.c2s * p.l2s * (t - p.l2c) ** 2
    for gi in range(len(spec.layout.groups)):
        k2 = k2 + p.r2s[gi] * p.m2s[gi] * (t - p.m2c[gi]) ** 2
    return k1 + k2 + k1 * k2


def grad_gram(spec: KernelSpec, params: KernelParams, X_rows: np.ndarray) -> list[np.ndarray]:
    """dK/d theta for every unconstrained hyperparameter, in key order.

    Includes the softplus chain-rule factor for positive parameters, so the
    matrices differentiate the Gram with respect to the raw vector directly.
    """
    parts = _gram_parts(spec, params, X_rows, None)
    mats = []
    for key, mat in parts.grad_matrices():
        mats.append(mat)
    return mats


def gram_and_weighted_grad(spec: KernelSpec, params: KernelParams,
                           X_rows: np.ndarray, weight: np.ndarray):
    """K(X, X) plus the vector v[i] = sum(weight * dK/d theta_i).

    The contraction avoids materializing all gradient matrices at once; the
    marginal-likelihood gradient uses weight = (alpha alpha' - K^-1)/2.
    """
    parts = _gram_parts(spec, params, X_rows, None)
    vec = np.empty(spec.n_params)
    for i, (key, mat) in enumerate(parts.grad_matrices()):
        vec[i] = float(np.sum(weight * mat))
    return parts.K, vec


def _gram_parts(spec, params, X, Y):
    return _GramParts(spec, params, X, Y)


def psd_jitter(K: np.ndarray, rel: float = 1e-6) -> float:
    """Diagonal jitter proportional to the mean prior variance."""
    return rel * float(np.mean(np.diag(K)))
