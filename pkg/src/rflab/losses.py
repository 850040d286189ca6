"""Training objectives: premetrics, timestep distributions, loss profiles.

The objective is a Monte-Carlo mean over pairs (x, z) and per-pair times t of
a premetric applied to the velocity residual, optionally weighted by w(t).
The ``x``-form objective (posterior-mean residual with w(t) weighting) is
supported for the squared-l2 premetric and equals the ``v``-form with
w(t) = 1/t^2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from statistics import NormalDist
from typing import Callable

import numpy as np

from .errors import ConfigError, DomainError, ShapeMismatch
from .fields import T_MAX, T_MIN, VelocityField, GmmSpec, gmm_posterior_mean, interpolate
from .tensor import Tape, Tensor, backward, sqrt, tmean, tsum

HUBER_C_PER_DIM = 0.00054  # default pseudo-Huber constant is this times the data dim

_PREMETRICS = ("squared_l2", "pseudo_huber", "perceptual_huber", "perceptual_huber_inv_t")
_STD_NORMAL = NormalDist()


class LinearFeatureDistance:
    """Squared l2 distance after a fixed random linear feature map.

    With feature_dim >= data dim the map is injective with probability one,
    so the distance vanishes only at equal inputs and the combined objective
    stays a premetric.  Stands in for a perceptual network at desk scale.
    """

    def __init__(self, data_dim: int, feature_dim: int, rng: np.random.Generator):
        if feature_dim < data_dim:
            raise ConfigError(
                f"feature_dim {feature_dim} < data dim {data_dim}: map would not be injective")
        self.matrix = rng.standard_normal((data_dim, feature_dim)) / math.sqrt(feature_dim)

    def __call__(self, a: Tensor, b: Tensor) -> Tensor:
        f = Tensor(self.matrix)
        diff = (a @ f) - (b @ f)
        return tsum(diff * diff, axis=-1)


@dataclass
class LossSpec:
    premetric: str = "squared_l2"
    parameterization: str = "v"          # 'x' or 'v'
    weighting: str = "unit"              # 'unit' or 'inverse_t_squared'
    huber_c: float | None = None         # None -> HUBER_C_PER_DIM * dim
    hook: Callable[[Tensor, Tensor], Tensor] | None = None

    def __post_init__(self):
        if self.premetric not in _PREMETRICS:
            raise ConfigError(f"unknown premetric {self.premetric!r}")
        if self.parameterization not in ("x", "v"):
            raise ConfigError(f"parameterization must be 'x' or 'v', got {self.parameterization!r}")
        if self.weighting not in ("unit", "inverse_t_squared"):
            raise ConfigError(f"unknown weighting {self.weighting!r}")
        if self.huber_c is not None and self.huber_c <= 0.0:
            raise ConfigError("huber_c must be positive")
        if self.premetric.startswith("perceptual") and self.hook is None:
            raise ConfigError(f"premetric {self.premetric!r} requires a perceptual hook")
        if self.parameterization == "x" and self.premetric != "squared_l2":
            raise ConfigError("the x-form objective is defined for squared_l2 only")

    def resolve_c(self, dim: int) -> float:
        return self.huber_c if self.huber_c is not None else HUBER_C_PER_DIM * dim


def premetric_terms(spec: LossSpec, target_v: Tensor, predicted_v: Tensor,
                    x: Tensor, x_t: Tensor, t: np.ndarray) -> Tensor:
    """Per-sample premetric values, shape (B,), differentiable.

    Perceptual variants rebuild the sample as x_hat = x_t - t * predicted_v
    and add the hook distance with the (1-t) / (1/t) weighting structure.
    """
    if target_v.shape != predicted_v.shape:
        raise ShapeMismatch(
            f"residual shapes differ: {target_v.shape} vs {predicted_v.shape}")
    r = target_v - predicted_v
    sq = tsum(r * r, axis=-1)
    if spec.premetric == "squared_l2":
        return sq
    c = spec.resolve_c(target_v.shape[-1])
    hub = sqrt(sq + c * c) - c
    if spec.premetric == "pseudo_huber":
        return hub
    t = np.asarray(t, dtype=np.float64)
    x_hat = x_t - Tensor(t[:, None]) * predicted_v
    dist = spec.hook(x, x_hat)
    if spec.premetric == "perceptual_huber":
        return Tensor(1.0 - t) * hub + dist
    return Tensor(1.0 - t) * hub + Tensor(1.0 / t) * dist


def premetric_value(spec: LossSpec, target_v, predicted_v, x, x_t, t: float) -> float:
    """Premetric of a single sample, as a plain float."""
    val = premetric_terms(
        spec,
        Tensor(np.atleast_2d(target_v)),
        Tensor(np.atleast_2d(predicted_v)),
        Tensor(np.atleast_2d(x)),
        Tensor(np.atleast_2d(x_t)),
        np.atleast_1d(float(t)),
    )
    return float(val.data[0])


def loss_weights(spec: LossSpec, t: np.ndarray) -> np.ndarray:
    if spec.weighting == "unit":
        return np.ones_like(t)
    return 1.0 / (t * t)


def objective_estimate(field: VelocityField, spec: LossSpec, xs: np.ndarray,
                       zs: np.ndarray, t_dist: "TimestepDistribution | None",
                       rng: np.random.Generator | None = None,
                       ts: np.ndarray | None = None,
                       dropout: float = 0.0, dropout_rng=None) -> Tensor:
    """Scalar objective over a batch, differentiable through the field.

    Each pair gets its own t, either supplied via `ts` or sampled from
    `t_dist`.  The `v` form averages w(t) * m(z - x, v_hat); the `x` form
    averages w(t) * ||x - x_hat||^2.
    """
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    zs = np.atleast_2d(np.asarray(zs, dtype=np.float64))
    if xs.shape != zs.shape:
        raise ShapeMismatch(f"batch shapes differ: {xs.shape} vs {zs.shape}")
    if xs.shape[0] == 0:
        raise DomainError("objective_estimate: empty batch")
    if ts is None:
        if t_dist is None or rng is None:
            raise ConfigError("either ts or (t_dist, rng) must be provided")
        ts = t_dist.draw(rng, xs.shape[0])
    ts = np.asarray(ts, dtype=np.float64)
    x_t = interpolate(xs, zs, ts)
    w = loss_weights(spec, ts)
    if spec.parameterization == "x":
        x_hat = field.predict_x_taped(x_t, ts, dropout=dropout, dropout_rng=dropout_rng)
        res = Tensor(xs) - x_hat
        per = tsum(res * res, axis=-1)
    else:
        v_hat = field.velocity_taped(x_t, ts, dropout=dropout, dropout_rng=dropout_rng)
        per = premetric_terms(spec, Tensor(zs - xs), v_hat, Tensor(xs), Tensor(x_t), ts)
    return tmean(Tensor(w) * per)


def objective_gradients(field, spec: LossSpec, xs, zs, t_dist, rng,
                        params_tensors, ts=None, dropout=0.0, dropout_rng=None):
    """(loss value, gradient list aligned with params_tensors)."""
    with Tape() as tape:
        loss = objective_estimate(field, spec, xs, zs, t_dist, rng, ts=ts,
                                  dropout=dropout, dropout_rng=dropout_rng)
    grads = backward(tape, loss)
    zero = lambda t: np.zeros_like(t.data)
    return float(loss.data), [grads.get(id(p), zero(p)) for p in params_tensors]


# ---------------------------------------------------------------------------
# timestep distributions
# ---------------------------------------------------------------------------

@dataclass
class TimestepDistribution:
    """Samples training times t by exact inverse-CDF transform, then clamps.

    u_shaped: density proportional to exp(a u) + exp(-a u) on [0, 1], with
    CDF sinh(a u)/sinh(a); uniform maps the unit draw affinely onto the clamp
    range; logit_normal is sigmoid(loc + scale * Phi^{-1}(s)).
    """

    kind: str = "uniform"
    a: float = 4.0
    loc: float = 0.0
    scale: float = 1.0
    t_min: float = T_MIN
    t_max: float = T_MAX

    def __post_init__(self):
        if self.kind not in ("uniform", "u_shaped", "logit_normal"):
            raise ConfigError(f"unknown timestep distribution {self.kind!r}")
        if not (0.0 <= self.t_min < self.t_max <= 1.0):
            raise ConfigError(f"invalid clamp range [{self.t_min}, {self.t_max}]")
        if self.kind == "u_shaped" and self.a <= 0.0:
            raise ConfigError("u_shaped exponent a must be positive")
        if self.kind == "logit_normal" and self.scale <= 0.0:
            raise ConfigError("logit_normal scale must be positive")

    def sample_value(self, s: float) -> float:
        return float(self._transform(np.asarray([s], dtype=np.float64))[0])

    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return self._transform(rng.random(n))

    def _transform(self, s: np.ndarray) -> np.ndarray:
        if np.any(s < 0.0) or np.any(s > 1.0):
            raise DomainError("unit draws must lie in [0, 1]")
        if self.kind == "uniform":
            return self.t_min + s * (self.t_max - self.t_min)
        if self.kind == "u_shaped":
            u = np.arcsinh(s * np.sinh(self.a)) / self.a
        else:
            u = np.empty_like(s)
            interior = (s > 0.0) & (s < 1.0)
            u[interior] = 1.0 / (1.0 + np.exp(-(self.loc + self.scale * _ndtri(s[interior]))))
            u[s == 0.0] = 0.0
            u[s == 1.0] = 1.0
        return np.clip(u, self.t_min, self.t_max)

    def density(self, u) -> np.ndarray:
        """Unclamped density on [0, 1] (u_shaped and logit_normal only)."""
        u = np.asarray(u, dtype=np.float64)
        if self.kind == "u_shaped":
            z = (2.0 / self.a) * np.sinh(self.a)
            return (np.exp(self.a * u) + np.exp(-self.a * u)) / z
        if self.kind == "uniform":
            return np.ones_like(u)
        logit = np.log(u / (1.0 - u))
        base = np.exp(-0.5 * ((logit - self.loc) / self.scale) ** 2)
        return base / (self.scale * math.sqrt(2.0 * math.pi) * u * (1.0 - u))

    def cdf(self, u) -> np.ndarray:
        """Unclamped CDF on [0, 1]."""
        u = np.asarray(u, dtype=np.float64)
        if self.kind == "u_shaped":
            return np.sinh(self.a * u) / np.sinh(self.a)
        if self.kind == "uniform":
            return u
        logit = np.log(u / (1.0 - u))
        return np.vectorize(_STD_NORMAL.cdf)((logit - self.loc) / self.scale)


def _ndtri(s: np.ndarray) -> np.ndarray:
    return np.array([_STD_NORMAL.inv_cdf(float(v)) for v in s])


def sample_timestep(dist: TimestepDistribution, s: float) -> float:
    """Inverse-CDF sample from one uniform draw s in [0, 1]."""
    return dist.sample_value(s)


# ---------------------------------------------------------------------------
# per-timestep loss profile
# ---------------------------------------------------------------------------

@dataclass
class LossProfile:
    """Binned profile of the 1/t^2-weighted posterior-mean residual."""

    edges: np.ndarray            # (n_bins + 1,)
    mean: np.ndarray             # (n_bins,)
    std: np.ndarray              # (n_bins,)
    count: np.ndarray            # (n_bins,)
    lower_bound: np.ndarray | None = None   # analytic term when a GmmSpec backs the coupling

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[:-1] + self.edges[1:])

    def residual(self) -> np.ndarray:
        if self.lower_bound is None:
            raise DomainError("no analytic lower bound attached to this profile")
        return self.mean - self.lower_bound


def loss_profile(field: VelocityField, draw_pairs: Callable[[np.random.Generator, int],
                                                            tuple[np.ndarray, np.ndarray]],
                 n_bins: int, samples_per_bin: int, rng: np.random.Generator,
                 gmm: GmmSpec | None = None,
                 t_min: float = T_MIN, t_max: float = T_MAX) -> LossProfile:
    """Mean and std of (1/t^2) ||x - x_hat||^2 per uniform t bin.

    `draw_pairs(rng, n)` supplies coupled (x, z) batches.  When `gmm` is
    given (independent coupling with that target), the non-reducible term
    (1/t^2) E||x - E[x | x_t]||^2 is estimated per bin as well, so the
    minimizable residual can be read off as mean - lower_bound.
    """
    if n_bins < 2:
        raise DomainError("loss_profile needs at least 2 bins")
    if samples_per_bin < 1:
        raise DomainError("samples_per_bin must be positive")
    edges = np.linspace(t_min, t_max, n_bins + 1)
    mean = np.empty(n_bins)
    std = np.empty(n_bins)
    count = np.full(n_bins, samples_per_bin)
    lower = np.empty(n_bins) if gmm is not None else None
    for j in range(n_bins):
        ts = rng.uniform(edges[j], edges[j + 1], samples_per_bin)
        xs, zs = draw_pairs(rng, samples_per_bin)
        if xs.shape[0] == 0:
            raise DomainError("loss_profile: empty dataset")
        x_t = interpolate(xs, zs, ts)
        x_hat = field.predict_x(x_t, ts)
        vals = np.sum((xs - x_hat) ** 2, axis=1) / (ts * ts)
        mean[j] = vals.mean()
        std[j] = vals.std()
        if gmm is not None:
            post = gmm_posterior_mean(gmm, x_t, ts)
            lower[j] = np.mean(np.sum((xs - post) ** 2, axis=1) / (ts * ts))
    return LossProfile(edges=edges, mean=mean, std=std, count=count, lower_bound=lower)
