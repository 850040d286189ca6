"""Velocity fields over linear interpolation paths.

Three realizations of the same interface:

* :class:`GmmVelocityField` -- exact field for an isotropic Gaussian-mixture
  target, via closed-form Gaussian conjugacy.  This is the oracle every other
  component is verified against.
* :class:`NeuralVelocityField` -- a small MLP in either the posterior-mean
  (``x``) or velocity (``v``) parameterization.
* :class:`ConvertedDenoiserField` -- a VP or VE diffusion denoiser rewired to
  the interpolation kernel N((1-t)x, t^2 I) through a time/scale change.

Throughout, states are row vectors: ``z_t`` has shape (B, d) or (d,), and
``t`` is a scalar or a (B,) array.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import DomainError, ShapeMismatch
from .nn import MlpParams, taped_with_time_input, with_time_input
from .tensor import Tensor

T_MIN = 1e-5
T_MAX = 0.99999


def interpolate(x: np.ndarray, z: np.ndarray, t) -> np.ndarray:
    """Linear interpolation (1-t) x + t z for t in [0, 1]."""
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if x.shape != z.shape:
        raise ShapeMismatch(f"interpolate: shapes {x.shape} != {z.shape}")
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise DomainError("interpolate: t must lie in [0, 1]")
    tc = t if t.ndim == 0 else t[:, None]
    return (1.0 - tc) * x + tc * z


def _col(t, rows: int) -> np.ndarray:
    """t as a (rows, 1) column, broadcasting a scalar."""
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        return np.full((rows, 1), float(t))
    if t.shape != (rows,):
        raise ShapeMismatch(f"t has shape {t.shape}, expected ({rows},)")
    return t[:, None]


class VelocityField:
    """Interface: velocity(z_t, t); optionally predict_x(z_t, t).

    When both are available they satisfy
    ``velocity == (z_t - predict_x) / t`` exactly.  Evaluations are pure, so
    concurrent use on shared immutable parameters is safe.
    """

    def velocity(self, z_t: np.ndarray, t) -> np.ndarray:
        raise NotImplementedError

    def predict_x(self, z_t: np.ndarray, t) -> np.ndarray:
        z_t = np.atleast_2d(np.asarray(z_t, dtype=np.float64))
        return z_t - _col(t, z_t.shape[0]) * self.velocity(z_t, t)

    def velocity_taped(self, z_t: np.ndarray, t, **kw) -> Tensor:
        """Velocity as a tape node; constant by default (analytic fields)."""
        return Tensor(self.velocity(z_t, t))

    def predict_x_taped(self, z_t: np.ndarray, t, **kw) -> Tensor:
        return Tensor(self.predict_x(z_t, t))


# ---------------------------------------------------------------------------
# Gaussian-mixture oracle
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GmmSpec:
    """Isotropic Gaussian mixture: weights (K,), means (K, d), variances (K,)."""

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "weights", np.asarray(self.weights, dtype=np.float64))
        object.__setattr__(self, "means", np.atleast_2d(np.asarray(self.means, dtype=np.float64)))
        object.__setattr__(self, "variances", np.asarray(self.variances, dtype=np.float64))
        k = self.weights.shape[0]
        if self.means.shape[0] != k or self.variances.shape[0] != k:
            raise ShapeMismatch("component counts of weights/means/variances differ")
        if np.any(self.weights < 0.0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise DomainError("mixture weights must be nonnegative and sum to 1")
        if np.any(self.variances < 0.0):
            raise DomainError("component variances must be nonnegative")

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        comp = rng.choice(self.weights.shape[0], size=n, p=self.weights)
        eps = rng.standard_normal((n, self.dim))
        return self.means[comp] + np.sqrt(self.variances[comp])[:, None] * eps

    def to_json(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "GmmSpec":
        extra = set(obj) - {"weights", "means", "variances"}
        if extra:
            raise DomainError(f"unknown GMM keys: {sorted(extra)}")
        return cls(obj["weights"], obj["means"], obj["variances"])


def gmm_scaled_posterior_mean(spec: GmmSpec, x_t: np.ndarray, scale,
                              noise_var) -> np.ndarray:
    """E[x | x_t] when x_t | x ~ N(scale * x, noise_var * I) and x ~ spec.

    Per-component conjugacy: with v_k = scale^2 var_k + noise_var,
      responsibility_k  propto  w_k N(x_t; scale mu_k, v_k I)
      posterior mean_k  =  mu_k + (scale var_k / v_k)(x_t - scale mu_k)
    `scale` and `noise_var` may be scalars or (B,) arrays.
    """
    x_t = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    if x_t.shape[1] != spec.dim:
        raise ShapeMismatch(f"x_t dimension {x_t.shape[1]} != mixture dimension {spec.dim}")
    b = x_t.shape[0]
    s = _col(scale, b)                       # (B, 1)
    nv = _col(noise_var, b)                  # (B, 1)
    if np.any(nv <= 0.0):
        raise DomainError("posterior undefined at zero noise variance")
    var = spec.variances[None, :]            # (1, K)
    vk = s * s * var + nv                    # (B, K)
    diff = x_t[:, None, :] - s[:, :, None] * spec.means[None, :, :]   # (B, K, d)
    sq = np.einsum("bkd,bkd->bk", diff, diff)
    logw = np.log(spec.weights)[None, :] - 0.5 * spec.dim * np.log(vk) - sq / (2.0 * vk)
    logw -= logw.max(axis=1, keepdims=True)
    w = np.exp(logw)
    w /= w.sum(axis=1, keepdims=True)
    m = spec.means[None, :, :] + ((s * var / vk)[:, :, None]) * diff
    return np.einsum("bk,bkd->bd", w, m)


def gmm_posterior_mean(spec: GmmSpec, x_t: np.ndarray, t) -> np.ndarray:
    """E[x | x_t] under the interpolation kernel N((1-t) x, t^2 I)."""
    t = np.asarray(t, dtype=np.float64)
    if np.any(t <= 0.0) or np.any(t > 1.0):
        raise DomainError("gmm_posterior_mean: t must lie in (0, 1]")
    return gmm_scaled_posterior_mean(spec, x_t, 1.0 - t, t * t)


def analytic_velocity(spec: GmmSpec, z_t: np.ndarray, t) -> np.ndarray:
    """(z_t - E[x | x_t = z_t]) / t."""
    z_t = np.atleast_2d(np.asarray(z_t, dtype=np.float64))
    t = np.asarray(t, dtype=np.float64)
    if np.any(t <= 0.0) or np.any(t > 1.0):
        raise DomainError("analytic_velocity: t must lie in (0, 1]")
    return (z_t - gmm_posterior_mean(spec, z_t, t)) / _col(t, z_t.shape[0])


class GmmVelocityField(VelocityField):
    """Exact velocity field for a Gaussian-mixture target."""

    def __init__(self, spec: GmmSpec):
        self.spec = spec

    def velocity(self, z_t, t):
        return analytic_velocity(self.spec, z_t, t)

    def predict_x(self, z_t, t):
        return gmm_posterior_mean(self.spec, z_t, t)


# ---------------------------------------------------------------------------
# diffusion-model conversion
# ---------------------------------------------------------------------------

def vp_alpha(t) -> np.ndarray:
    """Signal scale of the variance-preserving kernel, exp(-(19.9/4)t^2 - 0.05t)."""
    t = np.asarray(t, dtype=np.float64)
    return np.exp(-(19.9 / 4.0) * t * t - 0.05 * t)


def vp_snr(t_vp) -> np.ndarray:
    """alpha / sqrt(1 - alpha^2), evaluated without cancellation."""
    t_vp = np.asarray(t_vp, dtype=np.float64)
    log_alpha = -(19.9 / 4.0) * t_vp * t_vp - 0.05 * t_vp
    one_minus_a2 = -np.expm1(2.0 * log_alpha)
    return np.exp(log_alpha) / np.sqrt(one_minus_a2)


def convert_time_scale(kind: str, t) -> tuple[np.ndarray, np.ndarray]:
    """Map interpolation time t in (0,1) to the source kernel's (time, scale).

    VE kernel N(x, t'^2 I):            t' = t/(1-t),            scale 1/(1-t).
    VP kernel N(a(t') x, (1-a^2) I):   t' from the quadratic inverse of a at a
    matched signal-to-noise ratio,     scale a(t')/(1-t).
    """
    t = np.asarray(t, dtype=np.float64)
    if np.any(t <= 0.0) or np.any(t >= 1.0):
        raise DomainError("convert_time_scale: t must lie in (0, 1)")
    if kind == "ve":
        t_src = t / (1.0 - t)
        return t_src, 1.0 / (1.0 - t)
    if kind == "vp":
        r = t / (1.0 - t)
        # -ln y with y = (1-t)/sqrt((1-t)^2 + t^2), written via log1p for accuracy
        neg_log_y = 0.5 * np.log1p(r * r)
        t_src = (-0.05 + np.sqrt(0.0025 + 19.9 * neg_log_y)) / 9.95
        return t_src, vp_alpha(t_src) / (1.0 - t)
    raise DomainError(f"unknown diffusion kind {kind!r}")


def invert_converted_time(kind: str, t_src) -> np.ndarray:
    """Interpolation time t whose converted time equals t_src."""
    t_src = np.asarray(t_src, dtype=np.float64)
    if kind == "ve":
        if np.any(t_src <= 0.0):
            raise DomainError("VE time must be positive")
        return t_src / (1.0 + t_src)
    if kind == "vp":
        if np.any(t_src <= 0.0) or np.any(t_src > 1.0):
            raise DomainError("VP time must lie in (0, 1]")
        return 1.0 / (1.0 + vp_snr(t_src))
    raise DomainError(f"unknown diffusion kind {kind!r}")


@dataclass
class DiffusionConversion:
    """A posterior-mean denoiser under a VP or VE kernel, ready for rewiring.

    ``denoiser(x_src, t_src)`` must return E[x | x_src] under the source
    perturbation kernel at source time t_src.
    """

    kind: str
    denoiser: Callable[[np.ndarray, float], np.ndarray]

    def __post_init__(self):
        if self.kind not in ("vp", "ve"):
            raise DomainError(f"conversion kind must be 'vp' or 've', got {self.kind!r}")


def converted_posterior_mean(conv: DiffusionConversion, z_t: np.ndarray, t) -> np.ndarray:
    """E[x | z_t] under the interpolation kernel, via the converted denoiser.

    The denoiser is evaluated at (scale * z_t, converted time); its output is
    returned unchanged.
    """
    z_t = np.atleast_2d(np.asarray(z_t, dtype=np.float64))
    t_src, s_src = convert_time_scale(conv.kind, t)
    return np.atleast_2d(conv.denoiser(_col(s_src, z_t.shape[0]) * z_t, t_src))


def gmm_ve_denoiser(spec: GmmSpec) -> Callable:
    """Exact posterior-mean denoiser for the VE kernel N(x, t'^2 I)."""

    def denoise(x_src, t_src):
        t_src = np.asarray(t_src, dtype=np.float64)
        return gmm_scaled_posterior_mean(spec, x_src, 1.0, t_src * t_src)

    return denoise


def gmm_vp_denoiser(spec: GmmSpec) -> Callable:
    """Exact posterior-mean denoiser for the VP kernel N(a x, (1-a^2) I)."""

    def denoise(x_src, t_src):
        a = vp_alpha(t_src)
        return gmm_scaled_posterior_mean(spec, x_src, a, 1.0 - a * a)

    return denoise


class ConvertedDenoiserField(VelocityField):
    """Velocity field backed by a converted VP/VE denoiser."""

    def __init__(self, conv: DiffusionConversion):
        self.conv = conv

    def predict_x(self, z_t, t):
        return converted_posterior_mean(self.conv, z_t, t)

    def velocity(self, z_t, t):
        z_t = np.atleast_2d(np.asarray(z_t, dtype=np.float64))
        tc = _col(t, z_t.shape[0])
        return (z_t - self.predict_x(z_t, t)) / tc


# ---------------------------------------------------------------------------
# neural field
# ---------------------------------------------------------------------------

class NeuralVelocityField(VelocityField):
    """MLP-backed field.

    parameterization 'x': the net predicts the posterior mean and the
    velocity is (z_t - net)/t.  parameterization 'v': the net predicts the
    velocity directly and predict_x is z_t - t * net.

    input_map 'plain' feeds concat(z_t, time_features(t)).  input_map
    'converted_vp'/'converted_ve' feeds concat(scale(t) * z_t,
    time_features(t)), so the inner MLP is a genuine VP/VE denoiser operating
    on source-kernel inputs; such fields must use the 'x' parameterization.
    """

    def __init__(self, params: MlpParams, parameterization: str = "v",
                 input_map: str = "plain", t_min: float = T_MIN, t_max: float = T_MAX):
        if parameterization not in ("x", "v"):
            raise DomainError(f"parameterization must be 'x' or 'v', got {parameterization!r}")
        if input_map not in ("plain", "converted_vp", "converted_ve"):
            raise DomainError(f"unknown input map {input_map!r}")
        if input_map != "plain" and parameterization != "x":
            raise DomainError("converted fields predict the posterior mean; use parameterization 'x'")
        self.params = params
        self.parameterization = parameterization
        self.input_map = input_map
        self.t_min = t_min
        self.t_max = t_max

    @property
    def dim(self) -> int:
        from .nn import TIME_FEATURE_DIM

        return self.params.widths[0] - TIME_FEATURE_DIM

    def _check_t(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        if np.any(t < self.t_min) or np.any(t > self.t_max):
            raise DomainError(
                f"t outside the field's clamp range [{self.t_min}, {self.t_max}]")
        return t

    def _net_state(self, z_t: np.ndarray, t) -> np.ndarray:
        if self.input_map == "plain":
            return z_t
        kind = "vp" if self.input_map == "converted_vp" else "ve"
        _, s_src = convert_time_scale(kind, t)
        return _col(s_src, z_t.shape[0]) * z_t

    def _net_output(self, z_t: np.ndarray, t) -> np.ndarray:
        return with_time_input(self.params, self._net_state(z_t, t), t).data

    def net_output_taped(self, z_t: np.ndarray, t, dropout: float = 0.0,
                         dropout_rng=None) -> Tensor:
        z_t = np.atleast_2d(np.asarray(z_t, dtype=np.float64))
        t = self._check_t(t)
        return taped_with_time_input(self.params, self._net_state(z_t, t), t,
                                     dropout=dropout, dropout_rng=dropout_rng)

    def velocity(self, z_t, t):
        z_t = np.atleast_2d(np.asarray(z_t, dtype=np.float64))
        t = self._check_t(t)
        out = self._net_output(z_t, t)
        if self.parameterization == "v":
            return out
        return (z_t - out) / _col(t, z_t.shape[0])

    def predict_x(self, z_t, t):
        z_t = np.atleast_2d(np.asarray(z_t, dtype=np.float64))
        t = self._check_t(t)
        out = self._net_output(z_t, t)
        if self.parameterization == "x":
            return out
        return z_t - _col(t, z_t.shape[0]) * out

    def velocity_taped(self, z_t, t, dropout: float = 0.0, dropout_rng=None) -> Tensor:
        z_t = np.atleast_2d(np.asarray(z_t, dtype=np.float64))
        out = self.net_output_taped(z_t, t, dropout, dropout_rng)
        if self.parameterization == "v":
            return out
        inv_t = 1.0 / _col(t, z_t.shape[0])
        return (Tensor(z_t) - out) * Tensor(inv_t)

    def predict_x_taped(self, z_t, t, dropout: float = 0.0, dropout_rng=None) -> Tensor:
        z_t = np.atleast_2d(np.asarray(z_t, dtype=np.float64))
        out = self.net_output_taped(z_t, t, dropout, dropout_rng)
        if self.parameterization == "x":
            return out
        tc = _col(t, z_t.shape[0])
        return Tensor(z_t) - Tensor(tc) * out
