"""Quantitative instruments: trajectory straightness, constructed-noise
probes, inversion reconstruction error, and a sliced-Wasserstein sample
metric.  All functions are pure over their inputs."""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import DomainError, ShapeMismatch
from .fields import VelocityField
from .samplers import SolverConfig, TimeSchedule, integrate, steps_for_nfe

_trapezoid = getattr(np, "trapezoid", None) or np.trapz  # numpy < 2.0 fallback


# ---------------------------------------------------------------------------
# exact chi-square reference (regularized incomplete gamma, no sampling)
# ---------------------------------------------------------------------------

def _gammp(a: float, x: float) -> float:
    """Regularized lower incomplete gamma P(a, x)."""
    if a <= 0.0 or x < 0.0:
        raise DomainError("gamma arguments must satisfy a > 0, x >= 0")
    if x == 0.0:
        return 0.0
    log_pre = -x + a * math.log(x) - math.lgamma(a)
    if x < a + 1.0:
        ap, term, total = a, 1.0 / a, 1.0 / a
        for _ in range(1000):
            ap += 1.0
            term *= x / ap
            total += term
            if abs(term) < abs(total) * 1e-16:
                break
        return min(1.0, total * math.exp(log_pre))
    # continued fraction for the upper tail Q(a, x)
    tiny = 1e-300
    b, c, d = x + 1.0 - a, 1.0 / tiny, 1.0 / (x + 1.0 - a)
    h = d
    for i in range(1, 1000):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return max(0.0, 1.0 - math.exp(log_pre) * h)


def chi2_cdf(dof: int, x: float) -> float:
    return _gammp(dof / 2.0, x / 2.0)


def chi2_quantile(dof: int, p: float) -> float:
    """Exact chi-square quantile by bisection on the analytic CDF."""
    if not 0.0 < p < 1.0:
        raise DomainError("quantile level must lie in (0, 1)")
    lo, hi = 0.0, float(dof) + 10.0 * math.sqrt(2.0 * dof) + 10.0
    while chi2_cdf(dof, hi) < p:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if chi2_cdf(dof, mid) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def chi2_density(dof: int, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    k = dof / 2.0
    out = np.zeros_like(x)
    pos = x > 0.0
    out[pos] = np.exp((k - 1.0) * np.log(x[pos]) - x[pos] / 2.0
                      - k * math.log(2.0) - math.lgamma(k))
    return out


def straightness(times: np.ndarray, trajectories: np.ndarray) -> float:
    """Mean chord deviation of trajectories, scale-free.

    For each trajectory with recorded states z(t_j), computes the trapezoid
    approximation of  integral_0^1 ||z(t) - ((1-t) z(0) + t z(1))||^2 dt,
    normalized by ||z(1) - z(0)||^2, then averages over trajectories.  Zero
    exactly for chord-identical trajectories.
    """
    times = np.asarray(times, dtype=np.float64)
    trajectories = np.asarray(trajectories, dtype=np.float64)
    if trajectories.ndim == 2:
        trajectories = trajectories[:, None, :]
    if trajectories.ndim != 3 or trajectories.shape[0] != times.shape[0]:
        raise ShapeMismatch("expected times (S,) and trajectories (S, n, d)")
    if times.shape[0] < 3:
        raise DomainError("straightness needs at least 3 recorded states")
    order = np.argsort(times)
    times = times[order]
    trajectories = trajectories[order]
    t0, t1 = times[0], times[-1]
    u = (times - t0) / (t1 - t0)                       # normalize to [0, 1]
    z0, z1 = trajectories[0], trajectories[-1]         # (n, d) each
    chord = (1.0 - u)[:, None, None] * z0[None] + u[:, None, None] * z1[None]
    dev = np.sum((trajectories - chord) ** 2, axis=2)  # (S, n)
    area = _trapezoid(dev, u, axis=0)                  # (n,)
    denom = np.sum((z1 - z0) ** 2, axis=1)
    if np.any(denom == 0.0):
        raise DomainError("degenerate trajectory: coincident endpoints")
    return float(np.mean(area / denom))


def autocorrelation(u: np.ndarray, max_lag: int) -> np.ndarray:
    """R(l) = (1/(d-l)) sum_{k=1}^{d-l} u_k u_{k+l}, for l = 1..max_lag."""
    u = np.asarray(u, dtype=np.float64).ravel()
    d = u.shape[0]
    if not 1 <= max_lag < d:
        raise DomainError(f"max_lag must lie in [1, {d - 1}], got {max_lag}")
    return np.array([u[: d - l] @ u[l:] / (d - l) for l in range(1, max_lag + 1)])


@dataclass
class ProbeResult:
    """Constructed-noise statistics next to their standard-Gaussian references."""

    z2: np.ndarray                      # the constructed noise vectors (n, d)
    t: float
    offset_coefficient: float           # (1 - t) / t
    mean_sq_norm: float
    gaussian_sq_norm_mean: float        # d
    gaussian_sq_norm_std: float         # sqrt(2 d), per draw
    mean_autocorr: np.ndarray           # mean R(l) over probes, l = 1..max_lag
    gaussian_autocorr_band99: np.ndarray  # 99% band for that mean under N(0, I)
    count: int


def intersection_probe(x_a: np.ndarray, z_a: np.ndarray, x_b: np.ndarray,
                       t: float, max_lag: int = 1) -> ProbeResult:
    """Noise that a straight-line crossing at time t would require.

    Constructs z = z_a + ((1-t)/t) (x_a - x_b) for each row and reports how
    far its squared norm and autocorrelation sit from standard-Gaussian
    behaviour.  At t = 0.5 the offset coefficient is exactly 1.
    """
    if not 0.0 < t < 1.0:
        raise DomainError("probe time must lie in (0, 1)")
    x_a = np.atleast_2d(np.asarray(x_a, dtype=np.float64))
    z_a = np.atleast_2d(np.asarray(z_a, dtype=np.float64))
    x_b = np.atleast_2d(np.asarray(x_b, dtype=np.float64))
    if not (x_a.shape == z_a.shape == x_b.shape):
        raise ShapeMismatch("probe inputs must share one shape")
    coeff = (1.0 - t) / t
    z2 = z_a + coeff * (x_a - x_b)
    n, d = z2.shape
    sq = np.sum(z2 * z2, axis=1)
    if max_lag >= d:
        raise DomainError(f"max_lag must be < dimension {d}")
    curves = np.stack([autocorrelation(row, max_lag) for row in z2])
    lags = np.arange(1, max_lag + 1)
    # Var R(l) = 1/(d-l) for standard normal coordinates; the mean over n
    # probes concentrates accordingly, and 2.576 sigma covers 99%.
    band = 2.576 / np.sqrt((d - lags) * n)
    return ProbeResult(
        z2=z2,
        t=float(t),
        offset_coefficient=float(coeff),
        mean_sq_norm=float(sq.mean()),
        gaussian_sq_norm_mean=float(d),
        gaussian_sq_norm_std=float(np.sqrt(2.0 * d)),
        mean_autocorr=curves.mean(axis=0),
        gaussian_autocorr_band99=band,
        count=n,
    )


def reconstruction_error(fld: VelocityField, samples: np.ndarray, nfe: int,
                         solver: str = "euler") -> float:
    """Invert with the given budget, regenerate with the same budget, MSE."""
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if samples.shape[0] == 0:
        raise DomainError("reconstruction_error needs at least one sample")
    if nfe < 1:
        raise DomainError("nfe must be >= 1")
    steps = steps_for_nfe(nfe, solver)
    schedule = TimeSchedule.uniform(steps)
    inverted = integrate(fld, samples, schedule.reversed_points(),
                         SolverConfig(solver=solver, direction="invert")).endpoint
    rebuilt = integrate(fld, inverted, schedule.points,
                        SolverConfig(solver=solver, direction="generate")).endpoint
    return float(np.mean((rebuilt - samples) ** 2))


def sliced_wasserstein(samples_a: np.ndarray, samples_b: np.ndarray,
                       n_projections: int = 64, seed: int = 0) -> float:
    """Mean 1-d 2-Wasserstein distance over seeded random unit projections.

    Equal-size sets compare sorted projections directly; otherwise both
    empirical quantile functions are read at a common grid.
    """
    samples_a = np.atleast_2d(np.asarray(samples_a, dtype=np.float64))
    samples_b = np.atleast_2d(np.asarray(samples_b, dtype=np.float64))
    if samples_a.shape[0] == 0 or samples_b.shape[0] == 0:
        raise DomainError("sliced_wasserstein needs nonempty sample sets")
    if samples_a.shape[1] != samples_b.shape[1]:
        raise ShapeMismatch(
            f"dimensions differ: {samples_a.shape[1]} vs {samples_b.shape[1]}")
    d = samples_a.shape[1]
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    dirs = rng.standard_normal((n_projections, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    pa = samples_a @ dirs.T
    pb = samples_b @ dirs.T
    if samples_a.shape[0] == samples_b.shape[0]:
        qa = np.sort(pa, axis=0)
        qb = np.sort(pb, axis=0)
    else:
        m = max(samples_a.shape[0], samples_b.shape[0])
        grid = (np.arange(m) + 0.5) / m
        qa = np.quantile(pa, grid, axis=0)
        qb = np.quantile(pb, grid, axis=0)
    w2 = np.sqrt(np.mean((qa - qb) ** 2, axis=0))
    return float(w2.mean())


@dataclass
class DiagnosticsReport:
    """Everything a diagnose run measured, with sample counts attached."""

    metadata: dict = dc_field(default_factory=dict)
    straightness_value: float | None = None
    straightness_count: int | None = None
    swd: float | None = None
    swd_count: int | None = None
    norm_sq: np.ndarray | None = None            # squared norms of inverted noise
    norm_sq_dim: int | None = None
    recon_mse: dict[int, float] | None = None    # nfe -> MSE
    recon_count: int | None = None
    probe: ProbeResult | None = None

    def to_json(self) -> dict:
        out: dict = {"metadata": dict(self.metadata)}
        if self.straightness_value is not None:
            out["straightness"] = {"value": self.straightness_value,
                                   "count": self.straightness_count}
        if self.swd is not None:
            out["sliced_wasserstein"] = {"value": self.swd, "count": self.swd_count}
        if self.norm_sq is not None:
            d = self.norm_sq_dim
            out["inverted_norm_sq"] = {
                "mean": float(self.norm_sq.mean()),
                "se": float(self.norm_sq.std(ddof=1) / np.sqrt(len(self.norm_sq))),
                "chi2_mean": float(d),
                "chi2_std": float(np.sqrt(2.0 * d)),
                "count": int(len(self.norm_sq)),
            }
        if self.recon_mse is not None:
            out["reconstruction_mse"] = {str(k): v for k, v in sorted(self.recon_mse.items())}
            out["reconstruction_count"] = self.recon_count
        if self.probe is not None:
            out["intersection_probe"] = {
                "t": self.probe.t,
                "offset_coefficient": self.probe.offset_coefficient,
                "mean_sq_norm": self.probe.mean_sq_norm,
                "gaussian_sq_norm_mean": self.probe.gaussian_sq_norm_mean,
                "gaussian_sq_norm_std": self.probe.gaussian_sq_norm_std,
                "mean_autocorr": self.probe.mean_autocorr.tolist(),
                "gaussian_autocorr_band99": self.probe.gaussian_autocorr_band99.tolist(),
                "count": self.probe.count,
            }
        return out


_STAT = {"type": "object",
         "properties": {"value": {"type": "number"}, "count": {"type": "integer"}},
         "required": ["value", "count"]}

REPORT_SCHEMA = {
    "type": "object",
    "properties": {
        "metadata": {"type": "object"},
        "straightness": _STAT,
        "sliced_wasserstein": _STAT,
        "inverted_norm_sq": {
            "type": "object",
            "properties": {
                "mean": {"type": "number"},
                "se": {"type": "number"},
                "chi2_mean": {"type": "number"},
                "chi2_std": {"type": "number"},
                "count": {"type": "integer"},
                "annulus_99pct": {"type": "array", "items": {"type": "number"},
                                  "minItems": 2, "maxItems": 2},
            },
            "required": ["mean", "se", "chi2_mean", "chi2_std", "count"],
        },
        "reconstruction_mse": {
            "type": "object",
            "additionalProperties": {"type": "number"},
        },
        "reconstruction_count": {"type": "integer"},
        "intersection_probe": {
            "type": "object",
            "properties": {
                "t": {"type": "number"},
                "offset_coefficient": {"type": "number"},
                "mean_sq_norm": {"type": "number"},
                "gaussian_sq_norm_mean": {"type": "number"},
                "gaussian_sq_norm_std": {"type": "number"},
                "mean_autocorr": {"type": "array", "items": {"type": "number"}},
                "gaussian_autocorr_band99": {"type": "array", "items": {"type": "number"}},
                "count": {"type": "integer"},
            },
            "required": ["t", "offset_coefficient", "mean_sq_norm", "count"],
        },
    },
    "required": ["metadata"],
    "additionalProperties": False,
}
