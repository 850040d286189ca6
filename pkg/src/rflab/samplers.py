"""ODE integration for generation and inversion.

Supported per-step rules: explicit Euler, Heun's second-order method (the
trapezoid correction is skipped on the final step, so N steps cost 2N-1
field evaluations), and a history-dependent rule that interpolates between
the current sample estimate and the starting noise:

    x_hat  = z - t * v(z, t)
    z_next = (1 - t_next) * x_hat + t_next * z_start

With a schedule whose endpoints are exactly {1, 0}, the history rule and the
Euler rule coincide for one- and two-step generation.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DomainError, IntegrationFailure, ShapeMismatch
from .fields import T_MAX, T_MIN, VelocityField

TRAJECTORY_MAGIC = b"RFTJ1"


@dataclass(frozen=True)
class TimeSchedule:
    """Strictly decreasing integration grid from t_max down to t_min."""

    points: tuple[float, ...]

    def __post_init__(self):
        pts = tuple(float(p) for p in self.points)
        object.__setattr__(self, "points", pts)
        if len(pts) < 2:
            raise DomainError("a schedule needs at least two points")
        if any(b >= a for a, b in zip(pts[:-1], pts[1:])):
            raise DomainError(f"schedule must be strictly decreasing: {pts}")

    @property
    def steps(self) -> int:
        return len(self.points) - 1

    def reversed_points(self) -> tuple[float, ...]:
        return tuple(reversed(self.points))

    @classmethod
    def uniform(cls, steps: int, t_max: float = T_MAX, t_min: float = T_MIN) -> "TimeSchedule":
        if steps < 1:
            raise DomainError("steps must be >= 1")
        return cls(tuple(np.linspace(t_max, t_min, steps + 1)))

    @classmethod
    def default(cls, steps: int, t_max: float = T_MAX, t_min: float = T_MIN) -> "TimeSchedule":
        """The stock generation grid: two steps pass through t=0.8, otherwise uniform."""
        if steps == 2:
            return cls((t_max, 0.8, t_min))
        return cls.uniform(steps, t_max, t_min)


def steps_for_nfe(nfe: int, solver: str) -> int:
    """Number of schedule steps that realizes (at most) `nfe` evaluations.

    Euler uses one evaluation per step; Heun uses 2N-1 for N steps, so even
    Heun budgets are rounded down to the nearest realizable count.
    """
    if nfe < 1:
        raise DomainError("nfe must be >= 1")
    if solver == "euler":
        return nfe
    if solver == "heun":
        return (nfe + 1) // 2
    raise ConfigError(f"unknown solver {solver!r}")


@dataclass
class SolverConfig:
    solver: str = "euler"                # 'euler' | 'heun'
    update_rule: str = "default"         # 'default' | 'new'
    direction: str = "generate"          # 'generate' (t: 1->0) | 'invert' (t: 0->1)
    record_trajectory: bool = False
    nonfinite: str = "raise"             # 'raise' | 'coast' (let bad rows reach the end)

    def __post_init__(self):
        if self.solver not in ("euler", "heun"):
            raise ConfigError(f"unknown solver {self.solver!r}")
        if self.update_rule not in ("default", "new"):
            raise ConfigError(f"unknown update rule {self.update_rule!r}")
        if self.direction not in ("generate", "invert"):
            raise ConfigError(f"unknown direction {self.direction!r}")
        if self.update_rule == "new" and self.direction == "invert":
            raise ConfigError("the history-dependent rule is defined for generation only")
        if self.nonfinite not in ("raise", "coast"):
            raise ConfigError(f"unknown nonfinite policy {self.nonfinite!r}")


@dataclass
class IntegrationResult:
    endpoint: np.ndarray                  # (B, d)
    n_evals: int
    times: tuple[float, ...]
    trajectory: np.ndarray | None = field(default=None, repr=False)  # (S+1, B, d)


def euler_step(fld: VelocityField, z: np.ndarray, t: float, t_next: float) -> np.ndarray:
    """z + v(z, t) (t_next - t)."""
    _check_step_times(t, t_next)
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    return z + fld.velocity(z, t) * (t_next - t)


def heun_step(fld: VelocityField, z: np.ndarray, t: float, t_next: float) -> np.ndarray:
    """Euler predictor, then trapezoid correction with the averaged velocity."""
    _check_step_times(t, t_next)
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    dt = t_next - t
    v = fld.velocity(z, t)
    v_next = fld.velocity(z + v * dt, t_next)
    return z + 0.5 * (v + v_next) * dt


def new_rule_step(x_hat: np.ndarray, z_start: np.ndarray, t_next: float) -> np.ndarray:
    """(1 - t_next) x_hat + t_next z_start."""
    x_hat = np.asarray(x_hat, dtype=np.float64)
    z_start = np.asarray(z_start, dtype=np.float64)
    if x_hat.shape != z_start.shape:
        raise ShapeMismatch(f"shapes differ: {x_hat.shape} vs {z_start.shape}")
    return (1.0 - t_next) * x_hat + t_next * z_start


def _check_step_times(t: float, t_next: float) -> None:
    if t == t_next:
        raise DomainError("degenerate step: t == t_next")
    for v in (t, t_next):
        if not 0.0 <= v <= 1.0:
            raise DomainError(f"step time {v} outside [0, 1]")


def integrate(fld: VelocityField, z_start: np.ndarray, times,
              config: SolverConfig) -> IntegrationResult:
    """Run the configured per-step rule across the whole grid.

    `times` must be strictly decreasing for generation and strictly
    increasing for inversion.  The evaluation count includes Heun
    corrections; a non-finite state aborts with the offending step index.
    """
    pts = tuple(float(p) for p in times)
    if len(pts) < 2:
        raise DomainError("need at least two schedule points")
    diffs = np.diff(pts)
    if config.direction == "generate" and not np.all(diffs < 0):
        raise DomainError("generation expects a strictly decreasing schedule")
    if config.direction == "invert" and not np.all(diffs > 0):
        raise DomainError("inversion expects a strictly increasing schedule")

    z = np.atleast_2d(np.asarray(z_start, dtype=np.float64)).copy()
    z1 = z.copy()
    n_steps = len(pts) - 1
    new_rule = config.update_rule == "new"
    heun = config.solver == "heun"
    evals = 0
    traj = [z.copy()] if config.record_trajectory else None

    for i in range(n_steps):
        t, t_next = pts[i], pts[i + 1]
        dt = t_next - t
        v = fld.velocity(z, t)
        evals += 1
        x_hat = z - v * t
        if heun and i < n_steps - 1:
            z_pred = new_rule_step(x_hat, z1, t_next) if new_rule else z + v * dt
            v_next = fld.velocity(z_pred, t_next)
            evals += 1
            v = 0.5 * (v + v_next)
            x_hat = z - v * t
        z = new_rule_step(x_hat, z1, t_next) if new_rule else z + v * dt
        if config.nonfinite == "raise" and not np.all(np.isfinite(z)):
            raise IntegrationFailure(i)
        if traj is not None:
            traj.append(z.copy())

    trajectory = np.stack(traj) if traj is not None else None
    return IntegrationResult(endpoint=z, n_evals=evals, times=pts, trajectory=trajectory)


# ---------------------------------------------------------------------------
# trajectory dump: header (dim, steps, count, schedule), then raw f64 states
# ---------------------------------------------------------------------------

def save_trajectories(path, times, trajectory: np.ndarray) -> None:
    """trajectory has shape (n_states, n_traj, dim) with n_states = steps + 1."""
    trajectory = np.asarray(trajectory, dtype=np.float64)
    if trajectory.ndim != 3:
        raise ShapeMismatch(f"expected (states, count, dim), got {trajectory.shape}")
    n_states, n_traj, dim = trajectory.shape
    if len(times) != n_states:
        raise ShapeMismatch(f"{len(times)} schedule points vs {n_states} states")
    with open(path, "wb") as fh:
        fh.write(TRAJECTORY_MAGIC)
        fh.write(struct.pack("<III", dim, n_states - 1, n_traj))
        fh.write(np.ascontiguousarray(times, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(trajectory, dtype="<f8").tobytes())


def load_trajectories(path) -> tuple[np.ndarray, np.ndarray]:
    """Returns (times (S+1,), trajectory (S+1, n_traj, dim))."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(TRAJECTORY_MAGIC)] != TRAJECTORY_MAGIC:
        raise ValueError(f"{path}: not a trajectory dump (bad magic)")
    off = len(TRAJECTORY_MAGIC)
    dim, steps, n_traj = struct.unpack_from("<III", blob, off)
    off += 12
    n_states = steps + 1
    times = np.frombuffer(blob, dtype="<f8", count=n_states, offset=off).copy()
    off += 8 * n_states
    traj = np.frombuffer(blob, dtype="<f8", count=n_states * n_traj * dim, offset=off)
    return times, traj.reshape(n_states, n_traj, dim).copy()
