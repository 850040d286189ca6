"""Independent oracles used across the test suite.

Everything here is deliberately naive (scalar loops, finite differences,
closed-form maps) so it cannot share a failure mode with the library code it
checks.
"""

import math

import numpy as np

from rflab.fields import VelocityField


def scalar_mlp_forward(widths, weights, biases, activation, row):
    """Pure-Python forward pass, one scalar multiply at a time."""
    h = list(row)
    act = math.tanh if activation == "tanh" else lambda v: max(v, 0.0)
    for layer, (w, b) in enumerate(zip(weights, biases)):
        n_in, n_out = w.shape
        out = []
        for j in range(n_out):
            acc = b[j]
            for i in range(n_in):
                acc += h[i] * w[i, j]
            out.append(acc)
        if layer < len(weights) - 1:
            out = [act(v) for v in out]
        h = out
    return np.array(h)


def central_difference(fn, arrays, step=1e-5):
    """Central finite-difference gradients of a scalar fn(*)—one list per array."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = arr[idx]
            arr[idx] = orig + step
            hi = fn()
            arr[idx] = orig - step
            lo = fn()
            arr[idx] = orig
            g[idx] = (hi - lo) / (2.0 * step)
        grads.append(g)
    return grads


def max_relative_error(a, b, floor=1e-6):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


class ZeroField(VelocityField):
    """Velocity of the deterministic self-coupling (x = z): identically zero."""

    def velocity(self, z_t, t):
        return np.zeros_like(np.atleast_2d(np.asarray(z_t, dtype=np.float64)))


class ConstantField(VelocityField):
    def __init__(self, c):
        self.c = np.asarray(c, dtype=np.float64)

    def velocity(self, z_t, t):
        z_t = np.atleast_2d(np.asarray(z_t, dtype=np.float64))
        return np.broadcast_to(self.c, z_t.shape).copy()


class LinearInTimeField(VelocityField):
    """v(z, t) = t * c; its exact integral over [1, 0] is -c/2."""

    def __init__(self, c):
        self.c = np.asarray(c, dtype=np.float64)

    def velocity(self, z_t, t):
        z_t = np.atleast_2d(np.asarray(z_t, dtype=np.float64))
        return float(t) * np.broadcast_to(self.c, z_t.shape).copy()


class StraightCouplingField(VelocityField):
    """Exact flow of the deterministic coupling x = scale * z + shift.

    Along the interpolation path z_t = (1-t) x + t z the velocity z - x is
    constant per trajectory, so every endpoint is reachable in one step.
    """

    def __init__(self, scale: float, shift):
        self.scale = float(scale)
        self.shift = np.asarray(shift, dtype=np.float64)

    def velocity(self, z_t, t):
        z_t = np.atleast_2d(np.asarray(z_t, dtype=np.float64))
        t = float(np.asarray(t).reshape(()))  # scalar-only field, fine for tests
        denom = (1.0 - t) * self.scale + t
        z = (z_t - (1.0 - t) * self.shift) / denom
        return z * (1.0 - self.scale) - self.shift


class NanAfterField(VelocityField):
    """Emits NaN once the first coordinate exceeds a threshold (error-path tests)."""

    def __init__(self, inner: VelocityField, threshold: float, rows=None):
        self.inner = inner
        self.threshold = threshold
        self.rows = rows

    def velocity(self, z_t, t):
        z_t = np.atleast_2d(np.asarray(z_t, dtype=np.float64))
        v = self.inner.velocity(z_t, t)
        bad = z_t[:, 0] > self.threshold
        if self.rows is not None:
            mask = np.zeros(z_t.shape[0], dtype=bool)
            mask[self.rows] = True
            bad = bad & mask
        v = np.where(bad[:, None], np.nan, v)
        return v
