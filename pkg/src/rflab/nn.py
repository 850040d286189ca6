"""Small time-conditioned MLPs: parameters, forward pass, checkpoint format.

The network consumes ``concat(state, time_features(t))`` and is trained with
the reverse-mode tape from :mod:`rflab.tensor`.  Checkpoints are a fixed
binary layout (magic ``RFPP1``) holding the raw weights followed by their EMA
shadows; round-trips are bit-exact.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import NumericFailure, ShapeMismatch
from .rng import substream
from .tensor import Tensor, add, concat, matmul, mul, relu, tanh

CHECKPOINT_MAGIC = b"RFPP1"
ACTIVATION_IDS = {"tanh": 0, "relu": 1}
_ACTIVATION_NAMES = {v: k for k, v in ACTIVATION_IDS.items()}

# time features: sin/cos pairs at 8 geometrically spaced frequencies
# (ratio sqrt(2), spanning pi/2 .. ~17.8 rad; smooth enough that trained
# fields stay regular in t)
TIME_FREQS = (np.pi / 2.0) * (2.0 ** (np.arange(8) / 2.0))
TIME_FEATURE_DIM = 2 * TIME_FREQS.size


def time_features(t) -> np.ndarray:
    """Sinusoidal features of t; accepts a scalar or a (B,) array."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    ang = t[:, None] * TIME_FREQS[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


@dataclass
class MlpParams:
    """Fully-connected network parameters.

    ``widths`` includes the input and output widths, e.g. [18, 64, 64, 2].
    """

    widths: tuple[int, ...]
    activation: str
    seed: int
    weights: list[Tensor]
    biases: list[Tensor]

    def tensors(self) -> list[Tensor]:
        """All trainable leaves, in the fixed order W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def arrays(self) -> list[np.ndarray]:
        return [t.data for t in self.tensors()]

    def copy(self) -> "MlpParams":
        return MlpParams(
            widths=self.widths,
            activation=self.activation,
            seed=self.seed,
            weights=[Tensor(w.data.copy(), requires_grad=True) for w in self.weights],
            biases=[Tensor(b.data.copy(), requires_grad=True) for b in self.biases],
        )


def init_mlp(widths, activation: str = "tanh", seed: int = 0) -> MlpParams:
    """Deterministic init: weights uniform in +-sqrt(6/(fan_in+fan_out)), zero biases."""
    widths = tuple(int(w) for w in widths)
    if len(widths) < 2 or any(w <= 0 for w in widths):
        raise ShapeMismatch(f"invalid layer widths {widths}")
    if activation not in ACTIVATION_IDS:
        raise ValueError(f"unknown activation {activation!r}")
    weights, biases = [], []
    for i, (n_in, n_out) in enumerate(zip(widths[:-1], widths[1:])):
        rng = substream(seed, "init", i)
        bound = np.sqrt(6.0 / (n_in + n_out))
        weights.append(Tensor(rng.uniform(-bound, bound, size=(n_in, n_out)),
                              requires_grad=True))
        biases.append(Tensor(np.zeros(n_out), requires_grad=True))
    return MlpParams(widths, activation, int(seed), weights, biases)


def forward_mlp(params: MlpParams, x: Tensor, dropout: float = 0.0,
                dropout_rng: np.random.Generator | None = None) -> Tensor:
    """Forward pass; purely functional, records on the active tape if any.

    Dropout (inverted scaling) applies to hidden activations only and needs
    an explicit generator so training stays reproducible.
    """
    if x.shape[-1] != params.widths[0]:
        raise ShapeMismatch(
            f"input width {x.shape[-1]} != first layer width {params.widths[0]}")
    act = tanh if params.activation == "tanh" else relu
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = add(matmul(h, w), b)
        if i < last:
            h = act(h)
            if dropout > 0.0:
                if dropout_rng is None:
                    raise ValueError("dropout requires a generator")
                keep = dropout_rng.random(h.shape) >= dropout
                h = mul(h, Tensor(keep / (1.0 - dropout)))
    if not np.all(np.isfinite(h.data)):
        raise NumericFailure("network produced a non-finite output")
    return h


def zero_like_params(params: MlpParams) -> list[np.ndarray]:
    return [np.zeros_like(a) for a in params.arrays()]


def with_time_input(params: MlpParams, state: np.ndarray, t) -> Tensor:
    """Evaluate the net on concat(state, time_features(t)) without recording."""
    x = np.concatenate([np.atleast_2d(state), time_features(_per_row_t(state, t))], axis=1)
    return forward_mlp(params, Tensor(x))


def _per_row_t(state: np.ndarray, t) -> np.ndarray:
    rows = np.atleast_2d(state).shape[0]
    t = np.asarray(t, dtype=np.float64)
    return np.full(rows, float(t)) if t.ndim == 0 else t


def taped_with_time_input(params: MlpParams, state: np.ndarray, t,
                          dropout: float = 0.0,
                          dropout_rng: np.random.Generator | None = None) -> Tensor:
    """Like with_time_input but suitable inside a Tape (state/t are constants)."""
    feats = time_features(_per_row_t(state, t))
    x = concat([Tensor(np.atleast_2d(state)), Tensor(feats)], axis=1)
    return forward_mlp(params, x, dropout=dropout, dropout_rng=dropout_rng)


# ---------------------------------------------------------------------------
# checkpoint file: magic, widths, activation id, seed, raw params, EMA params
# ---------------------------------------------------------------------------

def save_checkpoint(path, params: MlpParams, ema: list[np.ndarray]) -> None:
    arrays = params.arrays()
    if len(ema) != len(arrays) or any(e.shape != a.shape for e, a in zip(ema, arrays)):
        raise ShapeMismatch("EMA shadow shapes do not match parameters")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(params.widths)))
        fh.write(struct.pack(f"<{len(params.widths)}I", *params.widths))
        fh.write(struct.pack("<I", ACTIVATION_IDS[params.activation]))
        fh.write(struct.pack("<Q", params.seed))
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
        for e in ema:
            fh.write(np.ascontiguousarray(e, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[MlpParams, list[np.ndarray]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    off = len(CHECKPOINT_MAGIC)
    (n_widths,) = struct.unpack_from("<I", blob, off)
    off += 4
    widths = struct.unpack_from(f"<{n_widths}I", blob, off)
    off += 4 * n_widths
    (act_id,) = struct.unpack_from("<I", blob, off)
    off += 4
    (seed,) = struct.unpack_from("<Q", blob, off)
    off += 8

    def read_array(shape):
        nonlocal off
        count = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(shape)
        off += 8 * count
        return arr.astype(np.float64)

    weights, biases = [], []
    for n_in, n_out in zip(widths[:-1], widths[1:]):
        weights.append(Tensor(read_array((n_in, n_out)), requires_grad=True))
        biases.append(Tensor(read_array((n_out,)), requires_grad=True))
    ema = []
    for n_in, n_out in zip(widths[:-1], widths[1:]):
        ema.append(read_array((n_in, n_out)))
        ema.append(read_array((n_out,)))
    if off != len(blob):
        raise ValueError(f"{path}: {len(blob) - off} trailing bytes")
    params = MlpParams(tuple(widths), _ACTIVATION_NAMES[act_id], seed, weights, biases)
    return params, ema
