"""The Reflow procedure: train, generate coupled pairs, retrain, fine-tune.

Stage k trains a flow on coupling k-1, integrates its ODE from fresh noise to
produce a deterministic (sample, noise) coupling, and hands that to stage
k+1.  Pair files (magic ``RFPR1``) persist couplings; when the noise came
from the per-record RNG streams the file may omit it and store only record
indices.
"""

from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DomainError, ShapeMismatch, TrainingFailure
from .fields import GmmSpec, NeuralVelocityField, VelocityField
from .losses import LossSpec, TimestepDistribution, objective_gradients
from .nn import MlpParams, init_mlp, save_checkpoint
from .optim import adam_step, init_adam
from .rng import record_noise, substream
from .samplers import SolverConfig, TimeSchedule, integrate, steps_for_nfe
from .diagnostics import autocorrelation

PAIR_MAGIC = b"RFPR1"
_SOLVER_IDS = {"euler": 0, "heun": 1}
_SOLVER_NAMES = {v: k for k, v in _SOLVER_IDS.items()}
_FLAG_NOISE_OMITTED = 1
_FLAG_REAL_INVERTED = 2
_EMPTY_CHECKSUM = bytes(32)
DIVERGENCE_LIMIT = 1e6

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# couplings
# ---------------------------------------------------------------------------

class IndependentCoupling:
    """Fresh x ~ target and z ~ N(0, I) on independent streams."""

    kind = "independent"

    def __init__(self, target: GmmSpec, seed: int):
        self.target = target
        self.dim = target.dim
        self._rng_x = substream(seed, "coupling", "x")
        self._rng_z = substream(seed, "coupling", "z")

    def draw(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        return self.target.sample(n, self._rng_x), self._rng_z.standard_normal((n, self.dim))


class PairedCoupling:
    """Stored couples, returned exactly as persisted (never re-paired)."""

    kind = "paired"

    def __init__(self, xs: np.ndarray, zs: np.ndarray, seed: int):
        xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
        zs = np.atleast_2d(np.asarray(zs, dtype=np.float64))
        if xs.shape != zs.shape:
            raise ShapeMismatch(f"pair arrays differ: {xs.shape} vs {zs.shape}")
        if xs.shape[0] == 0:
            raise DomainError("empty pair set")
        self.xs, self.zs = xs, zs
        self.dim = xs.shape[1]
        self._rng = substream(seed, "coupling", "index")

    def draw(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        idx = self._rng.integers(0, self.xs.shape[0], size=n)
        return self.xs[idx], self.zs[idx]


class MixedCoupling:
    """Inverted (real data, noise) pairs mixed with synthetic pairs.

    Each sample is a synthetic pair with probability p, an inverted pair
    otherwise; p = 0 uses the inverted pairs alone.
    """

    kind = "real_inverted"

    def __init__(self, inverted: "PairDataset", p: float, seed: int,
                 synthetic: "PairDataset | None" = None):
        if not 0.0 <= p <= 1.0:
            raise ConfigError(f"mixing probability must lie in [0, 1], got {p}")
        if p > 0.0 and synthetic is None:
            raise ConfigError("p > 0 requires a synthetic pair set")
        self.p = p
        self._inv = PairedCoupling(inverted.xs, inverted.zs, seed)
        self._syn = PairedCoupling(synthetic.xs, synthetic.zs, seed) if synthetic else None
        self._rng = substream(seed, "coupling", "mix")
        self.dim = self._inv.dim

    def draw(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        xs, zs = self._inv.draw(n)
        if self.p > 0.0:
            take = self._rng.random(n) < self.p
            sx, sz = self._syn.draw(n)
            xs = np.where(take[:, None], sx, xs)
            zs = np.where(take[:, None], sz, zs)
        return xs, zs


# ---------------------------------------------------------------------------
# pair dataset + file format
# ---------------------------------------------------------------------------

@dataclass
class PairDataset:
    xs: np.ndarray                       # (n, d) integration endpoints (or real data)
    zs: np.ndarray                       # (n, d) starting noise (or inverted noise)
    nfe: int                             # evaluations actually spent per record
    solver: str
    seed: int                            # master seed of the generating run
    indices: np.ndarray                  # (n,) per-record RNG stream indices
    source_checksum: bytes = _EMPTY_CHECKSUM
    real_inverted: bool = False

    def __post_init__(self):
        if self.xs.shape != self.zs.shape or self.xs.ndim != 2:
            raise ShapeMismatch("pair arrays must be (n, d) and congruent")
        if self.xs.shape[0] == 0:
            raise DomainError("a pair dataset must hold at least one record")

    @property
    def count(self) -> int:
        return self.xs.shape[0]

    @property
    def dim(self) -> int:
        return self.xs.shape[1]


def save_pairs(path, ds: PairDataset, omit_noise: bool = False) -> None:
    if omit_noise and ds.real_inverted:
        raise ConfigError("inverted noise is data, it cannot be regenerated from a key")
    flags = (_FLAG_NOISE_OMITTED if omit_noise else 0) | (
        _FLAG_REAL_INVERTED if ds.real_inverted else 0)
    if len(ds.source_checksum) != 32:
        raise ValueError("source checksum must be 32 bytes")
    with open(path, "wb") as fh:
        fh.write(PAIR_MAGIC)
        fh.write(struct.pack("<IQIBB", ds.dim, ds.count, ds.nfe,
                             _SOLVER_IDS[ds.solver], flags))
        fh.write(struct.pack("<Q", ds.seed))
        fh.write(ds.source_checksum)
        if omit_noise:
            fh.write(np.ascontiguousarray(ds.indices, dtype="<u8").tobytes())
            fh.write(np.ascontiguousarray(ds.xs, dtype="<f8").tobytes())
        else:
            rec = np.concatenate([ds.xs, ds.zs], axis=1)
            fh.write(np.ascontiguousarray(rec, dtype="<f8").tobytes())


def load_pairs(path) -> PairDataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(PAIR_MAGIC)] != PAIR_MAGIC:
        raise ValueError(f"{path}: not a pair file (bad magic)")
    off = len(PAIR_MAGIC)
    dim, count, nfe, solver_id, flags = struct.unpack_from("<IQIBB", blob, off)
    off += struct.calcsize("<IQIBB")
    (seed,) = struct.unpack_from("<Q", blob, off)
    off += 8
    checksum = blob[off: off + 32]
    off += 32
    if flags & _FLAG_NOISE_OMITTED:
        indices = np.frombuffer(blob, dtype="<u8", count=count, offset=off).copy()
        off += 8 * count
        xs = np.frombuffer(blob, dtype="<f8", count=count * dim, offset=off)
        xs = xs.reshape(count, dim).copy()
        zs = np.stack([record_noise(seed, int(i), dim) for i in indices])
    else:
        rec = np.frombuffer(blob, dtype="<f8", count=count * 2 * dim, offset=off)
        rec = rec.reshape(count, 2 * dim)
        xs, zs = rec[:, :dim].copy(), rec[:, dim:].copy()
        indices = np.arange(count, dtype=np.uint64)
    return PairDataset(xs=xs, zs=zs, nfe=nfe, solver=_SOLVER_NAMES[solver_id],
                       seed=seed, indices=indices, source_checksum=checksum,
                       real_inverted=bool(flags & _FLAG_REAL_INVERTED))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class ModelSpec:
    hidden: tuple[int, ...] = (64, 64)
    activation: str = "tanh"
    parameterization: str = "v"          # what the net output means: 'x' or 'v'
    input_map: str = "plain"             # 'plain' | 'converted_vp' | 'converted_ve'


@dataclass
class TrainConfig:
    batch_size: int = 128
    iterations: int = 4000
    seed: int = 0
    loss: LossSpec = field(default_factory=LossSpec)
    timesteps: TimestepDistribution = field(default_factory=TimestepDistribution)
    learning_rate: float = 1e-3
    warmup_iters: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    ema_decay: float = 0.9999
    dropout: float = 0.0
    checkpoint_every: int = 0
    model: ModelSpec = field(default_factory=ModelSpec)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.iterations < 0:
            raise ConfigError("iterations must be >= 0")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigError("ema_decay must lie in [0, 1)")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")


@dataclass
class TrainResult:
    params: MlpParams
    ema: list[np.ndarray]
    loss_history: list[float]
    config: TrainConfig

    def field(self, use_ema: bool = True) -> NeuralVelocityField:
        params = self.params
        if use_ema:
            params = self.params.copy()
            for tensor, shadow in zip(params.tensors(), self.ema):
                tensor.data = shadow.copy()
        return build_field(params, self.config.model)

    def save(self, path) -> None:
        save_checkpoint(path, self.params, self.ema)


def _widths_for(dim: int, model: ModelSpec) -> tuple[int, ...]:
    from .nn import TIME_FEATURE_DIM

    return (dim + TIME_FEATURE_DIM, *model.hidden, dim)


def build_field(params: MlpParams, model: ModelSpec) -> NeuralVelocityField:
    return NeuralVelocityField(params, parameterization=model.parameterization,
                               input_map=model.input_map)


def train_flow(coupling, config: TrainConfig, init: MlpParams | None = None,
               checkpoint_dir=None) -> TrainResult:
    """Minimise the configured objective over the coupling; returns raw + EMA weights.

    `init` copies an existing network (must match the architecture).  Aborts
    with the iteration index on a NaN loss or on divergence past 1e6.
    """
    widths = _widths_for(coupling.dim, config.model)
    if init is None:
        params = init_mlp(widths, config.model.activation, seed=config.seed)
    else:
        if tuple(init.widths) != widths:
            raise ConfigError(f"init widths {init.widths} != required {widths}")
        params = init.copy()
    loss_field = build_field(params, config.model)
    state = init_adam(params, lr=config.learning_rate, beta1=config.adam_beta1,
                      beta2=config.adam_beta2, eps=config.adam_eps,
                      ema_decay=config.ema_decay)
    rng_t = substream(config.seed, "train", "t")
    rng_drop = substream(config.seed, "train", "dropout")
    tensors = params.tensors()
    history: list[float] = []
    for it in range(config.iterations):
        xs, zs = coupling.draw(config.batch_size)
        try:
            loss, grads = objective_gradients(
                loss_field, config.loss, xs, zs, config.timesteps, rng_t, tensors,
                dropout=config.dropout, dropout_rng=rng_drop)
        except FloatingPointError as exc:
            raise TrainingFailure(it, f"numeric fault: {exc}") from exc
        if not np.isfinite(loss):
            raise TrainingFailure(it, "loss is not finite")
        if loss > DIVERGENCE_LIMIT:
            raise TrainingFailure(it, f"loss diverged ({loss:.3e})")
        lr = config.learning_rate
        if config.warmup_iters > 0:
            lr *= min(1.0, (it + 1) / config.warmup_iters)
        adam_step(state, params, grads, lr=lr)
        history.append(loss)
        if checkpoint_dir is not None and config.checkpoint_every > 0 \
                and (it + 1) % config.checkpoint_every == 0:
            save_checkpoint(f"{checkpoint_dir}/ckpt_{it + 1:07d}.rfpp", params, state.ema)
    return TrainResult(params=params, ema=state.ema, loss_history=history, config=config)


# ---------------------------------------------------------------------------
# pair generation and inversion
# ---------------------------------------------------------------------------

def checkpoint_checksum(path) -> bytes:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).digest()


def generate_pairs(fld: VelocityField, dim: int, n: int, nfe: int, solver: str,
                   seed: int, update_rule: str = "default",
                   source_checksum: bytes = _EMPTY_CHECKSUM) -> PairDataset:
    """Integrate n noise draws to samples; record i uses the (seed, i) stream.

    Records whose trajectory turns non-finite are dropped; the stored count
    reflects what survived.
    """
    if n < 1:
        raise DomainError("need at least one pair")
    steps = steps_for_nfe(nfe, solver)
    zs = np.stack([record_noise(seed, i, dim) for i in range(n)])
    schedule = TimeSchedule.default(steps)
    cfg = SolverConfig(solver=solver, update_rule=update_rule, direction="generate",
                       nonfinite="coast")
    result = integrate(_NonFiniteTolerant(fld), zs, schedule.points, cfg)
    keep = np.all(np.isfinite(result.endpoint), axis=1)
    if not np.all(keep):
        logger.warning("generate_pairs: dropped %d non-finite record(s)", int((~keep).sum()))
    indices = np.flatnonzero(keep).astype(np.uint64)
    return PairDataset(xs=result.endpoint[keep], zs=zs[keep], nfe=result.n_evals,
                       solver=solver, seed=seed, indices=indices,
                       source_checksum=source_checksum)


class _NonFiniteTolerant(VelocityField):
    """Wrapper that lets bad records coast to the end instead of aborting the batch."""

    def __init__(self, inner: VelocityField):
        self.inner = inner

    def velocity(self, z_t, t):
        z_t = np.atleast_2d(z_t)
        bad = ~np.all(np.isfinite(z_t), axis=1)
        if not np.any(bad):
            return self.inner.velocity(z_t, t)
        patched = np.where(bad[:, None], 0.0, z_t)
        v = self.inner.velocity(patched, t)
        return np.where(bad[:, None], np.nan, v)


def invert_real_data(fld: VelocityField, real_xs: np.ndarray, nfe: int, solver: str,
                     source_checksum: bytes = _EMPTY_CHECKSUM) -> tuple[PairDataset, dict]:
    """Integrate real samples backward to noise; attaches noise-quality stats.

    Returns (pairs with kind real_inverted, metrics).  Metrics cover the
    squared-norm statistic (target: the data dimension) and the mean lag-1
    autocorrelation of the inverted noise.
    """
    if nfe < 1:
        raise DomainError("nfe must be >= 1")
    real_xs = np.atleast_2d(np.asarray(real_xs, dtype=np.float64))
    steps = steps_for_nfe(nfe, solver)
    schedule = TimeSchedule.uniform(steps)
    cfg = SolverConfig(solver=solver, direction="invert", nonfinite="coast")
    result = integrate(_NonFiniteTolerant(fld), real_xs, schedule.reversed_points(), cfg)
    keep = np.all(np.isfinite(result.endpoint), axis=1)
    if not np.all(keep):
        logger.warning("invert_real_data: dropped %d non-finite record(s)", int((~keep).sum()))
    xs, zs = real_xs[keep], result.endpoint[keep]
    sq = np.sum(zs * zs, axis=1)
    d = xs.shape[1]
    metrics = {
        "count": int(xs.shape[0]),
        "dim": d,
        "mean_sq_norm": float(sq.mean()),
        "sq_norm_se": float(sq.std(ddof=1) / np.sqrt(len(sq))) if len(sq) > 1 else 0.0,
        "nfe": result.n_evals,
    }
    if d >= 2:
        metrics["mean_abs_autocorr_lag1"] = float(
            np.mean([abs(autocorrelation(z, 1)[0]) for z in zs]))
    ds = PairDataset(xs=xs, zs=zs, nfe=result.n_evals, solver=solver, seed=0,
                     indices=np.flatnonzero(keep).astype(np.uint64),
                     source_checksum=source_checksum, real_inverted=True)
    return ds, metrics


# ---------------------------------------------------------------------------
# the full procedure
# ---------------------------------------------------------------------------

@dataclass
class ReflowConfig:
    target: GmmSpec
    rounds: int = 2
    stages: list[TrainConfig] = field(default_factory=list)   # one per round
    pair_count: int = 20000
    pair_nfe: int = 63
    pair_solver: str = "heun"
    init_next_from_previous: bool = True

    def __post_init__(self):
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if len(self.stages) != self.rounds:
            raise ConfigError(f"need {self.rounds} stage configs, got {len(self.stages)}")


@dataclass
class ReflowResult:
    stages: list[TrainResult]
    pair_sets: list[PairDataset]


def reflow(config: ReflowConfig) -> ReflowResult:
    """Algorithm: train stage 1 on the independent coupling, then repeatedly
    generate a deterministic coupling from the last stage and train the next
    stage on it.  Stage k+1 never touches the stage-k training data."""
    stages: list[TrainResult] = []
    pair_sets: list[PairDataset] = []
    coupling = IndependentCoupling(config.target, seed=config.stages[0].seed)
    for k in range(config.rounds):
        cfg = config.stages[k]
        init = None
        if k > 0 and config.init_next_from_previous:
            init = stages[-1].params
        stages.append(train_flow(coupling, cfg, init=init))
        if k == config.rounds - 1:
            break
        ds = generate_pairs(stages[-1].field(), config.target.dim, config.pair_count,
                            config.pair_nfe, config.pair_solver,
                            seed=config.stages[k + 1].seed)
        pair_sets.append(ds)
        coupling = PairedCoupling(ds.xs, ds.zs, seed=config.stages[k + 1].seed)
    return ReflowResult(stages=stages, pair_sets=pair_sets)


def finetune_with_real(result: TrainResult, inverted: PairDataset, p: float,
                       config: TrainConfig,
                       synthetic: PairDataset | None = None) -> TrainResult:
    """Continue training from `result` on inverted (real data, noise) pairs.

    With probability p a batch row comes from the synthetic pairs instead;
    p = 0 (the default elsewhere) trains purely on the inverted coupling.
    """
    coupling = MixedCoupling(inverted, p, seed=config.seed, synthetic=synthetic)
    return train_flow(coupling, config, init=result.params)
