"""Run configuration: one JSON file per run, parsed strictly.

Unknown keys are rejected everywhere so a typo can never silently fall back
to a default.  A persisted config plus its seed fully determines every
artifact byte; the manifest records the config hash and artifact checksums.
"""

from __future__ import annotations

import hashlib
import json
import os
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .fields import GmmSpec
from .losses import LinearFeatureDistance, LossSpec, TimestepDistribution
from .pipeline import ModelSpec, TrainConfig
from .rng import substream

TOOL_VERSION = "0.1.0"

_REQUIRED = object()


def derive_seed(seed: int, *tags) -> int:
    """Stable 63-bit seed for a named sub-purpose of a master seed."""
    digest = hashlib.sha256(repr((int(seed),) + tags).encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def _pop(section: dict, key: str, context: str, default=_REQUIRED):
    if key in section:
        return section.pop(key)
    if default is _REQUIRED:
        raise ConfigError(f"{context}: missing required key {key!r}")
    return default


def _done(section: dict, context: str) -> None:
    if section:
        raise ConfigError(f"{context}: unknown keys {sorted(section)}")


def parse_target(obj: dict, context: str = "target") -> GmmSpec:
    obj = dict(obj)
    spec = GmmSpec(
        _pop(obj, "weights", context),
        _pop(obj, "means", context),
        _pop(obj, "variances", context),
    )
    _done(obj, context)
    return spec


def parse_model(obj: dict, context: str = "model") -> ModelSpec:
    obj = dict(obj)
    model = ModelSpec(
        hidden=tuple(_pop(obj, "hidden", context, (64, 64))),
        activation=_pop(obj, "activation", context, "tanh"),
        parameterization=_pop(obj, "parameterization", context, "v"),
        input_map=_pop(obj, "input_map", context, "plain"),
    )
    _done(obj, context)
    return model


def parse_timesteps(obj: dict, context: str = "timesteps") -> TimestepDistribution:
    obj = dict(obj)
    dist = TimestepDistribution(
        kind=_pop(obj, "kind", context, "uniform"),
        a=float(_pop(obj, "a", context, 4.0)),
        loc=float(_pop(obj, "loc", context, 0.0)),
        scale=float(_pop(obj, "scale", context, 1.0)),
        t_min=float(_pop(obj, "t_min", context, 1e-5)),
        t_max=float(_pop(obj, "t_max", context, 0.99999)),
    )
    _done(obj, context)
    return dist


def parse_loss(obj: dict, data_dim: int, context: str = "loss") -> LossSpec:
    obj = dict(obj)
    hook_cfg = _pop(obj, "hook", context, None)
    hook = None
    if hook_cfg is not None:
        hook_cfg = dict(hook_cfg)
        kind = _pop(hook_cfg, "kind", f"{context}.hook")
        if kind != "linear_features":
            raise ConfigError(f"{context}.hook: unknown kind {kind!r}")
        feature_dim = int(_pop(hook_cfg, "feature_dim", f"{context}.hook", max(8, data_dim)))
        hook_seed = int(_pop(hook_cfg, "seed", f"{context}.hook", 0))
        _done(hook_cfg, f"{context}.hook")
        hook = LinearFeatureDistance(data_dim, feature_dim, substream(hook_seed, "hook"))
    huber_c = _pop(obj, "huber_c", context, None)
    spec = LossSpec(
        premetric=_pop(obj, "premetric", context, "squared_l2"),
        parameterization=_pop(obj, "parameterization", context, "v"),
        weighting=_pop(obj, "weighting", context, "unit"),
        huber_c=None if huber_c is None else float(huber_c),
        hook=hook,
    )
    _done(obj, context)
    return spec


def parse_train(obj: dict, data_dim: int, default_seed: int, model: ModelSpec,
                context: str = "train") -> TrainConfig:
    obj = dict(obj)
    cfg = TrainConfig(
        batch_size=int(_pop(obj, "batch_size", context, 128)),
        iterations=int(_pop(obj, "iterations", context, 4000)),
        seed=int(_pop(obj, "seed", context, default_seed)),
        loss=parse_loss(_pop(obj, "loss", context, {}), data_dim, f"{context}.loss"),
        timesteps=parse_timesteps(_pop(obj, "timesteps", context, {}), f"{context}.timesteps"),
        learning_rate=float(_pop(obj, "learning_rate", context, 1e-3)),
        warmup_iters=int(_pop(obj, "warmup_iters", context, 0)),
        adam_beta1=float(_pop(obj, "adam_beta1", context, 0.9)),
        adam_beta2=float(_pop(obj, "adam_beta2", context, 0.999)),
        adam_eps=float(_pop(obj, "adam_eps", context, 1e-8)),
        ema_decay=float(_pop(obj, "ema_decay", context, 0.9999)),
        dropout=float(_pop(obj, "dropout", context, 0.0)),
        checkpoint_every=int(_pop(obj, "checkpoint_every", context, 0)),
        model=model,
    )
    _done(obj, context)
    return cfg


@dataclass
class RunConfig:
    """The parsed per-run configuration file.

    Sections are kept as raw dicts and parsed by the subcommand that owns
    them, so one file can describe a whole experiment.
    """

    seed: int
    out_dir: Path
    threads: int
    target: GmmSpec | None
    model: ModelSpec
    sections: dict[str, dict] = field(default_factory=dict)
    text: str = ""

    _KNOWN = ("seed", "out_dir", "threads", "target", "model", "train", "reflow",
              "sample", "generate_pairs", "invert", "diagnose", "profile_loss",
              "finetune")

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.text.encode()).hexdigest()

    def section(self, name: str) -> dict:
        if name not in self.sections:
            raise ConfigError(f"config has no {name!r} section")
        return dict(self.sections[name])


def load_config(path, out_override: str | None = None,
                seed_override: int | None = None,
                threads_override: int | None = None) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    unknown = set(raw) - set(RunConfig._KNOWN)
    if unknown:
        raise ConfigError(f"{path}: unknown top-level keys {sorted(unknown)}")

    seed = int(raw.get("seed", 0)) if seed_override is None else int(seed_override)
    out_dir = raw.get("out_dir", "runs/out")
    out_dir = os.environ.get("RFLAB_OUT", out_dir)
    if out_override is not None:
        out_dir = out_override
    threads = int(raw.get("threads", 1))
    env_threads = os.environ.get("RFLAB_THREADS")
    if env_threads is not None:
        threads = int(env_threads)
    if threads_override is not None:
        threads = int(threads_override)

    target = parse_target(raw["target"]) if "target" in raw else None
    model = parse_model(raw.get("model", {}))
    sections = {k: raw[k] for k in RunConfig._KNOWN[5:] if k in raw}
    return RunConfig(seed=seed, out_dir=Path(out_dir), threads=threads,
                     target=target, model=model, sections=sections, text=text)


# ---------------------------------------------------------------------------
# manifest and run lock
# ---------------------------------------------------------------------------

def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir: Path, command: str, config: RunConfig,
                   artifacts: list[Path], seeds: dict, metrics: dict) -> Path:
    entries = {}
    for p in sorted(artifacts):
        entries[str(Path(p).relative_to(out_dir))] = file_digest(p)
    manifest = {
        "tool": "rflab",
        "version": TOOL_VERSION,
        "command": command,
        "config_sha256": config.config_hash,
        "threads": config.threads,
        "seeds": seeds,
        "artifacts": entries,
        "metrics": metrics,
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return path


@contextmanager
def output_lock(out_dir: Path):
    """Advisory lock: one run owns an output directory at a time."""
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / ".rflab-lock"
    for attempt in range(2):
        try:
            fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            break
        except FileExistsError:
            try:
                holder = int(lock.read_text().strip() or "0")
            except (OSError, ValueError):
                holder = 0
            if holder and _alive(holder):
                raise OSError(f"{out_dir} is locked by running process {holder}")
            lock.unlink(missing_ok=True)  # stale lock, take over
    else:
        raise OSError(f"could not acquire lock in {out_dir}")
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True
