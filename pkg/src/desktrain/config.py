"""JSON run configuration: parsing, validation, and effective-config output.

A config file is a JSON object with sections `model`, `optim`, `data`,
`numerics`, `monitor`, optional `simulate`, plus top-level `init_seed`,
`checkpoint_interval` and `output_dir`. Every field except `data.paths` and
`output_dir` has a default, and the defaults are the desk-scale preset
(257-token byte vocabulary, 64-dim 2-layer model, 2 data-parallel ranks,
2000 steps), so a minimal config trains the reference setup.

Validation is strict: wrong types, out-of-range values and unknown keys all
raise `ConfigError` naming the offending field by dotted path, e.g.
"data.dp_degree: must be >= 1". Relative paths (data files, output
directory) resolve against the directory containing the config file.

`effective_config_dict` materializes every field, defaults included and
paths absolutized; re-parsing its JSON yields an equal TrainConfig, which
is how runs are made reproducible from their output directory alone.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

from .model import NUMERIC_MODES, ModelConfig
from .optim import OptimConfig
from .simulate import RECOVERY_MODES, FailureEvent, SimConfig, random_failure_schedule


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    paths: tuple[str, ...]
    seed: int = 0
    dp_degree: int = 2
    batch_size_per_rank: int = 8
    prefetch_depth: int = 0
    max_epochs: int | None = None

    def __post_init__(self) -> None:
        if not self.paths:
            raise ValueError("paths must name at least one dataset file")
        if self.dp_degree < 1:
            raise ValueError("dp_degree must be >= 1")
        if self.batch_size_per_rank < 1:
            raise ValueError("batch_size_per_rank must be >= 1")
        if self.prefetch_depth < 0:
            raise ValueError("prefetch_depth must be >= 0")
        if self.max_epochs is not None and self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1 when set")


@dataclass(frozen=True)
class NumericsConfig:
    mode: str = "f32"
    sr_seed: int = 0

    def __post_init__(self) -> None:
        if self.mode not in NUMERIC_MODES:
            raise ValueError(f"mode must be one of {list(NUMERIC_MODES)}, got {self.mode!r}")


@dataclass(frozen=True)
class MonitorConfig:
    window: int = 20
    threshold: float = 0.1
    freeze_baseline: bool = False

    def __post_init__(self) -> None:
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.threshold <= 0:
            raise ValueError("threshold must be positive")


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig
    optim: OptimConfig
    data: DataConfig
    numerics: NumericsConfig
    monitor: MonitorConfig
    output_dir: str
    init_seed: int = 42
    checkpoint_interval: int = 200
    simulate: SimConfig | None = None

    def __post_init__(self) -> None:
        if self.checkpoint_interval < 1:
            raise ValueError("checkpoint_interval must be >= 1")


_MISSING = object()


def _coerce(value, kind, path: str):
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: must be a number")
        return float(value)
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: must be an integer")
        return value
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: must be a boolean")
        return value
    if kind is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: must be a string")
        return value
    if kind is list:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: must be a list")
        return value
    raise AssertionError(f"unhandled kind {kind!r}")


class _Section:
    """One level of the config tree; tracks consumed keys so leftovers can
    be rejected by name."""

    def __init__(self, data, path: str):
        if not isinstance(data, dict):
            raise ConfigError(f"{path or 'config'}: must be a JSON object")
        self._data = data
        self._path = path
        self._seen: set[str] = set()

    def _full(self, key: str) -> str:
        return f"{self._path}.{key}" if self._path else key

    def take(self, key, kind, default=_MISSING, allow_none=False, check=None, msg="invalid value"):
        self._seen.add(key)
        if key not in self._data:
            if default is _MISSING:
                raise ConfigError(f"{self._full(key)}: required field is missing")
            return default
        value = self._data[key]
        if value is None and allow_none:
            return None
        value = _coerce(value, kind, self._full(key))
        if check is not None and not check(value):
            raise ConfigError(f"{self._full(key)}: {msg}")
        return value

    def subsection(self, key: str, required: bool = True):
        self._seen.add(key)
        if key not in self._data or self._data[key] is None:
            if required:
                raise ConfigError(f"{self._full(key)}: required section is missing")
            return None
        return _Section(self._data[key], self._full(key))

    def finish(self) -> None:
        unknown = sorted(set(self._data) - self._seen)
        if unknown:
            raise ConfigError(f"{self._path or 'config'}: unknown keys: {unknown}")


def _build(section_path: str, factory, **kwargs):
    try:
        return factory(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"{section_path}: {exc}") from exc


def config_from_dict(root: dict, base_dir: str = ".") -> TrainConfig:
    """Validate a parsed JSON object into a TrainConfig.

    `base_dir` anchors relative paths. Data files must exist.
    """
    top = _Section(root, "")

    ms = top.subsection("model", required=False) or _Section({}, "model")
    model = _build(
        "model",
        ModelConfig,
        vocab_size=ms.take("vocab_size", int, default=257),
        model_dim=ms.take("model_dim", int, default=64),
        num_layers=ms.take("num_layers", int, default=2),
        num_heads=ms.take("num_heads", int, default=4),
        max_seq_len=ms.take("max_seq_len", int, default=128),
        ffn_hidden=ms.take("ffn_hidden", int, default=None, allow_none=True),
        rope_theta=ms.take("rope_theta", float, default=10000.0),
        rmsnorm_eps=ms.take("rmsnorm_eps", float, default=1e-6),
        base_init_std=ms.take("base_init_std", float, default=0.02),
    )
    ms.finish()

    os_ = top.subsection("optim", required=False) or _Section({}, "optim")
    optim = _build(
        "optim",
        OptimConfig,
        total_steps=os_.take("total_steps", int, default=2000),
        warmup_steps=os_.take("warmup_steps", int, default=50),
        lr_max=os_.take("lr_max", float, default=3.0e-4),
        lr_min=os_.take("lr_min", float, default=3.0e-5),
        beta1=os_.take("beta1", float, default=0.9),
        beta2=os_.take("beta2", float, default=0.95),
        weight_decay=os_.take("weight_decay", float, default=0.1),
        clip_norm=os_.take("clip_norm", float, default=1.0),
        adam_eps=os_.take("adam_eps", float, default=1.0e-8),
        decay_norm_weights=os_.take("decay_norm_weights", bool, default=True),
    )
    os_.finish()

    ds = top.subsection("data")
    raw_paths = ds.take("paths", list, check=lambda v: bool(v), msg="must be a non-empty list")
    paths = []
    for i, p in enumerate(raw_paths):
        if not isinstance(p, str) or not p:
            raise ConfigError(f"data.paths[{i}]: must be a non-empty string")
        paths.append(os.path.abspath(os.path.join(base_dir, p)))
    missing = [p for p in paths if not os.path.isfile(p)]
    if missing:
        raise ConfigError(f"data.paths: files do not exist: {missing}")
    data = _build(
        "data",
        DataConfig,
        paths=tuple(paths),
        seed=ds.take("seed", int, default=0),
        dp_degree=ds.take("dp_degree", int, default=2, check=lambda v: v >= 1, msg="must be >= 1"),
        batch_size_per_rank=ds.take("batch_size_per_rank", int, default=8),
        prefetch_depth=ds.take("prefetch_depth", int, default=0),
        max_epochs=ds.take("max_epochs", int, default=None, allow_none=True),
    )
    ds.finish()

    ns = top.subsection("numerics", required=False) or _Section({}, "numerics")
    numerics = _build(
        "numerics",
        NumericsConfig,
        mode=ns.take("mode", str, default="f32"),
        sr_seed=ns.take("sr_seed", int, default=0),
    )
    ns.finish()

    mons = top.subsection("monitor", required=False) or _Section({}, "monitor")
    monitor = _build(
        "monitor",
        MonitorConfig,
        window=mons.take("window", int, default=20),
        threshold=mons.take("threshold", float, default=0.1),
        freeze_baseline=mons.take("freeze_baseline", bool, default=False),
    )
    mons.finish()

    init_seed = top.take("init_seed", int, default=42)
    checkpoint_interval = top.take(
        "checkpoint_interval", int, default=200, check=lambda v: v >= 1, msg="must be >= 1"
    )
    output_dir = top.take("output_dir", str, check=lambda v: bool(v), msg="must be non-empty")
    output_dir = os.path.abspath(os.path.join(base_dir, output_dir))

    sim = None
    ss = top.subsection("simulate", required=False)
    if ss is not None:
        sim = _parse_simulate(ss, optim.total_steps, checkpoint_interval, data.dp_degree)
    top.finish()

    return _build(
        "config",
        TrainConfig,
        model=model,
        optim=optim,
        data=data,
        numerics=numerics,
        monitor=monitor,
        output_dir=output_dir,
        init_seed=init_seed,
        checkpoint_interval=checkpoint_interval,
        simulate=sim,
    )


def _parse_simulate(ss: _Section, default_steps: int, default_interval: int, dp_degree: int) -> SimConfig:
    steps_total = ss.take("steps", int, default=default_steps)
    interval = ss.take("checkpoint_interval", int, default=default_interval)
    num_ranks = ss.take("num_ranks", int, default=dp_degree)
    mode = ss.take(
        "recovery_mode", str, default="auto",
        check=lambda v: v in RECOVERY_MODES, msg=f"must be one of {list(RECOVERY_MODES)}",
    )
    wall = ss.take("step_wall_time", float, default=1.0)
    auto_delay = ss.take("recovery_delay_auto", float, default=50.0)
    manual_delay = ss.take("recovery_delay_manual", float, default=600.0)
    raw_failures = ss.take("failures", list, default=None, allow_none=True)
    seed = ss.take("failure_seed", int, default=None, allow_none=True)
    count = ss.take("failure_count", int, default=None, allow_none=True)
    ss.finish()
    if raw_failures is not None and (seed is not None or count is not None):
        raise ConfigError("simulate: give either an explicit failures list or failure_seed/failure_count, not both")
    if (seed is None) != (count is None):
        raise ConfigError("simulate: failure_seed and failure_count must be given together")
    if raw_failures is not None:
        events = []
        for i, row in enumerate(raw_failures):
            es = _Section(row, f"simulate.failures[{i}]")
            events.append(
                FailureEvent(step=es.take("step", int), rank=es.take("rank", int, default=0))
            )
            es.finish()
        failures = tuple(events)
    elif seed is not None:
        failures = random_failure_schedule(seed, steps_total, num_ranks, count=count)
    else:
        failures = ()
    return _build(
        "simulate",
        SimConfig,
        steps_total=steps_total,
        checkpoint_interval=interval,
        failures=failures,
        recovery_mode=mode,
        num_ranks=num_ranks,
        step_wall_time=wall,
        recovery_delay_auto=auto_delay,
        recovery_delay_manual=manual_delay,
    )


def parse_config(path: str) -> TrainConfig:
    """Read, parse and validate a config file."""
    try:
        with open(path, encoding="utf-8") as fh:
            root = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return config_from_dict(root, base_dir=os.path.dirname(os.path.abspath(path)))


def effective_config_dict(config: TrainConfig) -> dict:
    """Every field materialized, defaults filled in, paths absolute.

    Parsing the result reproduces `config` exactly.
    """
    out = {
        "init_seed": config.init_seed,
        "checkpoint_interval": config.checkpoint_interval,
        "output_dir": os.path.abspath(config.output_dir),
        "model": {
            "vocab_size": config.model.vocab_size,
            "model_dim": config.model.model_dim,
            "num_layers": config.model.num_layers,
            "num_heads": config.model.num_heads,
            "max_seq_len": config.model.max_seq_len,
            "ffn_hidden": config.model.ffn_hidden,
            "rope_theta": config.model.rope_theta,
            "rmsnorm_eps": config.model.rmsnorm_eps,
            "base_init_std": config.model.base_init_std,
        },
        "optim": {
            "total_steps": config.optim.total_steps,
            "warmup_steps": config.optim.warmup_steps,
            "lr_max": config.optim.lr_max,
            "lr_min": config.optim.lr_min,
            "beta1": config.optim.beta1,
            "beta2": config.optim.beta2,
            "weight_decay": config.optim.weight_decay,
            "clip_norm": config.optim.clip_norm,
            "adam_eps": config.optim.adam_eps,
            "decay_norm_weights": config.optim.decay_norm_weights,
        },
        "data": {
            "paths": [os.path.abspath(p) for p in config.data.paths],
            "seed": config.data.seed,
            "dp_degree": config.data.dp_degree,
            "batch_size_per_rank": config.data.batch_size_per_rank,
            "prefetch_depth": config.data.prefetch_depth,
            "max_epochs": config.data.max_epochs,
        },
        "numerics": {"mode": config.numerics.mode, "sr_seed": config.numerics.sr_seed},
        "monitor": {
            "window": config.monitor.window,
            "threshold": config.monitor.threshold,
            "freeze_baseline": config.monitor.freeze_baseline,
        },
    }
    if config.simulate is not None:
        sim = config.simulate
        out["simulate"] = {
            "steps": sim.steps_total,
            "checkpoint_interval": sim.checkpoint_interval,
            "num_ranks": sim.num_ranks,
            "recovery_mode": sim.recovery_mode,
            "step_wall_time": sim.step_wall_time,
            "recovery_delay_auto": sim.recovery_delay_auto,
            "recovery_delay_manual": sim.recovery_delay_manual,
            "failures": [{"step": e.step, "rank": e.rank} for e in sim.failures],
        }
    return out


def write_effective_config(config: TrainConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(effective_config_dict(config), fh, indent=2, sort_keys=True)
        fh.write("\n")
