"""YAML experiment configuration with path-to-field validation.

Example::

    model:
      kind: example1          # example1 | example2 | linear
      obs_kind: square        # square | exp
      prior_preset: vague     # example2 only: vague | informative
    algo: sig
    n: 1000
    seeds: [0, 1, 2]
    filter:
      M: 4000
      iterlap: {m_max: 5}
    pool: {n_runs: 10, temper: true, threshold_variances: [0.09, 0.09, 0.0625, 0.0625, 0.25]}
    outliers: {times: [21, 22, 23], std: 30}
    liu_west: {n_particles: 10000, a_lw: 0.98}
    out: results
"""

import dataclasses
import typing
from dataclasses import dataclass, field

import yaml

from ..iterlap import IterLapConfig
from ..population import PoolConfig
from ..seqfilter import CorrectionConfig
from .liuwest import LiuWestConfig

ALL_ALGOS = ("sibs", "siem", "sig", "sig-rs", "sig-rsrp")


class ConfigError(ValueError):
    """Invalid configuration; ``path`` names the offending field."""

    def __init__(self, path, msg):
        super().__init__(f"{path or '<root>'}: {msg}")
        self.path = path


@dataclass
class ModelSpec:
    kind: str = "example1"
    obs_kind: str = "square"
    prior_preset: str = "vague"
    prior_mean: list | None = None
    prior_variances: list | None = None


@dataclass
class OutlierSpec:
    times: list = field(default_factory=list)
    std: float = 30.0


@dataclass
class ExperimentConfig:
    model: ModelSpec = field(default_factory=ModelSpec)
    algo: str = "sig"
    n: int = 1000
    seeds: list = field(default_factory=lambda: [0])
    filter: CorrectionConfig = field(default_factory=CorrectionConfig)
    pool: PoolConfig | None = None
    outliers: OutlierSpec | None = None
    liu_west: LiuWestConfig = field(default_factory=LiuWestConfig)
    out: str = "results"


_NESTED = {
    "model": ModelSpec,
    "filter": CorrectionConfig,
    "pool": PoolConfig,
    "outliers": OutlierSpec,
    "liu_west": LiuWestConfig,
    "iterlap": IterLapConfig,
    "filter_cfg": CorrectionConfig,
}


def _join(path, key):
    return f"{path}.{key}" if path else str(key)


def _check_type(value, default, hint, path):
    if value is None:
        if default is None or "None" in str(hint):
            return None
        raise ConfigError(path, "must not be null")
    if isinstance(default, bool) or hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected a boolean, got {value!r}")
        return value
    if isinstance(default, int) or hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float) or hint is float or "float" in str(hint):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str) or hint is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    if isinstance(default, (list, tuple)) or "list" in str(hint) or "tuple" in str(hint):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, f"expected a list, got {value!r}")
        return tuple(value) if isinstance(default, tuple) or "tuple" in str(hint) else list(value)
    return value


def _build(cls, data, path):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(path, f"expected a mapping, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for key, value in data.items():
        p = _join(path, key)
        if key not in fields:
            raise ConfigError(p, f"unknown field (expected one of {sorted(fields)})")
        f = fields[key]
        if key in _NESTED:
            kwargs[key] = None if value is None else _build(_NESTED[key], value, p)
            continue
        if f.default is not dataclasses.MISSING:
            default = f.default
        elif f.default_factory is not dataclasses.MISSING:
            default = f.default_factory()
        else:
            default = None
        kwargs[key] = _check_type(value, default, hints.get(key), p)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as err:
        if isinstance(err, ConfigError):
            raise
        raise ConfigError(path, str(err)) from err


def parse_config(text):
    """Validated :class:`ExperimentConfig` from YAML text."""
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as err:
        raise ConfigError("", f"invalid YAML: {err}") from err
    return config_from_dict(data)


def config_from_dict(data):
    cfg = _build(ExperimentConfig, data, "")
    validate(cfg)
    return cfg


def load_config(path):
    """Validated :class:`ExperimentConfig` from a YAML file."""
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as err:
        raise ConfigError("", f"cannot read config: {err}") from err
    return parse_config(text)


def validate(cfg):
    if cfg.algo not in ALL_ALGOS:
        raise ConfigError("algo", f"must be one of {ALL_ALGOS}, got {cfg.algo!r}")
    if cfg.n < 1:
        raise ConfigError("n", "must be >= 1")
    if not cfg.seeds or not all(isinstance(s, int) and s >= 0 for s in cfg.seeds):
        raise ConfigError("seeds", "must be a non-empty list of non-negative integers")
    m = cfg.model
    if m.kind not in ("example1", "example2", "linear"):
        raise ConfigError("model.kind", f"unknown model {m.kind!r}")
    if m.obs_kind not in ("square", "exp"):
        raise ConfigError("model.obs_kind", f"must be 'square' or 'exp', got {m.obs_kind!r}")
    if m.prior_preset not in ("vague", "informative"):
        raise ConfigError("model.prior_preset", f"must be 'vague' or 'informative', got {m.prior_preset!r}")
    if (m.prior_mean is None) != (m.prior_variances is None):
        raise ConfigError("model", "prior_mean and prior_variances must be given together")
    if m.prior_variances is not None and not all(v > 0 for v in m.prior_variances):
        raise ConfigError("model.prior_variances", "must be positive")
    if cfg.outliers is not None:
        if cfg.outliers.std < 0:
            raise ConfigError("outliers.std", "must be non-negative")
        bad = [t for t in cfg.outliers.times if not isinstance(t, int) or not 1 <= t <= cfg.n]
        if bad:
            raise ConfigError("outliers.times", f"times {bad} outside 1..{cfg.n}")
    if cfg.algo in ("sig-rsrp",) and (cfg.pool is None or cfg.pool.threshold_variances is None):
        raise ConfigError("pool.threshold_variances", "required for sig-rsrp")


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def dump_config(cfg):
    """YAML text of a config (written next to every output for provenance)."""
    return yaml.safe_dump(_plain(cfg), sort_keys=True, default_flow_style=None)
