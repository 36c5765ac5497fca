"""Run configuration: a flat ``key = value`` text file with typed validation."""

import dataclasses
import math
from dataclasses import dataclass, fields

from .errors import ConfigurationError
from .kl import Granularity, KlMode
from .layers import EstimatorMode, NoiseType
from .model import Activation

DATASETS = ("synthetic", "mnist")


def _int_list(text):
    return tuple(int(x) for x in str(text).replace(" ", "").split(",") if x)


def _float_list(text):
    return tuple(float(x) for x in str(text).replace(" ", "").split(",") if x)


def _str_list(text):
    return tuple(x.strip() for x in str(text).split(",") if x.strip())


def _bool(text):
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass
class RunConfig:
    # data
    dataset: str = "synthetic"
    data_dir: str = ""
    n_train: int = 5000
    n_val: int = 1000
    n_test: int = 2000
    dim: int = 20
    classes: int = 10
    separation: float = 2.0
    data_seed: int = 1
    # model
    hidden: tuple = (128, 128, 128)
    activation: str = "relu"
    input_noise: str = "typeB"
    hidden_noise: str = "typeB"
    granularity: str = "layer"
    input_p: float = 0.2
    hidden_p: float = 0.5
    # objective
    mode: str = "local"
    kl: str = "poly"
    kl_scale: float = 1.0
    # optimiser
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    avg_decay: float = 0.999
    epochs: int = 10
    M: int = 100
    patience: int = 0
    with_replacement: bool = True
    seed: int = 0
    out: str = "run"
    # variance
    checkpoint: str = ""
    fresh_train: bool = False
    R: int = 200
    variance_modes: tuple = ("none", "local", "per-datapoint", "per-minibatch")
    variance_layers: tuple = ()
    # bench
    bench_dims: tuple = (64, 256, 512)
    bench_M: int = 256
    trials: int = 5
    # kl-table
    kl_points: int = 100
    kl_min_alpha: float = 0.05 / 0.95
    kl_alphas: tuple = ()
    # gradcheck
    h: float = 1e-5
    gradcheck_dims: tuple = (8, 8, 8, 3)

    @classmethod
    def keys(cls):
        return [f.name for f in fields(cls)]

    def replace(self, **changes):
        return validate(dataclasses.replace(self, **changes))

    def echo(self):
        """Serialised form; ``parse_text(cfg.echo())`` reproduces ``cfg``."""
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"


_CONVERTERS = {int: int, float: float, str: str, bool: _bool}
_LIST_FIELDS = {"hidden": _int_list, "bench_dims": _int_list, "variance_layers": _int_list,
                "gradcheck_dims": _int_list, "variance_modes": _str_list,
                "kl_alphas": _float_list}


def convert(key, raw):
    """Convert a textual value for ``key`` to the field's type."""
    types = {f.name: f.type for f in fields(RunConfig)}
    if key not in types:
        raise ConfigurationError(f"unknown configuration key {key!r}", field=key)
    conv = _LIST_FIELDS.get(key) or _CONVERTERS[_field_type(types[key])]
    try:
        return conv(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"{key}: cannot parse {raw!r} ({exc})", field=key) from exc


def _field_type(t):
    if isinstance(t, str):
        return {"int": int, "float": float, "str": str, "bool": bool}[t]
    return t


def parse_text(text, base=None):
    """Apply ``key = value`` lines on top of ``base`` (defaults if None)."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key in values:
            raise ConfigurationError(f"line {lineno}: duplicate key {key!r}", field=key)
        values[key] = convert(key, raw)
    return validate(dataclasses.replace(base or RunConfig(), **values))


def load_config(path, base=None):
    try:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    except FileNotFoundError as exc:
        raise ConfigurationError(f"config file {path} not found", field="config") from exc
    return parse_text(text, base)


def _require(cond, field, message):
    if not cond:
        raise ConfigurationError(f"{field}: {message}", field=field)


def validate(cfg):
    _require(cfg.dataset in DATASETS, "dataset", f"must be one of {', '.join(DATASETS)}")
    for key in ("n_train", "n_val", "n_test", "dim", "classes", "epochs", "M", "R",
                "bench_M", "kl_points"):
        _require(getattr(cfg, key) > 0, key, "must be positive")
    _require(cfg.classes <= 2 * cfg.dim, "classes", "at most 2*dim classes fit the fixture")
    _require(math.isfinite(cfg.separation) and cfg.separation >= 0, "separation",
             "must be finite and >= 0")
    _require(all(w > 0 for w in cfg.hidden), "hidden", "widths must be positive")
    for key, enum_cls in (("activation", Activation), ("input_noise", NoiseType),
                          ("hidden_noise", NoiseType), ("granularity", Granularity),
                          ("mode", EstimatorMode), ("kl", KlMode)):
        allowed = [e.value for e in enum_cls]
        _require(getattr(cfg, key) in allowed, key, f"must be one of {', '.join(allowed)}")
    for m in cfg.variance_modes:
        _require(m in [e.value for e in EstimatorMode], "variance_modes", f"unknown mode {m!r}")
    _require(cfg.kl != "quad", "kl", "quad has no gradient; use poly or bound for training")
    _require(cfg.kl_scale > 0 and math.isfinite(cfg.kl_scale), "kl_scale", "must be > 0")
    for key in ("input_p", "hidden_p"):
        _require(0.0 <= getattr(cfg, key) < 1.0, key, "must lie in [0, 1)")
    _require(cfg.lr > 0, "lr", "must be positive")
    _require(0.0 <= cfg.beta1 < 1.0, "beta1", "must lie in [0, 1)")
    _require(0.0 <= cfg.beta2 < 1.0, "beta2", "must lie in [0, 1)")
    _require(cfg.eps > 0, "eps", "must be positive")
    _require(0.0 <= cfg.avg_decay < 1.0, "avg_decay", "must lie in [0, 1)")
    _require(cfg.patience >= 0, "patience", "must be >= 0 (0 disables early stopping)")
    _require(0 <= cfg.seed < 2 ** 64, "seed", "must fit in an unsigned 64-bit integer")
    _require(cfg.R >= 2, "R", "need at least 2 draws")
    _require(cfg.trials >= 3, "trials", "need at least 3 trials")
    _require(0.0 < cfg.kl_min_alpha <= 1.0, "kl_min_alpha", "must lie in (0, 1]")
    _require(cfg.h > 0, "h", "must be positive")
    _require(len(cfg.gradcheck_dims) >= 2, "gradcheck_dims", "need input and output widths")
    _require(all(d > 0 for d in cfg.bench_dims), "bench_dims", "must be positive")
    return cfg
