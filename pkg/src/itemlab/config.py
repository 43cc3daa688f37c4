"""Run configuration and its flat ``section.key = value`` file format.

Lines are ``key = value``; ``#`` starts a comment; blank lines are ignored.
Lists are comma separated. ``schema_version`` must be 1. Unknown keys are
rejected so a typo never silently falls back to a default.
"""

from dataclasses import dataclass, fields, replace

from .data import NOISE_KINDS
from .rng import check_seed
from .selection import CRITERIA

SCHEMA_VERSION = 1

MODES = (
    "item",
    "item_ssl",
    "baseline_ce",
    "baseline_single_head",
    "no_mixed_sampling",
    "no_mixup",
)

# how warmup picks the head(s) it trains: one per batch, one per epoch, or all
WARMUP_DRAWS = ("iteration", "epoch", "joint")


class ConfigError(ValueError):
    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


def _ints(text):
    return tuple(int(t) for t in text.split(",") if t.strip())


def _lr_steps(text):
    # "40:0.1, 50:0.01"
    steps = []
    for part in text.split(","):
        if part.strip():
            epoch, mult = part.split(":")
            steps.append((int(epoch), float(mult)))
    return tuple(steps)


def _optional_float(text):
    return None if text.strip().lower() in ("", "none", "off") else float(text)


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _str(text):
    return text.strip()


@dataclass(frozen=True)
class RunConfig:
    # data
    data_source: str = "blobs"
    data_path: str = ""
    test_path: str = ""
    class_count: int = 8
    class_sizes: tuple = (400, 310, 240, 185, 143, 111, 86, 50)
    dim: int = 16
    separation: float = 4.0
    std: float = 1.0
    test_per_class: int = 200
    # noise
    noise_kind: str = "symmetric"
    noise_ratio: float = 0.4
    # model
    hidden: tuple = (64, 32)
    experts: int = 4
    activation: str = "relu"
    # training
    mode: str = "item"
    criterion: str = "gmm"
    beta: float = 3.0
    alpha: float = 1.0
    mixup_per_row: bool = True
    batch_size: int = 64
    epochs: int = 60
    warmup_epochs: int = 10
    warmup_head_draw: str = "joint"
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-3
    lr_steps: tuple = ((30, 0.1), (45, 0.01))
    seed: int = 0
    # selection
    noise_rate_estimate: float = None
    keep_ramp_epochs: int = 10
    gmm_threshold: float = 0.5
    gmm_max_iter: int = 100
    gmm_tol: float = 1e-6
    gmm_std_floor: float = 1e-4
    window: int = 3
    # semi-supervised variant
    ssl_threshold: float = None
    ssl_jitter: float = 0.0

    def validate(self):
        if self.data_source not in ("blobs", "csv"):
            raise ConfigError("data.source", f"expected 'blobs' or 'csv', got {self.data_source!r}")
        if self.data_source == "csv" and not (self.data_path and self.test_path):
            raise ConfigError("data.path", "csv source needs data.path and data.test_path")
        if self.data_source == "blobs":
            if self.class_count < 2:
                raise ConfigError("data.class_count", "must be >= 2")
            if len(self.class_sizes) != self.class_count:
                raise ConfigError("data.sizes", f"expected {self.class_count} sizes")
            if self.test_per_class < 1:
                raise ConfigError("data.test_per_class", "must be >= 1")
        if self.noise_kind not in NOISE_KINDS:
            raise ConfigError("noise.kind", f"unknown noise kind {self.noise_kind!r}")
        if not 0.0 <= self.noise_ratio < 1.0:
            raise ConfigError("noise.ratio", "must lie in [0, 1)")
        if self.mode not in MODES:
            raise ConfigError("train.mode", f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.criterion not in CRITERIA:
            raise ConfigError("train.criterion", f"unknown criterion {self.criterion!r}; expected one of {CRITERIA}")
        if self.experts < 1:
            raise ConfigError("model.experts", "must be >= 1")
        if not self.hidden or any(h < 1 for h in self.hidden):
            raise ConfigError("model.hidden", "need at least one positive layer width")
        if self.activation not in ("relu", "identity"):
            raise ConfigError("model.activation", f"unknown activation {self.activation!r}")
        if self.batch_size < 2:
            raise ConfigError("train.batch_size", "must be >= 2")
        if self.epochs < 1:
            raise ConfigError("train.epochs", "must be >= 1")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError("train.warmup_epochs", "must satisfy 0 <= warmup < epochs")
        if self.warmup_head_draw not in WARMUP_DRAWS:
            raise ConfigError("train.warmup_head_draw", f"expected one of {WARMUP_DRAWS}")
        if self.beta < 1:
            raise ConfigError("train.beta", "must be >= 1")
        if not self.alpha > 0:
            raise ConfigError("train.alpha", "must be positive")
        if self.lr < 0:
            raise ConfigError("optim.lr", "must be >= 0")
        if not 0 < self.gmm_threshold < 1:
            raise ConfigError("selection.gmm_threshold", "must lie in (0, 1)")
        if self.window < 2:
            raise ConfigError("selection.window", "must be >= 2")
        try:
            check_seed(self.seed)
        except ValueError as exc:
            raise ConfigError("train.seed", str(exc)) from None
        return self

    @property
    def rho_hat(self):
        return self.noise_ratio if self.noise_rate_estimate is None else self.noise_rate_estimate


# file key -> (RunConfig attribute, parser)
KEYS = {
    "data.source": ("data_source", _str),
    "data.path": ("data_path", _str),
    "data.test_path": ("test_path", _str),
    "data.class_count": ("class_count", int),
    "data.sizes": ("class_sizes", _ints),
    "data.dim": ("dim", int),
    "data.separation": ("separation", float),
    "data.std": ("std", float),
    "data.test_per_class": ("test_per_class", int),
    "noise.kind": ("noise_kind", _str),
    "noise.ratio": ("noise_ratio", float),
    "model.hidden": ("hidden", _ints),
    "model.experts": ("experts", int),
    "model.activation": ("activation", _str),
    "train.mode": ("mode", _str),
    "train.criterion": ("criterion", _str),
    "train.beta": ("beta", float),
    "train.alpha": ("alpha", float),
    "train.mixup_per_row": ("mixup_per_row", _bool),
    "train.batch_size": ("batch_size", int),
    "train.epochs": ("epochs", int),
    "train.warmup_epochs": ("warmup_epochs", int),
    "train.warmup_head_draw": ("warmup_head_draw", _str),
    "train.seed": ("seed", int),
    "optim.lr": ("lr", float),
    "optim.momentum": ("momentum", float),
    "optim.weight_decay": ("weight_decay", float),
    "optim.lr_steps": ("lr_steps", _lr_steps),
    "selection.noise_rate_estimate": ("noise_rate_estimate", _optional_float),
    "selection.keep_ramp_epochs": ("keep_ramp_epochs", int),
    "selection.gmm_threshold": ("gmm_threshold", float),
    "selection.gmm_max_iter": ("gmm_max_iter", int),
    "selection.gmm_tol": ("gmm_tol", float),
    "selection.gmm_std_floor": ("gmm_std_floor", float),
    "selection.window": ("window", int),
    "ssl.threshold": ("ssl_threshold", _optional_float),
    "ssl.jitter": ("ssl_jitter", float),
}
ATTR_TO_KEY = {attr: key for key, (attr, _) in KEYS.items()}


def parse_pairs(text, source="<config>"):
    """Parse ``key = value`` lines into an ordered dict; duplicate keys are errors."""
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}", f"expected 'key = value', got {line!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key in pairs:
            raise ConfigError(key, f"duplicate key at {source}:{lineno}")
        pairs[key] = value
    return pairs


def config_from_pairs(pairs, base=None):
    pairs = dict(pairs)
    version = pairs.pop("schema_version", None)
    if version is None:
        raise ConfigError("schema_version", "missing")
    if version.strip() != str(SCHEMA_VERSION):
        raise ConfigError("schema_version", f"unsupported version {version!r}, expected {SCHEMA_VERSION}")
    updates = {}
    for key, value in pairs.items():
        if key not in KEYS:
            raise ConfigError(key, "unknown configuration key")
        attr, parse = KEYS[key]
        try:
            updates[attr] = parse(value)
        except ValueError as exc:
            raise ConfigError(key, f"cannot parse {value!r}: {exc}") from None
    return replace(base or RunConfig(), **updates).validate()


def load_config(path):
    with open(path) as fh:
        text = fh.read()
    return config_from_pairs(parse_pairs(text, str(path)))


def _format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ",".join(f"{e}:{m!r}" for e, m in value)
        return ",".join(str(v) for v in value)
    return str(value)


def dump_config(config):
    """Serialize ``config`` so that ``config_from_pairs(parse_pairs(text))`` reproduces it."""
    lines = [f"schema_version = {SCHEMA_VERSION}"]
    for f in fields(config):
        lines.append(f"{ATTR_TO_KEY[f.name]} = {_format_value(getattr(config, f.name))}")
    return "\n".join(lines) + "\n"


def config_as_dict(config):
    return {ATTR_TO_KEY[f.name]: _jsonable(getattr(config, f.name)) for f in fields(config)}


def _jsonable(value):
    if isinstance(value, tuple):
        return [_jsonable(v) for v in value]
    return value
