"""Experiment configuration: strict JSON parsing, mode constraints and presets.

A document is merged as defaults <- preset <- document.  Unknown keys are
rejected.  Each mode pins some fields (``fedhelp_f`` pins ``lambda_B`` to 0,
and so on); pinned fields take the mode's value unless the document sets them
explicitly to something else, which is an error.
"""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass

from .data import ISIC19_SIZES, LUNGSEG_SIZES, PNEUMONIA_SIZES

MODES = ("fedhelp", "fedavg", "local", "fedhelp_minus", "fedhelp_one_api",
         "fedhelp_f", "fedhelp_b", "fedhelp_s")
TASKS = ("classification", "segmentation")


class ConfigError(ValueError):
    def __init__(self, message, field_name=None):
        super().__init__(message if field_name is None else f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class DataConfig:
    num_classes: int = 8
    dim: int = 32
    source_size: int = 8000
    cluster_spread: float = 1.3
    total_train: int = 3400
    dirichlet_alpha: float = 0.5
    min_test: int = 200
    image_size: int = 16


@dataclass(frozen=True)
class ClientConfig:
    kind: str = "small"
    train: int = 1
    test: int = 0


@dataclass(frozen=True)
class PublicConfig:
    num_classes: int = 10
    size: int = 1000
    shift: float = 0.3
    holdout: int = 2000


@dataclass(frozen=True)
class OracleConfig:
    count: int = 2
    hidden: tuple = (256, 256)
    epochs: int = 8
    cache_path: str | None = None


@dataclass(frozen=True)
class ModelConfig:
    small_hidden: tuple = (64, 64)
    large_hidden: tuple = (256, 256, 256, 256)


@dataclass(frozen=True)
class LossConfig:
    lambda_R: float = 0.1
    lambda_J: float = 0.2
    lambda_F: float = 1.0
    lambda_B: float = 0.2
    omega_size: int | None = None  # None: 3 for multi-class, 1 for binary / segmentation


@dataclass(frozen=True)
class WeightMapConfig:
    beta0: float = 10.0
    sigma: float = 5.0


@dataclass(frozen=True)
class OptimConfig:
    lr_small: float = 0.05
    lr_large: float = 0.01
    momentum: float = 0.9
    local_epochs: int = 2
    batch_size: int = 32
    public_batch_size: int = 32


@dataclass(frozen=True)
class RoundsConfig:
    t_max: int = 100
    patience: int = 10
    epsilon: float = 1e-3
    report_last: int = 10


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str = "fedhelp"
    task: str = "classification"
    preset: str | None = None
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    clients: tuple = ()
    public: PublicConfig = field(default_factory=PublicConfig)
    oracles: OracleConfig = field(default_factory=OracleConfig)
    models: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    weight_map: WeightMapConfig = field(default_factory=WeightMapConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    rounds: RoundsConfig = field(default_factory=RoundsConfig)
    weighting: str = "size"
    workers: int = 1
    output_dir: str = "runs/default"

    # -- derived -------------------------------------------------------------
    @property
    def omega_size(self):
        if self.loss.omega_size is not None:
            return self.loss.omega_size
        if self.task == "segmentation" or self.data.num_classes == 2:
            return 1
        return 3

    @property
    def aggregates(self):
        return self.mode != "local"

    @property
    def symmetric(self):
        return self.mode == "fedhelp_s"

    @property
    def homogeneous(self):
        """Every client runs the small architecture (FedAvg / local small models)."""
        return self.mode == "fedavg"

    @property
    def small_clients(self):
        return [i for i, c in enumerate(self.clients) if c.kind == "small"]

    @property
    def large_clients(self):
        return [i for i, c in enumerate(self.clients) if c.kind == "large"]

    def to_dict(self):
        return _to_plain(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def replace(self, **changes):
        return parse_dict(_deep_merge(self.to_dict(), changes))


# -- presets ----------------------------------------------------------------

def _clients(sizes, n_large):
    return [{"kind": "large" if i < n_large else "small", "train": a, "test": b}
            for i, (a, b) in enumerate(sizes)]


PRESETS = {
    "isic19-synthetic": {
        "task": "classification",
        "data": {"num_classes": 8, "total_train": 3400, "cluster_spread": 2.0},
        "reference_sizes": ISIC19_SIZES, "num_large": 3,
    },
    "pneumonia-synthetic": {
        "task": "classification",
        "data": {"num_classes": 2, "total_train": 2600},
        "reference_sizes": PNEUMONIA_SIZES, "num_large": 2,
    },
    "lungseg-toy": {
        "task": "segmentation",
        "data": {"total_train": 160, "min_test": 24, "image_size": 16},
        "public": {"num_classes": 2, "size": 200, "holdout": 120, "shift": 0.0},
        "oracles": {"count": 1, "hidden": [16, 16, 16], "epochs": 6},
        "models": {"small_hidden": [8, 8], "large_hidden": [16, 16, 16]},
        "optim": {"lr_small": 0.05, "lr_large": 0.02, "batch_size": 8, "public_batch_size": 8},
        "reference_sizes": LUNGSEG_SIZES, "num_large": 2,
    },
}

MODE_PINS = {
    "fedhelp_minus": {("oracles", "count"): 0, ("loss", "lambda_R"): 0.0},
    "fedhelp_one_api": {("oracles", "count"): 1},
    "fedhelp_f": {("loss", "lambda_B"): 0.0},
    "fedhelp_b": {("loss", "lambda_F"): 0.0},
    "fedavg": {("oracles", "count"): 0, ("loss", "lambda_J"): 0.0, ("loss", "lambda_R"): 0.0,
               ("loss", "lambda_F"): 0.0, ("loss", "lambda_B"): 0.0},
    "local": {("oracles", "count"): 0, ("loss", "lambda_J"): 0.0, ("loss", "lambda_R"): 0.0,
              ("loss", "lambda_F"): 0.0, ("loss", "lambda_B"): 0.0},
}


def _preset_clients(name, data):
    from .data import scaled_plan

    p = PRESETS[name]
    plan = scaled_plan(p["reference_sizes"], data["total_train"], data["min_test"])
    return _clients(plan.sizes, p["num_large"])


# -- parsing ----------------------------------------------------------------

def _to_plain(obj):
    if is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    return obj


def _deep_merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


_SECTIONS = {"data": DataConfig, "public": PublicConfig, "oracles": OracleConfig, "models": ModelConfig,
             "loss": LossConfig, "weight_map": WeightMapConfig, "optim": OptimConfig,
             "rounds": RoundsConfig}


def _coerce(cls, raw, where):
    if not isinstance(raw, dict):
        raise ConfigError("expected an object", where)
    known = {f.name: f for f in fields(cls)}
    for k in raw:
        if k not in known:
            raise ConfigError(f"unknown key {k!r}", f"{where}.{k}" if where else k)
    kwargs = {}
    for k, v in raw.items():
        default = known[k].default
        if isinstance(default, tuple) or k in ("hidden", "small_hidden", "large_hidden"):
            if not isinstance(v, (list, tuple)):
                raise ConfigError("expected a list", f"{where}.{k}")
            v = tuple(int(x) for x in v)
        elif isinstance(default, bool):
            v = bool(v)
        elif isinstance(default, float) and isinstance(v, (int, float)) and not isinstance(v, bool):
            v = float(v)
        elif isinstance(default, int) and not isinstance(default, bool):
            if isinstance(v, float) and v.is_integer():
                v = int(v)
            if not isinstance(v, int) or isinstance(v, bool):
                raise ConfigError(f"expected an integer, got {v!r}", f"{where}.{k}")
        kwargs[k] = v
    return cls(**kwargs)


def _explicit(doc, section, key):
    return isinstance(doc.get(section), dict) and key in doc[section]


def parse_dict(doc) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    top = {f.name for f in fields(ExperimentConfig)}
    for k in doc:
        if k not in top:
            raise ConfigError(f"unknown key {k!r}", k)
    preset = doc.get("preset")
    merged = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}", "preset")
        merged = {k: copy.deepcopy(v) for k, v in PRESETS[preset].items()
                  if k not in ("reference_sizes", "num_large")}
    merged = _deep_merge(merged, doc)

    mode = merged.get("mode", "fedhelp")
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; choose from {list(MODES)}", "mode")
    task = merged.get("task", "classification")
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}", "task")
    if task == "segmentation" and preset is None:
        seg_defaults = {k: v for k, v in PRESETS["lungseg-toy"].items()
                        if k not in ("reference_sizes", "num_large", "task")}
        merged = _deep_merge(seg_defaults, merged)

    for (section, key), value in MODE_PINS.get(mode, {}).items():
        if _explicit(doc, section, key) and doc[section][key] != value:
            raise ConfigError(f"mode {mode} requires {value}, got {doc[section][key]}", f"{section}.{key}")
        merged.setdefault(section, {})[key] = value

    sections = {name: _coerce(cls, merged.get(name, {}), name) for name, cls in _SECTIONS.items()}
    data = sections["data"]

    clients_raw = merged.get("clients")
    if not clients_raw:
        if preset is None:
            clients_raw = _preset_clients("isic19-synthetic" if task == "classification" else "lungseg-toy",
                                          asdict(data))
        else:
            clients_raw = _preset_clients(preset, asdict(data))
    if not isinstance(clients_raw, list):
        raise ConfigError("expected a list of clients", "clients")
    clients = tuple(_coerce(ClientConfig, c, f"clients[{i}]") for i, c in enumerate(clients_raw))

    scalars = {}
    for k in ("seed", "workers"):
        if k in merged:
            v = merged[k]
            if not isinstance(v, int) or isinstance(v, bool):
                raise ConfigError(f"expected an integer, got {v!r}", k)
            scalars[k] = v
    for k in ("weighting", "output_dir"):
        if k in merged:
            scalars[k] = str(merged[k])

    cfg = ExperimentConfig(mode=mode, task=task, preset=preset, clients=clients, **sections, **scalars)
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig):
    if not cfg.clients:
        raise ConfigError("at least one client required", "clients")
    for i, c in enumerate(cfg.clients):
        if c.kind not in ("small", "large"):
            raise ConfigError(f"client kind must be small or large, got {c.kind!r}", f"clients[{i}].kind")
        if c.train < 1:
            raise ConfigError("every client needs at least one training datum", f"clients[{i}].train")
        if c.test < 1:
            raise ConfigError("every client needs a nonempty test set", f"clients[{i}].test")
    for name in ("lambda_R", "lambda_J", "lambda_F", "lambda_B"):
        if getattr(cfg.loss, name) < 0:
            raise ConfigError("must be nonnegative", f"loss.{name}")
    num_classes = 2 if cfg.task == "segmentation" else cfg.data.num_classes
    if not 1 <= cfg.omega_size <= num_classes:
        raise ConfigError(f"omega size must be in [1, {num_classes}]", "loss.omega_size")
    if cfg.oracles.count < 0:
        raise ConfigError("must be >= 0", "oracles.count")
    if cfg.oracles.count == 0 and cfg.loss.lambda_R > 0 and cfg.loss.lambda_J > 0:
        raise ConfigError("lambda_R > 0 needs at least one oracle", "loss.lambda_R")
    if cfg.weight_map.sigma <= 0:
        raise ConfigError("must be > 0", "weight_map.sigma")
    if cfg.weighting not in ("size", "uniform"):
        raise ConfigError("must be 'size' or 'uniform'", "weighting")
    if cfg.rounds.t_max < 1 or cfg.rounds.patience < 1 or cfg.rounds.report_last < 1:
        raise ConfigError("t_max, patience and report_last must be >= 1", "rounds")
    if cfg.workers < 1:
        raise ConfigError("must be >= 1", "workers")
    if cfg.task == "segmentation" and cfg.data.image_size > 64:
        raise ConfigError("toy segmentation images are at most 64 pixels wide", "data.image_size")
    if cfg.task == "classification":
        need = sum(c.train + c.test for c in cfg.clients)
        if need > cfg.data.source_size:
            raise ConfigError(f"clients need {need} data but source_size is {cfg.data.source_size}",
                              "data.source_size")


def parse_config(text: str) -> ExperimentConfig:
    """Parse a JSON document (empty text means all defaults)."""
    text = text.strip()
    try:
        doc = json.loads(text) if text else {}
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}") from None
    return parse_dict(doc)


def serialize(cfg: ExperimentConfig) -> str:
    return cfg.to_json()
