"""Experiment configuration: presets, file parsing and flag overrides.

Config files are INI-style: ``key = value`` lines grouped under section
headers. Resolution order is defaults, then preset, then file, then flags.
Unknown keys are rejected by name.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .corpus import DEFAULT_PLAN, ClientPlan
from .errors import ConfigError
from .model import ModelConfig

MODES = ("atc", "atc_no_assign", "atc_no_contrast", "fedavg", "isolated")
PRESETS = ("desk", "paper-tiny")


@dataclass(frozen=True)
class ExperimentConfig:
    # run
    mode: str = "atc"
    seed: int = 0
    out_dir: str = ""
    preset: str = "desk"
    eval_every: int = 0
    checkpoint_every: int = 0
    # corpus
    plan: tuple[ClientPlan, ...] = DEFAULT_PLAN
    n_train: int = 512
    n_val: int = 128
    n_test: int = 128
    # model
    vocab_size: int = 69
    d_model: int = 32
    num_heads: int = 2
    num_layers: int = 2
    ffn_dim: int = 64
    max_seq_len: int = 32
    mlp_summary_dim: int = 32
    num_classes: int = 4
    # assign
    assign_rounds: int = 30
    assign_steps: int = 10
    assign_batch: int = 64
    n_clusters: int = 5
    task_schedule: tuple[str, ...] = ("mlm", "dr")
    mask_ratio: float = 0.15
    # contrast
    contrast_rounds: int = 20
    contrast_steps: int = 20
    contrast_batch: int = 32
    k: int = 3
    tau: float = 1.0
    contrast_weight: float = 1.0
    synthetic_size: int = 64
    synthetic_batch: int = 32
    mlm_head_source: str = "assign"
    # optim
    lr: float = 5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    warmup: float = 0.1

    def __post_init__(self):
        validate(self)

    @property
    def n_clients(self) -> int:
        return len(self.plan)

    @property
    def model(self) -> ModelConfig:
        return ModelConfig(
            vocab_size=self.vocab_size,
            d_model=self.d_model,
            num_heads=self.num_heads,
            num_layers=self.num_layers,
            ffn_dim=self.ffn_dim,
            max_seq_len=self.max_seq_len,
            mlp_summary_dim=self.mlp_summary_dim,
            num_classes=self.num_classes,
        )

    def replace(self, **changes) -> ExperimentConfig:
        return dataclasses.replace(self, **changes)


SECTIONS = {
    "run": ("mode", "seed", "out_dir", "preset", "eval_every", "checkpoint_every"),
    "corpus": ("plan", "n_train", "n_val", "n_test"),
    "model": ("vocab_size", "d_model", "num_heads", "num_layers", "ffn_dim", "max_seq_len", "mlp_summary_dim", "num_classes"),
    "assign": ("assign_rounds", "assign_steps", "assign_batch", "n_clusters", "task_schedule", "mask_ratio"),
    "contrast": (
        "contrast_rounds", "contrast_steps", "contrast_batch", "k", "tau", "contrast_weight",
        "synthetic_size", "synthetic_batch", "mlm_head_source",
    ),
    "optim": ("lr", "beta1", "beta2", "eps", "weight_decay", "warmup"),
}

# keys the paper-tiny preset changes relative to desk
PRESET_OVERRIDES = {
    "desk": {},
    "paper-tiny": {
        "lr": 5e-4,
        "d_model": 128,
        "ffn_dim": 512,
        "mlp_summary_dim": 128,
        "assign_rounds": 200,
        "assign_steps": 50,
        "contrast_rounds": 100,
        "contrast_steps": 200,
        "k": 4,
    },
}


def validate(cfg: ExperimentConfig) -> None:
    if cfg.mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {cfg.mode!r}", key="mode")
    if cfg.preset not in PRESETS:
        raise ConfigError(f"preset must be one of {PRESETS}", key="preset")
    if cfg.mlm_head_source not in ("assign", "fresh"):
        raise ConfigError("mlm_head_source must be 'assign' or 'fresh'", key="mlm_head_source")
    for key in ("n_train", "n_val", "n_test", "assign_batch", "n_clusters", "contrast_batch", "k",
                "synthetic_size", "synthetic_batch"):
        if getattr(cfg, key) < 1:
            raise ConfigError(f"{key} must be >= 1", key=key)
    for key in ("assign_rounds", "contrast_rounds", "assign_steps", "contrast_steps", "eval_every", "checkpoint_every"):
        if getattr(cfg, key) < 0:
            raise ConfigError(f"{key} must be >= 0", key=key)
    n = len(cfg.plan)
    if n < 2 and cfg.mode != "isolated":
        raise ConfigError("federated modes need at least two clients", key="plan")
    if cfg.mode in ("atc", "atc_no_assign") and cfg.k >= n:
        raise ConfigError(f"k must be < number of clients ({n})", key="k")
    if cfg.n_clusters > n:
        raise ConfigError(f"n_clusters must be <= number of clients ({n})", key="n_clusters")
    if cfg.tau <= 0:
        raise ConfigError("tau must be positive", key="tau")
    if cfg.contrast_weight < 0:
        raise ConfigError("contrast_weight must be non-negative", key="contrast_weight")
    if not 0.0 < cfg.mask_ratio <= 1.0:
        raise ConfigError("mask_ratio must be in (0, 1]", key="mask_ratio")
    if not 0.0 <= cfg.warmup < 1.0:
        raise ConfigError("warmup must be in [0, 1)", key="warmup")
    if not cfg.task_schedule or any(t not in ("mlm", "dr") for t in cfg.task_schedule):
        raise ConfigError("task_schedule entries must be 'mlm' or 'dr'", key="task_schedule")
    try:
        cfg.model
    except ConfigError as err:
        raise ConfigError(str(err), key=err.key) from None


def _field_types():
    return {f.name: f.type for f in fields(ExperimentConfig)}


def _coerce(key: str, raw: str):
    typ = _field_types()[key]
    raw = raw.strip()
    try:
        if key == "plan":
            items = []
            for part in raw.split(","):
                kind, domain = part.strip().split(":")
                items.append(ClientPlan(kind.strip(), domain.strip()))
            return tuple(items)
        if key == "task_schedule":
            return tuple(p.strip() for p in raw.split(",") if p.strip())
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"cannot parse {key}={raw!r} as {typ}", key=key) from None


def format_value(key: str, value) -> str:
    if key == "plan":
        return ",".join(f"{p.task_kind}:{p.domain_id}" for p in value)
    if key == "task_schedule":
        return ",".join(value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def preset(name: str = "desk") -> ExperimentConfig:
    if name not in PRESET_OVERRIDES:
        raise ConfigError(f"unknown preset {name!r}", key="preset")
    return ExperimentConfig(preset=name, **PRESET_OVERRIDES[name])


def parse_config(path=None, overrides: dict | None = None) -> ExperimentConfig:
    """Resolve defaults, preset, config file and flag overrides, in that order.

    ``overrides`` maps field names to already-typed or string values; a
    ``preset`` override selects the preset before the file is applied.
    """
    overrides = dict(overrides or {})
    known = _field_types()
    values: dict = {}
    if path is not None:
        text = Path(path).read_text()
        parser = configparser.ConfigParser(interpolation=None, delimiters=("=",))
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as err:
            raise ConfigError(f"malformed config file: {err}") from None
        for section in parser.sections():
            if section not in SECTIONS:
                raise ConfigError(f"unknown section [{section}]", key=section)
            for key, raw in parser.items(section):
                if key not in known:
                    raise ConfigError(f"unknown key {key!r} in [{section}]", key=key)
                if key not in SECTIONS[section]:
                    raise ConfigError(f"key {key!r} does not belong in [{section}]", key=key)
                values[key] = _coerce(key, raw)
    for key, value in overrides.items():
        if key not in known:
            raise ConfigError(f"unknown key {key!r}", key=key)
        values[key] = _coerce(key, value) if isinstance(value, str) else value
    name = values.get("preset", "desk")
    if name not in PRESET_OVERRIDES:
        raise ConfigError(f"unknown preset {name!r}", key="preset")
    merged = {**PRESET_OVERRIDES[name], **values, "preset": name}
    return ExperimentConfig(**merged)


def dump_config(cfg: ExperimentConfig) -> str:
    """Config-file text that :func:`parse_config` resolves back to ``cfg``."""
    lines = []
    for section, keys in SECTIONS.items():
        lines.append(f"[{section}]")
        for key in keys:
            lines.append(f"{key} = {format_value(key, getattr(cfg, key))}")
        lines.append("")
    return "\n".join(lines)
