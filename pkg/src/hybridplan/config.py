"""Configuration dataclasses and the strict key=value config file format.

Desk-scale defaults throughout; the reference-scale values used by the
original system are noted in comments (BEV 200 cells @ +/-50 m or
128 @ +/-32 m, D=256, h=8, M=6, K=3, L=3, L_P=3, 20 epochs, lr 1e-4).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields
from typing import get_type_hints

from .errors import ConfigurationError, ParseError

TEMPLATES = ("straight", "intersection", "roundabout", "merge")
COMMANDS = ("left", "straight", "right")
TL_STATES = ("none", "red", "yellow", "green")
AGENT_CLASSES = ("vehicle", "pedestrian", "cyclist")


@dataclass
class GridConfig:
    """Ego-centered occupancy grid geometry. Reference scale: 200 @ 0.5 m."""

    height_cells: int = 64
    width_cells: int = 64
    resolution: float = 1.0
    horizon_steps: int = 10     # 5 s at dt=0.5 (long-horizon benchmark setting)
    step_seconds: float = 0.5


@dataclass
class GeneratorConfig:
    n_agents: int = 6           # reference scale filters to 11
    template: str = "intersection"
    noise_std: float = 0.15
    history_steps: int = 4

    def validate(self) -> None:
        if self.template not in TEMPLATES:
            raise ConfigurationError(
                f"unknown template '{self.template}'; expected one of {TEMPLATES}")
        if self.n_agents < 1:
            raise ConfigurationError(f"n_agents must be >= 1, got {self.n_agents}")
        if self.noise_std < 0:
            raise ConfigurationError("noise_std must be >= 0")


@dataclass
class ModelConfig:
    embed_dim: int = 64         # reference: 256
    heads: int = 4              # reference: 8
    modes: int = 3              # reference: 6
    reasoning_levels: int = 2   # reference: 3
    occ_levels: int = 2         # reference: 3
    plan_layers: int = 2        # reference: 3
    pe_dim: int = 32
    dropout: float = 0.1
    window: int = 8
    shift: int = 4
    n_def_points: int = 4
    future_mask_radius: float = 10.0
    ffn_hidden_grid: int = 16   # decoder FFN width on grid tokens
    log_std_clamp: float = 5.0
    mask_bias_clamp: float = 10.0
    mask_update_factor: float = 0.5
    topk_fraction: float = 0.25
    ego_status: bool = False    # feeds (v, psi) into the plan context when set

    def validate(self) -> None:
        if self.embed_dim % self.heads:
            raise ConfigurationError("heads must divide embed_dim")
        if self.modes < 1:
            raise ConfigurationError(f"modes must be >= 1, got {self.modes}")
        if self.reasoning_levels < 1:
            raise ConfigurationError("reasoning_levels must be >= 1")
        if self.plan_layers < 1:
            raise ConfigurationError("plan_layers must be >= 1")
        if not 0.0 <= self.mask_update_factor <= 1.0:
            raise ConfigurationError(
                f"mask_update_factor must lie in [0, 1], got {self.mask_update_factor}")


@dataclass
class RefineConfig:
    """Plan-refinement cost profile and solver settings."""

    mode: str = "path"          # path | motion
    weight_safety: float = 1.0
    weight_progress: float = 0.1
    weight_comfort: float = 0.1
    weight_rule: float = 0.5
    occ_threshold_m: float = 5.0     # D1
    agent_threshold_m: float = 3.0   # D2
    occ_prob_floor: float = 0.1
    max_iterations: int = 10
    damping: float = 1e-3
    tolerance: float = 1e-6
    wheelbase: float = 2.8
    accel_limit: float = 5.0
    steer_limit: float = 0.6
    speed_limit: float = 15.0

    def validate(self) -> None:
        if self.mode not in ("path", "motion"):
            raise ConfigurationError(f"refine mode must be 'path' or 'motion', got '{self.mode}'")
        if self.occ_threshold_m <= 0 or self.agent_threshold_m <= 0:
            raise ConfigurationError("safety thresholds must be positive")
        if min(self.weight_safety, self.weight_progress, self.weight_comfort, self.weight_rule) < 0:
            raise ConfigurationError("cost weights must be >= 0")


@dataclass
class TrainConfig:
    seed: int = 0
    dataset_size: int = 512
    epochs: int = 20
    batch_size: int = 4
    lr: float = 1e-4
    weight_decay: float = 0.0
    lambda_dice: float = 5.0
    lambda_col: float = 0.1
    d_col: float = 3.0
    grid: GridConfig = field(default_factory=GridConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)

    def validate(self) -> None:
        if self.dataset_size < 1:
            raise ConfigurationError("dataset_size must be >= 1")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("epochs and batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigurationError(f"learning rate must be positive, got {self.lr}")
        self.generator.validate()
        self.model.validate()
        self.refine.validate()


_SECTIONS = {"grid": GridConfig, "generator": GeneratorConfig,
             "model": ModelConfig, "refine": RefineConfig}


def _coerce(raw: str, typ, key: str):
    if typ is bool:
        if raw in ("true", "True", "1"):
            return True
        if raw in ("false", "False", "0"):
            return False
        raise ParseError(f"config key '{key}': expected boolean, got '{raw}'")
    try:
        return typ(raw)
    except ValueError as e:
        raise ParseError(f"config key '{key}': {e}") from e


def serialize_config(cfg: TrainConfig) -> str:
    """Canonical flat key=value text (sorted), round-trippable."""
    flat: dict[str, object] = {}
    for f in fields(cfg):
        val = getattr(cfg, f.name)
        if f.name in _SECTIONS:
            for sub in fields(val):
                flat[f"{f.name}.{sub.name}"] = getattr(val, sub.name)
        else:
            flat[f.name] = val
    lines = [f"{k} = {repr(v) if isinstance(v, float) else v}" for k, v in sorted(flat.items())]
    return "\n".join(lines) + "\n"


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Strict parser: every key must exist; unknown keys are rejected."""
    cfg = base or TrainConfig()
    hints_top = get_type_hints(TrainConfig)
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ParseError(f"config line {lineno}: expected 'key = value', got '{stripped}'")
        key, _, raw = stripped.partition("=")
        key, raw = key.strip(), raw.strip()
        if "." in key:
            section, _, sub = key.partition(".")
            if section not in _SECTIONS:
                raise ParseError(f"config line {lineno}: unknown section '{section}'")
            target = getattr(cfg, section)
            hints = get_type_hints(_SECTIONS[section])
            if sub not in hints:
                raise ParseError(f"config line {lineno}: unknown key '{key}'")
            setattr(target, sub, _coerce(raw, hints[sub], key))
        else:
            if key not in hints_top or key in _SECTIONS:
                raise ParseError(f"config line {lineno}: unknown key '{key}'")
            setattr(cfg, key, _coerce(raw, hints_top[key], key))
    cfg.validate()
    return cfg


def load_config(path: str, base: TrainConfig | None = None) -> TrainConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise ParseError(f"cannot read config {path}: {e}") from e
    return parse_config(text, base)


def config_hash(cfg: TrainConfig) -> str:
    return hashlib.sha256(serialize_config(cfg).encode()).hexdigest()[:16]
