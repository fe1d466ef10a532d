"""INI experiment configuration with stage seed derivation."""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .datagen import TRIGGER_KINDS
from .defense import DEFAULT_MASK_THRESHOLD
from .objectives import TrainConfig

METHODS = ("ubt", "abl", "cleanft", "none")
K_RULES = ("sqrt_susp", "sqrt")

# Every random stream derives from data.seed plus one of these offsets.
SEED_OFFSETS = {
    "init": 0, "pretrain": 1, "poison": 2, "overfit": 3, "unlearn": 4,
    "trigger": 5, "abl": 6, "cleanft": 7, "retrain": 8, "poison_pick": 9,
    "pretrain_data": 100, "train_data": 200, "eval_data": 300, "heldout_data": 400,
    "prototypes": 1,
}

# Desk-scale gate: poisoned fixture models score ~0.55-0.65, clean ones ~0.3.
DESK_POISON_GATE = 0.45


class ConfigError(ValueError):
    """Bad config value; ``where`` names the file, section and line when known."""

    def __init__(self, message: str, where: str = ""):
        super().__init__(f"{where}: {message}" if where else message)
        self.where = where


@dataclass
class DataSection:
    class_count: int = 8
    per_class: int = 100
    image_size: int = 16
    vocab_size: int = 32
    sigma: float = 0.15
    caption_noise: float = 0.05
    pretrain_per_class: int = 100
    seed: int = 0


@dataclass
class AttackSection:
    kind: str = "patch"
    target_class: int = 0
    poison_count: int = 24
    patch_size: int = 4
    alpha: float = 0.3
    frequency: float = 4.0
    amplitude: float = 0.25
    sample_templates: bool = True


@dataclass
class ModelSection:
    hidden: int = 64
    embed_dim: int = 32
    tau: float = 0.07


@dataclass
class StageSection:
    batch_size: int = 32
    learning_rate: float = 0.01
    epochs: int = 30


@dataclass
class DefenseSection:
    method: str = "ubt"
    s_susp_fraction: float = 0.05
    k_rule: str = "sqrt_susp"
    k_fraction: float = 0.01
    mask_threshold: float = DEFAULT_MASK_THRESHOLD
    poison_gate: float = DESK_POISON_GATE
    include_masks: bool = True
    overfit_weight: float = 1.0


@dataclass
class EvalSection:
    per_class: int = 50
    bins: int = 50
    heldout_per_class: int = 25
    heldout_sigma: float = 0.15


def _stage_defaults():
    return {
        "pretrain": StageSection(32, 0.1, 30),
        "poison": StageSection(32, 0.1, 7),
        "overfit": StageSection(32, 0.1, 5),
        "unlearn": StageSection(32, 0.01, 30),
        "abl": StageSection(32, 0.01, 30),
        "cleanft": StageSection(32, 0.01, 30),
        "retrain": StageSection(32, 0.1, 7),
    }


STAGES = tuple(_stage_defaults())


@dataclass
class ExperimentConfig:
    data: DataSection = field(default_factory=DataSection)
    attack: AttackSection = field(default_factory=AttackSection)
    model: ModelSection = field(default_factory=ModelSection)
    stages: dict = field(default_factory=_stage_defaults)
    defense: DefenseSection = field(default_factory=DefenseSection)
    eval: EvalSection = field(default_factory=EvalSection)
    output: str = "runs/default"

    def validate(self) -> "ExperimentConfig":
        d, a, df = self.data, self.attack, self.defense
        checks = [
            (d.class_count >= 2, "data.class_count must be at least 2"),
            (d.per_class >= 1 and d.pretrain_per_class >= 1, "data per-class counts must be positive"),
            (d.image_size >= 2, "data.image_size must be at least 2"),
            (d.sigma >= 0, "data.sigma must be nonnegative"),
            (0.0 <= d.caption_noise < 1.0, "data.caption_noise must lie in [0, 1)"),
            (a.kind in TRIGGER_KINDS, f"attack.kind must be one of {TRIGGER_KINDS}"),
            (0 <= a.target_class < d.class_count, "attack.target_class out of range"),
            (a.poison_count >= 0, "attack.poison_count must be nonnegative"),
            (df.method in METHODS, f"defense.method must be one of {METHODS}"),
            (df.k_rule in K_RULES, f"defense.k_rule must be one of {K_RULES}"),
            (0.0 < df.s_susp_fraction < 1.0, "defense.s_susp_fraction must lie in (0, 1)"),
            (0.0 < df.k_fraction < 1.0, "defense.k_fraction must lie in (0, 1)"),
            (self.eval.bins >= 2, "eval.bins must be at least 2"),
            (self.eval.per_class >= 1 and self.eval.heldout_per_class >= 1,
             "eval per-class counts must be positive"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        for name, st in self.stages.items():
            try:
                self.train_config(name)
            except ValueError as exc:
                raise ConfigError(f"[{name}] {exc}") from exc
        return self

    def seed(self, stage: str) -> int:
        return self.data.seed + SEED_OFFSETS[stage]

    def train_config(self, stage: str, **overrides) -> TrainConfig:
        st = self.stages[stage]
        kw = dict(batch_size=st.batch_size, learning_rate=st.learning_rate, epochs=st.epochs,
                  seed=self.seed(stage))
        if stage == "overfit":
            kw["overfit_weight"] = self.defense.overfit_weight
        kw.update(overrides)
        return TrainConfig(**kw)

    def with_updates(self, section: str, **values) -> "ExperimentConfig":
        """Copy with one section's fields replaced (stages addressed by name)."""
        cfg = replace(self, stages=dict(self.stages))
        if section in cfg.stages:
            cfg.stages[section] = replace(cfg.stages[section], **values)
        else:
            setattr(cfg, section, replace(getattr(cfg, section), **values))
        return cfg.validate()

    # ------------------------------------------------------------ INI io

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        for name in ("data", "attack", "model", "defense", "eval"):
            cp[name] = {f.name: _fmt(getattr(getattr(self, name), f.name))
                        for f in fields(getattr(self, name))}
        for name, st in self.stages.items():
            cp[name] = {f.name: _fmt(getattr(st, f.name)) for f in fields(st)}
        cp["output"] = {"dir": self.output}
        lines = []
        for sec in cp.sections():
            lines.append(f"[{sec}]")
            lines += [f"{k} = {v}" for k, v in cp[sec].items()]
            lines.append("")
        return "\n".join(lines)

    def hash(self) -> str:
        """Content hash of every setting except the output directory."""
        text = self.to_ini().split("[output]")[0]
        return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _line_of(path: Path, section: str, key: str | None) -> str:
    """file:line of ``key`` inside ``[section]`` for error messages."""
    current = None
    for no, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.strip()
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if key is None and current == section:
                return f"{path}:{no}"
        elif current == section and key and line.split("=", 1)[0].split(":", 1)[0].strip() == key:
            return f"{path}:{no}"
    return str(path)


def _coerce(raw: str, default, where: str):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(f"cannot parse {raw!r} as {type(default).__name__}", where) from exc


def _fill(section_obj, items, path: Path, sec: str):
    known = {f.name: f for f in fields(section_obj)}
    values = {}
    for key, raw in items:
        where = _line_of(path, sec, key)
        if key not in known:
            raise ConfigError(f"unknown key {key!r} in [{sec}]", where)
        values[key] = _coerce(raw, getattr(section_obj, key), where)
    return replace(section_obj, **values)


def load_config(path) -> ExperimentConfig:
    """Parse an INI file; missing keys keep their defaults, unknown keys are errors."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    cp = configparser.ConfigParser()
    try:
        cp.read_string(path.read_text(), source=str(path))
    except configparser.Error as exc:
        raise ConfigError(str(exc).replace("\n", " "), str(path)) from exc
    cfg = ExperimentConfig()
    for sec in cp.sections():
        items = list(cp[sec].items())
        if sec in ("data", "attack", "model", "defense", "eval"):
            setattr(cfg, sec, _fill(getattr(cfg, sec), items, path, sec))
        elif sec in cfg.stages:
            cfg.stages[sec] = _fill(cfg.stages[sec], items, path, sec)
        elif sec == "output":
            for key, raw in items:
                if key != "dir":
                    raise ConfigError(f"unknown key {key!r} in [output]", _line_of(path, sec, key))
                cfg.output = raw.strip()
        else:
            raise ConfigError(f"unknown section [{sec}]", _line_of(path, sec, None))
    try:
        return cfg.validate()
    except ConfigError as exc:
        raise ConfigError(str(exc), str(path)) from exc


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(cfg.to_ini())
