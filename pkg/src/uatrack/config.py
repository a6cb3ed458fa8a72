"""Key-value run configuration with [section] headers.

A blank config reproduces every module's documented defaults. Unknown
sections or keys are rejected with the offending section/key named, and
values are validated by the module configs they construct.
"""

import configparser
import io
from dataclasses import dataclass, field, fields

import numpy as np

from .assoc import AssocConfig
from .kalman import NoiseConfig
from .learn import TrainerConfig
from .mot import MODES as MOT_MODES


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EmbedSection:
    widths: tuple[int, ...] = (3, 64, 64, 64)
    points_per_crop: int = 128

    def __post_init__(self):
        if len(self.widths) < 2 or self.widths[0] != 3:
            raise ValueError(f"widths must start at 3 with an output layer, got {self.widths}")
        if self.points_per_crop < 1:
            raise ValueError("points_per_crop must be >= 1")


@dataclass(frozen=True)
class SimSection:
    train_scenes: int = 6
    fit_scenes: int = 2
    test_scenes: int = 11
    objects: int = 5
    test_objects: int = 4
    frames: int = 30
    frame_period: float = 0.5
    crossings: int = 1
    bounds: float = 45.0
    center_pct: float = 0.10
    size_pct: float = 0.10
    yaw_deg: float = 5.0
    missed_rate: float = 0.05
    spurious_rate: float = 0.10
    dropout_rate: float = 0.0

    def __post_init__(self):
        if min(self.train_scenes, self.fit_scenes, self.test_scenes) < 1:
            raise ValueError("every split needs at least one scene")


@dataclass(frozen=True)
class LearnSection:
    margin: float = 0.2
    learning_rate: float = 2e-5
    batch_size: int = 64
    epochs: int = 100
    max_gap: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    use_uncertainty: bool = True
    hard_negative_mining: bool = True
    mode: str = "selfsup"  # selfsup | weak | oracle

    def __post_init__(self):
        if self.mode not in ("selfsup", "weak", "oracle"):
            raise ValueError(f"mode must be selfsup/weak/oracle, got {self.mode!r}")

    def trainer(self, seed: int, points_per_crop: int) -> TrainerConfig:
        return TrainerConfig(
            margin=self.margin, learning_rate=self.learning_rate,
            batch_size=self.batch_size, epochs=self.epochs, max_gap=self.max_gap,
            beta1=self.beta1, beta2=self.beta2, adam_eps=self.adam_eps,
            seed=seed, points_per_crop=points_per_crop,
            use_uncertainty=self.use_uncertainty,
            hard_negative_mining=self.hard_negative_mining,
        )


@dataclass(frozen=True)
class MotSection:
    modes: tuple[str, ...] = ("motion", "motion+score", "motion+score+appearance")
    score_gate: float = 0.5

    def __post_init__(self):
        for m in self.modes:
            if m not in MOT_MODES:
                raise ValueError(f"unknown mot mode {m!r}")
        if not (0.0 < self.score_gate < 1.0):
            raise ValueError("score_gate must be in (0, 1)")


@dataclass(frozen=True)
class EvalSection:
    match_dist: float = 2.0
    recall_levels: int = 40
    sot_noise: str = "both"  # off | on | both

    def __post_init__(self):
        if self.match_dist <= 0 or self.recall_levels < 1:
            raise ValueError("match_dist > 0 and recall_levels >= 1 required")
        if self.sot_noise not in ("off", "on", "both"):
            raise ValueError(f"sot_noise must be off/on/both, got {self.sot_noise!r}")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    kalman: NoiseConfig = field(default_factory=NoiseConfig)
    assoc: AssocConfig = field(default_factory=AssocConfig)
    embed: EmbedSection = field(default_factory=EmbedSection)
    learn: LearnSection = field(default_factory=LearnSection)
    sim: SimSection = field(default_factory=SimSection)
    mot: MotSection = field(default_factory=MotSection)
    eval: EvalSection = field(default_factory=EvalSection)


_SECTION_TYPES = {
    "kalman": NoiseConfig,
    "assoc": AssocConfig,
    "embed": EmbedSection,
    "learn": LearnSection,
    "sim": SimSection,
    "mot": MotSection,
    "eval": EvalSection,
}


def _parse_value(section: str, key: str, raw: str, current):
    """Parse raw text according to the type of the default value."""
    raw = raw.strip()
    try:
        if isinstance(current, bool):
            if raw.lower() in ("true", "1", "yes", "on"):
                return True
            if raw.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, str):
            return raw
        if isinstance(current, np.ndarray):
            return np.array([float(v) for v in raw.split(",")])
        if isinstance(current, tuple):
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            if current and isinstance(current[0], int):
                return tuple(int(p) for p in parts)
            if current and isinstance(current[0], str):
                return tuple(parts)
            return tuple(float(p) for p in parts)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: {exc}") from exc
    raise ConfigError(f"[{section}] {key}: unsupported value type")


def parse_config(text_or_path, from_path: bool = True) -> RunConfig:
    """Parse a config file (or literal text) into a validated RunConfig."""
    parser = configparser.ConfigParser()
    parser.optionxform = str
    if from_path:
        with open(text_or_path, "r", encoding="utf-8") as fh:
            parser.read_file(fh)
    else:
        parser.read_file(io.StringIO(text_or_path))

    kwargs = {}
    for sect in parser.sections():
        if sect == "global":
            for key, raw in parser["global"].items():
                if key != "seed":
                    raise ConfigError(f"[global] unknown key {key!r}")
                kwargs["seed"] = int(raw)
            continue
        if sect not in _SECTION_TYPES:
            raise ConfigError(f"unknown section [{sect}]")
        cls = _SECTION_TYPES[sect]
        defaults = cls()
        names = {f.name for f in fields(cls)}
        updates = {}
        for key, raw in parser[sect].items():
            if key not in names:
                raise ConfigError(f"[{sect}] unknown key {key!r}")
            updates[key] = _parse_value(sect, key, raw, getattr(defaults, key))
        try:
            kwargs[sect] = cls(**{**{f.name: getattr(defaults, f.name) for f in fields(cls)}, **updates})
        except ValueError as exc:
            raise ConfigError(f"[{sect}]: {exc}") from exc
    return RunConfig(**kwargs)


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, np.ndarray):
        return ",".join(repr(float(x)) for x in v)
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def serialize_config(rc: RunConfig) -> str:
    """Render a RunConfig back to config text (parse . serialize . parse is
    the identity)."""
    out = ["[global]", f"seed = {rc.seed}", ""]
    for sect, cls in _SECTION_TYPES.items():
        out.append(f"[{sect}]")
        obj = getattr(rc, sect)
        for f in fields(cls):
            out.append(f"{f.name} = {_format_value(getattr(obj, f.name))}")
        out.append("")
    return "\n".join(out)
