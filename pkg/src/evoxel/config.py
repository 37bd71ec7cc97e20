"""Declarative run configuration with desk and paper presets.

A config file is JSON::

    {"preset": "desk", "seed": 0, "training": {"epochs": 50}}

Sections override the preset field by field; unknown keys are errors and
the seed is mandatory.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from .evaluation import ThresholdSweepConfig
from .events import CATEGORIES
from .neural.model import NetworkConfig
from .neural.train import TrainSettings
from .representation import RepresentationConfig

PRESETS = ("desk", "paper")
CONFIG_FORMAT = "EVCFG1"


@dataclass(frozen=True)
class SimulationSettings:
    count: int = 8  # objects per category
    resolution: int = 32
    split_ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    categories: tuple[str, ...] = CATEGORIES
    sensor_width: int = 64
    sensor_height: int = 64
    duration: float = 0.5
    frame_rate: float = 400.0
    contrast_threshold: float = 0.1
    elevation_deg: float = 30.0
    revolutions: float = 1.0
    subsamples: int = 2

    def __post_init__(self):
        object.__setattr__(self, "split_ratios", tuple(self.split_ratios))
        object.__setattr__(self, "categories", tuple(self.categories))
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if len(self.split_ratios) != 3 or min(self.split_ratios) < 0 or sum(self.split_ratios) <= 0:
            raise ValueError("split_ratios needs three non-negative values")
        for c in self.categories:
            if c not in CATEGORIES:
                raise ValueError(f"unknown category {c!r}")

    def scan_kwargs(self) -> dict:
        keep = ("sensor_width", "sensor_height", "duration", "frame_rate", "contrast_threshold",
                "elevation_deg", "revolutions", "subsamples")
        return {k: getattr(self, k) for k in keep}


def _preset_sections(name: str) -> dict:
    if name == "desk":
        return {
            "simulation": SimulationSettings(),
            "representation": RepresentationConfig(),
            "network": NetworkConfig.desk(),
            "training": TrainSettings(),
            "evaluation": ThresholdSweepConfig(),
        }
    if name == "paper":
        return {
            "simulation": SimulationSettings(sensor_width=512, sensor_height=512),
            "representation": RepresentationConfig(window_length=5e-3, window_count=100, size=256),
            "network": NetworkConfig.paper(),
            "training": TrainSettings(
                epochs=100, batch_size=5, lr=1e-6, betas=(0.9, 0.999),
                augment=("flip_h", "flip_v", "rotate_180", "polarity_invert"),
            ),
            "evaluation": ThresholdSweepConfig(),
        }
    raise ValueError(f"unknown preset {name!r}; expected one of {PRESETS}")


def _override(obj, values: dict, section: str):
    if not isinstance(values, dict):
        raise ValueError(f"config section {section!r} must be an object")
    known = {f.name for f in fields(obj)}
    unknown = set(values) - known
    if unknown:
        raise ValueError(f"unknown keys in {section!r}: {sorted(unknown)}")
    return replace(obj, **values)


def _plain(obj) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(obj).items()}


@dataclass(frozen=True)
class RunConfig:
    seed: int
    preset: str = "desk"
    simulation: SimulationSettings = field(default_factory=SimulationSettings)
    representation: RepresentationConfig = field(default_factory=RepresentationConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig.desk)
    training: TrainSettings = field(default_factory=TrainSettings)
    evaluation: ThresholdSweepConfig = field(default_factory=ThresholdSweepConfig)

    SECTIONS = ("simulation", "representation", "network", "training", "evaluation")

    @classmethod
    def preset_config(cls, name: str, seed: int) -> "RunConfig":
        return cls(seed=int(seed), preset=name, **_preset_sections(name))

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        d.pop("format", None)
        unknown = set(d) - {"seed", "preset", *cls.SECTIONS}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "seed" not in d or isinstance(d["seed"], bool) or not isinstance(d["seed"], int):
            raise ValueError("config needs an integer 'seed'")
        base = cls.preset_config(d.get("preset", "desk"), d["seed"])
        sections = {s: getattr(base, s) for s in cls.SECTIONS}
        for s in cls.SECTIONS:
            if s in d:
                sections[s] = _override(sections[s], d[s], s)
        if "network" not in d or "in_channels" not in d["network"]:
            # follow the frame mode unless set explicitly
            sections["network"] = replace(sections["network"], in_channels=sections["representation"].channels)
        if "network" not in d or "resolution" not in d["network"]:
            sections["network"] = replace(sections["network"], resolution=sections["simulation"].resolution)
        return cls(seed=d["seed"], preset=base.preset, **sections)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ValueError(f"{path}: invalid JSON ({e})") from None
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        out = {"format": CONFIG_FORMAT, "seed": self.seed, "preset": self.preset}
        for s in self.SECTIONS:
            out[s] = _plain(getattr(self, s))
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps() + "\n")

    def with_section(self, section: str, **changes) -> "RunConfig":
        if section not in self.SECTIONS:
            raise ValueError(f"unknown section {section!r}")
        changes = {k: v for k, v in changes.items() if v is not None}
        if not changes:
            return self
        return replace(self, **{section: _override(getattr(self, section), changes, section)})


def resolve(config_path: Optional[str], seed: Optional[int], preset: Optional[str] = None) -> RunConfig:
    """Config from a file, else from a preset; an explicit ``seed`` wins over the file's."""
    if config_path:
        cfg = RunConfig.load(config_path)
        if seed is not None:
            cfg = replace(cfg, seed=int(seed))
        return cfg
    if seed is None:
        raise ValueError("a seed is required: pass --seed or a --config with a seed")
    return RunConfig.from_dict({"seed": int(seed), "preset": preset or "desk"})
