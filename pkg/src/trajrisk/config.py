"""Run configuration: one JSON document with a section per pipeline stage."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, Optional

from .datagen import GeneratorConfig
from .losses import LossConfig
from .model.network import ModelConfig
from .train import TrainConfig

__all__ = ["PreprocessConfig", "EvalConfig", "RunConfig", "ConfigError", "SECTIONS", "defaults_text"]


class ConfigError(ValueError):
    pass


@dataclass
class PreprocessConfig:
    n_bins: int = 8
    length_quantile: float = 0.95
    length_caps: Optional[Dict[str, int]] = None
    validation_fraction: float = 0.2


@dataclass
class EvalConfig:
    psi_bins: int = 10
    batch_size: int = 256


# section name -> (dataclass, keys managed elsewhere)
SECTIONS = {
    "generator": (GeneratorConfig, ("seed", "channel_spec")),
    "preprocess": (PreprocessConfig, ()),
    "model": (ModelConfig, ()),
    "loss": (LossConfig, ()),
    "train": (TrainConfig, ("seed",)),
    "eval": (EvalConfig, ()),
}


def _allowed(section: str):
    cls, hidden = SECTIONS[section]
    return [f.name for f in fields(cls) if f.name not in hidden]


def _section_defaults(section: str) -> dict:
    cls, hidden = SECTIONS[section]
    inst = cls(**({"seed": 0} if "seed" in hidden else {}))
    d = inst.to_dict() if hasattr(inst, "to_dict") else asdict(inst)
    return {k: d[k] for k in _allowed(section)}


@dataclass
class RunConfig:
    seed: int
    sections: Dict[str, dict] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict, seed: Optional[int] = None) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        unknown = sorted(set(d) - set(SECTIONS) - {"seed"})
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        for name in SECTIONS:
            sec = d.get(name, {})
            if not isinstance(sec, dict):
                raise ConfigError(f"config section '{name}' must be an object")
            bad = sorted(set(sec) - set(_allowed(name)))
            if bad:
                raise ConfigError(f"unknown keys in section '{name}': {bad}")
        seed = d.get("seed") if seed is None else seed
        if seed is None:
            raise ConfigError("seed is mandatory (set it in the config or pass --seed)")
        if isinstance(seed, bool) or not isinstance(seed, int):
            raise ConfigError("seed must be an integer")
        cfg = cls(seed=int(seed), sections={n: dict(d.get(n, {})) for n in SECTIONS})
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path, seed: Optional[int] = None) -> "RunConfig":
        if path is None:
            return cls.from_dict({}, seed=seed)
        try:
            d = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc.msg} at line {exc.lineno}") from exc
        return cls.from_dict(d, seed=seed)

    def validate(self) -> None:
        for name in SECTIONS:
            try:
                self.build(name)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid '{name}' section: {exc}") from exc

    def build(self, section: str, **overrides):
        cls, hidden = SECTIONS[section]
        kw = dict(self.sections.get(section, {}))
        if "seed" in hidden:
            kw["seed"] = self.seed
        kw.update(overrides)
        return cls(**kw)

    def effective(self) -> dict:
        """Every field with its resolved value, as echoed into output directories."""
        out = {"seed": self.seed}
        for name in SECTIONS:
            d = _section_defaults(name)
            d.update(self.sections.get(name, {}))
            out[name] = d
        return json.loads(json.dumps(out))

    def dumps(self) -> str:
        return json.dumps(self.effective(), indent=2, sort_keys=True) + "\n"

    def echo(self, out_dir) -> Path:
        path = Path(out_dir) / "config.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps(), encoding="utf-8")
        return path


def defaults_text() -> str:
    d = {name: _section_defaults(name) for name in SECTIONS}
    return json.dumps(d, indent=2, sort_keys=True)
