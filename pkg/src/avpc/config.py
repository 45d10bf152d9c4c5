"""Run configuration: ``section.key = value`` files plus ``--set`` overrides.

Every key is checked against the schema below before any work starts, so a
typo fails loudly instead of silently falling back to a default.
"""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path

from .data import DataConfig
from .dsp import SpectrogramConfig
from .pcnet import PCNetArch
from .training import TrainConfig


@dataclass(frozen=True)
class EvalSettings:
    n_sources: int = 2
    t_test: int = 5
    t_max: int = 5
    repeats: int = 10
    seed: int = 0
    mixtures_per_clip: int = 1
    exhaustive: bool = False
    split: str = "test"


@dataclass(frozen=True)
class ModelSettings:
    guidance: str = "frames"
    pooling: str = "mean"
    freeze_trunk: bool = False


@dataclass(frozen=True)
class DataSettings:
    n_classes: int = 8
    per_class: int = 10
    n_frames: int = 3
    frame_size: int = 64
    manifest: str = ""


SECTIONS: dict[str, type] = {
    "dsp": SpectrogramConfig,
    "arch": PCNetArch,
    "model": ModelSettings,
    "train": TrainConfig,
    "eval": EvalSettings,
    "data": DataSettings,
}


class ConfigError(ValueError):
    pass


def _field_types(cls) -> dict[str, object]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in fields(cls) if f.name != "spectrogram"}


def _parse_scalar(text: str, tp) -> object:
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union or type(tp).__name__ == "UnionType":
        if text.lower() in ("none", ""):
            return None
        inner = [a for a in args if a is not type(None)]
        return _parse_scalar(text, inner[0])
    if origin is tuple:
        parts = [p.strip() for p in text.strip("()[] ").split(",") if p.strip()]
        elem = args[0] if args else str
        return tuple(_parse_scalar(p, elem) for p in parts)
    if tp is bool:
        low = text.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {text!r}")
    if tp is int:
        return int(text)
    if tp is float:
        return float(text)
    return text


def _format(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_format(x) for x in v)
    return str(v)


@dataclass
class RunConfig:
    values: dict[str, dict[str, object]] = field(default_factory=dict)
    config_path: str | None = None
    seed: int = 0
    out_dir: str = "runs"

    def set(self, dotted: str, raw: str) -> None:
        section, _, key = dotted.strip().partition(".")
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section {section!r} in {dotted!r}")
        types = _field_types(SECTIONS[section])
        if key not in types:
            raise ConfigError(f"unknown config key {dotted!r}")
        try:
            self.values.setdefault(section, {})[key] = _parse_scalar(raw.strip(), types[key])
        except ValueError as exc:
            raise ConfigError(f"bad value for {dotted}: {exc}") from None

    def section(self, name: str):
        cls = SECTIONS[name]
        try:
            return cls(**self.values.get(name, {}))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid [{name}] settings: {exc}") from None

    def validate(self) -> None:
        for name in SECTIONS:
            self.section(name)
        sc, arch = self.spectrogram(), self.arch()
        if not (sc.warp_bins == sc.frames == arch.spec_side):
            raise ConfigError(
                f"arch.spec_side={arch.spec_side} must equal dsp.warp_bins={sc.warp_bins} and dsp.frames={sc.frames}"
            )
        if self.model_settings().guidance not in ("frames", "class"):
            raise ConfigError("model.guidance must be 'frames' or 'class'")
        try:
            self.data_config().validate()
        except ValueError as exc:
            raise ConfigError(f"invalid [data] settings: {exc}") from None

    # typed views

    def spectrogram(self) -> SpectrogramConfig:
        return self.section("dsp")

    def arch(self) -> PCNetArch:
        return self.section("arch")

    def model_settings(self) -> ModelSettings:
        return self.section("model")

    def train_config(self) -> TrainConfig:
        tc = self.section("train")
        if "seed" not in self.values.get("train", {}):
            tc = dataclasses.replace(tc, seed=self.seed)
        return tc

    def eval_settings(self) -> EvalSettings:
        return self.section("eval")

    def data_config(self) -> DataConfig:
        d = self.section("data")
        return DataConfig(d.n_classes, d.per_class, d.n_frames, d.frame_size, self.spectrogram())

    def resolved(self) -> dict[str, dict[str, object]]:
        out = {}
        for name in SECTIONS:
            obj = self.train_config() if name == "train" else self.section(name)
            out[name] = {f: getattr(obj, f) for f in _field_types(SECTIONS[name])}
        return out

    def dumps(self) -> str:
        lines = [f"# resolved configuration (seed {self.seed})"]
        for name, vals in self.resolved().items():
            for k, v in vals.items():
                lines.append(f"{name}.{k} = {_format(v)}")
        return "\n".join(lines) + "\n"

    def write_snapshot(self, out_dir) -> Path:
        path = Path(out_dir) / "resolved_config.txt"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps())
        return path


def parse_config_text(text: str, cfg: RunConfig | None = None, origin: str = "<string>") -> RunConfig:
    cfg = cfg or RunConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'section.key = value'")
        key, value = line.split("=", 1)
        try:
            cfg.set(key, value)
        except ConfigError as exc:
            raise ConfigError(f"{origin}:{lineno}: {exc}") from None
    return cfg


def load_run_config(path=None, overrides: list[str] | None = None, seed: int | None = None,
                    out_dir: str | None = None) -> RunConfig:
    """File values first, then ``--set`` overrides; validated before returning."""
    cfg = RunConfig()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        parse_config_text(p.read_text(), cfg, str(p))
        cfg.config_path = str(p)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        k, v = item.split("=", 1)
        cfg.set(k, v)
    if seed is not None:
        cfg.seed = seed
    if out_dir is not None:
        cfg.out_dir = out_dir
    cfg.validate()
    return cfg
