"""Strict ``[section]`` / ``key = value`` experiment configuration.

Every section and key must be known; typos fail fast. ``--set`` overrides
use ``section.key=value`` with the same parsing rules.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Iterable


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_pair(text: str) -> tuple[int, int]:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) == 1:
        v = int(parts[0])
        return v, v
    if len(parts) != 2:
        raise ValueError(f"expected 'a' or 'a,b', got {text!r}")
    return int(parts[0]), int(parts[1])


def _float_pair(text: str) -> tuple[float, float]:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) == 1:
        v = float(parts[0])
        return v, v
    if len(parts) != 2:
        raise ValueError(f"expected 'a' or 'a,b', got {text!r}")
    return float(parts[0]), float(parts[1])


def _opt_float(text: str) -> float | None:
    return None if text.strip().lower() in ("", "none") else float(text)


def _opt_int(text: str) -> int | None:
    return None if text.strip().lower() in ("", "none") else int(text)


def _opt_str(text: str) -> str | None:
    t = text.strip()
    return None if t.lower() in ("", "none") else t


def _str_list(text: str) -> tuple[str, ...]:
    return tuple(p.strip() for p in text.split(",") if p.strip())


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in _str_list(text))


@dataclass
class DataSection:
    manifest: str | None = None  # existing dataset; otherwise synthetic
    count: int = 50
    train_count: int = 40
    seed: int = 7
    height: int = 128
    width: int = 128
    blob_count: tuple[int, int] = (1, 1)
    radius: tuple[float, float] = (10.0, 22.0)
    blur_sigma: float = 1.0
    contrast: tuple[float, float] = (0.25, 0.45)
    noise_sigma: float = 0.03
    distractors: tuple[int, int] = (0, 0)
    distractor_width: tuple[int, int] = (20, 40)


@dataclass
class PatchSection:
    long: int = 100
    short: int = 20


@dataclass
class NetworkSection:
    preset: str = "kidney"
    crossover_layer: int | None = 3
    dropout: float = 0.1
    # "auto": standardize by training-image mean/std; "none": raw [0, 1] pixels
    input_norm: str = "none"


@dataclass
class SamplerSection:
    boundary_band: int = 3
    interior_stride: int = 2
    max_stride: int = 8


@dataclass
class TrainSection:
    epochs: int = 1
    learning_rate: float = 1e-4
    batch_size: int = 64
    shuffle: bool = True
    dtype: str = "float64"
    background_cap: float | None = None


@dataclass
class LossSection:
    kind: str = "full"
    lambda_cs: float = 1.0
    epsilon: float = 1e-12


@dataclass
class InferenceSection:
    stride: int = 3
    threshold: float = 0.5
    anchor_row: int = 0
    anchor_col: int = 0
    roi: str | None = None
    batch_size: int = 256


@dataclass
class OutputSection:
    dir: str = "runs/default"
    raw_probability: bool = True


@dataclass
class AblateSection:
    variants: tuple[str, ...] = ("square28", "square56", "square100", "vertical", "horizontal", "vh_average",
                                 "mse_only", "entropy_only", "full", "no_end_constraint")
    seeds: tuple[int, ...] = (0,)
    layer_sweep: bool = True


@dataclass
class ExperimentConfig:
    data: DataSection = field(default_factory=DataSection)
    patch: PatchSection = field(default_factory=PatchSection)
    network: NetworkSection = field(default_factory=NetworkSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    train: TrainSection = field(default_factory=TrainSection)
    loss: LossSection = field(default_factory=LossSection)
    inference: InferenceSection = field(default_factory=InferenceSection)
    output: OutputSection = field(default_factory=OutputSection)
    ablate: AblateSection = field(default_factory=AblateSection)
    seed: int = 0
    source: str | None = None


_PARSERS: dict[str, Any] = {
    "int": int, "float": float, "str": str, "bool": _bool,
    "tuple[int, int]": _int_pair, "tuple[float, float]": _float_pair,
    "float | None": _opt_float, "int | None": _opt_int, "str | None": _opt_str,
    "tuple[str, ...]": _str_list, "tuple[int, ...]": _int_list,
}

SECTIONS = ("data", "patch", "network", "sampler", "train", "loss", "inference", "output", "ablate")


def _section_fields(cfg: ExperimentConfig, section: str):
    obj = getattr(cfg, section)
    return obj, {f.name: f for f in fields(obj)}


def set_value(cfg: ExperimentConfig, section: str, key: str, text: str) -> None:
    if section == "run" and key == "seed":
        cfg.seed = int(text)
        return
    if section not in SECTIONS:
        raise ConfigError(f"unknown section [{section}]")
    obj, known = _section_fields(cfg, section)
    if key not in known:
        raise ConfigError(f"unknown key {section}.{key}")
    parser = _PARSERS[str(known[key].type)]
    try:
        setattr(obj, key, parser(text))
    except ValueError as exc:
        raise ConfigError(f"bad value for {section}.{key}: {exc}") from None


def parse_config(text: str, source: str | None = None) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, strict=True, empty_lines_in_values=False)
    cp.optionxform = str  # keys are case-sensitive
    try:
        cp.read_string(text, source=source or "<config>")
    except configparser.Error as exc:
        raise ConfigError(" ".join(str(exc).split())) from None
    cfg = ExperimentConfig(source=source)
    for section in cp.sections():
        for key, value in cp.items(section):
            set_value(cfg, section, key, value)
    validate(cfg)
    return cfg


def load_config(path: str | Path | None, overrides: Iterable[str] = ()) -> ExperimentConfig:
    if path is None:
        cfg = ExperimentConfig()
    else:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        cfg = parse_config(p.read_text(), str(p))
    apply_overrides(cfg, overrides)
    return cfg


def apply_overrides(cfg: ExperimentConfig, overrides: Iterable[str]) -> None:
    for item in overrides:
        lhs, eq, value = item.partition("=")
        section, dot, key = lhs.strip().partition(".")
        if not eq or not dot:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        set_value(cfg, section, key, value.strip())
    validate(cfg)


def validate(cfg: ExperimentConfig) -> None:
    d = cfg.data
    if d.manifest is None and not (0 < d.train_count < d.count):
        raise ConfigError("data.train_count must satisfy 0 < train_count < count")
    if cfg.network.input_norm != "none" and cfg.network.input_norm != "auto":
        try:
            shift, scale = _float_pair(cfg.network.input_norm)
        except ValueError:
            raise ConfigError("network.input_norm must be none, auto or 'shift,scale'") from None
        if scale <= 0:
            raise ConfigError("network.input_norm scale must be > 0")
    if cfg.train.dtype not in ("float32", "float64"):
        raise ConfigError("train.dtype must be float32 or float64")
    if cfg.inference.stride < 1:
        raise ConfigError("inference.stride must be >= 1")
    if cfg.train.learning_rate <= 0:
        raise ConfigError("train.learning_rate must be > 0")


def dump_config(cfg: ExperimentConfig) -> str:
    """Canonical text form (round-trips through :func:`parse_config`)."""
    out = []
    for section in SECTIONS:
        obj, known = _section_fields(cfg, section)
        out.append(f"[{section}]")
        for name in known:
            out.append(f"{name} = {_fmt(getattr(obj, name))}")
        out.append("")
    return "\n".join(out)


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)
