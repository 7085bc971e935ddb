"""Run configuration: one YAML (or JSON) file plus dotted ``key=value`` overrides."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .denoiser import TrainConfig
from .diffusion import EdmParams, GuidanceSpec
from .errors import ArtifactIOError, ValidationError

IMAGE_SIZES = (8, 16, 32, 64)
AUGMENT_FACTORS = (1, 2, 3)


@dataclass
class PathsConfig:
    manifest: str | None = None
    out: str = "out"
    checkpoint: str | None = None
    archive: str | None = None
    synthetic: str | None = None
    roi_names: str | None = None


@dataclass
class TfImageConfig:
    N: int | None = None
    h: int | None = None
    window: str = "hann"
    image_size: int = 16


@dataclass
class SampleConfig:
    count: int = 10
    class_label: int | None = 0
    denoiser: str = "mlp"  # or "analytic" (test mode, no checkpoint needed)


@dataclass
class MetricsConfig:
    lengths: list[int] = field(default_factory=lambda: [24, 64, 128, 256])
    repeats: int = 5
    stride: int | None = None
    corr_scale: float = 0.1


@dataclass
class ConnectivityConfig:
    tau: float = 0.4
    group_threshold: float = 0.6
    top_n: int = 20
    edge_threshold: float = 0.0


@dataclass
class AugmentConfig:
    factor: int = 1


@dataclass
class RunConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    tfimage: TfImageConfig = field(default_factory=TfImageConfig)
    edm: EdmParams = field(default_factory=EdmParams)
    train: TrainConfig = field(default_factory=TrainConfig)
    guidance: GuidanceSpec = field(default_factory=GuidanceSpec)
    sample: SampleConfig = field(default_factory=SampleConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    connectivity: ConnectivityConfig = field(default_factory=ConnectivityConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0
    resume: bool = False

    def validate(self) -> None:
        t = self.tfimage
        if t.image_size not in IMAGE_SIZES:
            raise ValidationError(f"tfimage.image_size must be one of {IMAGE_SIZES}")
        if t.window not in ("hann", "rect"):
            raise ValidationError("tfimage.window must be 'hann' or 'rect'")
        if (t.N is None) != (t.h is None):
            raise ValidationError("tfimage.N and tfimage.h must be set together")
        if t.N is not None and t.h is not None:
            if t.h > t.N:
                raise ValidationError(f"tfimage.h={t.h} exceeds tfimage.N={t.N}")
            if t.h < 1 or t.N < 2 or t.N % 2:
                raise ValidationError("tfimage.N must be even and >= 2, tfimage.h >= 1")
        self.edm.validate()
        self.train.validate()
        self.guidance.validate()
        if self.augment.factor not in AUGMENT_FACTORS:
            raise ValidationError(f"augment.factor must be one of {AUGMENT_FACTORS}")
        if self.sample.count < 0:
            raise ValidationError("sample.count must be >= 0")
        if self.sample.denoiser not in ("mlp", "analytic"):
            raise ValidationError("sample.denoiser must be 'mlp' or 'analytic'")
        if not self.metrics.lengths or any(L < 2 for L in self.metrics.lengths):
            raise ValidationError("metrics.lengths must be a non-empty list of lengths >= 2")
        if self.metrics.repeats < 1:
            raise ValidationError("metrics.repeats must be >= 1")
        c = self.connectivity
        if not 0 < c.tau <= 1:
            raise ValidationError("connectivity.tau must lie in (0, 1]")
        if c.top_n < 0 or c.edge_threshold < 0:
            raise ValidationError("connectivity.top_n and edge_threshold must be >= 0")
        if not 0 <= self.seed < 2 ** 64:
            raise ValidationError("seed must be an unsigned 64-bit integer")

    def validate_for_length(self, T: int, metrics: bool = True) -> None:
        """Checks that need the dataset's series length."""
        t = self.tfimage
        if t.N is not None and t.N > T:
            raise ValidationError(f"tfimage.N={t.N} exceeds series length T={T}")
        if metrics and all(L > T for L in self.metrics.lengths):
            raise ValidationError(f"every metrics length exceeds series length T={T}")


def _build(cls, data: Any, where: str):
    if not dataclasses.is_dataclass(cls):
        return data
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ValidationError(f"{where or 'config'} must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ValidationError(f"unknown config key(s) {', '.join((where + '.' if where else '') + k for k in unknown)}")
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        sub = getattr(defaults, name)
        key = f"{where}.{name}" if where else name
        if dataclasses.is_dataclass(sub):
            kwargs[name] = _build(type(sub), value, key)
        else:
            kwargs[name] = _coerce(sub, value, key)
    return cls(**kwargs)


def _coerce(default, value, key):
    """Match ``value`` to the type of the field's default where that is unambiguous."""
    if value is None:
        return None
    try:
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise TypeError
            return value
        if isinstance(default, float):
            return float(value)
        if isinstance(default, int) and not isinstance(value, bool):
            if isinstance(value, float) and not value.is_integer():
                raise TypeError
            return int(value)
        if isinstance(default, tuple):
            return tuple(value)
        if isinstance(default, list):
            return list(value)
        if isinstance(default, str):
            return str(value)
    except (TypeError, ValueError) as exc:
        raise ValidationError(f"{key}: cannot use {value!r}") from exc
    return value


def to_dict(cfg) -> dict:
    out = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if dataclasses.is_dataclass(v):
            out[f.name] = to_dict(v)
        elif isinstance(v, tuple):
            out[f.name] = list(v)
        else:
            out[f.name] = v
    return out


def parse_override(text: str) -> tuple[list[str], Any]:
    if "=" not in text:
        raise ValidationError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    parts = key.strip().split(".")
    if not all(parts):
        raise ValidationError(f"override {text!r} has an empty key segment")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ValidationError(f"override {text!r}: {exc}") from exc
    return parts, value


def apply_overrides(doc: dict, overrides) -> dict:
    for text in overrides or ():
        parts, value = parse_override(text)
        node = doc
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ValidationError(f"override {text!r}: {p} is not a section")
        node[parts[-1]] = value
    return doc


def load_config(path=None, overrides=(), seed: int | None = None, out: str | None = None) -> RunConfig:
    doc: dict = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except FileNotFoundError as exc:
            raise ValidationError(f"config file not found: {path}") from exc
        except OSError as exc:
            raise ArtifactIOError(f"cannot read config {path}: {exc}") from exc
        try:
            doc = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ValidationError(f"config {path} does not parse: {exc}") from exc
        if not isinstance(doc, dict):
            raise ValidationError("config file must hold a mapping")
        base = Path(path).parent
        for key, value in list((doc.get("paths") or {}).items()):
            if isinstance(value, str) and not Path(value).is_absolute():
                doc["paths"][key] = str(base / value)
    doc = apply_overrides(doc, overrides)
    if seed is not None:
        doc["seed"] = seed
    if out is not None:
        doc.setdefault("paths", {})["out"] = out
    cfg = _build(RunConfig, doc, "")
    cfg.validate()
    cfg.train.seed = cfg.seed
    return cfg
