"""Pipeline configuration: a flat ``section.key = value`` text file.

Lines starting with ``#`` are comments and unknown keys are rejected, so a
typo cannot silently fall back to a default.  Example::

    seed = 7
    world.n_images = 500
    model.init_std = 0.1
    pretrain.steps = 2000
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from .model import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass
class WorldSettings:
    n_images: int = 500
    n_concepts: int = 10
    n_colors: int = 6
    appearance_dim: int = 64
    noise: float = 0.1
    od_images_per_dataset: int = 120


@dataclass
class VocabSettings:
    base: str = "vg"
    min_instances: int = 30


@dataclass
class SamplingSettings:
    min_per_class: int = 2000
    # dataset:mode:copies entries, comma separated
    plan: str = "vg:class_aware:1,coco:full:1,objects365:full:1,openimages:full:1"

    def parsed(self) -> dict[str, tuple[str, int]]:
        out = {}
        for part in filter(None, (p.strip() for p in self.plan.split(","))):
            try:
                name, mode, copies = part.split(":")
                out[name] = (mode, int(copies))
            except ValueError:
                raise ConfigError(f"sampling.plan entry {part!r} is not dataset:mode:copies") from None
        return out


@dataclass
class RegionSettings:
    iou_threshold: float = 0.5
    max_regions: int = 50
    score_floor: float = 0.0
    normalize_positions: bool = True


@dataclass
class CorpusSettings:
    qa_rate: float = 2.5 / 4.68
    tag_rate: float = 1.67 / 4.68


@dataclass
class PretrainConfig:
    steps: int = 2000
    batch_size: int = 64
    lr: float = 1e-3
    mask_prob: float = 0.15
    mtl_on_polluted: bool = False
    checkpoint_every: int = 500


@dataclass
class FinetuneConfig:
    steps: int = 300
    batch_size: int = 32
    lr: float = 1e-3
    eval_fraction: float = 0.2


@dataclass
class CaptionConfig:
    beam_size: int = 5
    max_len: int = 20
    n_images: int = 10


@dataclass
class PipelineConfig:
    seed: int = 7
    world: WorldSettings = field(default_factory=WorldSettings)
    vocab: VocabSettings = field(default_factory=VocabSettings)
    sampling: SamplingSettings = field(default_factory=SamplingSettings)
    regions: RegionSettings = field(default_factory=RegionSettings)
    corpus: CorpusSettings = field(default_factory=CorpusSettings)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    caption: CaptionConfig = field(default_factory=CaptionConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        """SHA-256 of the resolved settings; formatting and comments do not matter."""
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()

    def set(self, key: str, raw: Any) -> None:
        """Assign one ``section.key`` (or top-level ``key``) from text or a typed value."""
        target: Any = self
        parts = key.split(".")
        for p in parts[:-1]:
            if not hasattr(target, p) or not dataclasses.is_dataclass(getattr(target, p)):
                raise ConfigError(f"unknown config section {p!r} in {key!r}")
            target = getattr(target, p)
        types = {f.name: f.type for f in fields(target)}
        name = parts[-1]
        if name not in types or dataclasses.is_dataclass(getattr(target, name)):
            raise ConfigError(f"unknown config key {key!r}")
        setattr(target, name, _coerce(key, types[name], raw))

    def validated(self) -> PipelineConfig:
        # rebuilding the model config re-runs its invariant checks
        try:
            self.model = ModelConfig(**asdict(self.model))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        self.sampling.parsed()
        return self


def _coerce(key: str, typ: Any, raw: Any) -> Any:
    name = typ if isinstance(typ, str) else getattr(typ, "__name__", str(typ))
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if name == "bool":
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if name == "int":
            return int(text)
        if name == "float":
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {raw!r} as {name}") from None
    return text


def parse_config_text(text: str) -> PipelineConfig:
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#",),
                                       inline_comment_prefixes=("#",), empty_lines_in_values=False)
    parser.optionxform = str
    try:
        parser.read_string("[config]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    cfg = PipelineConfig()
    for key, value in parser["config"].items():
        cfg.set(key, value)
    return cfg.validated()


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> PipelineConfig:
    cfg = parse_config_text(Path(path).read_text(encoding="utf-8")) if path else PipelineConfig()
    for k, v in (overrides or {}).items():
        cfg.set(k, v)
    return cfg.validated()


def render_config(cfg: PipelineConfig) -> str:
    """The resolved settings in the same text format ``load_config`` reads."""
    lines = []

    def walk(obj, prefix):
        for f in fields(obj):
            v = getattr(obj, f.name)
            if dataclasses.is_dataclass(v):
                walk(v, f"{prefix}{f.name}.")
            else:
                lines.append(f"{prefix}{f.name} = {str(v).lower() if isinstance(v, bool) else v}")

    walk(cfg, "")
    return "\n".join(lines) + "\n"
