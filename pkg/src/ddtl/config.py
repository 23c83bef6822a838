"""Experiment configuration: one strict JSON document per run."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from .data import KINDS, Domain, gen_synthetic, load_domain
from .dff import DffArch
from .segmentation import SegArch
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


def _strict(cls, raw: Any, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object, got {type(raw).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass
class DomainSpec:
    """Either a directory of PGM files (``path``) or a synthetic generator (``kind``)."""
    name: str | None = None
    path: str | None = None
    kind: str | None = None
    count: int | None = None
    seed: int = 0

    def __post_init__(self):
        if (self.path is None) == (self.kind is None):
            raise ValueError("give exactly one of 'path' or 'kind'")
        if self.kind is not None:
            if self.kind not in KINDS:
                raise ValueError(f"unknown kind {self.kind!r}; choose from {list(KINDS)}")
            if not self.count or self.count < 1:
                raise ValueError("generated domains need a positive 'count'")

    def build(self, role: str, size: int, base: Path) -> Domain:
        if self.path is not None:
            path = Path(self.path)
            if not path.is_absolute():
                path = base / path
            return load_domain(path, role, (size, size), name=self.name)
        d = gen_synthetic(self.kind, self.count, size, self.seed, name=self.name)
        return d.as_source() if role == "source" and d.role == "target" else d


@dataclass
class ArchConfig:
    encoder_channels: list[int] = field(default_factory=lambda: [16, 32])
    hidden: int = 64
    num_classes: int = 2


@dataclass
class SegConfig:
    train: dict | None = None
    test: dict | None = None
    base_channels: int = 8
    dropout: float = 0.25
    num_classes: int = 2
    w0: float = 10.0
    sigma: float = 5.0
    iterations: int = 20
    batches: int = 100
    batch_size: int = 4
    learning_rate: float = 3e-3
    seed: int = 0

    def arch(self) -> SegArch:
        return SegArch(self.base_channels, self.dropout, self.num_classes)

    def train_config(self) -> TrainConfig:
        return TrainConfig(iterations=self.iterations, batches=self.batches,
                           batch_size=self.batch_size, learning_rate=self.learning_rate,
                           seed=self.seed)


@dataclass
class PipelineConfig:
    segmenter: str | None = None
    mask_sources: bool = False


@dataclass
class ExperimentConfig:
    sources: list[DomainSpec] = field(default_factory=list)
    target: DomainSpec | None = None
    test: DomainSpec | None = None
    split: float = 0.5
    size: int = 64
    arch: ArchConfig = field(default_factory=ArchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    segmentation: SegConfig | None = None
    pipeline: PipelineConfig | None = None
    out: str = "runs/default"
    name: str = "experiment"
    base_dir: Path = field(default=Path("."), repr=False, compare=False)
    raw: dict = field(default_factory=dict, repr=False, compare=False)

    def dff_arch(self) -> DffArch:
        return DffArch((1, self.size, self.size), tuple(self.arch.encoder_channels),
                       self.arch.hidden, self.arch.num_classes)

    def out_dir(self) -> Path:
        out = Path(self.out)
        return out if out.is_absolute() else self.base_dir / out

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p

    def config_hash(self) -> str:
        return config_hash(self.raw)


def config_hash(raw: dict) -> str:
    """SHA-256 of the canonical JSON form; independent of key order."""
    canon = json.dumps(raw, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


_TOP_KEYS = {"name", "sources", "target", "test", "split", "size", "arch", "train",
             "segmentation", "pipeline", "out"}


def parse_config(raw: dict, base_dir: Path | str = ".") -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(raw) - _TOP_KEYS)
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {unknown}")
    try:
        cfg = ExperimentConfig(
            sources=[_strict(DomainSpec, s, f"sources[{i}]")
                     for i, s in enumerate(raw.get("sources", []))],
            target=_strict(DomainSpec, raw["target"], "target") if "target" in raw else None,
            test=_strict(DomainSpec, raw["test"], "test") if "test" in raw else None,
            split=float(raw.get("split", 0.5)),
            size=int(raw.get("size", 64)),
            arch=_strict(ArchConfig, raw.get("arch", {}), "arch"),
            train=_strict(TrainConfig, raw.get("train", {}), "train"),
            segmentation=(_strict(SegConfig, raw["segmentation"], "segmentation")
                          if "segmentation" in raw else None),
            pipeline=(_strict(PipelineConfig, raw["pipeline"], "pipeline")
                      if "pipeline" in raw else None),
            out=str(raw.get("out", "runs/default")),
            name=str(raw.get("name", "experiment")),
            base_dir=Path(base_dir),
            raw=raw,
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    if cfg.size % 4:
        raise ConfigError("size must be divisible by 4")
    for key in ("train", "test"):
        spec = getattr(cfg.segmentation, key, None) if cfg.segmentation else None
        if spec is not None:
            _strict(DomainSpec, spec, f"segmentation.{key}")
    return cfg


def load_config(path: str | Path, overrides: dict | None = None) -> ExperimentConfig:
    """Read and validate a config file; ``overrides`` (dotted keys) win over the file."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"{path}: config file not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    for dotted, value in (overrides or {}).items():
        node = raw
        *parents, leaf = dotted.split(".")
        for key in parents:
            node = node.setdefault(key, {})
        node[leaf] = value
    return parse_config(raw, path.parent)


def require_dff_parts(cfg: ExperimentConfig) -> None:
    if not cfg.sources:
        raise ConfigError("at least one source domain is required")
    if cfg.target is None:
        raise ConfigError("a target domain is required")


def seg_domain(cfg: ExperimentConfig, key: str) -> DomainSpec | None:
    spec = getattr(cfg.segmentation, key)
    return None if spec is None else DomainSpec(**spec)
