"""Run configuration: one INI file with a section per stage, plus ``section.key=value`` overrides."""
from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

from .augment import AugmentationPolicy
from .gan import GanConfig

ARTIFACT_ENV = "SCENEBALANCE_ARTIFACT_DIR"
EVAL_SPLITS = ("train", "test", "all")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ClusterConfig:
    seed: int = 0
    restarts: int = 10
    max_iter: int = 300
    tol: float = 1e-6
    normalize: bool = False

    def __post_init__(self):
        if self.restarts < 1 or self.max_iter < 1 or self.tol < 0:
            raise ValueError("cluster restarts and max_iter must be >= 1 and tol >= 0")


@dataclass(frozen=True)
class EvalConfig:
    iou_threshold: float = 0.5
    score_threshold: float = 0.0
    split: str = "all"

    def __post_init__(self):
        if not 0 < self.iou_threshold <= 1:
            raise ValueError("iou_threshold must lie in (0, 1]")
        if self.split not in EVAL_SPLITS:
            raise ValueError(f"eval split must be one of {EVAL_SPLITS}")


@dataclass(frozen=True)
class SynthConfig:
    n_offshore: int = 40
    n_inshore: int = 8
    size: int = 32
    seed: int = 0
    holdout: bool = False


@dataclass(frozen=True)
class RunConfig:
    gan: GanConfig = field(default_factory=GanConfig.toy)
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    policy: AugmentationPolicy = field(default_factory=AugmentationPolicy)
    eval: EvalConfig = field(default_factory=EvalConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    artifact_dir: Path = Path("artifacts")
    dataset: Optional[Path] = None
    detections: Optional[Path] = None

    def ensure_artifact_dir(self) -> Path:
        path = Path(self.artifact_dir)
        try:
            path.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigError(f"artifact directory {path} cannot be created: {exc}") from exc
        if not os.access(path, os.W_OK):
            raise ConfigError(f"artifact directory {path} is not writable")
        return path

    @classmethod
    def load(cls, path=None, overrides: Iterable[str] = (), env=None) -> "RunConfig":
        parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        if path is not None:
            if not Path(path).is_file():
                raise ConfigError(f"config file not found: {path}")
            parser.read(path)
        for item in overrides:
            key, sep, value = item.partition("=")
            section, dot, name = key.strip().partition(".")
            if not sep or not dot:
                raise ConfigError(f"override must look like section.key=value, got {item!r}")
            if not parser.has_section(section):
                parser.add_section(section)
            parser.set(section, name, value.strip())
        env = os.environ if env is None else env
        return cls.from_parser(parser, env.get(ARTIFACT_ENV))

    @classmethod
    def from_parser(cls, parser: configparser.ConfigParser, artifact_override=None) -> "RunConfig":
        known = {"run", "gan", "cluster", "augment", "eval", "synth"}
        unknown = set(parser.sections()) - known
        if unknown:
            raise ConfigError(f"unknown config section(s) {sorted(unknown)}")
        try:
            run = dict(parser["run"]) if parser.has_section("run") else {}
            _reject_unknown("run", run, {"artifact_dir", "dataset", "detections"})
            gan_opts = dict(parser["gan"]) if parser.has_section("gan") else {}
            preset = gan_opts.pop("preset", "toy")
            if preset not in ("toy", "full"):
                raise ConfigError(f"gan.preset must be toy or full, got {preset!r}")
            base = GanConfig.toy() if preset == "toy" else GanConfig.full_scale()
            gan = _build(GanConfig, "gan", gan_opts, base)
            cluster = _build(ClusterConfig, "cluster", _section(parser, "cluster"), ClusterConfig())
            policy = _build(AugmentationPolicy, "augment", _section(parser, "augment"), AugmentationPolicy())
            ev = _build(EvalConfig, "eval", _section(parser, "eval"), EvalConfig())
            synth = _build(SynthConfig, "synth", _section(parser, "synth"), SynthConfig())
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc
        artifact = artifact_override or run.get("artifact_dir") or "artifacts"
        return cls(
            gan,
            cluster,
            policy,
            ev,
            synth,
            Path(artifact),
            Path(run["dataset"]) if run.get("dataset") else None,
            Path(run["detections"]) if run.get("detections") else None,
        )

    def to_ini(self) -> str:
        lines = ["[run]", f"artifact_dir = {self.artifact_dir}"]
        if self.dataset:
            lines.append(f"dataset = {self.dataset}")
        if self.detections:
            lines.append(f"detections = {self.detections}")
        for name, obj in (("gan", self.gan), ("cluster", self.cluster), ("augment", self.policy), ("eval", self.eval), ("synth", self.synth)):
            lines.append("")
            lines.append(f"[{name}]")
            for f in dataclasses.fields(obj):
                lines.append(f"{f.name} = {_format(getattr(obj, f.name))}")
        return "\n".join(lines) + "\n"


def _section(parser, name):
    return dict(parser[name]) if parser.has_section(name) else {}


def _reject_unknown(section, values, allowed):
    extra = set(values) - set(allowed)
    if extra:
        raise ConfigError(f"unknown key(s) in [{section}]: {sorted(extra)}")


def _format(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def _parse(text: str, default):
    kind = type(default)
    if isinstance(default, bool):
        low = text.strip().lower()
        if low not in ("true", "false", "yes", "no", "1", "0", "on", "off"):
            raise ConfigError(f"not a boolean: {text!r}")
        return low in ("true", "yes", "1", "on")
    if isinstance(default, tuple):
        items = [t.strip() for t in text.split(",") if t.strip()]
        elem = type(default[0]) if default else str
        return tuple(elem(t) for t in items)
    if kind in (int, float, str):
        return kind(text.strip())
    return text


def _build(cls, section, values, base):
    names = {f.name: f for f in dataclasses.fields(cls)}
    _reject_unknown(section, values, names)
    updates = {}
    for key, text in values.items():
        try:
            updates[key] = _parse(text, getattr(base, key))
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key}: {exc}") from exc
    return dataclasses.replace(base, **updates)
