"""Run configuration: one YAML file, strict keys, paths resolved relative to
the file's directory."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from .data.augment import AugmentSpec
from .data.phantom import PhantomConfig
from .errors import ConfigError
from .losses import LossWeights
from .model import ClassifierSpec, ModelSpec
from .training import FinetuneConfig, PretrainConfig


@dataclass(frozen=True)
class DataConfig:
    manifest: Path | None = None


@dataclass(frozen=True)
class EvalConfig:
    classifier_checkpoint: Path | None = None
    pretrain_checkpoint: Path | None = None
    manifest: Path | None = None
    zero_shot_manifest: Path | None = None
    sweep_sizes: tuple[int, ...] = ()
    seeds: tuple[int, ...] = (0, 1, 2)


@dataclass(frozen=True)
class AttributeConfig:
    classifier_checkpoint: Path | None = None
    pretrain_checkpoint: Path | None = None
    volumes: tuple[Path, ...] = ()
    methods: tuple[str, ...] = ("gradcam", "input_grad")
    threshold: float = 0.1
    target_class: int = 1

    def __post_init__(self):
        for m in self.methods:
            if m not in ("gradcam", "input_grad"):
                raise ConfigError(f"unknown attribution method {m!r}")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"threshold must lie in (0, 1), got {self.threshold}")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    output_dir: Path = Path("runs/default")
    data: DataConfig = field(default_factory=DataConfig)
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    model: ModelSpec = field(default_factory=ModelSpec)
    loss: LossWeights = field(default_factory=LossWeights)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    classifier: ClassifierSpec = field(default_factory=ClassifierSpec)
    eval: EvalConfig = field(default_factory=EvalConfig)
    attribute: AttributeConfig = field(default_factory=AttributeConfig)


_SECTIONS = {
    "data": DataConfig,
    "phantom": PhantomConfig,
    "model": ModelSpec,
    "loss": LossWeights,
    "pretrain": PretrainConfig,
    "finetune": FinetuneConfig,
    "classifier": ClassifierSpec,
    "eval": EvalConfig,
    "attribute": AttributeConfig,
}

_PATH_FIELDS = {
    ("data", "manifest"),
    ("eval", "classifier_checkpoint"),
    ("eval", "pretrain_checkpoint"),
    ("eval", "manifest"),
    ("eval", "zero_shot_manifest"),
    ("attribute", "classifier_checkpoint"),
    ("attribute", "pretrain_checkpoint"),
}

_TUPLE_FIELDS = {
    ("model", "input_shape"),
    ("model", "encoder_channels"),
    ("model", "decoder_channels"),
    ("phantom", "shape"),
    ("eval", "sweep_sizes"),
    ("eval", "seeds"),
    ("attribute", "methods"),
}


def _check_keys(raw: dict, allowed: set[str], section: str) -> None:
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(
            f"unknown key(s) {unknown} in config section {section!r}; "
            f"allowed: {sorted(allowed)}"
        )


def _resolve(value, base_dir: Path) -> Path:
    path = Path(value)
    return path if path.is_absolute() else (base_dir / path).resolve()


def _build_section(name: str, raw: dict, base_dir: Path):
    cls = _SECTIONS[name]
    if not isinstance(raw, dict):
        raise ConfigError(f"config section {name!r} must be a mapping, got {type(raw).__name__}")
    allowed = {f.name for f in fields(cls)}
    _check_keys(raw, allowed, name)
    kwargs = {}
    for key, value in raw.items():
        if value is None:
            continue
        if name == "pretrain" and key == "weights":
            raise ConfigError(
                'loss weights belong in the top-level "loss" section, not "pretrain"'
            )
        if name == "pretrain" and key == "augment":
            allowed_aug = {f.name for f in fields(AugmentSpec)}
            _check_keys(value, allowed_aug, "pretrain.augment")
            kwargs[key] = AugmentSpec(**value)
        elif (name, key) in _PATH_FIELDS:
            kwargs[key] = _resolve(value, base_dir)
        elif (name, key) == ("attribute", "volumes"):
            kwargs[key] = tuple(_resolve(v, base_dir) for v in value)
        elif (name, key) in _TUPLE_FIELDS:
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(raw: dict, base_dir: Path) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError(f"config root must be a mapping, got {type(raw).__name__}")
    top_allowed = {f.name for f in fields(RunConfig)}
    _check_keys(raw, top_allowed, "<root>")
    kwargs = {}
    if "seed" in raw and raw["seed"] is not None:
        kwargs["seed"] = int(raw["seed"])
    raw_output = raw.get("output_dir") or "runs/default"
    kwargs["output_dir"] = _resolve(raw_output, base_dir)
    for name in _SECTIONS:
        if name in raw and raw[name] is not None:
            kwargs[name] = _build_section(name, raw[name], base_dir)
    loss = kwargs.get("loss", LossWeights())
    pre = kwargs.get("pretrain", PretrainConfig())
    if pre.weights != loss:
        kwargs["pretrain"] = replace(pre, weights=loss)
    return RunConfig(**kwargs)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file does not exist: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    if raw is None:
        raw = {}
    return config_from_dict(raw, path.parent.resolve())


def _plain(value):
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    if isinstance(value, list):
        return [_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    return value


def config_to_dict(config: RunConfig) -> dict:
    raw = asdict(config)
    raw["pretrain"].pop("weights", None)
    return _plain(raw)


def save_config_snapshot(config: RunConfig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(config_to_dict(config), sort_keys=False))
    return path
