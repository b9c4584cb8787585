import dataclasses
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Type, TypeVar, Union, get_args, get_origin, get_type_hints

import yaml
from thefuzz import process

from .backbone import BackboneConfig
from .control import ControlExtractorConfig, ControlNetConfig, CrossNormConfig
from .datagen import DatasetConfig
from .finetune import ARCHITECTURES, SELECTOR_PRESETS, TrainConfig

logger = logging.getLogger(__name__)

CONFIG_VERSION = 1
ENV_PREFIX = "CONTROLLAB_"
DEFAULT_CONFIG_PATH = "config.yml"


class ConfigError(ValueError):
    """The run configuration is malformed or internally inconsistent."""


@dataclass
class DiffusionConfig:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    schedule: str = "linear"


@dataclass
class CompareConfig:
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2])
    architectures: List[str] = field(default_factory=lambda: ["controlnext", "controlnet"])


@dataclass
class BenchConfig:
    iters: int = 100
    warmup: int = 10
    batch_size: int = 1
    timestep: int = 500


@dataclass
class SampleConfig:
    count: int = 8
    steps: int = 20
    seed: int = 0


def _pretrain_defaults() -> TrainConfig:
    return TrainConfig(
        steps=3000,
        batch_size=16,
        learning_rate=1e-3,
        architecture="base",
        selector=["*"],
        optimizer="adam",
        eval_every=500,
    )


@dataclass
class RunConfig:
    version: int = CONFIG_VERSION
    run_name: str = "controlnext"
    seed: int = 0
    outdir: str = "runs"
    backbone_checkpoint: Optional[str] = None
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    extractor: ControlExtractorConfig = field(default_factory=ControlExtractorConfig)
    cross_norm: CrossNormConfig = field(default_factory=CrossNormConfig)
    controlnet: ControlNetConfig = field(default_factory=ControlNetConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    pretrain: TrainConfig = field(default_factory=_pretrain_defaults)
    compare: CompareConfig = field(default_factory=CompareConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)

    def with_seed(self, seed: int) -> "RunConfig":
        """Copy whose initialization, batch order and sampling all follow `seed`."""
        return dataclasses.replace(
            self,
            seed=seed,
            train=dataclasses.replace(self.train, seed=seed),
            pretrain=dataclasses.replace(self.pretrain, seed=seed),
            sample=dataclasses.replace(self.sample, seed=seed),
        )

    def with_architecture(self, architecture: str) -> "RunConfig":
        return dataclasses.replace(
            self,
            run_name=architecture,
            train=dataclasses.replace(self.train, architecture=architecture),
        )


T = TypeVar("T")


def suggest_key(key: str, valid: List[str]) -> str:
    """A 'did you mean' hint when a close valid key exists."""
    if not valid:
        return ""
    best_match, score = process.extractOne(key, valid)
    if score > 80:
        return f" Did you mean '{best_match}'?"
    return ""


def _coerce(value: Any, hint: Any, where: str) -> Any:
    origin = get_origin(hint)
    if origin is Union:
        options = [arg for arg in get_args(hint) if arg is not type(None)]
        if value is None:
            return None
        return _coerce(value, options[0], where)
    if dataclasses.is_dataclass(hint):
        if not isinstance(value, Mapping):
            raise ConfigError(f"'{where}' must be a mapping, got {type(value).__name__}.")
        return from_dict(hint, value, where)
    if origin in (list, List):
        if not isinstance(value, list):
            raise ConfigError(f"'{where}' must be a list, got {value!r}.")
        (item,) = get_args(hint) or (Any,)
        return [_coerce(v, item, f"{where}[{i}]") for i, v in enumerate(value)]
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"'{where}' must be true or false, got {value!r}.")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"'{where}' must be an integer, got {value!r}.")
        return value
    if hint is float:
        # PyYAML reads exponents without a dot (1e-4) as strings.
        try:
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"'{where}' must be a number, got {value!r}.") from None
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"'{where}' must be a string, got {value!r}.")
        return value
    return value


def from_dict(cls: Type[T], data: Mapping[str, Any], where: str = "") -> T:
    """Builds a config dataclass from a mapping; unknown keys are errors."""
    hints = get_type_hints(cls)
    names = [f.name for f in dataclasses.fields(cls)]  # type: ignore[arg-type]
    kwargs: Dict[str, Any] = {}
    for key, value in data.items():
        path = f"{where}.{key}" if where else str(key)
        if key not in names:
            raise ConfigError(f"Unknown config key '{path}'.{suggest_key(str(key), names)}")
        if key == "selector" and isinstance(value, str):
            if value not in SELECTOR_PRESETS:
                raise ConfigError(
                    f"Unknown selector preset '{value}' at '{path}'."
                    f"{suggest_key(value, sorted(SELECTOR_PRESETS))}"
                )
            value = list(SELECTOR_PRESETS[value])
        kwargs[key] = _coerce(value, hints[key], path)
    return cls(**kwargs)


def validate_config(cfg: RunConfig) -> RunConfig:
    """Checks every section and the cross-section consistency; raises ConfigError."""
    if cfg.version != CONFIG_VERSION:
        raise ConfigError(f"Unsupported config version {cfg.version}; expected {CONFIG_VERSION}.")
    sections = {
        "backbone": cfg.backbone,
        "extractor": cfg.extractor,
        "cross_norm": cfg.cross_norm,
        "dataset": cfg.dataset,
        "train": cfg.train,
        "pretrain": cfg.pretrain,
    }
    for name, section in sections.items():
        try:
            section.validate()  # type: ignore[attr-defined]
        except ValueError as e:
            raise ConfigError(f"Invalid '{name}' section: {e}") from e

    bb, ex = cfg.backbone, cfg.extractor
    if bb.in_channels != 1 or ex.in_channels != 1:
        raise ConfigError("The synthetic dataset is single-channel; backbone and extractor in_channels must be 1.")
    if not bb.image_size == ex.input_size == cfg.dataset.size:
        raise ConfigError(
            f"Image sizes disagree: backbone {bb.image_size}, extractor {ex.input_size}, "
            f"dataset {cfg.dataset.size}."
        )
    if (ex.out_channels, ex.downsample_to) != (bb.level_channels[-1], bb.port_size):
        raise ConfigError(
            f"Extractor output ({ex.out_channels} ch at {ex.downsample_to}px) does not match the "
            f"injection port ({bb.level_channels[-1]} ch at {bb.port_size}px)."
        )
    if cfg.pretrain.architecture != "base":
        raise ConfigError(f"'pretrain.architecture' must be 'base', got '{cfg.pretrain.architecture}'.")
    unknown = [a for a in cfg.compare.architectures if a not in ARCHITECTURES or a == "base"]
    if unknown or not cfg.compare.architectures:
        raise ConfigError(f"'compare.architectures' must list controlnet/controlnext entries, got {cfg.compare.architectures}.")
    if not cfg.compare.seeds:
        raise ConfigError("'compare.seeds' must list at least one seed.")
    if cfg.train.eval_count > cfg.dataset.heldout_count:
        raise ConfigError(
            f"'train.eval_count' ({cfg.train.eval_count}) exceeds 'dataset.heldout_count' "
            f"({cfg.dataset.heldout_count})."
        )
    if not 1 <= cfg.train.sample_steps <= cfg.diffusion.T or not 1 <= cfg.sample.steps <= cfg.diffusion.T:
        raise ConfigError(f"Sampling steps must lie in [1, {cfg.diffusion.T}].")
    if not 1 <= cfg.bench.timestep <= cfg.diffusion.T:
        raise ConfigError(f"'bench.timestep' must lie in [1, {cfg.diffusion.T}].")
    return cfg


def config_from_record(record: Mapping[str, Any]) -> RunConfig:
    return validate_config(from_dict(RunConfig, record))


def load_config(path: str) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f)
    except OSError as e:
        raise ConfigError(f"Cannot read config file '{path}': {e}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"Config file '{path}' is not valid YAML: {e}") from e
    if data is None:
        data = {}
    if not isinstance(data, Mapping):
        raise ConfigError(f"Config file '{path}' must contain a mapping at the top level.")
    if "version" not in data:
        raise ConfigError(f"Config file '{path}' has no 'version' key.")
    cfg = config_from_record(data)
    logger.info(f"Loaded config '{path}' (run '{cfg.run_name}', architecture {cfg.train.architecture}).")
    return cfg


def config_record(cfg: RunConfig) -> Dict[str, Any]:
    return asdict(cfg)


def dump_config(cfg: RunConfig, path: Optional[str] = None) -> str:
    text = yaml.safe_dump(config_record(cfg), sort_keys=False, default_flow_style=False)
    if path is not None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(text)
    return text


def get_env_var(name: str, default: Optional[str] = None) -> Optional[str]:
    return os.environ.get(f"{ENV_PREFIX}{name}", default)


def apply_env(cfg: RunConfig) -> RunConfig:
    """Applies CONTROLLAB_OUTDIR and CONTROLLAB_SEED on top of the file values."""
    outdir = get_env_var("OUTDIR")
    if outdir:
        cfg = dataclasses.replace(cfg, outdir=outdir)
    seed = get_env_var("SEED")
    if seed:
        try:
            cfg = cfg.with_seed(int(seed))
        except ValueError:
            raise ConfigError(f"{ENV_PREFIX}SEED must be an integer, got '{seed}'.") from None
    return cfg
