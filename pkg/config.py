"""
Configuration module for the pathogen detection engine.

Defines one settings dataclass per pipeline stage, composed into Config,
plus loaders for an optional YAML file and command-line overrides.
Precedence: overrides > YAML file > defaults. Defaults are the reference
constants (lr 1e-4, batch 256, thresholds 0.99 / 0.3, window 20, k 16).
"""

import os
from dataclasses import dataclass, field, fields, asdict
from typing import Any, Dict, Optional

import yaml

from errors import ConfigError

VERSION = "0.1.1"
DEFAULT_SEED = 42


@dataclass
class NetworkSettings:
    """Default architecture widths; input_size selects the 20x20 or 30x30 preset."""

    input_size: int = 20
    channels: int = 3
    conv1_filters: int = 32
    fire_squeeze: int = 16
    fire_expand1x1: int = 64
    fire_expand3x3: int = 64
    fire_count: int = 2
    dense_units: int = 56


@dataclass
class TrainSettings:
    """Training loop settings."""

    lr: float = 1e-4
    batch_size: int = 256
    epochs: int = 20
    shuffle: bool = True


@dataclass
class QuantizeSettings:
    """Trained quantization settings."""

    k: int = 16
    finetune_epochs: int = 5
    finetune_lr: float = 1e-4
    finetune_batch_size: int = 256


@dataclass
class DatasetSettings:
    """Patch extraction settings."""

    patch_size: int = 20
    neg_per_image: int = 20
    max_neg_tries: int = 1000
    augment_multiplier: int = 4
    target_pos_fraction: float = 0.3
    test_fraction: float = 0.3


@dataclass
class SynthSettings:
    """Synthetic microscopy generator settings."""

    image_height: int = 100
    image_width: int = 100
    channels: int = 3
    blob_count_min: int = 1
    blob_count_max: int = 4
    sigma_min: float = 1.8
    sigma_max: float = 2.8
    intensity_min: float = 0.55
    intensity_max: float = 0.85
    eccentricity_max: float = 0.6
    background: float = 0.12
    noise: float = 0.03
    min_separation: float = 24.0


@dataclass
class DetectSettings:
    """Sliding-window detection settings; stride None means window // 4."""

    window: int = 20
    stride: Optional[int] = None
    detection_threshold: float = 0.99
    overlap_threshold: float = 0.3
    batch_size: int = 256
    match_iou: float = 0.3


@dataclass
class BenchSettings:
    """Inference benchmark settings."""

    count: int = 1000
    warmup: int = 50
    batch_size: int = 64


@dataclass
class Config:
    """
    Configuration for the whole pipeline.

    Sections:
        network, train, quantize, dataset, synth, detect, bench

    Shared attributes govern seeding, parallelism and console verbosity.
    """

    seed: int = DEFAULT_SEED
    workers: int = 1
    verbose: bool = False  # per-epoch progress
    very_verbose: bool = False  # per-batch detail (requires verbose)
    network: NetworkSettings = field(default_factory=NetworkSettings)
    train: TrainSettings = field(default_factory=TrainSettings)
    quantize: QuantizeSettings = field(default_factory=QuantizeSettings)
    dataset: DatasetSettings = field(default_factory=DatasetSettings)
    synth: SynthSettings = field(default_factory=SynthSettings)
    detect: DetectSettings = field(default_factory=DetectSettings)
    bench: BenchSettings = field(default_factory=BenchSettings)

    def validate(self) -> None:
        """
        Check value ranges.

        Raises:
            ConfigError: On the first out-of-range value
        """
        checks = [
            (self.seed >= 0, "seed must be >= 0"),
            (self.workers >= 1, "workers must be >= 1"),
            (self.network.input_size >= 8, "network.input_size must be >= 8"),
            (self.train.lr >= 0, "train.lr must be >= 0"),
            (self.train.batch_size >= 1, "train.batch_size must be >= 1"),
            (self.train.epochs >= 0, "train.epochs must be >= 0"),
            (self.quantize.k >= 2, "quantize.k must be >= 2"),
            (self.quantize.k <= 256, "quantize.k must be <= 256"),
            (self.quantize.finetune_lr >= 0, "quantize.finetune_lr must be >= 0"),
            (self.dataset.augment_multiplier >= 1, "dataset.augment_multiplier must be >= 1"),
            (0 < self.dataset.target_pos_fraction < 1, "dataset.target_pos_fraction must be in (0, 1)"),
            (0 < self.dataset.test_fraction < 1, "dataset.test_fraction must be in (0, 1)"),
            (0 < self.detect.detection_threshold < 1, "detect.detection_threshold must be in (0, 1)"),
            (0 < self.detect.overlap_threshold < 1, "detect.overlap_threshold must be in (0, 1)"),
            (0 < self.detect.match_iou < 1, "detect.match_iou must be in (0, 1)"),
            (self.detect.stride is None or self.detect.stride >= 1, "detect.stride must be >= 1"),
            (self.bench.count >= 1, "bench.count must be >= 1"),
            (self.bench.warmup >= 0, "bench.warmup must be >= 0"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)

    def to_dict(self) -> Dict[str, Any]:
        """Convert to dictionary (recorded in run manifests)."""
        return asdict(self)


SECTIONS = ("network", "train", "quantize", "dataset", "synth", "detect", "bench")
RUNTIME_KEYS = ("seed", "workers", "verbose", "very_verbose")


def load_yaml_config(yaml_file_path: str) -> dict:
    """
    Load configuration values from a YAML file.

    Args:
        yaml_file_path: Path to YAML config file

    Returns:
        Configuration dictionary (empty for an empty file)

    Raises:
        FileNotFoundError: If YAML file doesn't exist
        ConfigError: If the file is not a mapping or is invalid YAML
    """
    if not os.path.exists(yaml_file_path):
        raise FileNotFoundError(f"Config file not found: {yaml_file_path}")

    with open(yaml_file_path, "r", encoding="utf-8") as f:
        try:
            config_data = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ConfigError(f"Invalid YAML in {yaml_file_path}: {e}") from e

    if config_data is None:
        return {}
    if not isinstance(config_data, dict):
        raise ConfigError(f"{yaml_file_path}: top level must be a mapping")
    return config_data


def _apply_section(target: Any, values: dict, where: str) -> None:
    known = {f.name for f in fields(target)}
    for key, value in values.items():
        if key not in known:
            raise ConfigError(f"Unknown setting '{where}.{key}'")
        setattr(target, key, value)


def apply_mapping(config: Config, data: dict) -> Config:
    """
    Apply a nested mapping (YAML layout) onto config.

    Top-level keys are section names, plus a 'runtime' section holding
    seed / workers / verbose / very_verbose.
    """
    for section, values in data.items():
        if section == "runtime":
            if not isinstance(values, dict):
                raise ConfigError("Section 'runtime' must be a mapping")
            for key, value in values.items():
                if key not in RUNTIME_KEYS:
                    raise ConfigError(f"Unknown setting 'runtime.{key}'")
                setattr(config, key, value)
        elif section in SECTIONS:
            if not isinstance(values, dict):
                raise ConfigError(f"Section '{section}' must be a mapping")
            _apply_section(getattr(config, section), values, section)
        else:
            raise ConfigError(f"Unknown config section '{section}'")
    return config


def load_config(
    yaml_file_path: Optional[str] = None,
    overrides: Optional[Dict[str, Any]] = None,
    verbose: bool = False,
    very_verbose: bool = False
) -> Config:
    """
    Load configuration with optional file and overrides.

    Args:
        yaml_file_path: Optional YAML config file
        overrides: Dotted names to values, e.g. {"train.lr": 1e-3, "seed": 7};
            None values are ignored so unset command-line flags fall through
        verbose: Enable verbose mode
        very_verbose: Enable very verbose mode (implies verbose)

    Returns:
        Validated Config object
    """
    config = Config()

    if yaml_file_path:
        apply_mapping(config, load_yaml_config(yaml_file_path))

    for name, value in (overrides or {}).items():
        if value is None:
            continue
        if "." in name:
            section, key = name.split(".", 1)
            if section not in SECTIONS:
                raise ConfigError(f"Unknown config section '{section}'")
            _apply_section(getattr(config, section), {key: value}, section)
        elif name in RUNTIME_KEYS:
            setattr(config, name, value)
        else:
            raise ConfigError(f"Unknown setting '{name}'")

    if verbose:
        config.verbose = True
    if very_verbose:
        config.very_verbose = True
        config.verbose = True  # Very verbose implies verbose

    config.validate()
    return config
