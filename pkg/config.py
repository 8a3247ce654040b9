"""
Configuration constants and the run configuration loader for LapDAE
"""

import configparser
import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Tuple, Union

from dotenv import load_dotenv

from lapdae.errors import ConfigError, UsageError
from lapdae.model import ArchConfig, LAYER_TAGS, PIXELS_TAG, build_arch
from lapdae.optim import MODES, TrainConfig
from lapdae.pyramid import RANDOM_LEVEL, CorruptionSpec

logger = logging.getLogger(__name__)

# Optimisation defaults
DEFAULT_LR = 1e-4
DEFAULT_LR_DECAY_FACTOR = 0.1
DEFAULT_LR_DECAY_EVERY = 20
DEFAULT_BATCH_SIZE = 128
DEFAULT_EPOCHS = {"mnist": 30, "cifar10": 50}

# Corruption defaults
DEFAULT_SIGMA = 25.0
DEFAULT_PYRAMID_LEVELS = 5
DEFAULT_CORRUPTION_COPIES = 1

# Evaluation defaults
DEFAULT_METRICS = ("recon", "knn", "probe")
DEFAULT_K = 5
DEFAULT_KNN_QUERIES = 1000
DEFAULT_PROBE_EPOCHS = 20
DEFAULT_PROBE_LR = 1e-3
DEFAULT_PROBE_TRAIN_SIZE = 10000
DEFAULT_EMBEDDING_BUDGET = 9216
DEFAULT_HELD_OUT_SIZE = 512

# Horizontal flip per dataset; flipped digits change identity
DEFAULT_FLIP = {"mnist": False, "cifar10": True}

DATA_DIR_ENV = "LAPDAE_DATA_DIR"
DEFAULT_CONFIG_FILE = "configuration.ini"
DEFAULT_RUNS_DIR = "runs"

# keys that only locate files or tune throughput; they do not change results
NON_RESULT_KEYS = ("data_dir", "runs_dir", "log_level", "workers")


def parse_int_list(text: str) -> Tuple[int, ...]:
    return tuple(int(part) for part in str(text).split(",") if part.strip())


def parse_optional_int(text: str) -> Optional[int]:
    return None if str(text).strip().lower() in ("", "none", "all") else int(text)


def parse_bool(text: str) -> bool:
    value = str(text).strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_level(text: str) -> Union[int, str]:
    return RANDOM_LEVEL if str(text).strip() == RANDOM_LEVEL else int(text)


LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")


def parse_log_level(text: str) -> Optional[str]:
    value = str(text).strip().upper()
    return None if value in ("", "NONE") else value


def parse_optional_floats(text: str) -> Optional[Tuple[float, ...]]:
    if str(text).strip().lower() in ("", "none"):
        return None
    return tuple(float(part) for part in str(text).split(",") if part.strip())


def parse_layers(text: Union[str, List[str], Tuple[str, ...]]) -> Tuple[str, ...]:
    """
    Expand a layer selection such as 'conv1..bottleneck', 'conv2,conv4' or 'pixels'

    Raises:
        UsageError: Unknown tag or an empty/backwards range
    """
    if not isinstance(text, str):
        text = ",".join(text)
    order = LAYER_TAGS + (PIXELS_TAG,)
    selected: List[str] = []
    for part in (p.strip() for p in text.split(",") if p.strip()):
        if ".." in part:
            start, end = (s.strip() for s in part.split("..", 1))
            if start not in LAYER_TAGS or end not in LAYER_TAGS or LAYER_TAGS.index(start) > LAYER_TAGS.index(end):
                raise UsageError(f"Invalid layer range '{part}' (layers in order: {', '.join(LAYER_TAGS)})")
            selected.extend(LAYER_TAGS[LAYER_TAGS.index(start):LAYER_TAGS.index(end) + 1])
        elif part in order:
            selected.append(part)
        else:
            raise UsageError(f"Unknown layer tag '{part}' (valid: {', '.join(order)})")
    if not selected:
        raise UsageError("No layer selected")
    return tuple(dict.fromkeys(selected))


@dataclass
class RunConfig:
    """Everything a run needs: dataset selection, model plan, training, corruption, evaluation"""

    # [data]
    dataset: str = "mnist"
    data_dir: Optional[str] = None
    subset: Optional[int] = None
    test_subset: Optional[int] = None
    held_out_size: int = DEFAULT_HELD_OUT_SIZE
    flip: Optional[bool] = None
    # [model]
    encoder_channels: Tuple[int, ...] = (32, 32, 64, 64)
    encoder_strides: Tuple[int, ...] = (1, 2, 1, 2)
    decoder_channels: Tuple[int, ...] = (32, 16)
    decoder_strides: Tuple[int, ...] = (2, 2, 1)
    kernel: int = 3
    # [train]
    mode: str = "lapdae"
    epochs: Optional[int] = None
    batch_size: int = DEFAULT_BATCH_SIZE
    base_lr: float = DEFAULT_LR
    lr_decay_factor: float = DEFAULT_LR_DECAY_FACTOR
    lr_decay_every_epochs: int = DEFAULT_LR_DECAY_EVERY
    seed: int = 0
    workers: int = 1
    checkpoint_every: int = 5
    # [corruption]
    sigma: float = DEFAULT_SIGMA
    levels: int = DEFAULT_PYRAMID_LEVELS
    level: Union[int, str] = RANDOM_LEVEL
    copies: int = DEFAULT_CORRUPTION_COPIES
    level_sigma_scale: Optional[Tuple[float, ...]] = None
    # [eval]
    metrics: Tuple[str, ...] = DEFAULT_METRICS
    layers: Tuple[str, ...] = ("bottleneck",)
    k: int = DEFAULT_K
    queries: Optional[int] = DEFAULT_KNN_QUERIES
    distance: str = "euclidean"
    probe_epochs: int = DEFAULT_PROBE_EPOCHS
    probe_lr: float = DEFAULT_PROBE_LR
    probe_train_size: Optional[int] = DEFAULT_PROBE_TRAIN_SIZE
    budget: int = DEFAULT_EMBEDDING_BUDGET
    # [run]
    runs_dir: str = DEFAULT_RUNS_DIR
    log_level: Optional[str] = None  # unset: LAPDAE_LOG_LEVEL, then INFO

    @property
    def in_channels(self) -> int:
        return 3 if self.dataset == "cifar10" else 1

    def arch(self) -> ArchConfig:
        return build_arch(self.in_channels, self.encoder_channels, self.encoder_strides,
                          self.decoder_channels, self.decoder_strides, self.kernel)

    def corruption_set(self) -> Tuple[CorruptionSpec, ...]:
        spec = CorruptionSpec(level=self.level, sigma=self.sigma, seed=self.seed, level_scale=self.level_sigma_scale)
        return tuple(spec for _ in range(self.copies))

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            base_lr=self.base_lr,
            lr_decay_factor=self.lr_decay_factor,
            lr_decay_every_epochs=self.lr_decay_every_epochs,
            batch_size=self.batch_size,
            epochs=self.epochs,
            corruptions=self.corruption_set(),
            pyramid_levels=self.levels,
            mode=self.mode,
            seed=self.seed,
            flip=self.flip,
            workers=self.workers,
        )

    def to_dict(self) -> Dict[str, Any]:
        return {key: list(value) if isinstance(value, tuple) else value for key, value in asdict(self).items()}

    def fingerprint(self) -> str:
        """First 12 hex chars of SHA-256 over the canonical JSON of the result-relevant keys"""
        relevant = {key: value for key, value in self.to_dict().items() if key not in NON_RESULT_KEYS}
        canonical = json.dumps(relevant, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]

    def validate(self) -> "RunConfig":
        if self.dataset not in DEFAULT_EPOCHS:
            raise ConfigError(f"Unknown dataset '{self.dataset}' (valid: {', '.join(DEFAULT_EPOCHS)})")
        if self.epochs is None:
            self.epochs = DEFAULT_EPOCHS[self.dataset]
        if self.flip is None:
            self.flip = DEFAULT_FLIP[self.dataset]
        if self.log_level is not None and self.log_level not in LOG_LEVELS:
            raise ConfigError(f"Unknown log level '{self.log_level}' (valid: {', '.join(LOG_LEVELS)})")
        if self.mode not in MODES:
            raise ConfigError(f"Unknown mode '{self.mode}' (valid: {', '.join(MODES)})")
        if self.copies < 1:
            raise ConfigError(f"copies (|C|) must be >= 1, got {self.copies}")
        unknown = [m for m in self.metrics if m not in DEFAULT_METRICS]
        if unknown:
            raise ConfigError(f"Unknown metric(s) {', '.join(unknown)} (valid: {', '.join(DEFAULT_METRICS)})")
        if self.k < 1 or self.budget < 1 or self.held_out_size < 0 or self.checkpoint_every < 0:
            raise ConfigError("k >= 1, budget >= 1, held_out_size >= 0 and checkpoint_every >= 0 required")
        self.arch()
        self.train_config().validate()
        return self


# section -> key -> parser
SCHEMA: Dict[str, Dict[str, Callable[[str], Any]]] = {
    "data": {
        "dataset": str, "data_dir": str, "subset": parse_optional_int, "test_subset": parse_optional_int,
        "held_out_size": int, "flip": parse_bool,
    },
    "model": {
        "encoder_channels": parse_int_list, "encoder_strides": parse_int_list,
        "decoder_channels": parse_int_list, "decoder_strides": parse_int_list, "kernel": int,
    },
    "train": {
        "mode": str, "epochs": int, "batch_size": int, "base_lr": float, "lr_decay_factor": float,
        "lr_decay_every_epochs": int, "seed": int, "workers": int, "checkpoint_every": int,
    },
    "corruption": {
        "sigma": float, "levels": int, "level": parse_level, "copies": int,
        "level_sigma_scale": parse_optional_floats,
    },
    "eval": {
        "metrics": lambda text: tuple(m.strip() for m in text.split(",") if m.strip()),
        "layers": parse_layers, "k": int, "queries": parse_optional_int, "distance": str,
        "probe_epochs": int, "probe_lr": float, "probe_train_size": parse_optional_int, "budget": int,
    },
    "run": {"runs_dir": str, "log_level": parse_log_level},
}
FIELD_NAMES = {f.name for f in fields(RunConfig)}


def read_config_file(path: Union[str, Path]) -> Dict[str, Any]:
    """
    Parse an INI run configuration into RunConfig keyword values

    Raises:
        ConfigError: Missing file, unknown section/key or unparsable value
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"Configuration file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as e:
        raise ConfigError(f"{path.name}: {e}") from e

    values: Dict[str, Any] = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"{path.name}: unknown section [{section}] (valid: {', '.join(SCHEMA)})")
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"{path.name}: unknown key '{key}' in [{section}] "
                                  f"(valid: {', '.join(SCHEMA[section])})")
            try:
                values[key] = SCHEMA[section][key](raw)
            except (ValueError, UsageError) as e:
                raise ConfigError(f"{path.name}: invalid value for [{section}] {key} = {raw!r}: {e}") from e
    return values


def load_run_config(path: Optional[Union[str, Path]] = None, overrides: Optional[Mapping[str, Any]] = None,
                    base: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """
    Resolve the run configuration: defaults, then ``base`` (e.g. the config stored in a
    checkpoint), then the INI file, then CLI overrides

    Args:
        path: Optional INI file
        overrides: Attribute -> value; None values are ignored
        base: Optional resolved values to start from

    Returns:
        Validated RunConfig with data_dir, epochs and flip resolved
    """
    load_dotenv()
    values: Dict[str, Any] = {}
    for key, value in (base or {}).items():
        if key in FIELD_NAMES:
            values[key] = tuple(value) if isinstance(value, list) else value
    values.update(read_config_file(path) if path else {})
    for key, value in (overrides or {}).items():
        if key not in FIELD_NAMES:
            raise ConfigError(f"Unknown configuration override '{key}'")
        if value is not None:
            values[key] = value

    cfg = RunConfig(**values)
    if not cfg.data_dir:
        cfg.data_dir = os.getenv(DATA_DIR_ENV)
    return cfg.validate()


def write_config(cfg: RunConfig, path: Union[str, Path]) -> Path:
    """Write the resolved configuration as an INI file that load_run_config reads back"""
    data = cfg.to_dict()
    parser = configparser.ConfigParser(interpolation=None)
    for section, keys in SCHEMA.items():
        parser[section] = {}
        for key in keys:
            value = data[key]
            if isinstance(value, list):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            parser[section][key] = "none" if value is None else str(value)
    if data.get("data_dir") is None:
        parser.remove_option("data", "data_dir")
    if data.get("level_sigma_scale") is None:
        parser["corruption"]["level_sigma_scale"] = "none"
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"# fingerprint = {cfg.fingerprint()}\n")
        parser.write(f)
    return path
