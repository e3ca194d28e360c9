# src/core.py
"""
CORE
----
Domain types, seeded randomness, numerical guards, the experiment
configuration (RunConfig) and logging setup shared by every other module.

- Process settings (output root, logging) come from .env via decouple
- RunConfig is a flat `key = value` file; unknown keys are an error
- All randomness flows from seeded_rng / derive_seed
- Persisted artifacts are written atomically (temp file + replace)
"""
from __future__ import annotations

import logging
import math
import os
import shutil
import sys
import tempfile
from dataclasses import dataclass, field, fields, replace
from datetime import datetime, timezone
from enum import Enum
from logging.handlers import RotatingFileHandler
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from decouple import Choices, Config, Csv, RepositoryEmpty, config

# ---------------------------------------
# Configuration from .env
# ---------------------------------------
OUTPUT_ROOT = Path(config('CXR_DISTILL_OUTPUT_ROOT', default='runs'))
LOG_DIR = Path(config('LOG_DIR', default='logs'))
LOG_FILE = config('LOG_FILE', default='cxr_distill.log')
LOG_MAX_BYTES = config('LOG_MAX_BYTES', default=10_485_760, cast=int)  # 10MB
LOG_BACKUP_COUNT = config('LOG_BACKUP_COUNT', default=5, cast=int)
LOG_LEVEL = config('LOG_LEVEL', default='INFO')

# Probability clamp applied before every logarithm
EPSILON = 1e-7

logger = logging.getLogger('cxr_distill')


def get_logger(name: str) -> logging.Logger:
    """Child logger of the package logger, e.g. 'cxr_distill.losses'."""
    return logging.getLogger(f'cxr_distill.{name}')


def setup_logging(level: Optional[str] = None, log_dir: Optional[Path] = None) -> logging.Logger:
    """
    Attach a rotating logfile handler and a console handler to the package logger.
    Safe to call more than once; handlers are only added the first time.
    """
    logger.setLevel(getattr(logging, (level or LOG_LEVEL).upper(), logging.INFO))
    if getattr(logger, '_cxr_configured', False):
        return logger

    formatter = logging.Formatter('%(asctime)s [%(levelname)s] %(message)s')

    target_dir = Path(log_dir) if log_dir is not None else LOG_DIR
    try:
        target_dir.mkdir(parents=True, exist_ok=True)
        handler = RotatingFileHandler(target_dir / LOG_FILE, maxBytes=LOG_MAX_BYTES, backupCount=LOG_BACKUP_COUNT)
        handler.setFormatter(formatter)
        logger.addHandler(handler)
    except OSError as e:
        # Read-only checkouts still get console logging
        print(f"Log directory {target_dir} not writable ({e}); logging to console only", file=sys.stderr)

    # Also log to console
    console_handler = logging.StreamHandler(sys.stdout)
    console_handler.setFormatter(formatter)
    logger.addHandler(console_handler)

    logger._cxr_configured = True
    return logger


# ---------------------------------------
# Errors
# ---------------------------------------
class DistillError(Exception):
    """Root of every error raised by this package."""


class ConfigError(DistillError, ValueError):
    """Invalid or unparseable configuration."""


class ParameterError(DistillError, ValueError):
    """An operation parameter is outside its domain (e.g. T <= 0, p < 1)."""


class ValidationError(DistillError, ValueError):
    """A domain type was constructed with values violating its invariants."""


class DimensionError(DistillError, ValueError):
    """Shapes or lengths that must agree do not."""


class NumericalError(DistillError, ArithmeticError):
    """NaN/Inf values, usually a corrupted upstream computation or diverging loss."""


class ManifestParseError(DistillError, ValueError):
    """A manifest row or cell violates the manifest grammar."""

    def __init__(self, message: str, row: Optional[int] = None, column: Optional[str] = None):
        super().__init__(message)
        self.row = row
        self.column = column


class ImageLoadError(DistillError, OSError):
    """An image referenced by a sample could not be decoded."""

    def __init__(self, message: str, sample_id: str):
        super().__init__(message)
        self.sample_id = sample_id


class RegistryError(DistillError, LookupError):
    """Unknown backbone name or inconsistent backbone registry."""


class CheckpointError(DistillError, ValueError):
    """Checkpoint file is corrupt, of another version, or does not match its spec."""


class RecordStoreError(DistillError, ValueError):
    """Record store file is corrupt or of an unsupported version."""


class StageError(DistillError, RuntimeError):
    """A training stage could not run to completion."""


class ChecksumMismatchError(StageError):
    """A record store is not bound to the checkpoint it is used with."""


class MissingRecordError(StageError):
    """A training sample has no distillation record."""

    def __init__(self, message: str, sample_id: str):
        super().__init__(message)
        self.sample_id = sample_id


class OutputDirError(DistillError, FileExistsError):
    """Output directory is populated or locked by another run."""


# ---------------------------------------
# Enumerations
# ---------------------------------------
class NetworkRole(str, Enum):
    TEACHER = 'teacher'
    ASSISTANT = 'assistant'
    STUDENT = 'student'


class SoftLabelMode(str, Enum):
    SOFTMAX = 'softmax'
    SIGMOID = 'per-class-sigmoid'


class LabelPolicy(str, Enum):
    U_ZEROS = 'u_zeros'
    U_ONES = 'u_ones'
    U_IGNORE = 'u_ignore'


class SamplingMode(str, Enum):
    NONE = 'none'
    UNDERSAMPLE = 'undersample_majority'
    OVERSAMPLE = 'oversample_minority'
    BOTH = 'both'


class FeatureReference(str, Enum):
    ASSISTANT = 'assistant'
    TEACHER = 'teacher'


class FeatureMode(str, Enum):
    OFFLINE = 'offline'
    ONLINE = 'online'


class MissingImagePolicy(str, Enum):
    ABORT = 'abort'
    SKIP = 'skip'


# ---------------------------------------
# Deterministic randomness
# ---------------------------------------
def seeded_rng(seed: int) -> np.random.Generator:
    """Deterministic random source; equal seeds give identical streams."""
    if isinstance(seed, bool) or not isinstance(seed, (int, np.integer)) or seed < 0:
        raise ParameterError(f"seed must be a non-negative integer (got {seed!r})")
    return np.random.default_rng(int(seed))


def child_rng(seed: int, worker_index: int) -> np.random.Generator:
    """Independent stream for one worker, derived from (seed, worker_index)."""
    return seeded_rng(derive_seed(seed, worker_index))


def derive_seed(seed: int, *path: int) -> int:
    """Stable 32-bit seed for a named sub-task, e.g. derive_seed(seed, role_code, member)."""
    if seed < 0 or any(p < 0 for p in path):
        raise ParameterError(f"seed path must be non-negative (got {(seed, *path)})")
    return int(np.random.SeedSequence([int(seed), *map(int, path)]).generate_state(1, dtype=np.uint32)[0])


def torch_generator(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(int(seed))


def configure_determinism(deterministic: bool) -> None:
    """Single-threaded, deterministic torch kernels when requested."""
    if deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True, warn_only=True)


# ---------------------------------------
# Domain types
# ---------------------------------------
Tensorish = Union[torch.Tensor, Sequence[float], np.ndarray]


def _all_finite(values: Sequence[float]) -> bool:
    return all(math.isfinite(float(v)) for v in values)


@dataclass(frozen=True)
class LabelVector:
    """Hard per-class {0, 1} targets for one sample."""
    values: Tuple[int, ...]

    def __post_init__(self):
        values = tuple(self.values)
        if not _all_finite(values):
            raise NumericalError(f"LabelVector contains non-finite values: {values}")
        if any(float(v) not in (0.0, 1.0) for v in values):
            raise ValidationError(f"LabelVector values must be 0 or 1 (got {values})")
        object.__setattr__(self, 'values', tuple(int(v) for v in values))

    def __len__(self) -> int:
        return len(self.values)

    def check_length(self, class_count: int) -> None:
        if len(self.values) != class_count:
            raise DimensionError(f"LabelVector has {len(self.values)} classes, expected {class_count}")

    def as_tensor(self, dtype: torch.dtype = torch.float64) -> torch.Tensor:
        return torch.tensor(self.values, dtype=dtype)


@dataclass(frozen=True)
class SoftLabelVector:
    """Temperature-softened per-class confidences."""
    values: Tuple[float, ...]
    temperature: float
    mode: SoftLabelMode = SoftLabelMode.SIGMOID

    def __post_init__(self):
        values = tuple(float(v) for v in self.values)
        if not _all_finite(values) or not math.isfinite(self.temperature):
            raise NumericalError(f"SoftLabelVector contains non-finite values: {values}, T={self.temperature}")
        if self.temperature <= 0:
            raise ParameterError(f"temperature must be > 0 (got {self.temperature})")
        if any(v < 0.0 or v > 1.0 for v in values):
            raise ValidationError(f"soft labels must lie in [0, 1] (got {values})")
        mode = SoftLabelMode(self.mode)
        if mode is SoftLabelMode.SOFTMAX and abs(math.fsum(values) - 1.0) > 1e-6:
            raise ValidationError(f"softmax soft labels must sum to 1 (sum={math.fsum(values)})")
        object.__setattr__(self, 'values', values)
        object.__setattr__(self, 'temperature', float(self.temperature))
        object.__setattr__(self, 'mode', mode)

    def __len__(self) -> int:
        return len(self.values)

    def as_tensor(self, dtype: torch.dtype = torch.float64) -> torch.Tensor:
        return torch.tensor(self.values, dtype=dtype)


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """
    Activation tensor tapped at a named layer. Shape (channels, height, width),
    or (batch, channels, height, width) for a batch of maps.
    """
    tensor: torch.Tensor
    tap_name: str
    producer_role: NetworkRole

    def __post_init__(self):
        if not isinstance(self.tensor, torch.Tensor):
            object.__setattr__(self, 'tensor', torch.as_tensor(np.asarray(self.tensor, dtype=np.float32)))
        if self.tensor.dim() not in (3, 4) or any(d < 1 for d in self.tensor.shape):
            raise DimensionError(f"FeatureMap '{self.tap_name}' needs shape (C, H, W) with all dims >= 1 "
                                 f"(got {tuple(self.tensor.shape)})")
        if not bool(torch.isfinite(self.tensor).all()):
            raise NumericalError(f"FeatureMap '{self.tap_name}' contains NaN/Inf")
        object.__setattr__(self, 'producer_role', NetworkRole(self.producer_role))

    @property
    def is_batched(self) -> bool:
        return self.tensor.dim() == 4

    @property
    def channels(self) -> int:
        return int(self.tensor.shape[-3])

    def batched(self) -> torch.Tensor:
        return self.tensor if self.is_batched else self.tensor.unsqueeze(0)


@dataclass(frozen=True, eq=False)
class PredictionVector:
    """Logits and the probabilities derived from them, shape (C,) or (batch, C)."""
    logits: torch.Tensor
    probabilities: torch.Tensor

    def __post_init__(self):
        if self.logits.shape != self.probabilities.shape:
            raise DimensionError(f"logits {tuple(self.logits.shape)} and probabilities "
                                 f"{tuple(self.probabilities.shape)} differ in shape")
        if self.logits.dim() not in (1, 2):
            raise DimensionError(f"PredictionVector expects (C,) or (batch, C), got {tuple(self.logits.shape)}")
        if not bool(torch.isfinite(self.logits).all()):
            raise NumericalError("PredictionVector logits contain NaN/Inf")

    @classmethod
    def from_logits(cls, logits: Tensorish, mode: SoftLabelMode = SoftLabelMode.SIGMOID) -> 'PredictionVector':
        logits = logits if isinstance(logits, torch.Tensor) else torch.tensor(np.asarray(logits), dtype=torch.float64)
        if SoftLabelMode(mode) is SoftLabelMode.SOFTMAX:
            probabilities = torch.softmax(logits, dim=-1)
        else:
            probabilities = torch.sigmoid(logits)
        return cls(logits=logits, probabilities=probabilities)

    @property
    def class_count(self) -> int:
        return int(self.logits.shape[-1])


def clamp_probability_tensor(probabilities: torch.Tensor) -> torch.Tensor:
    """Clamp into [EPSILON, 1 - EPSILON]; NaN means upstream corruption."""
    if bool(torch.isnan(probabilities).any()):
        logger.error("NaN probabilities reached the clamp: upstream computation is corrupted")
        raise NumericalError("NaN probabilities: corrupted upstream computation")
    return probabilities.clamp(EPSILON, 1.0 - EPSILON)


def clamp_probabilities(p: PredictionVector) -> PredictionVector:
    """Return p with probabilities clamped to [1e-7, 1 - 1e-7]; interior values unchanged."""
    return PredictionVector(logits=p.logits, probabilities=clamp_probability_tensor(p.probabilities))


# ---------------------------------------
# Run configuration
# ---------------------------------------
@dataclass(frozen=True)
class StageHParams:
    learning_rate: float = 1e-3
    weight_decay: float = 1e-5
    epochs: int = 5
    batch_size: int = 32

    def problems(self, prefix: str) -> List[str]:
        found = []
        if not math.isfinite(self.learning_rate) or self.learning_rate <= 0:
            found.append(f"{prefix}_learning_rate must be > 0 (got {self.learning_rate})")
        if not math.isfinite(self.weight_decay) or self.weight_decay < 0:
            found.append(f"{prefix}_weight_decay must be >= 0 (got {self.weight_decay})")
        if self.epochs < 0:
            found.append(f"{prefix}_epochs must be >= 0 (got {self.epochs})")
        if self.batch_size < 1:
            found.append(f"{prefix}_batch_size must be >= 1 (got {self.batch_size})")
        return found


def _default_stages() -> Dict[NetworkRole, StageHParams]:
    return {role: StageHParams() for role in NetworkRole}


@dataclass(frozen=True)
class RunConfig:
    """
    Full experiment description. Defaults follow the CheXpert-style profile
    (five classes, T = 20, per-class sigmoid soft labels).
    """
    class_count: int = 5
    class_names: Tuple[str, ...] = ()
    temperature: float = 20.0
    lambda1: float = 1.0
    lambda2: float = 1.0
    wasserstein_p: int = 2
    seed: int = 0
    label_policy: LabelPolicy = LabelPolicy.U_ZEROS
    sampling_policy: SamplingMode = SamplingMode.NONE
    sampling_target_ratio: float = 1.0
    sampling_target_class: str = ''
    soft_label_mode: SoftLabelMode = SoftLabelMode.SIGMOID
    soft_target_scale_learner: bool = True
    feature_reference: FeatureReference = FeatureReference.ASSISTANT
    feature_mode: FeatureMode = FeatureMode.OFFLINE
    align_size: int = 4
    teacher_backbones: Tuple[str, ...] = ('tiny-b6', 'tiny-b7')
    assistant_backbone: str = 'tiny-densenet'
    student_backbone: str = 'student-3block'
    image_size: int = 64
    manifest: str = ''
    validation_fraction: float = 0.2
    threshold: float = 0.5
    num_workers: int = 0
    deterministic: bool = True
    missing_image_policy: MissingImagePolicy = MissingImagePolicy.ABORT
    ablation_seeds: Tuple[int, ...] = (0, 1, 2)
    synth_n_samples: int = 300
    synth_single_positive: bool = False
    synth_class_prior: Tuple[float, ...] = ()
    synth_noise: float = 0.25
    stage_hparams: Mapping[NetworkRole, StageHParams] = field(default_factory=_default_stages)

    def __post_init__(self):
        problems = self._problems()
        if problems:
            message = "; ".join(problems)
            logger.error(f"Invalid run configuration: {message}")
            raise ConfigError(message)

    def _problems(self) -> List[str]:
        found = []
        if self.class_count < 1:
            found.append(f"class_count must be >= 1 (got {self.class_count})")
        if self.class_names:
            if len(self.class_names) != self.class_count:
                found.append(f"class_names lists {len(self.class_names)} names but class_count is {self.class_count}")
            if len(set(self.class_names)) != len(self.class_names):
                found.append("class_names must be unique")
            if any(not n or any(ch in n for ch in ',#\n=') for n in self.class_names):
                found.append("class_names must be non-empty and free of ',', '#', '=' and newlines")
        if not math.isfinite(self.temperature) or self.temperature <= 0:
            found.append(f"temperature must be > 0 (got {self.temperature})")
        for name in ('lambda1', 'lambda2'):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                found.append(f"{name} must be >= 0 (got {value})")
        if self.wasserstein_p < 1:
            found.append(f"wasserstein_p must be >= 1 (got {self.wasserstein_p})")
        if self.seed < 0:
            found.append(f"seed must be >= 0 (got {self.seed})")
        if not math.isfinite(self.sampling_target_ratio) or self.sampling_target_ratio <= 0:
            found.append(f"sampling_target_ratio must be > 0 (got {self.sampling_target_ratio})")
        elif (self.sampling_policy != SamplingMode.NONE and not self.sampling_target_class
              and self.sampling_target_ratio != 1.0):
            found.append(f"sampling_target_ratio needs sampling_target_class (got {self.sampling_target_ratio} "
                         f"with grouped resampling)")
        if self.sampling_target_class and self.sampling_target_class not in self.resolved_class_names():
            found.append(f"sampling_target_class '{self.sampling_target_class}' is not a configured class")
        if self.align_size < 1:
            found.append(f"align_size must be >= 1 (got {self.align_size})")
        if not self.teacher_backbones:
            found.append("teacher_backbones must name at least one backbone")
        if self.image_size < 8:
            found.append(f"image_size must be >= 8 (got {self.image_size})")
        if not (0.0 <= self.validation_fraction < 1.0):
            found.append(f"validation_fraction must be in [0, 1) (got {self.validation_fraction})")
        if not (0.0 < self.threshold < 1.0):
            found.append(f"threshold must be in (0, 1) (got {self.threshold})")
        if self.num_workers < 0:
            found.append(f"num_workers must be >= 0 (got {self.num_workers})")
        if not self.ablation_seeds or any(s < 0 for s in self.ablation_seeds):
            found.append(f"ablation_seeds must be non-empty and non-negative (got {self.ablation_seeds})")
        if self.synth_n_samples < 1:
            found.append(f"synth_n_samples must be >= 1 (got {self.synth_n_samples})")
        if self.synth_class_prior:
            if len(self.synth_class_prior) != self.class_count:
                found.append(f"synth_class_prior needs {self.class_count} values (got {len(self.synth_class_prior)})")
            if any(not math.isfinite(p) or p < 0 or p > 1 for p in self.synth_class_prior):
                found.append("synth_class_prior values must lie in [0, 1]")
        if not math.isfinite(self.synth_noise) or not (0.0 <= self.synth_noise < 0.5):
            found.append(f"synth_noise must be in [0, 0.5) (got {self.synth_noise})")
        if set(self.stage_hparams) != set(NetworkRole):
            found.append("stage_hparams must define teacher, assistant and student")
        else:
            for role in NetworkRole:
                found.extend(self.stage_hparams[role].problems(role.value))
        return found

    # -- accessors -------------------------------------------------------
    def stage(self, role: NetworkRole) -> StageHParams:
        return self.stage_hparams[NetworkRole(role)]

    def resolved_class_names(self) -> Tuple[str, ...]:
        return self.class_names or tuple(f'class_{i}' for i in range(self.class_count))

    def with_overrides(self, overrides: Sequence[str]) -> 'RunConfig':
        return RunConfig.from_text(self.to_text(), overrides=overrides, origin='config')

    def with_stage(self, role: NetworkRole, **changes: Any) -> 'RunConfig':
        stages = dict(self.stage_hparams)
        stages[NetworkRole(role)] = replace(stages[NetworkRole(role)], **changes)
        return replace(self, stage_hparams=stages)

    # -- serialization ---------------------------------------------------
    @classmethod
    def keys(cls) -> List[str]:
        return [key for key, _ in _SCHEMA]

    @classmethod
    def default_items(cls) -> List[Tuple[str, str]]:
        """(key, default as written in a config file) for every recognised key."""
        defaults = _flatten(cls())
        return [(key, defaults[key]) for key in cls.keys()]

    def flat_items(self) -> Dict[str, str]:
        """Every key with its value formatted as in a config file."""
        return _flatten(self)

    def to_text(self, header: Optional[str] = None) -> str:
        lines = []
        if header:
            lines.extend(f"# {line}" for line in header.splitlines())
        for key, value in _flatten(self).items():
            lines.append(f"{key} = {value}" if value != '' else f"{key} =")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, overrides: Sequence[str] = (), origin: str = '<text>') -> 'RunConfig':
        data = _parse_lines(text.splitlines(), origin)
        for index, item in enumerate(overrides, start=1):
            data.update(_parse_lines([item], f"override #{index}", allow_duplicates=True))
        return _build(_FileConfig(_StrictRepository(data)))

    @classmethod
    def from_file(cls, path: Union[str, Path], overrides: Sequence[str] = ()) -> 'RunConfig':
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"Config file not found: {path}")
        return cls.from_text(path.read_text(encoding='utf-8'), overrides=overrides, origin=str(path))


class _StrictRepository(RepositoryEmpty):
    """decouple repository over an already-validated key/value mapping."""

    def __init__(self, data: Mapping[str, str]):
        super().__init__()
        self.data = dict(data)

    def __contains__(self, key):
        return key in self.data

    def __getitem__(self, key):
        return self.data[key]


class _FileConfig(Config):
    """decouple Config that never consults os.environ: experiment keys come from the file only."""

    def get(self, option, default=None, cast=str):
        value = self.repository[option] if option in self.repository else default
        if cast is bool:
            return self._cast_boolean(value)
        return cast(value)


def _enum_choices(enum_cls) -> Choices:
    return Choices([member.value for member in enum_cls], cast=str)


def _float_tuple(value: str) -> Tuple[float, ...]:
    return Csv(cast=float, post_process=tuple)(value)


_STAGE_FIELDS = (('learning_rate', float), ('weight_decay', float), ('epochs', int), ('batch_size', int))

# key -> decouple cast, in file order
_SCHEMA: List[Tuple[str, Any]] = [
    ('class_count', int),
    ('class_names', Csv(post_process=tuple)),
    ('temperature', float),
    ('lambda1', float),
    ('lambda2', float),
    ('wasserstein_p', int),
    ('seed', int),
    ('label_policy', _enum_choices(LabelPolicy)),
    ('sampling_policy', _enum_choices(SamplingMode)),
    ('sampling_target_ratio', float),
    ('sampling_target_class', str),
    ('soft_label_mode', _enum_choices(SoftLabelMode)),
    ('soft_target_scale_learner', bool),
    ('feature_reference', _enum_choices(FeatureReference)),
    ('feature_mode', _enum_choices(FeatureMode)),
    ('align_size', int),
    ('teacher_backbones', Csv(post_process=tuple)),
    ('assistant_backbone', str),
    ('student_backbone', str),
    ('image_size', int),
    ('manifest', str),
    ('validation_fraction', float),
    ('threshold', float),
    ('num_workers', int),
    ('deterministic', bool),
    ('missing_image_policy', _enum_choices(MissingImagePolicy)),
    ('ablation_seeds', Csv(cast=int, post_process=tuple)),
    ('synth_n_samples', int),
    ('synth_single_positive', bool),
    ('synth_class_prior', _float_tuple),
    ('synth_noise', float),
] + [(f'{role.value}_{name}', cast) for role in NetworkRole for name, cast in _STAGE_FIELDS]

_KEYS = frozenset(key for key, _ in _SCHEMA)
_ENUMS = {
    'label_policy': LabelPolicy,
    'sampling_policy': SamplingMode,
    'soft_label_mode': SoftLabelMode,
    'feature_reference': FeatureReference,
    'feature_mode': FeatureMode,
    'missing_image_policy': MissingImagePolicy,
}


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ','.join(_format_value(v) for v in value)
    return str(value)


def _flatten(cfg: RunConfig) -> Dict[str, str]:
    flat = {}
    for f in fields(RunConfig):
        if f.name == 'stage_hparams':
            continue
        flat[f.name] = _format_value(getattr(cfg, f.name))
    for role in NetworkRole:
        hp = cfg.stage_hparams[role]
        for name, _ in _STAGE_FIELDS:
            flat[f'{role.value}_{name}'] = _format_value(getattr(hp, name))
    return flat


def _parse_lines(lines: Sequence[str], origin: str, allow_duplicates: bool = False) -> Dict[str, str]:
    data: Dict[str, str] = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith('#'):
            continue
        if '=' not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split('=', 1))
        if key not in _KEYS:
            raise ConfigError(f"{origin}:{lineno}: unknown key '{key}'")
        if key in data and not allow_duplicates:
            raise ConfigError(f"{origin}:{lineno}: duplicate key '{key}'")
        if len(value) >= 2 and value[0] == value[-1] and value[0] in ('"', "'"):
            value = value[1:-1]
        data[key] = value
    return data


def _build(cfg: Config) -> RunConfig:
    defaults = dict(RunConfig.default_items())
    values: Dict[str, Any] = {}
    for key, cast in _SCHEMA:
        try:
            values[key] = cfg(key, default=defaults[key], cast=cast)
        except ValueError as e:
            raise ConfigError(f"{key}: {e}") from e

    stages = {}
    for role in NetworkRole:
        stages[role] = StageHParams(**{name: values.pop(f'{role.value}_{name}') for name, _ in _STAGE_FIELDS})
    for key, enum_cls in _ENUMS.items():
        values[key] = enum_cls(values[key])
    return RunConfig(stage_hparams=stages, **values)


def config_snapshot_text(cfg: RunConfig, command: str = '') -> str:
    """Resolved configuration with a provenance header; re-parses to cfg."""
    stamp = datetime.now(tz=timezone.utc).isoformat()
    header = f"cxr-distill resolved configuration\nresolved at {stamp}"
    if command:
        header += f"\ncommand: {command}"
    return cfg.to_text(header=header)


# ---------------------------------------
# Atomic file writes
# ---------------------------------------
def atomic_write_bytes(path: Union[str, Path], payload: bytes) -> Path:
    """
    Write payload to path via a temp file in the same directory, then replace.
    Readers never observe a partially written file.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    temp_fd, temp_path = tempfile.mkstemp(dir=path.parent, suffix='.tmp')
    try:
        with os.fdopen(temp_fd, 'wb') as f:
            f.write(payload)
        shutil.move(temp_path, path)
    except Exception:
        # Clean up temp file if something went wrong
        if Path(temp_path).exists():
            Path(temp_path).unlink()
        logger.error(f"Failed to write {path}")
        raise
    return path


def atomic_write_text(path: Union[str, Path], text: str) -> Path:
    return atomic_write_bytes(path, text.encode('utf-8'))
