# src/data.py
"""
DATA
----
Manifest ingestion, uncertainty-label policies, train/validation splits,
imbalance resampling, image batches and the synthetic motif dataset.

Manifest CSV grammar:
    header   sample_id,image_path,<class_1>,...,<class_C>[,split]
    labels   "1" / "1.0" positive, "0" / "0.0" negative,
             "-1" / "-1.0" uncertain, empty cell = not mentioned
    split    optional column, "train" or "validation" (empty = train)
Relative image paths resolve against the manifest's directory.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
from PIL import Image, UnidentifiedImageError
from torch.utils.data import DataLoader, Dataset

from src.core import (
    ConfigError,
    DimensionError,
    ImageLoadError,
    LabelPolicy,
    LabelVector,
    ManifestParseError,
    RunConfig,
    SamplingMode,
    ValidationError,
    atomic_write_text,
    derive_seed,
    get_logger,
    seeded_rng,
    torch_generator,
)

logger = get_logger('data')

RESERVED_COLUMNS = ('sample_id', 'image_path', 'split')
SPLIT_VALUES = ('', 'train', 'validation')
LABEL_TOKENS: Dict[str, Optional[int]] = {
    '1': 1, '1.0': 1,
    '0': 0, '0.0': 0,
    '-1': -1, '-1.0': -1,
    '': None,
}

# Fixed normalization, identical for every stage and dataset
NORMALIZE_MEAN = 0.5
NORMALIZE_STD = 0.25

NO_FINDING = 'no finding'


# ---------------------------------------
# Manifest rows
# ---------------------------------------
@dataclass(frozen=True)
class SampleManifestRow:
    sample_id: str
    image_path: str
    raw_labels: Tuple[Optional[int], ...]
    split: str = ''

    def __post_init__(self):
        object.__setattr__(self, 'raw_labels', tuple(self.raw_labels))
        if any(v not in (1, 0, -1, None) for v in self.raw_labels):
            raise ValidationError(f"sample '{self.sample_id}': raw labels outside {{1, 0, -1, blank}}: {self.raw_labels}")


def parse_manifest(path: Union[str, Path], class_count: int,
                   class_names: Optional[Sequence[str]] = None) -> Tuple[List[SampleManifestRow], Tuple[str, ...]]:
    """
    Parse and validate a manifest. Returns the rows and the label column names
    in class order. With class_names, columns are matched by name (order in the
    file does not matter) and other columns are ignored.
    """
    path = Path(path)
    if not path.exists():
        logger.error(f"Manifest not found: {path}")
        raise FileNotFoundError(f"manifest not found: {path}")

    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, na_filter=False, skipinitialspace=True)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise ManifestParseError(f"{path}: unreadable CSV ({e})") from e

    frame.columns = [str(c).strip() for c in frame.columns]
    for column in ('sample_id', 'image_path'):
        if column not in frame.columns:
            raise ManifestParseError(f"{path}: missing required column '{column}'", column=column)

    if class_names:
        missing = [name for name in class_names if name not in frame.columns]
        if missing:
            raise ManifestParseError(f"{path}: missing label columns {missing}", column=missing[0])
        label_columns = tuple(class_names)
    else:
        label_columns = tuple(c for c in frame.columns if c not in RESERVED_COLUMNS)
    if len(label_columns) != class_count:
        raise ManifestParseError(f"{path}: found {len(label_columns)} label columns, class_count is {class_count}")

    rows: List[SampleManifestRow] = []
    seen: Dict[str, int] = {}
    has_split = 'split' in frame.columns
    for position, record in enumerate(frame.to_dict(orient='records'), start=1):
        sample_id = record['sample_id'].strip()
        if not sample_id:
            raise ManifestParseError(f"{path}: row {position}: empty sample_id", row=position, column='sample_id')
        if sample_id in seen:
            raise ManifestParseError(f"{path}: row {position}: duplicate sample_id '{sample_id}' "
                                     f"(first seen in row {seen[sample_id]})", row=position, column='sample_id')
        seen[sample_id] = position

        image_path = record['image_path'].strip()
        if not image_path:
            raise ManifestParseError(f"{path}: row {position}: missing image path", row=position, column='image_path')
        if not Path(image_path).is_absolute():
            image_path = str(path.parent / image_path)

        labels = []
        for column in label_columns:
            token = record[column].strip()
            if token not in LABEL_TOKENS:
                raise ManifestParseError(f"{path}: row {position}, column '{column}': unknown label token {token!r}",
                                         row=position, column=column)
            labels.append(LABEL_TOKENS[token])

        split = record['split'].strip() if has_split else ''
        if split not in SPLIT_VALUES:
            raise ManifestParseError(f"{path}: row {position}: split must be 'train' or 'validation' (got {split!r})",
                                     row=position, column='split')
        rows.append(SampleManifestRow(sample_id=sample_id, image_path=image_path, raw_labels=tuple(labels),
                                      split=split))

    logger.info(f"[OK] Parsed {len(rows)} manifest rows from {path.name} ({class_count} classes)")
    return rows, label_columns


# ---------------------------------------
# Label policies
# ---------------------------------------
@dataclass(frozen=True)
class ResolvedSample:
    sample_id: str
    image_path: str
    labels: LabelVector
    mask: Tuple[int, ...]
    split: str = ''

    def is_positive(self, class_index: int) -> bool:
        return self.labels.values[class_index] == 1 and self.mask[class_index] == 1


def apply_label_policy(rows: Sequence[SampleManifestRow], policy: LabelPolicy) -> List[ResolvedSample]:
    """Resolve uncertain (-1) labels: u_zeros -> 0, u_ones -> 1, u_ignore -> masked. Blank is always 0."""
    policy = LabelPolicy(policy)
    resolved = []
    for row in rows:
        values, mask = [], []
        for raw in row.raw_labels:
            if raw == -1:
                values.append(1 if policy is LabelPolicy.U_ONES else 0)
                mask.append(0 if policy is LabelPolicy.U_IGNORE else 1)
            else:
                values.append(1 if raw == 1 else 0)
                mask.append(1)
        resolved.append(ResolvedSample(sample_id=row.sample_id, image_path=row.image_path,
                                       labels=LabelVector(tuple(values)), mask=tuple(mask), split=row.split))
    return resolved


# ---------------------------------------
# Splits
# ---------------------------------------
def _prevalence(samples: Sequence[ResolvedSample], class_count: int) -> Tuple[int, ...]:
    return tuple(sum(1 for s in samples if s.is_positive(k)) for k in range(class_count))


@dataclass(frozen=True)
class DatasetSplit:
    train: Tuple[ResolvedSample, ...]
    validation: Tuple[ResolvedSample, ...]
    class_count: int
    class_names: Tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, 'train', tuple(self.train))
        object.__setattr__(self, 'validation', tuple(self.validation))
        if not self.class_names:
            object.__setattr__(self, 'class_names', tuple(f'class_{i}' for i in range(self.class_count)))
        if len(self.class_names) != self.class_count:
            raise DimensionError(f"{len(self.class_names)} class names for {self.class_count} classes")
        for sample in self.train + self.validation:
            sample.labels.check_length(self.class_count)
        overlap = {s.sample_id for s in self.train} & {s.sample_id for s in self.validation}
        if overlap:
            raise ValidationError(f"train and validation share sample ids: {sorted(overlap)[:5]}")

    @property
    def class_prevalence(self) -> Tuple[int, ...]:
        """Per-class positive counts in the training portion (masked entries excluded)."""
        return _prevalence(self.train, self.class_count)

    @property
    def validation_prevalence(self) -> Tuple[int, ...]:
        return _prevalence(self.validation, self.class_count)

    def train_ids(self) -> List[str]:
        return [s.sample_id for s in self.train]


def split_samples(samples: Sequence[ResolvedSample], class_count: int, validation_fraction: float, seed: int,
                  class_names: Sequence[str] = ()) -> DatasetSplit:
    """
    Honour an explicit split column when present; otherwise hold out
    round(n * validation_fraction) samples chosen by a seeded shuffle.
    """
    if any(s.split for s in samples):
        train = [s for s in samples if s.split != 'validation']
        validation = [s for s in samples if s.split == 'validation']
    else:
        n = len(samples)
        n_validation = int(round(n * validation_fraction))
        if validation_fraction > 0 and n > 1:
            n_validation = min(max(n_validation, 1), n - 1)
        held_out = set(seeded_rng(seed).permutation(n)[:n_validation].tolist())
        train = [s for i, s in enumerate(samples) if i not in held_out]
        validation = [s for i, s in enumerate(samples) if i in held_out]
    return DatasetSplit(train=tuple(train), validation=tuple(validation), class_count=class_count,
                        class_names=tuple(class_names))


# ---------------------------------------
# Resampling
# ---------------------------------------
@dataclass(frozen=True)
class SamplingPolicy:
    """
    With target_class set: balance positives against negatives of that class
    to target_ratio (positives / negatives). Without it: group samples by their
    first positive class ("no finding" when none) and equalise group sizes.
    """
    mode: SamplingMode = SamplingMode.NONE
    target_ratio: float = 1.0
    seed: int = 0
    target_class: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, 'mode', SamplingMode(self.mode))
        if not math.isfinite(self.target_ratio) or self.target_ratio <= 0:
            raise ValidationError(f"target_ratio must be > 0 (got {self.target_ratio})")
        if self.target_class is None and self.mode is not SamplingMode.NONE and self.target_ratio != 1.0:
            logger.error(f"target_ratio {self.target_ratio} given for grouped resampling")
            raise ValidationError(f"target_ratio applies only with a target class; grouped resampling "
                                  f"equalises group sizes (got {self.target_ratio})")

    @classmethod
    def from_config(cls, cfg: RunConfig) -> 'SamplingPolicy':
        target = None
        if cfg.sampling_target_class:
            target = cfg.resolved_class_names().index(cfg.sampling_target_class)
        return cls(mode=cfg.sampling_policy, target_ratio=cfg.sampling_target_ratio,
                   seed=derive_seed(cfg.seed, 7), target_class=target)


def _binary_targets(mode: SamplingMode, pos: int, neg: int, ratio: float) -> Tuple[int, int]:
    if mode is SamplingMode.BOTH:
        total = pos + neg
        pos_target = int(round(total * ratio / (1.0 + ratio)))
        pos_target = min(max(pos_target, 1), total - 1)
        return pos_target, total - pos_target
    too_many_positives = pos / neg > ratio
    if mode is SamplingMode.UNDERSAMPLE:
        if too_many_positives:
            return max(1, int(round(neg * ratio))), neg
        return pos, max(1, int(round(pos / ratio)))
    # oversample
    if too_many_positives:
        return pos, max(1, int(round(pos / ratio)))
    return max(1, int(round(neg * ratio))), neg


def _draw(rng: np.random.Generator, members: List[int], target: int) -> List[int]:
    """Subset without replacement when shrinking; all members plus duplicates when growing."""
    if target <= len(members):
        chosen = rng.choice(len(members), size=target, replace=False)
        return [members[i] for i in sorted(chosen.tolist())]
    extra = rng.choice(len(members), size=target - len(members), replace=True)
    return sorted(members + [members[i] for i in extra.tolist()])


def resample(split: DatasetSplit, policy: SamplingPolicy) -> DatasetSplit:
    """Resample the training portion; validation is untouched. Oversampling only repeats references."""
    if policy.mode is SamplingMode.NONE:
        return split

    rng = seeded_rng(policy.seed)
    train = list(split.train)
    if policy.target_class is not None:
        k = policy.target_class
        if not 0 <= k < split.class_count:
            raise ValidationError(f"target class index {k} outside 0..{split.class_count - 1}")
        groups = {
            'positive': [i for i, s in enumerate(train) if s.is_positive(k)],
            'negative': [i for i, s in enumerate(train) if not s.is_positive(k)],
        }
        for side, members in groups.items():
            if not members:
                logger.error(f"Cannot resample class '{split.class_names[k]}': no {side} training samples")
                raise ValidationError(f"class '{split.class_names[k]}' has no {side} training samples")
        pos_t, neg_t = _binary_targets(policy.mode, len(groups['positive']), len(groups['negative']),
                                       policy.target_ratio)
        targets = {'positive': pos_t, 'negative': neg_t}
    else:
        groups = {name: [] for name in split.class_names + (NO_FINDING,)}
        for i, sample in enumerate(train):
            first = next((k for k in range(split.class_count) if sample.is_positive(k)), None)
            groups[split.class_names[first] if first is not None else NO_FINDING].append(i)
        empty = [name for name in split.class_names if not groups[name]]
        if empty:
            logger.error(f"Cannot resample: no training samples for class '{empty[0]}'")
            raise ValidationError(f"class '{empty[0]}' has no training samples")
        groups = {name: members for name, members in groups.items() if members}
        sizes = [len(m) for m in groups.values()]
        if policy.mode is SamplingMode.UNDERSAMPLE:
            size = min(sizes)
        elif policy.mode is SamplingMode.OVERSAMPLE:
            size = max(sizes)
        else:
            size = int(round(sum(sizes) / len(sizes)))
        targets = {name: size for name in groups}

    picked: List[int] = []
    for name, members in groups.items():
        picked.extend(_draw(rng, members, targets[name]))
    picked.sort()

    before = len(train)
    resampled = tuple(train[i] for i in picked)
    logger.info(f"Resampled training set ({policy.mode.value}): {before} -> {len(resampled)} samples")
    return DatasetSplit(train=resampled, validation=split.validation, class_count=split.class_count,
                        class_names=split.class_names)


# ---------------------------------------
# Image loading
# ---------------------------------------
def load_image(sample: ResolvedSample, image_size: int) -> torch.Tensor:
    """Grayscale, bilinear resize, fixed normalization -> (1, size, size) float32."""
    try:
        with Image.open(sample.image_path) as img:
            gray = img.convert('L')
            if gray.size != (image_size, image_size):
                gray = gray.resize((image_size, image_size), Image.Resampling.BILINEAR)
            pixels = np.asarray(gray, dtype=np.float32) / 255.0
    except (FileNotFoundError, UnidentifiedImageError, OSError) as e:
        logger.error(f"Could not load image for sample '{sample.sample_id}': {e}")
        raise ImageLoadError(f"cannot load image {sample.image_path}: {e}", sample_id=sample.sample_id) from e
    return torch.from_numpy((pixels - NORMALIZE_MEAN) / NORMALIZE_STD).unsqueeze(0)


class ManifestImageDataset(Dataset):
    """Items are (image, labels, mask, index) for a fixed sequence of samples."""

    def __init__(self, samples: Sequence[ResolvedSample], image_size: int):
        self.samples = tuple(samples)
        self.image_size = image_size

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, index: int):
        sample = self.samples[index]
        return (
            load_image(sample, self.image_size),
            sample.labels.as_tensor(torch.float32),
            torch.tensor(sample.mask, dtype=torch.float32),
            index,
        )


def _seed_worker(worker_id: int) -> None:
    # numpy inside workers follows torch's per-worker seed
    np.random.seed(torch.initial_seed() % 2 ** 32)


def make_loader(samples: Sequence[ResolvedSample], image_size: int, batch_size: int, shuffle: bool,
                seed: int, num_workers: int = 0) -> DataLoader:
    """Batches arrive in sampler order whatever the worker count."""
    return DataLoader(
        ManifestImageDataset(samples, image_size),
        batch_size=batch_size,
        shuffle=shuffle,
        num_workers=num_workers,
        generator=torch_generator(seed),
        worker_init_fn=_seed_worker if num_workers else None,
    )


def load_batch(samples: Sequence[ResolvedSample], indices: Sequence[int],
               image_size: int) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Images (B, 1, S, S), labels (B, C) and masks (B, C) for the given positions."""
    for i in indices:
        if not 0 <= i < len(samples):
            raise IndexError(f"sample index {i} out of range for {len(samples)} samples")
    if not indices:
        raise IndexError("load_batch needs at least one index")
    dataset = ManifestImageDataset(samples, image_size)
    items = [dataset[i] for i in indices]
    images = torch.stack([item[0] for item in items])
    labels = torch.stack([item[1] for item in items])
    masks = torch.stack([item[2] for item in items])
    return images, labels, masks


# ---------------------------------------
# Synthetic motif dataset
# ---------------------------------------
MOTIF_LEVEL = 0.75
MOTIF_JITTER = 0.1


@dataclass(frozen=True)
class SynthSpec:
    n_samples: int
    class_count: int
    image_size: int
    rule_seed: int
    single_positive: bool = False
    class_prior: Tuple[float, ...] = ()
    noise: float = 0.25
    validation_fraction: float = 0.2
    class_names: Tuple[str, ...] = ()

    @classmethod
    def from_config(cls, cfg: RunConfig) -> 'SynthSpec':
        return cls(n_samples=cfg.synth_n_samples, class_count=cfg.class_count, image_size=cfg.image_size,
                   rule_seed=cfg.seed, single_positive=cfg.synth_single_positive,
                   class_prior=cfg.synth_class_prior, noise=cfg.synth_noise,
                   validation_fraction=cfg.validation_fraction, class_names=cfg.resolved_class_names())

    @property
    def detection_threshold(self) -> float:
        return (self.noise + MOTIF_LEVEL) / 2.0


def motif_masks(class_count: int, image_size: int) -> np.ndarray:
    """
    (C, S, S) boolean masks. Class k owns grid cell k and draws a bar
    oriented by k % 4 (horizontal, vertical, diagonal, anti-diagonal).
    """
    grid = math.ceil(math.sqrt(class_count))
    cell = image_size // grid
    if cell < 4:
        raise ConfigError(f"image_size {image_size} too small for {class_count} motif cells")
    margin = cell // 6
    thickness = max(1, cell // 6)
    ii, jj = np.meshgrid(np.arange(cell), np.arange(cell), indexing='ij')
    inner = (ii >= margin) & (ii < cell - margin) & (jj >= margin) & (jj < cell - margin)
    centre = (cell - 1) / 2.0
    shapes = [
        np.abs(ii - centre) < thickness / 2.0 + 0.5,
        np.abs(jj - centre) < thickness / 2.0 + 0.5,
        np.abs(ii - jj) < thickness,
        np.abs(ii + jj - (cell - 1)) < thickness,
    ]
    masks = np.zeros((class_count, image_size, image_size), dtype=bool)
    for k in range(class_count):
        row, col = divmod(k, grid)
        masks[k, row * cell:(row + 1) * cell, col * cell:(col + 1) * cell] = shapes[k % 4] & inner
    return masks


def detect_motifs(image: np.ndarray, masks: np.ndarray, threshold: float) -> LabelVector:
    """Re-detect labels from pixel intensities in [0, 1] using the generative layout."""
    return LabelVector(tuple(int(image[m].mean() > threshold) for m in masks))


def _draw_labels(spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    C = spec.class_count
    if spec.single_positive:
        prior = np.asarray(spec.class_prior or [1.0] * C, dtype=np.float64)
        if prior.sum() <= 0:
            raise ConfigError("synth_class_prior must have a positive sum")
        picks = rng.choice(C, size=spec.n_samples, p=prior / prior.sum())
        labels = np.zeros((spec.n_samples, C), dtype=np.int64)
        labels[np.arange(spec.n_samples), picks] = 1
        return labels
    prior = np.asarray(spec.class_prior or [0.35] * C, dtype=np.float64)
    return (rng.random((spec.n_samples, C)) < prior).astype(np.int64)


def render_image(labels: Sequence[int], masks: np.ndarray, noise: float, rng: np.random.Generator) -> np.ndarray:
    size = masks.shape[-1]
    image = rng.uniform(0.0, noise, size=(size, size))
    for k, present in enumerate(labels):
        if present:
            count = int(masks[k].sum())
            image[masks[k]] = MOTIF_LEVEL + rng.uniform(0.0, MOTIF_JITTER, size=count)
    return np.clip(image, 0.0, 1.0)


def synthesize_dataset(spec: SynthSpec, output_dir: Union[str, Path]) -> Tuple[DatasetSplit, Path]:
    """
    Write PNG images plus manifest.csv (with a split column) under output_dir
    and return the split as read back through the manifest ingestion path.
    """
    if spec.n_samples < 10 * spec.class_count:
        raise ConfigError(f"synth_n_samples must be >= 10 * class_count = {10 * spec.class_count} "
                          f"(got {spec.n_samples})")
    if spec.class_prior and len(spec.class_prior) != spec.class_count:
        raise ConfigError(f"synth_class_prior needs {spec.class_count} values")

    output_dir = Path(output_dir)
    image_dir = output_dir / 'images'
    image_dir.mkdir(parents=True, exist_ok=True)
    class_names = spec.class_names or tuple(f'class_{i}' for i in range(spec.class_count))

    masks = motif_masks(spec.class_count, spec.image_size)
    labels = _draw_labels(spec, seeded_rng(derive_seed(spec.rule_seed, 0)))
    n_validation = int(round(spec.n_samples * spec.validation_fraction))
    held_out = set(seeded_rng(derive_seed(spec.rule_seed, 2)).permutation(spec.n_samples)[:n_validation].tolist())

    records = []
    for i in range(spec.n_samples):
        sample_id = f'synth-{i:05d}'
        image = render_image(labels[i], masks, spec.noise, seeded_rng(derive_seed(spec.rule_seed, 1, i)))
        relative = Path('images') / f'{sample_id}.png'
        Image.fromarray(np.round(image * 255.0).astype(np.uint8)).save(output_dir / relative, format='PNG')
        record = {'sample_id': sample_id, 'image_path': relative.as_posix()}
        record.update({name: str(int(labels[i, k])) for k, name in enumerate(class_names)})
        record['split'] = 'validation' if i in held_out else 'train'
        records.append(record)

    manifest_path = output_dir / 'manifest.csv'
    frame = pd.DataFrame(records, columns=['sample_id', 'image_path', *class_names, 'split'])
    atomic_write_text(manifest_path, frame.to_csv(index=False, lineterminator='\n'))
    logger.info(f"[OK] Synthesized {spec.n_samples} images ({spec.class_count} classes) in {output_dir}")

    rows, columns = parse_manifest(manifest_path, spec.class_count, class_names)
    samples = apply_label_policy(rows, LabelPolicy.U_ZEROS)
    return split_samples(samples, spec.class_count, spec.validation_fraction, spec.rule_seed, columns), manifest_path


def load_dataset(cfg: RunConfig) -> DatasetSplit:
    """Manifest -> label policy -> split -> resampling, as configured."""
    if not cfg.manifest:
        raise ConfigError("manifest is not set; run synth-data or set manifest = <path>")
    rows, columns = parse_manifest(cfg.manifest, cfg.class_count, cfg.class_names or None)
    samples = apply_label_policy(rows, cfg.label_policy)
    split = split_samples(samples, cfg.class_count, cfg.validation_fraction, derive_seed(cfg.seed, 3), columns)
    split = resample(split, SamplingPolicy.from_config(cfg))
    logger.info(f"Dataset: {len(split.train)} train / {len(split.validation)} validation, "
                f"train prevalence {dict(zip(split.class_names, split.class_prevalence))}")
    return split
