# src/distill.py
"""
DISTILL
-------
Three-stage cascade: teacher ensemble -> assistant -> student.

Artifacts handed between stages:
    Checkpoint   all member networks of a stage + the config that trained them
    RecordStore  per-sample soft labels and pooled reference features,
                 bound to the producing checkpoint by its content checksum

Record store file layout (all integers little-endian):
    4 bytes   magic b'KDRS'
    u16       format version (1)
    u32       header length H
    H bytes   UTF-8 JSON header {version, class_count, temperature, mode,
              producer_role, producer_checksum, taps: [[name, [c, h, w]], ...]}
    u32       entry count N
    N entries u32 entry length L, then L bytes:
              u16 id length, UTF-8 sample id,
              class_count x float32 soft labels,
              c*h*w x float32 per tap, in header tap order (C order)
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch

from src.core import (
    CheckpointError,
    ChecksumMismatchError,
    ConfigError,
    FeatureMode,
    FeatureReference,
    ImageLoadError,
    MissingImagePolicy,
    MissingRecordError,
    NetworkRole,
    NumericalError,
    RecordStoreError,
    RunConfig,
    SoftLabelMode,
    SoftLabelVector,
    StageError,
    StageHParams,
    atomic_write_bytes,
    atomic_write_text,
    configure_determinism,
    derive_seed,
    get_logger,
)
from src.data import DatasetSplit, ResolvedSample, load_batch, make_loader
from src.losses import (
    FeatureAligner,
    LossValue,
    assistant_loss,
    bce_multilabel,
    student_loss,
)
from src.models import (
    NetworkHandle,
    build_network,
    check_capacity_ordering,
    ensemble_probabilities,
    forward_with_taps,
    get_backbone,
)

logger = get_logger('distill')

STORE_MAGIC = b'KDRS'
STORE_VERSION = 1
CHECKPOINT_VERSION = 1

# Seed-derivation path codes
ROLE_CODE = {NetworkRole.TEACHER: 1, NetworkRole.ASSISTANT: 2, NetworkRole.STUDENT: 3}
_ALIGN_CODE = 11
_LOADER_CODE = 100


def _banner(title: str) -> None:
    logger.info("━" * 60)
    logger.info(f"▶ {title}")
    logger.info("━" * 60)


def _aligner(cfg: RunConfig) -> FeatureAligner:
    """The one aligner used at export and training time for a run."""
    return FeatureAligner(cfg.align_size, seed=derive_seed(cfg.seed, _ALIGN_CODE))


def _unique_samples(samples: Iterable[ResolvedSample]) -> List[ResolvedSample]:
    seen, unique = set(), []
    for sample in samples:
        if sample.sample_id not in seen:
            seen.add(sample.sample_id)
            unique.append(sample)
    return unique


# ---------------------------------------
# Distillation records
# ---------------------------------------
@dataclass(frozen=True, eq=False)
class DistillRecord:
    sample_id: str
    soft_labels: SoftLabelVector
    feature_refs: Dict[str, np.ndarray]
    producer_role: NetworkRole
    producer_checksum: str

    def __post_init__(self):
        refs = {}
        for tap, values in self.feature_refs.items():
            array = np.ascontiguousarray(values, dtype=np.float32)
            if array.ndim != 3:
                raise RecordStoreError(f"feature ref '{tap}' of '{self.sample_id}' must be (c, h, w)")
            if not np.isfinite(array).all():
                raise NumericalError(f"feature ref '{tap}' of '{self.sample_id}' contains NaN/Inf")
            array.setflags(write=False)
            refs[tap] = array
        object.__setattr__(self, 'feature_refs', refs)
        object.__setattr__(self, 'producer_role', NetworkRole(self.producer_role))

    def __eq__(self, other):
        if not isinstance(other, DistillRecord):
            return NotImplemented
        return (self.sample_id == other.sample_id
                and self.soft_labels == other.soft_labels
                and self.producer_role is other.producer_role
                and self.producer_checksum == other.producer_checksum
                and list(self.feature_refs) == list(other.feature_refs)
                and all(self.feature_refs[t].tobytes() == other.feature_refs[t].tobytes() for t in self.feature_refs))

    __hash__ = None


@dataclass
class RecordStore:
    class_count: int
    temperature: float
    mode: SoftLabelMode
    producer_role: NetworkRole
    producer_checksum: str
    tap_shapes: Dict[str, Tuple[int, int, int]]
    records: Dict[str, DistillRecord] = field(default_factory=dict)

    def __post_init__(self):
        self.mode = SoftLabelMode(self.mode)
        self.producer_role = NetworkRole(self.producer_role)
        self.tap_shapes = {name: tuple(int(d) for d in shape) for name, shape in self.tap_shapes.items()}

    def __len__(self) -> int:
        return len(self.records)

    @property
    def tap_names(self) -> Tuple[str, ...]:
        return tuple(self.tap_shapes)

    def add(self, record: DistillRecord) -> None:
        if len(record.soft_labels) != self.class_count:
            raise RecordStoreError(f"record '{record.sample_id}' has {len(record.soft_labels)} soft labels, "
                                   f"store expects {self.class_count}")
        if record.producer_checksum != self.producer_checksum:
            raise ChecksumMismatchError(f"record '{record.sample_id}' comes from another checkpoint")
        for tap, shape in self.tap_shapes.items():
            if tap not in record.feature_refs or record.feature_refs[tap].shape != shape:
                raise RecordStoreError(f"record '{record.sample_id}': feature ref '{tap}' missing or not {shape}")
        self.records[record.sample_id] = record

    def get(self, sample_id: str) -> DistillRecord:
        try:
            return self.records[sample_id]
        except KeyError:
            logger.error(f"No distillation record for sample '{sample_id}'")
            raise MissingRecordError(f"no distillation record for sample '{sample_id}'", sample_id=sample_id) from None

    def verify_producer(self, checkpoint: 'Checkpoint') -> None:
        """The store must come from exactly this checkpoint."""
        actual = checkpoint.checksum()
        if actual != self.producer_checksum or checkpoint.role is not self.producer_role:
            logger.error(f"Record store bound to {self.producer_role.value} {self.producer_checksum[:12]}, "
                         f"got {checkpoint.role.value} {actual[:12]}")
            raise ChecksumMismatchError(
                f"record store was produced by {self.producer_role.value} checkpoint {self.producer_checksum[:12]}, "
                f"not {checkpoint.role.value} checkpoint {actual[:12]}")

    def soft_labels_for(self, sample_ids: Sequence[str]) -> torch.Tensor:
        return torch.tensor([self.get(s).soft_labels.values for s in sample_ids], dtype=torch.float64)

    def features_for(self, sample_ids: Sequence[str]) -> List[torch.Tensor]:
        records = [self.get(s) for s in sample_ids]
        return [torch.from_numpy(np.stack([r.feature_refs[tap] for r in records])) for tap in self.tap_names]

    # -- codec -----------------------------------------------------------
    def _header(self) -> bytes:
        header = {
            'version': STORE_VERSION,
            'class_count': self.class_count,
            'temperature': self.temperature,
            'mode': self.mode.value,
            'producer_role': self.producer_role.value,
            'producer_checksum': self.producer_checksum,
            'taps': [[name, list(shape)] for name, shape in self.tap_shapes.items()],
        }
        return json.dumps(header, sort_keys=True, separators=(',', ':')).encode('utf-8')

    def to_bytes(self) -> bytes:
        header = self._header()
        parts = [STORE_MAGIC, struct.pack('<HI', STORE_VERSION, len(header)), header,
                 struct.pack('<I', len(self.records))]
        for record in self.records.values():
            sid = record.sample_id.encode('utf-8')
            body = [struct.pack('<H', len(sid)), sid, np.asarray(record.soft_labels.values, dtype='<f4').tobytes()]
            body.extend(np.asarray(record.feature_refs[tap], dtype='<f4').tobytes() for tap in self.tap_names)
            entry = b''.join(body)
            parts.append(struct.pack('<I', len(entry)))
            parts.append(entry)
        return b''.join(parts)

    @classmethod
    def from_bytes(cls, payload: bytes, origin: str = '<bytes>') -> 'RecordStore':
        view = memoryview(payload)
        offset = 0

        def take(n: int) -> bytes:
            nonlocal offset
            if offset + n > len(view):
                raise RecordStoreError(f"{origin}: truncated record store at byte {offset}")
            chunk = bytes(view[offset:offset + n])
            offset += n
            return chunk

        if take(4) != STORE_MAGIC:
            raise RecordStoreError(f"{origin}: not a record store (bad magic)")
        version, header_len = struct.unpack('<HI', take(6))
        if version != STORE_VERSION:
            raise RecordStoreError(f"{origin}: unsupported record store version {version}")
        try:
            header = json.loads(take(header_len).decode('utf-8'))
            store = cls(class_count=int(header['class_count']), temperature=float(header['temperature']),
                        mode=header['mode'], producer_role=header['producer_role'],
                        producer_checksum=header['producer_checksum'],
                        tap_shapes={name: tuple(shape) for name, shape in header['taps']})
        except (ValueError, KeyError, TypeError) as e:
            raise RecordStoreError(f"{origin}: malformed header ({e})") from e

        C = store.class_count
        sizes = [int(np.prod(shape)) for shape in store.tap_shapes.values()]
        (count,) = struct.unpack('<I', take(4))
        for _ in range(count):
            (entry_len,) = struct.unpack('<I', take(4))
            entry = take(entry_len)
            (id_len,) = struct.unpack('<H', entry[:2])
            expected = 2 + id_len + 4 * (C + sum(sizes))
            if entry_len != expected:
                raise RecordStoreError(f"{origin}: entry length {entry_len}, expected {expected}")
            sample_id = entry[2:2 + id_len].decode('utf-8')
            cursor = 2 + id_len
            soft = np.frombuffer(entry, dtype='<f4', count=C, offset=cursor)
            cursor += 4 * C
            refs = {}
            for (tap, shape), size in zip(store.tap_shapes.items(), sizes):
                refs[tap] = np.frombuffer(entry, dtype='<f4', count=size, offset=cursor).reshape(shape)
                cursor += 4 * size
            try:
                soft_labels = SoftLabelVector(tuple(float(v) for v in soft), store.temperature, store.mode)
            except (ValueError, ArithmeticError) as e:
                raise RecordStoreError(f"{origin}: invalid soft labels for '{sample_id}' ({e})") from e
            store.add(DistillRecord(sample_id=sample_id, soft_labels=soft_labels, feature_refs=refs,
                                    producer_role=store.producer_role, producer_checksum=store.producer_checksum))
        if offset != len(view):
            raise RecordStoreError(f"{origin}: {len(view) - offset} trailing bytes after last entry")
        return store

    def write(self, path: Union[str, Path]) -> Path:
        path = atomic_write_bytes(path, self.to_bytes())
        logger.info(f"[OK] Wrote {len(self)} records to {path}")
        return path

    @classmethod
    def read(cls, path: Union[str, Path]) -> 'RecordStore':
        path = Path(path)
        return cls.from_bytes(path.read_bytes(), origin=str(path))

    def to_frame(self) -> pd.DataFrame:
        """One row per sample: soft labels and summary statistics of each feature ref."""
        rows = []
        for record in self.records.values():
            row: Dict[str, Any] = {'sample_id': record.sample_id, 'producer_role': record.producer_role.value}
            row.update({f'soft_{k}': v for k, v in enumerate(record.soft_labels.values)})
            for tap, values in record.feature_refs.items():
                row[f'{tap}_mean'] = float(values.mean())
                row[f'{tap}_std'] = float(values.std())
            rows.append(row)
        return pd.DataFrame(rows)


# ---------------------------------------
# Checkpoints
# ---------------------------------------
@dataclass(eq=False)
class Checkpoint:
    """All member networks of one stage, the training config and the upstream checksum."""
    role: NetworkRole
    members: List[NetworkHandle]
    config: RunConfig
    parent_checksum: str = ''

    def __post_init__(self):
        self.role = NetworkRole(self.role)
        if not self.members:
            raise CheckpointError("a checkpoint needs at least one member network")

    @property
    def class_count(self) -> int:
        return self.members[0].class_count

    def checksum(self) -> str:
        """SHA-256 over member identities and parameter bytes."""
        digest = hashlib.sha256()
        digest.update(self.role.value.encode('utf-8'))
        for member in self.members:
            identity = f"|{member.spec.name}|{member.class_count}|{member.seed}|{','.join(member.spec.tap_names)}|"
            digest.update(identity.encode('utf-8'))
            state = member.module.state_dict()
            for key in sorted(state):
                tensor = state[key].detach().cpu().contiguous()
                digest.update(f"{key}:{tensor.dtype}:{tuple(tensor.shape)}".encode('utf-8'))
                digest.update(tensor.numpy().tobytes())
        return digest.hexdigest()

    def save(self, path: Union[str, Path]) -> Path:
        payload = {
            'version': CHECKPOINT_VERSION,
            'role': self.role.value,
            'parent_checksum': self.parent_checksum,
            'checksum': self.checksum(),
            'config': self.config.to_text(),
            'members': [
                {
                    'backbone': m.spec.name,
                    'class_count': m.class_count,
                    'seed': m.seed,
                    'tap_names': list(m.spec.tap_names),
                    'state_dict': m.module.state_dict(),
                }
                for m in self.members
            ],
        }
        buffer = io.BytesIO()
        torch.save(payload, buffer)
        path = atomic_write_bytes(path, buffer.getvalue())
        logger.info(f"[OK] Saved {self.role.value} checkpoint {payload['checksum'][:12]} to {path}")
        return path

    @classmethod
    def load(cls, path: Union[str, Path], expected_role: Optional[NetworkRole] = None) -> 'Checkpoint':
        path = Path(path)
        try:
            payload = torch.load(io.BytesIO(path.read_bytes()), map_location='cpu', weights_only=True)
        except FileNotFoundError:
            raise
        except Exception as e:
            logger.error(f"Unreadable checkpoint {path}: {e}")
            raise CheckpointError(f"{path}: unreadable checkpoint ({e})") from e

        if not isinstance(payload, dict) or payload.get('version') != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version")
        role = NetworkRole(payload['role'])
        if expected_role is not None and role is not NetworkRole(expected_role):
            raise CheckpointError(f"{path}: holds a {role.value} checkpoint, expected {NetworkRole(expected_role).value}")

        members = []
        for entry in payload['members']:
            spec = get_backbone(entry['backbone'])
            if tuple(entry['tap_names']) != spec.tap_names:
                raise CheckpointError(f"{path}: taps {entry['tap_names']} do not match backbone '{spec.name}'")
            handle = build_network(spec, int(entry['class_count']), int(entry['seed']))
            try:
                handle.module.load_state_dict(entry['state_dict'], strict=True)
            except RuntimeError as e:
                raise CheckpointError(f"{path}: parameters do not match backbone '{spec.name}' ({e})") from e
            members.append(handle)

        checkpoint = cls(role=role, members=members, config=RunConfig.from_text(payload['config'], origin=str(path)),
                         parent_checksum=payload['parent_checksum'])
        if checkpoint.checksum() != payload['checksum']:
            raise CheckpointError(f"{path}: content checksum mismatch (corrupt checkpoint)")
        return checkpoint


# ---------------------------------------
# Stage reports
# ---------------------------------------
@dataclass
class StageReport:
    stage: NetworkRole
    epochs_run: int
    final_components: Dict[str, float]
    history: List[Dict[str, Any]]
    wall_clock_seconds: float
    seed: int
    config_snapshot: str
    checkpoint_checksum: str = ''
    finished_at: str = field(default_factory=lambda: datetime.now(tz=timezone.utc).isoformat())

    def __post_init__(self):
        self.stage = NetworkRole(self.stage)
        if not all(np.isfinite(v) for v in self.final_components.values()):
            raise NumericalError(f"{self.stage.value} report has non-finite loss components")
        RunConfig.from_text(self.config_snapshot, origin=f'{self.stage.value} report snapshot')

    def to_json(self) -> str:
        return json.dumps({
            'stage': self.stage.value,
            'epochs_run': self.epochs_run,
            'final_components': self.final_components,
            'history': self.history,
            'wall_clock_seconds': self.wall_clock_seconds,
            'seed': self.seed,
            'checkpoint_checksum': self.checkpoint_checksum,
            'finished_at': self.finished_at,
            'config_snapshot': self.config_snapshot,
        }, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> 'StageReport':
        return cls(**json.loads(text))

    def write(self, path: Union[str, Path]) -> Path:
        return atomic_write_text(path, self.to_json() + "\n")


# ---------------------------------------
# Objectives
# ---------------------------------------
def _loss_temperature(cfg: RunConfig, records: RecordStore) -> Optional[float]:
    return records.temperature if cfg.soft_target_scale_learner else None


class PlainObjective:
    """Hard-label BCE only."""

    def __init__(self, mode: SoftLabelMode):
        self.mode = mode

    def __call__(self, handle: NetworkHandle, images, labels, masks, sample_ids) -> LossValue:
        pred, _ = forward_with_taps(handle, images, self.mode)
        return bce_multilabel(labels, pred, mask=masks)


class DistillObjective:
    """
    Composite objective for a learner. Soft labels always come from
    `soft_records`; reference features come from `feature_records` (offline)
    or from a no-grad forward of `feature_checkpoint` (online).
    """

    def __init__(self, cfg: RunConfig, learner_role: NetworkRole, soft_records: RecordStore,
                 feature_records: RecordStore, feature_checkpoint: Optional['Checkpoint'] = None):
        self.cfg = cfg
        self.learner_role = NetworkRole(learner_role)
        self.soft_records = soft_records
        self.feature_records = feature_records
        self.feature_checkpoint = feature_checkpoint
        self.aligner = _aligner(cfg)
        if cfg.feature_mode is FeatureMode.ONLINE:
            if feature_checkpoint is None:
                raise ConfigError("feature_mode = online needs the reference checkpoint")
            for member in feature_checkpoint.members:
                member.module.eval()

    def reference_features(self, images: torch.Tensor, sample_ids: Sequence[str]) -> List[torch.Tensor]:
        if self.cfg.feature_mode is FeatureMode.ONLINE:
            return fused_reference_features(self.feature_checkpoint.members, images, self.aligner)
        return self.feature_records.features_for(sample_ids)

    def __call__(self, handle: NetworkHandle, images, labels, masks, sample_ids) -> LossValue:
        cfg = self.cfg
        pred, taps = forward_with_taps(handle, images, cfg.soft_label_mode)
        learner_levels = [taps[name] for name in handle.spec.tap_names]
        ref_levels = self.reference_features(images, sample_ids)
        soft = self.soft_records.soft_labels_for(sample_ids)
        temperature = _loss_temperature(cfg, self.soft_records)
        if self.learner_role is NetworkRole.ASSISTANT:
            return assistant_loss(labels, soft, pred, ref_levels, learner_levels, cfg.lambda1, mask=masks,
                                  soft_temperature=temperature, mode=cfg.soft_label_mode, aligner=self.aligner)
        return student_loss(labels, soft, pred, ref_levels, learner_levels, cfg.lambda2, cfg.wasserstein_p,
                            mask=masks, soft_temperature=temperature, mode=cfg.soft_label_mode, aligner=self.aligner)


# ---------------------------------------
# Training loop
# ---------------------------------------
def build_learner(cfg: RunConfig, role: NetworkRole, member: int = 0) -> NetworkHandle:
    """Network for a stage, initialised from a seed derived from (cfg.seed, role, member)."""
    role = NetworkRole(role)
    if role is NetworkRole.TEACHER:
        name = cfg.teacher_backbones[member]
    elif role is NetworkRole.ASSISTANT:
        name = cfg.assistant_backbone
    else:
        name = cfg.student_backbone
    return build_network(name, cfg.class_count, derive_seed(cfg.seed, ROLE_CODE[role], member))


def _fit(handle: NetworkHandle, samples: Sequence[ResolvedSample], hp: StageHParams, cfg: RunConfig,
         objective, label: str, loader_seed: int) -> List[Dict[str, Any]]:
    """Adam over `hp.epochs` epochs; returns per-epoch mean loss components."""
    optimizer = torch.optim.Adam(handle.module.parameters(), lr=hp.learning_rate, weight_decay=hp.weight_decay)
    loader = make_loader(samples, cfg.image_size, hp.batch_size, shuffle=True, seed=loader_seed,
                         num_workers=cfg.num_workers)
    history = []
    handle.module.train()
    for epoch in range(1, hp.epochs + 1):
        sums: Dict[str, float] = {}
        seen = 0
        for batch, (images, labels, masks, indices) in enumerate(loader, start=1):
            sample_ids = [samples[i].sample_id for i in indices.tolist()]
            optimizer.zero_grad()
            try:
                loss = objective(handle, images, labels, masks, sample_ids)
            except NumericalError as e:
                logger.error(f"{label}: loss diverged at epoch {epoch}, batch {batch}: {e}")
                raise StageError(f"{label} diverged at epoch {epoch}, batch {batch}: {e}") from e
            loss.total.backward()
            optimizer.step()

            size = len(sample_ids)
            seen += size
            for name, value in loss.breakdown().items():
                sums[name] = sums.get(name, 0.0) + value * size
            sums['total'] = sums.get('total', 0.0) + loss.value * size

        means = {name: value / max(seen, 1) for name, value in sums.items()}
        history.append({'stage': label, 'epoch': epoch, **means})
        parts = ', '.join(f"{name}={value:.4f}" for name, value in means.items())
        logger.info(f"  {label} epoch {epoch}/{hp.epochs}: {parts}")
    handle.module.eval()
    return history


def _final_components(history: List[Dict[str, Any]]) -> Dict[str, float]:
    if not history:
        return {}
    last_epoch = max(h['epoch'] for h in history)
    last = [h for h in history if h['epoch'] == last_epoch]
    keys = [k for k in last[0] if k not in ('stage', 'epoch')]
    return {k: float(np.mean([h[k] for h in last])) for k in keys}


def _report(role: NetworkRole, cfg: RunConfig, history, started: float, checkpoint: Checkpoint) -> StageReport:
    return StageReport(
        stage=role,
        epochs_run=cfg.stage(role).epochs,
        final_components=_final_components(history),
        history=history,
        wall_clock_seconds=round(time.perf_counter() - started, 3),
        seed=cfg.seed,
        config_snapshot=cfg.to_text(),
        checkpoint_checksum=checkpoint.checksum(),
    )


def _training_samples(cfg: RunConfig, split: DatasetSplit, stores: Sequence[RecordStore]) -> List[ResolvedSample]:
    """Training samples with a record in every store; gaps abort unless missing images are skipped."""
    kept = []
    for sample in split.train:
        missing = next((s for s in stores if sample.sample_id not in s.records), None)
        if missing is None:
            kept.append(sample)
        elif cfg.missing_image_policy is MissingImagePolicy.SKIP:
            logger.warning(f"Skipping sample '{sample.sample_id}': no {missing.producer_role.value} record")
        else:
            missing.get(sample.sample_id)
    if not kept:
        raise StageError("no training samples left after matching distillation records")
    return kept


def train_plain(cfg: RunConfig, split: DatasetSplit, role: NetworkRole, member: int = 0) -> Tuple[NetworkHandle, List]:
    """Hard-label training of one network (teacher members, student-alone baseline)."""
    configure_determinism(cfg.deterministic)
    handle = build_learner(cfg, role, member)
    hp = cfg.stage(role)
    label = f"{NetworkRole(role).value}[{handle.spec.name}]"
    history = _fit(handle, list(split.train), hp, cfg, PlainObjective(cfg.soft_label_mode), label,
                   derive_seed(cfg.seed, ROLE_CODE[NetworkRole(role)], member, _LOADER_CODE))
    return handle, history


def train_teacher(cfg: RunConfig, split: DatasetSplit) -> Tuple[Checkpoint, StageReport]:
    """Each ensemble member is trained independently on hard-label BCE."""
    _banner(f"STAGE teacher ({', '.join(cfg.teacher_backbones)})")
    started = time.perf_counter()
    members, history = [], []
    for index in range(len(cfg.teacher_backbones)):
        logger.info(f"--> Member {index + 1}/{len(cfg.teacher_backbones)}: {cfg.teacher_backbones[index]}")
        handle, member_history = train_plain(cfg, split, NetworkRole.TEACHER, index)
        members.append(handle)
        history.extend(member_history)
    checkpoint = Checkpoint(role=NetworkRole.TEACHER, members=members, config=cfg)
    report = _report(NetworkRole.TEACHER, cfg, history, started, checkpoint)
    logger.info(f"◼ Teacher done in {report.wall_clock_seconds:.1f}s: {report.final_components}")
    return checkpoint, report


# ---------------------------------------
# Record export
# ---------------------------------------
def _ensemble_forward(members: Sequence[NetworkHandle], images: torch.Tensor, aligner: FeatureAligner,
                      mode: SoftLabelMode = SoftLabelMode.SIGMOID) -> Tuple[List[torch.Tensor], List[torch.Tensor]]:
    """
    Member logits, and pooled tap maps per level fused across members by
    projecting each member onto the first member's channel count and averaging.
    """
    logits, member_levels = [], []
    with torch.no_grad():
        for member in members:
            pred, taps = forward_with_taps(member, images, mode)
            logits.append(pred.logits)
            member_levels.append([aligner.pool(taps[name].batched().to(torch.float64)) for name in member.spec.tap_names])
    fused = []
    for level in range(len(member_levels[0])):
        target_channels = member_levels[0][level].shape[1]
        projected = [aligner.project(levels[level], target_channels) for levels in member_levels]
        fused.append(torch.stack(projected).mean(dim=0).to(torch.float32))
    return logits, fused


def fused_reference_features(members: Sequence[NetworkHandle], images: torch.Tensor,
                             aligner: FeatureAligner) -> List[torch.Tensor]:
    return _ensemble_forward(members, images, aligner)[1]


def _load_chunk(chunk: Sequence[ResolvedSample], image_size: int,
                policy: MissingImagePolicy) -> Tuple[List[ResolvedSample], Optional[torch.Tensor]]:
    try:
        images, _, _ = load_batch(chunk, list(range(len(chunk))), image_size)
        return list(chunk), images
    except ImageLoadError:
        if policy is MissingImagePolicy.ABORT:
            raise
    kept, images = [], []
    for sample in chunk:
        try:
            images.append(load_batch([sample], [0], image_size)[0])
            kept.append(sample)
        except ImageLoadError as e:
            logger.warning(f"Skipping sample '{e.sample_id}': image not readable")
    return kept, (torch.cat(images) if images else None)


def export_distill_records(checkpoint: Checkpoint, split: DatasetSplit, temperature: Optional[float] = None,
                           mode: Optional[SoftLabelMode] = None,
                           missing_image_policy: Optional[MissingImagePolicy] = None,
                           config: Optional[RunConfig] = None) -> RecordStore:
    """
    One record per distinct training sample: ensemble soft labels at
    `temperature` and fused pooled tap features. Unset options come from
    `config`, or from the config the checkpoint was trained under.
    """
    cfg = checkpoint.config if config is None else config
    temperature = cfg.temperature if temperature is None else float(temperature)
    mode = SoftLabelMode(mode or cfg.soft_label_mode)
    policy = MissingImagePolicy(missing_image_policy or cfg.missing_image_policy)
    aligner = _aligner(cfg)
    checksum = checkpoint.checksum()
    members = checkpoint.members
    for member in members:
        member.module.eval()

    logger.info(f"--> Exporting {checkpoint.role.value} records (T={temperature}, mode={mode.value})")
    samples = _unique_samples(split.train)
    batch_size = cfg.stage(checkpoint.role).batch_size
    tap_names = members[0].spec.tap_names
    store: Optional[RecordStore] = None
    skipped = 0
    for start in range(0, len(samples), batch_size):
        chunk, images = _load_chunk(samples[start:start + batch_size], cfg.image_size, policy)
        skipped += min(batch_size, len(samples) - start) - len(chunk)
        if images is None:
            continue
        logits, fused = _ensemble_forward(members, images, aligner, mode)
        soft = ensemble_probabilities(logits, mode, temperature).to(torch.float32).numpy()
        features = [f.numpy() for f in fused]
        if store is None:
            store = RecordStore(class_count=checkpoint.class_count, temperature=temperature, mode=mode,
                                producer_role=checkpoint.role, producer_checksum=checksum,
                                tap_shapes={name: f.shape[1:] for name, f in zip(tap_names, features)})
        for i, sample in enumerate(chunk):
            store.add(DistillRecord(
                sample_id=sample.sample_id,
                soft_labels=SoftLabelVector(tuple(float(v) for v in soft[i]), temperature, mode),
                feature_refs={name: f[i] for name, f in zip(tap_names, features)},
                producer_role=checkpoint.role,
                producer_checksum=checksum,
            ))
    if store is None:
        raise StageError(f"no {checkpoint.role.value} records could be exported (all images unreadable)")
    if skipped:
        logger.warning(f"{skipped} samples skipped during export (missing images)")
    logger.info(f"[OK] Exported {len(store)} {checkpoint.role.value} records")
    return store


# ---------------------------------------
# Distilled stages
# ---------------------------------------
def _check_store(cfg: RunConfig, store: RecordStore, checkpoint: Checkpoint) -> None:
    store.verify_producer(checkpoint)
    if store.class_count != cfg.class_count:
        raise StageError(f"record store has {store.class_count} classes, config has {cfg.class_count}")
    if store.mode is not cfg.soft_label_mode:
        raise StageError(f"record store mode {store.mode.value} differs from soft_label_mode "
                         f"{cfg.soft_label_mode.value}")


def _train_distilled(cfg: RunConfig, split: DatasetSplit, role: NetworkRole, soft_records: RecordStore,
                     soft_checkpoint: Checkpoint, feature_records: RecordStore,
                     feature_checkpoint: Checkpoint) -> Tuple[Checkpoint, StageReport]:
    started = time.perf_counter()
    _check_store(cfg, soft_records, soft_checkpoint)
    if feature_records is not soft_records:
        _check_store(cfg, feature_records, feature_checkpoint)
    samples = _training_samples(cfg, split, [soft_records, feature_records])

    configure_determinism(cfg.deterministic)
    handle = build_learner(cfg, role)
    objective = DistillObjective(cfg, role, soft_records, feature_records, feature_checkpoint)
    history = _fit(handle, samples, cfg.stage(role), cfg, objective, f"{role.value}[{handle.spec.name}]",
                   derive_seed(cfg.seed, ROLE_CODE[role], 0, _LOADER_CODE))
    checkpoint = Checkpoint(role=role, members=[handle], config=cfg, parent_checksum=soft_checkpoint.checksum())
    report = _report(role, cfg, history, started, checkpoint)
    logger.info(f"◼ {role.value.capitalize()} done in {report.wall_clock_seconds:.1f}s: {report.final_components}")
    return checkpoint, report


def train_assistant(cfg: RunConfig, split: DatasetSplit, teacher_records: RecordStore,
                    teacher_checkpoint: Checkpoint) -> Tuple[Checkpoint, StageReport]:
    """hard BCE + λ₁·KL(teacher features, assistant features) + BCE(teacher soft labels)."""
    _banner(f"STAGE assistant ({cfg.assistant_backbone})")
    return _train_distilled(cfg, split, NetworkRole.ASSISTANT, teacher_records, teacher_checkpoint,
                            teacher_records, teacher_checkpoint)


def train_student(cfg: RunConfig, split: DatasetSplit, records: RecordStore, producer_checkpoint: Checkpoint,
                  feature_records: Optional[RecordStore] = None,
                  feature_checkpoint: Optional[Checkpoint] = None) -> Tuple[Checkpoint, StageReport]:
    """
    hard BCE + λ₂·W_p(reference features, student features) + BCE(soft labels).
    Soft labels come from `records`; feature references default to the same store.
    """
    _banner(f"STAGE student ({cfg.student_backbone}) from {records.producer_role.value}")
    if feature_records is None:
        feature_records, feature_checkpoint = records, producer_checkpoint
    elif feature_checkpoint is None:
        raise ConfigError("feature_records given without the checkpoint that produced them")
    return _train_distilled(cfg, split, NetworkRole.STUDENT, records, producer_checkpoint,
                            feature_records, feature_checkpoint)


# ---------------------------------------
# Pipeline
# ---------------------------------------
TEACHER_CKPT = 'teacher.ckpt'
TEACHER_RECORDS = 'teacher_records.kdrs'
ASSISTANT_CKPT = 'assistant.ckpt'
ASSISTANT_RECORDS = 'assistant_records.kdrs'
STUDENT_CKPT = 'student.ckpt'
REPORTS_DIR = 'reports'


@dataclass
class PipelineResult:
    output_dir: Path
    checkpoints: Dict[NetworkRole, Checkpoint]
    records: Dict[NetworkRole, RecordStore]
    reports: Dict[NetworkRole, StageReport]
    reused: List[str]

    @property
    def student(self) -> Checkpoint:
        return self.checkpoints[NetworkRole.STUDENT]


# config keys each stage's artifacts depend on
_DATA_KEYS = (
    'seed', 'deterministic', 'class_count', 'class_names', 'label_policy', 'sampling_policy',
    'sampling_target_ratio', 'sampling_target_class', 'manifest', 'validation_fraction', 'image_size',
    'soft_label_mode', 'missing_image_policy', 'synth_n_samples', 'synth_single_positive',
    'synth_class_prior', 'synth_noise',
)


def _stage_keys(role: NetworkRole) -> Tuple[str, ...]:
    return tuple(f'{role.value}_{name}' for name in ('learning_rate', 'weight_decay', 'epochs', 'batch_size'))


_TEACHER_KEYS = _DATA_KEYS + ('teacher_backbones',) + _stage_keys(NetworkRole.TEACHER)
_ASSISTANT_KEYS = (_TEACHER_KEYS + ('assistant_backbone', 'temperature', 'lambda1', 'soft_target_scale_learner',
                                   'feature_mode', 'align_size') + _stage_keys(NetworkRole.ASSISTANT))
_STUDENT_KEYS = (_ASSISTANT_KEYS + ('student_backbone', 'lambda2', 'wasserstein_p', 'feature_reference')
                 + _stage_keys(NetworkRole.STUDENT))
STAGE_KEYS: Dict[NetworkRole, Tuple[str, ...]] = {
    NetworkRole.TEACHER: _TEACHER_KEYS,
    NetworkRole.ASSISTANT: _ASSISTANT_KEYS,
    NetworkRole.STUDENT: _STUDENT_KEYS,
}


def config_changes(stored: RunConfig, current: RunConfig, role: NetworkRole) -> List[str]:
    """Keys `role` depends on whose values differ between the two configs."""
    old, new = stored.flat_items(), current.flat_items()
    return [key for key in STAGE_KEYS[NetworkRole(role)] if old[key] != new[key]]


def _reuse_checkpoint(path: Path, role: NetworkRole, cfg: RunConfig, parent: str) -> Optional[Checkpoint]:
    if not path.exists():
        return None
    try:
        checkpoint = Checkpoint.load(path, expected_role=role)
    except CheckpointError as e:
        logger.warning(f"Not reusing {path.name}: {e}")
        return None
    if checkpoint.parent_checksum != parent:
        logger.info(f"Not reusing {path.name}: trained from another upstream checkpoint")
        return None
    changed = config_changes(checkpoint.config, cfg, role)
    if changed:
        logger.info(f"Not reusing {path.name}: {', '.join(changed)} changed")
        return None
    return checkpoint


def _reuse_records(path: Path, checkpoint: Checkpoint, cfg: RunConfig) -> Optional[RecordStore]:
    if not path.exists():
        return None
    try:
        store = RecordStore.read(path)
        store.verify_producer(checkpoint)
    except (RecordStoreError, ChecksumMismatchError) as e:
        logger.warning(f"Not reusing {path.name}: {e}")
        return None
    spatial = {tuple(shape[1:]) for shape in store.tap_shapes.values()}
    if (store.temperature != cfg.temperature or store.mode is not cfg.soft_label_mode
            or spatial != {(cfg.align_size, cfg.align_size)}):
        logger.info(f"Not reusing {path.name}: exported with another temperature, mode or align_size")
        return None
    return store


def run_pipeline(cfg: RunConfig, split: DatasetSplit, output_dir: Union[str, Path],
                 resume: bool = False) -> PipelineResult:
    """
    teacher -> teacher records -> assistant -> assistant records -> student.
    Each artifact is persisted as soon as its stage completes; with resume,
    artifacts whose checksums still bind to their upstream are reused.
    """
    output_dir = Path(output_dir)
    reports_dir = output_dir / REPORTS_DIR
    reports_dir.mkdir(parents=True, exist_ok=True)
    counts = check_capacity_ordering(cfg.teacher_backbones, cfg.assistant_backbone, cfg.student_backbone,
                                     cfg.class_count)
    logger.info(f"Parameter counts: {counts}")

    checkpoints: Dict[NetworkRole, Checkpoint] = {}
    records: Dict[NetworkRole, RecordStore] = {}
    reports: Dict[NetworkRole, StageReport] = {}
    reused: List[str] = []

    def stage(role: NetworkRole, ckpt_name: str, parent: str, train):
        existing = _reuse_checkpoint(output_dir / ckpt_name, role, cfg, parent) if resume else None
        if existing is not None:
            logger.info(f"[OK] Reusing {ckpt_name} ({existing.checksum()[:12]})")
            reused.append(ckpt_name)
            checkpoints[role] = existing
            return existing
        checkpoint, report = train()
        checkpoint.save(output_dir / ckpt_name)
        report.write(reports_dir / f'{role.value}.json')
        checkpoints[role], reports[role] = checkpoint, report
        return checkpoint

    def export(role: NetworkRole, store_name: str) -> RecordStore:
        checkpoint = checkpoints[role]
        existing = _reuse_records(output_dir / store_name, checkpoint, cfg) if resume else None
        if existing is not None:
            logger.info(f"[OK] Reusing {store_name}")
            reused.append(store_name)
        else:
            existing = export_distill_records(checkpoint, split, config=cfg)
            existing.write(output_dir / store_name)
        records[role] = existing
        return existing

    _banner(f"PIPELINE STARTED -> {output_dir}")
    try:
        teacher = stage(NetworkRole.TEACHER, TEACHER_CKPT, '', lambda: train_teacher(cfg, split))
        teacher_records = export(NetworkRole.TEACHER, TEACHER_RECORDS)

        assistant = stage(NetworkRole.ASSISTANT, ASSISTANT_CKPT, teacher.checksum(),
                          lambda: train_assistant(cfg, split, teacher_records, teacher))
        assistant_records = export(NetworkRole.ASSISTANT, ASSISTANT_RECORDS)

        if cfg.feature_reference is FeatureReference.TEACHER:
            features = (teacher_records, teacher)
        else:
            features = (assistant_records, assistant)
        stage(NetworkRole.STUDENT, STUDENT_CKPT, assistant.checksum(),
              lambda: train_student(cfg, split, assistant_records, assistant, *features))
    except StageError:
        logger.error(f"Pipeline halted; completed artifacts kept in {output_dir}")
        raise

    logger.info("━" * 60)
    logger.info(f"◼ PIPELINE COMPLETE ({len(reused)} artifacts reused)")
    logger.info("━" * 60)
    return PipelineResult(output_dir=output_dir, checkpoints=checkpoints, records=records, reports=reports,
                          reused=reused)
