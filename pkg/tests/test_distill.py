# tests/test_distill.py
"""
Tests for the record store codec, checkpoints, stage reports,
the three training stages and the pipeline with resume
"""
import io
import json
import struct
from dataclasses import replace

import numpy as np
import pytest
import torch
from freezegun import freeze_time


def _store(checksum='a' * 64, role='teacher', count=3):
    from src.core import SoftLabelVector
    from src.distill import DistillRecord, RecordStore

    rng = np.random.default_rng(0)
    store = RecordStore(class_count=2, temperature=20.0, mode='per-class-sigmoid', producer_role=role,
                        producer_checksum=checksum, tap_shapes={'t1': (2, 2, 2), 't2': (3, 1, 1)})
    for i in range(count):
        store.add(DistillRecord(
            sample_id=f's{i}',
            soft_labels=SoftLabelVector((0.25 * i, 0.5), temperature=20.0),
            feature_refs={'t1': rng.normal(size=(2, 2, 2)), 't2': rng.normal(size=(3, 1, 1))},
            producer_role=role,
            producer_checksum=checksum,
        ))
    return store


# ---------------------------------------
# Record store
# ---------------------------------------
def test_record_store_bytes_round_trip_bit_identical():
    from src.distill import RecordStore

    store = _store()
    payload = store.to_bytes()
    restored = RecordStore.from_bytes(payload)
    assert restored.to_bytes() == payload
    assert restored.records == store.records
    assert restored.tap_names == ('t1', 't2')


def test_record_store_file_round_trip(tmp_path):
    from src.distill import RecordStore

    path = _store().write(tmp_path / 'teacher_records.kdrs')
    assert path.read_bytes()[:4] == b'KDRS'
    assert RecordStore.read(path).to_bytes() == path.read_bytes()


def test_record_store_feature_refs_read_only():
    record = _store().get('s1')
    assert record.feature_refs['t1'].dtype == np.float32
    with pytest.raises(ValueError):
        record.feature_refs['t1'][0, 0, 0] = 1.0


@pytest.mark.parametrize('corrupt', ['magic', 'version', 'truncated', 'trailing'])
def test_record_store_rejects_corrupt_bytes(corrupt):
    from src.core import RecordStoreError
    from src.distill import RecordStore

    payload = _store().to_bytes()
    if corrupt == 'magic':
        payload = b'XXXX' + payload[4:]
    elif corrupt == 'version':
        payload = payload[:4] + struct.pack('<H', 99) + payload[6:]
    elif corrupt == 'truncated':
        payload = payload[:-5]
    else:
        payload = payload + b'\x00'
    with pytest.raises(RecordStoreError):
        RecordStore.from_bytes(payload)


def test_record_store_missing_record():
    from src.core import MissingRecordError, StageError

    with pytest.raises(MissingRecordError) as excinfo:
        _store().get('absent')
    assert excinfo.value.sample_id == 'absent'
    assert isinstance(excinfo.value, StageError)


def test_record_store_add_checks_binding_and_shapes():
    from src.core import ChecksumMismatchError, RecordStoreError, SoftLabelVector
    from src.distill import DistillRecord

    store = _store()
    foreign = DistillRecord('x', SoftLabelVector((0.5, 0.5), 20.0),
                            {'t1': np.zeros((2, 2, 2)), 't2': np.zeros((3, 1, 1))}, 'teacher', 'b' * 64)
    with pytest.raises(ChecksumMismatchError):
        store.add(foreign)
    misshapen = DistillRecord('y', SoftLabelVector((0.5, 0.5), 20.0),
                              {'t1': np.zeros((2, 2, 3)), 't2': np.zeros((3, 1, 1))}, 'teacher', 'a' * 64)
    with pytest.raises(RecordStoreError):
        store.add(misshapen)


def test_record_store_tensors_and_frame():
    store = _store()
    soft = store.soft_labels_for(['s2', 's0'])
    assert soft.tolist() == [[0.5, 0.5], [0.0, 0.5]]
    t1, t2 = store.features_for(['s0', 's1'])
    assert t1.shape == (2, 2, 2, 2) and t2.shape == (2, 3, 1, 1)

    frame = store.to_frame()
    assert list(frame['sample_id']) == ['s0', 's1', 's2']
    assert {'soft_0', 'soft_1', 't1_mean', 't1_std', 't2_mean'} <= set(frame.columns)


# ---------------------------------------
# Checkpoints
# ---------------------------------------
def _student_checkpoint(seed=0):
    from src.core import RunConfig
    from src.distill import Checkpoint
    from src.models import build_network

    return Checkpoint(role='student', members=[build_network('student-3block', 3, seed)],
                      config=RunConfig(class_count=3), parent_checksum='p' * 64)


def test_checkpoint_round_trip(tmp_path):
    from src.core import NetworkRole
    from src.distill import Checkpoint

    checkpoint = _student_checkpoint()
    checkpoint.save(tmp_path / 'student.ckpt')
    loaded = Checkpoint.load(tmp_path / 'student.ckpt', expected_role=NetworkRole.STUDENT)
    assert loaded.checksum() == checkpoint.checksum()
    assert loaded.config == checkpoint.config
    assert loaded.parent_checksum == 'p' * 64


def test_checksum_tracks_parameters():
    a, b = _student_checkpoint(), _student_checkpoint()
    assert a.checksum() == b.checksum()
    with torch.no_grad():
        next(b.members[0].module.parameters()).view(-1)[0] += 1e-3
    assert a.checksum() != b.checksum()
    assert _student_checkpoint(seed=1).checksum() != a.checksum()


def test_checkpoint_role_mismatch(tmp_path):
    from src.core import CheckpointError, NetworkRole
    from src.distill import Checkpoint

    _student_checkpoint().save(tmp_path / 'student.ckpt')
    with pytest.raises(CheckpointError, match='expected teacher'):
        Checkpoint.load(tmp_path / 'student.ckpt', expected_role=NetworkRole.TEACHER)


def test_checkpoint_detects_tampering(tmp_path):
    from src.core import CheckpointError
    from src.distill import Checkpoint

    path = _student_checkpoint().save(tmp_path / 'student.ckpt')
    payload = torch.load(io.BytesIO(path.read_bytes()), weights_only=True)
    payload['members'][0]['state_dict']['block1.0.bias'][0] += 1.0
    torch.save(payload, path)
    with pytest.raises(CheckpointError, match='checksum mismatch'):
        Checkpoint.load(path)


def test_checkpoint_unreadable(tmp_path):
    from src.core import CheckpointError
    from src.distill import Checkpoint

    (tmp_path / 'junk.ckpt').write_bytes(b'not a checkpoint')
    with pytest.raises(CheckpointError):
        Checkpoint.load(tmp_path / 'junk.ckpt')
    with pytest.raises(FileNotFoundError):
        Checkpoint.load(tmp_path / 'absent.ckpt')


# ---------------------------------------
# Stage reports
# ---------------------------------------
@freeze_time("2026-03-04 05:06:07")
def test_stage_report_json_round_trip(tmp_path):
    from src.core import RunConfig
    from src.distill import StageReport

    report = StageReport(stage='assistant', epochs_run=2, final_components={'hard_bce': 0.5, 'kl_term': 0.1},
                         history=[{'stage': 'assistant', 'epoch': 1, 'hard_bce': 0.7}], wall_clock_seconds=1.5,
                         seed=3, config_snapshot=RunConfig().to_text())
    assert report.finished_at == '2026-03-04T05:06:07+00:00'
    report.write(tmp_path / 'assistant.json')
    restored = StageReport.from_json((tmp_path / 'assistant.json').read_text())
    assert restored == report


def test_stage_report_rejects_non_finite():
    from src.core import NumericalError, RunConfig
    from src.distill import StageReport

    with pytest.raises(NumericalError):
        StageReport(stage='student', epochs_run=1, final_components={'total': float('nan')}, history=[],
                    wall_clock_seconds=0.0, seed=0, config_snapshot=RunConfig().to_text())


# ---------------------------------------
# Training stages
# ---------------------------------------
def test_teacher_stage_and_export(trained_teacher, tiny_split):
    from src.core import NetworkRole

    checkpoint, records, report = trained_teacher
    assert checkpoint.role is NetworkRole.TEACHER
    assert [m.spec.name for m in checkpoint.members] == ['tiny-b6']
    assert report.epochs_run == 1 and 'hard_bce' in report.final_components
    assert set(records.records) == set(tiny_split.train_ids())
    assert records.producer_checksum == checkpoint.checksum()
    assert records.tap_shapes == {'stage2': (40, 4, 4), 'stage3': (80, 4, 4), 'stage4': (112, 4, 4)}
    soft = records.soft_labels_for(tiny_split.train_ids())
    assert bool(((soft > 0) & (soft < 1)).all())


def test_export_is_deterministic(trained_teacher, tiny_split):
    from src.distill import export_distill_records

    checkpoint, records, _ = trained_teacher
    assert export_distill_records(checkpoint, tiny_split).to_bytes() == records.to_bytes()


def test_export_temperature_override(trained_teacher, tiny_split):
    from src.distill import export_distill_records

    checkpoint, records, _ = trained_teacher
    cooler = export_distill_records(checkpoint, tiny_split, temperature=1.0)
    assert cooler.temperature == 1.0
    ids = tiny_split.train_ids()
    # higher temperature pulls every sigmoid output towards 0.5
    assert bool(((records.soft_labels_for(ids) - 0.5).abs() <= (cooler.soft_labels_for(ids) - 0.5).abs() + 1e-6).all())


def test_export_missing_image_policies(trained_teacher, tiny_split):
    from src.core import ImageLoadError, MissingImagePolicy
    from src.data import DatasetSplit
    from src.distill import export_distill_records

    checkpoint, _, _ = trained_teacher
    ghost = replace(tiny_split.train[0], sample_id='ghost', image_path='/nowhere/ghost.png')
    split = DatasetSplit(train=tiny_split.train + (ghost,), validation=tiny_split.validation,
                         class_count=tiny_split.class_count, class_names=tiny_split.class_names)
    with pytest.raises(ImageLoadError):
        export_distill_records(checkpoint, split, missing_image_policy=MissingImagePolicy.ABORT)
    store = export_distill_records(checkpoint, split, missing_image_policy=MissingImagePolicy.SKIP)
    assert 'ghost' not in store.records
    assert len(store) == len(tiny_split.train)


def test_assistant_stage(trained_teacher, tiny_config, tiny_split):
    from src.core import NetworkRole
    from src.distill import train_assistant
    from src.losses import HARD_BCE, KL_TERM, SOFT_BCE

    teacher, records, _ = trained_teacher
    checkpoint, report = train_assistant(tiny_config, tiny_split, records, teacher)
    assert checkpoint.role is NetworkRole.ASSISTANT
    assert checkpoint.parent_checksum == teacher.checksum()
    assert report.checkpoint_checksum == checkpoint.checksum()
    assert {HARD_BCE, KL_TERM, SOFT_BCE, 'total'} <= set(report.final_components)
    assert all(np.isfinite(v) for v in report.final_components.values())


def test_assistant_rejects_foreign_store(trained_teacher, tiny_config, tiny_split):
    from src.core import ChecksumMismatchError
    from src.distill import train_assistant

    teacher, records, _ = trained_teacher
    foreign = replace(records, producer_checksum='f' * 64)
    with pytest.raises(ChecksumMismatchError):
        train_assistant(tiny_config, tiny_split, foreign, teacher)


def test_assistant_rejects_mode_mismatch(trained_teacher, tiny_config, tiny_split):
    from src.core import StageError
    from src.distill import train_assistant

    teacher, records, _ = trained_teacher
    cfg = tiny_config.with_overrides(['soft_label_mode=softmax'])
    with pytest.raises(StageError, match='mode'):
        train_assistant(cfg, tiny_split, records, teacher)


def test_missing_record_aborts_or_skips(trained_teacher, tiny_config, tiny_split):
    from src.core import MissingRecordError
    from src.distill import RecordStore, train_assistant

    teacher, records, _ = trained_teacher
    dropped = tiny_split.train_ids()[0]
    partial = RecordStore.from_bytes(records.to_bytes())
    del partial.records[dropped]
    with pytest.raises(MissingRecordError) as excinfo:
        train_assistant(tiny_config, tiny_split, partial, teacher)
    assert excinfo.value.sample_id == dropped

    cfg = tiny_config.with_overrides(['missing_image_policy=skip'])
    checkpoint, _ = train_assistant(cfg, tiny_split, partial, teacher)
    assert checkpoint.members


def test_divergence_becomes_stage_error(trained_teacher, tiny_config, tiny_split, mocker):
    from src.core import NumericalError, StageError
    from src.distill import train_assistant

    teacher, records, _ = trained_teacher
    mocker.patch('src.distill.assistant_loss', side_effect=NumericalError('loss component is NaN/Inf'))
    with pytest.raises(StageError, match='diverged at epoch 1, batch 1'):
        train_assistant(tiny_config, tiny_split, records, teacher)


def test_online_feature_mode(trained_teacher, tiny_config, tiny_split):
    from src.distill import train_assistant

    teacher, records, _ = trained_teacher
    cfg = tiny_config.with_overrides(['feature_mode=online'])
    _, report = train_assistant(cfg, tiny_split, records, teacher)
    assert np.isfinite(report.final_components['kl_term'])


def test_student_from_teacher_records(trained_teacher, tiny_config, tiny_split):
    from src.core import NetworkRole
    from src.distill import train_student
    from src.losses import WASSERSTEIN_TERM

    teacher, records, _ = trained_teacher
    checkpoint, report = train_student(tiny_config, tiny_split, records, teacher)
    assert checkpoint.role is NetworkRole.STUDENT
    assert checkpoint.members[0].spec.name == 'student-3block'
    assert checkpoint.parent_checksum == teacher.checksum()
    assert WASSERSTEIN_TERM in report.final_components


def test_student_feature_records_need_checkpoint(trained_teacher, tiny_config, tiny_split):
    from src.core import ConfigError
    from src.distill import train_student

    teacher, records, _ = trained_teacher
    with pytest.raises(ConfigError):
        train_student(tiny_config, tiny_split, records, teacher, feature_records=records)


def test_learner_initialisation_is_seeded(tiny_config):
    from src.core import NetworkRole
    from src.distill import build_learner

    a = build_learner(tiny_config, NetworkRole.STUDENT)
    b = build_learner(tiny_config, NetworkRole.STUDENT)
    c = build_learner(tiny_config.with_overrides(['seed=1']), NetworkRole.STUDENT)
    first = next(a.module.parameters())
    assert torch.equal(first, next(b.module.parameters()))
    assert not torch.equal(first, next(c.module.parameters()))


@pytest.mark.parametrize('role', ['assistant', 'student'])
def test_objective_without_feature_terms_is_twice_plain_bce(role, trained_teacher, tiny_config, tiny_split):
    from src.core import NetworkRole, SoftLabelVector
    from src.data import load_batch
    from src.distill import DistillObjective, DistillRecord, RecordStore, build_learner
    from src.losses import binary_cross_entropy
    from src.models import forward_with_taps

    _, records, _ = trained_teacher
    cfg = tiny_config.with_overrides(['lambda1=0', 'lambda2=0', 'soft_target_scale_learner=false'])
    samples = list(tiny_split.train[:8])
    images, labels, masks = load_batch(samples, list(range(len(samples))), cfg.image_size)
    assert bool((masks == 1).all())

    hard_as_soft = RecordStore(class_count=records.class_count, temperature=records.temperature, mode=records.mode,
                               producer_role=records.producer_role, producer_checksum=records.producer_checksum,
                               tap_shapes=records.tap_shapes)
    for sample, row in zip(samples, labels.tolist()):
        reference = records.get(sample.sample_id)
        hard_as_soft.add(DistillRecord(
            sample_id=sample.sample_id,
            soft_labels=SoftLabelVector(tuple(row), records.temperature, records.mode),
            feature_refs=reference.feature_refs,
            producer_role=reference.producer_role,
            producer_checksum=reference.producer_checksum,
        ))

    learner_role = NetworkRole(role)
    handle = build_learner(cfg, learner_role)
    handle.module.eval()
    objective = DistillObjective(cfg, learner_role, hard_as_soft, hard_as_soft)
    loss = objective(handle, images, labels, masks, [s.sample_id for s in samples])

    pred, _ = forward_with_taps(handle, images, cfg.soft_label_mode)
    plain = float(binary_cross_entropy(labels, pred.probabilities.detach()))
    assert loss.value == pytest.approx(2.0 * plain, abs=1e-6)


def _motif_split(tmp_path, *overrides):
    """300-sample, 3-class motif dataset at the default noise level."""
    from src.core import RunConfig
    from src.data import SynthSpec, load_dataset, synthesize_dataset

    _, manifest = synthesize_dataset(SynthSpec(n_samples=300, class_count=3, image_size=32, rule_seed=0), tmp_path)
    cfg = RunConfig.from_text('', overrides=['class_count=3', 'image_size=32', f'manifest={manifest}', *overrides])
    return cfg, load_dataset(cfg)


@pytest.mark.slow
def test_student_trained_directly_reaches_quality_bar(tmp_path):
    from src.core import NetworkRole
    from src.distill import Checkpoint, train_plain
    from src.metrics import evaluate

    cfg, split = _motif_split(tmp_path, 'student_epochs=5', 'student_batch_size=16', 'student_learning_rate=3e-3')
    handle, _ = train_plain(cfg, split, NetworkRole.STUDENT)
    report = evaluate(Checkpoint(role=NetworkRole.STUDENT, members=[handle], config=cfg), split)
    assert report.micro.f1 >= 0.9


@pytest.mark.slow
def test_teacher_reaches_quality_bar(tmp_path):
    from src.distill import train_teacher
    from src.metrics import evaluate

    cfg, split = _motif_split(tmp_path, 'teacher_epochs=5', 'teacher_batch_size=16', 'teacher_learning_rate=3e-3')
    checkpoint, _ = train_teacher(cfg, split)
    assert evaluate(checkpoint, split).micro.f1 >= 0.9


# ---------------------------------------
# Pipeline
# ---------------------------------------
@pytest.mark.slow
@pytest.mark.integration
def test_pipeline_artifacts_resume_and_determinism(tiny_config, tiny_split, tmp_path):
    from src.core import NetworkRole
    from src.distill import (ASSISTANT_CKPT, ASSISTANT_RECORDS, STUDENT_CKPT, TEACHER_CKPT, TEACHER_RECORDS,
                             RecordStore, run_pipeline)

    first = run_pipeline(tiny_config, tiny_split, tmp_path / 'run')
    for name in (TEACHER_CKPT, TEACHER_RECORDS, ASSISTANT_CKPT, ASSISTANT_RECORDS, STUDENT_CKPT):
        assert (tmp_path / 'run' / name).exists()
    for role in NetworkRole:
        report = json.loads((tmp_path / 'run' / 'reports' / f'{role.value}.json').read_text())
        assert report['checkpoint_checksum'] == first.checkpoints[role].checksum()
    assert RecordStore.read(tmp_path / 'run' / ASSISTANT_RECORDS).producer_role is NetworkRole.ASSISTANT
    assert first.student.parent_checksum == first.checkpoints[NetworkRole.ASSISTANT].checksum()
    assert first.reused == []

    resumed = run_pipeline(tiny_config, tiny_split, tmp_path / 'run', resume=True)
    assert resumed.reused == [TEACHER_CKPT, TEACHER_RECORDS, ASSISTANT_CKPT, ASSISTANT_RECORDS, STUDENT_CKPT]
    assert resumed.student.checksum() == first.student.checksum()

    second = run_pipeline(tiny_config, tiny_split, tmp_path / 'again')
    for role in NetworkRole:
        assert second.checkpoints[role].checksum() == first.checkpoints[role].checksum()


def test_config_changes_follow_stage_dependencies():
    from src.core import NetworkRole, RunConfig
    from src.distill import config_changes

    base = RunConfig()
    student_only = base.with_overrides(['lambda2=0.5', 'student_epochs=2', 'feature_reference=teacher'])
    assert config_changes(base, student_only, NetworkRole.TEACHER) == []
    assert config_changes(base, student_only, NetworkRole.ASSISTANT) == []
    assert config_changes(base, student_only, NetworkRole.STUDENT) == ['lambda2', 'feature_reference',
                                                                       'student_epochs']

    softer = base.with_overrides(['temperature=5'])
    assert config_changes(base, softer, NetworkRole.TEACHER) == []
    assert config_changes(base, softer, NetworkRole.ASSISTANT) == ['temperature']

    reporting = base.with_overrides(['threshold=0.3', 'num_workers=2', 'ablation_seeds=7'])
    for role in NetworkRole:
        assert config_changes(base, reporting, role) == []
        assert config_changes(base, base.with_overrides(['teacher_epochs=9']), role) == ['teacher_epochs']


@pytest.mark.slow
@pytest.mark.integration
def test_pipeline_resume_retrains_only_what_a_config_change_touches(tiny_config, tiny_split, tmp_path):
    from src.core import NetworkRole
    from src.distill import ASSISTANT_CKPT, ASSISTANT_RECORDS, TEACHER_CKPT, TEACHER_RECORDS, run_pipeline

    first = run_pipeline(tiny_config, tiny_split, tmp_path)
    teacher_bytes = (tmp_path / TEACHER_CKPT).read_bytes()
    assistant_bytes = (tmp_path / ASSISTANT_CKPT).read_bytes()

    student_change = tiny_config.with_overrides(['lambda2=0.5'])
    changed = run_pipeline(student_change, tiny_split, tmp_path, resume=True)
    assert changed.reused == [TEACHER_CKPT, TEACHER_RECORDS, ASSISTANT_CKPT, ASSISTANT_RECORDS]
    assert (tmp_path / TEACHER_CKPT).read_bytes() == teacher_bytes
    assert (tmp_path / ASSISTANT_CKPT).read_bytes() == assistant_bytes
    assert changed.student.parent_checksum == first.checkpoints[NetworkRole.ASSISTANT].checksum()
    assert set(changed.reports) == {NetworkRole.STUDENT}

    softer = run_pipeline(student_change.with_overrides(['temperature=5']), tiny_split, tmp_path, resume=True)
    assert softer.reused == [TEACHER_CKPT]
    assert softer.records[NetworkRole.TEACHER].temperature == 5.0
    assert softer.records[NetworkRole.ASSISTANT].temperature == 5.0


@pytest.mark.slow
@pytest.mark.integration
def test_pipeline_resume_after_losing_student_checkpoint(tiny_config, tiny_split, tmp_path):
    from src.distill import (ASSISTANT_CKPT, ASSISTANT_RECORDS, STUDENT_CKPT, TEACHER_CKPT, TEACHER_RECORDS,
                             run_pipeline)

    first = run_pipeline(tiny_config, tiny_split, tmp_path)
    upstream = {name: (tmp_path / name).read_bytes()
                for name in (TEACHER_CKPT, TEACHER_RECORDS, ASSISTANT_CKPT, ASSISTANT_RECORDS)}
    (tmp_path / STUDENT_CKPT).unlink()

    resumed = run_pipeline(tiny_config, tiny_split, tmp_path, resume=True)
    assert resumed.reused == [TEACHER_CKPT, TEACHER_RECORDS, ASSISTANT_CKPT, ASSISTANT_RECORDS]
    assert resumed.student.checksum() == first.student.checksum()
    for name, payload in upstream.items():
        assert (tmp_path / name).read_bytes() == payload
    assert (tmp_path / STUDENT_CKPT).exists()


@pytest.mark.slow
@pytest.mark.integration
def test_pipeline_student_features_from_teacher(tiny_config, tiny_split, tmp_path):
    from src.core import NetworkRole
    from src.distill import run_pipeline

    cfg = tiny_config.with_overrides(['feature_reference=teacher'])
    result = run_pipeline(cfg, tiny_split, tmp_path)
    assert result.student.parent_checksum == result.checkpoints[NetworkRole.ASSISTANT].checksum()
