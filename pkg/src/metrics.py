# src/metrics.py
"""
METRICS
-------
Precision / recall / F1 evaluation, the four-row ablation harness and
report emission (text table, CSV, JSON lines).

Conventions:
    - probabilities >= threshold count as positive predictions
    - masked label entries are excluded from every count
    - a ratio whose denominator is 0 is reported as 0
    - micro aggregates pool counts over classes; macro averages per-class values
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch

from src.core import (
    DimensionError,
    DistillError,
    FeatureReference,
    NetworkRole,
    ParameterError,
    RunConfig,
    StageError,
    atomic_write_text,
    get_logger,
)
from src.data import DatasetSplit, make_loader
from src.distill import (
    Checkpoint,
    export_distill_records,
    train_assistant,
    train_plain,
    train_student,
    train_teacher,
)
from src.models import benchmark_inference, parameter_count, predict, teacher_ensemble_predict

logger = get_logger('metrics')

ABLATION_ROWS = ('teacher_alone', 'student_alone', 'student_from_teacher', 'student_from_assistant')
REPORT_FORMATS = ('text-table', 'csv', 'json-lines')
CSV_COLUMNS = ['row', 'precision', 'recall', 'f1', 'threshold', 'seed']
FAILED = 'FAILED'

FOOTER = (
    "precision/recall/f1: micro-averaged over classes (median over seeds for ablation rows)",
    "zero-denominator convention: a ratio with denominator 0 is reported as 0",
)


def _ratio(numerator: int, denominator: int) -> float:
    return numerator / denominator if denominator else 0.0


@dataclass(frozen=True)
class Scores:
    precision: float
    recall: float
    f1: float


@dataclass(frozen=True)
class ClassCounts:
    name: str
    tp: int
    fp: int
    fn: int
    tn: int
    masked: int = 0

    @property
    def precision(self) -> float:
        return _ratio(self.tp, self.tp + self.fp)

    @property
    def recall(self) -> float:
        return _ratio(self.tp, self.tp + self.fn)

    @property
    def f1(self) -> float:
        return _ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn)

    @property
    def scores(self) -> Scores:
        return Scores(self.precision, self.recall, self.f1)


@dataclass(frozen=True)
class EvalReport:
    per_class: Tuple[ClassCounts, ...]
    threshold: float
    sample_count: int
    seed: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, 'per_class', tuple(self.per_class))
        for counts in self.per_class:
            if counts.tp + counts.fp + counts.fn + counts.tn + counts.masked != self.sample_count:
                raise DimensionError(f"class '{counts.name}': counts do not add up to {self.sample_count} samples")

    @property
    def micro(self) -> Scores:
        tp = sum(c.tp for c in self.per_class)
        fp = sum(c.fp for c in self.per_class)
        fn = sum(c.fn for c in self.per_class)
        return Scores(_ratio(tp, tp + fp), _ratio(tp, tp + fn), _ratio(2 * tp, 2 * tp + fp + fn))

    @property
    def macro(self) -> Scores:
        n = len(self.per_class)
        return Scores(sum(c.precision for c in self.per_class) / n,
                      sum(c.recall for c in self.per_class) / n,
                      sum(c.f1 for c in self.per_class) / n)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'threshold': self.threshold,
            'sample_count': self.sample_count,
            'seed': self.seed,
            'per_class': [
                {'name': c.name, 'tp': c.tp, 'fp': c.fp, 'fn': c.fn, 'tn': c.tn, 'masked': c.masked,
                 'precision': c.precision, 'recall': c.recall, 'f1': c.f1}
                for c in self.per_class
            ],
            'micro': vars(self.micro),
            'macro': vars(self.macro),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'EvalReport':
        per_class = tuple(ClassCounts(name=c['name'], tp=c['tp'], fp=c['fp'], fn=c['fn'], tn=c['tn'],
                                      masked=c.get('masked', 0)) for c in data['per_class'])
        return cls(per_class=per_class, threshold=data['threshold'], sample_count=data['sample_count'],
                   seed=data.get('seed'))


def compute_eval_report(probabilities: np.ndarray, labels: np.ndarray, masks: Optional[np.ndarray] = None,
                        threshold: float = 0.5, class_names: Sequence[str] = (),
                        seed: Optional[int] = None) -> EvalReport:
    probabilities = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    masks = np.ones_like(labels, dtype=bool) if masks is None else np.asarray(masks).astype(bool)
    if not (probabilities.shape == labels.shape == masks.shape) or probabilities.ndim != 2:
        raise DimensionError(f"probabilities {probabilities.shape}, labels {labels.shape} and masks "
                             f"{masks.shape} must share one (N, C) shape")
    if not 0.0 < threshold < 1.0:
        raise ParameterError(f"threshold must be in (0, 1) (got {threshold})")
    n, C = labels.shape
    names = tuple(class_names) or tuple(f'class_{k}' for k in range(C))
    predicted = probabilities >= threshold
    per_class = []
    for k in range(C):
        m = masks[:, k]
        p, y = predicted[m, k], labels[m, k]
        per_class.append(ClassCounts(
            name=names[k],
            tp=int(np.sum(p & y)),
            fp=int(np.sum(p & ~y)),
            fn=int(np.sum(~p & y)),
            tn=int(np.sum(~p & ~y)),
            masked=int(n - m.sum()),
        ))
    return EvalReport(per_class=tuple(per_class), threshold=float(threshold), sample_count=n, seed=seed)


def evaluate(checkpoint: Checkpoint, split: DatasetSplit, threshold: Optional[float] = None,
             seed: Optional[int] = None) -> EvalReport:
    """Binarized validation-set evaluation of a checkpoint (ensembles averaged)."""
    cfg = checkpoint.config
    threshold = cfg.threshold if threshold is None else threshold
    if not split.validation:
        logger.error("Evaluation requested on an empty validation split")
        raise StageError("validation split is empty")

    mode = cfg.soft_label_mode
    for member in checkpoint.members:
        member.module.eval()
    loader = make_loader(split.validation, cfg.image_size, cfg.stage(checkpoint.role).batch_size,
                         shuffle=False, seed=0, num_workers=cfg.num_workers)
    probabilities, labels, masks = [], [], []
    with torch.no_grad():
        for images, batch_labels, batch_masks, _ in loader:
            if len(checkpoint.members) > 1:
                pred = teacher_ensemble_predict(checkpoint.members, images, mode)
            else:
                pred = predict(checkpoint.members[0], images, mode)
            probabilities.append(pred.probabilities.to(torch.float64).numpy())
            labels.append(batch_labels.numpy())
            masks.append(batch_masks.numpy())

    report = compute_eval_report(np.concatenate(probabilities), np.concatenate(labels), np.concatenate(masks),
                                 threshold, split.class_names, seed)
    latency = benchmark_inference(checkpoint.members[0], cfg.image_size, repeats=5)
    micro = report.micro
    logger.info(f"[OK] {checkpoint.role.value} on {report.sample_count} validation samples: "
                f"P={micro.precision:.4f} R={micro.recall:.4f} F1={micro.f1:.4f} "
                f"({latency * 1000:.2f} ms/image)")
    return report


# ---------------------------------------
# Ablation
# ---------------------------------------
@dataclass(frozen=True)
class AblationRow:
    name: str
    reports: Tuple[EvalReport, ...] = ()
    parameter_count: Optional[int] = None
    failed_seeds: Tuple[int, ...] = ()
    error: str = ''

    @property
    def failed(self) -> bool:
        return bool(self.failed_seeds) or not self.reports

    def median(self) -> Optional[Scores]:
        if not self.reports:
            return None
        micro = [r.micro for r in self.reports]
        return Scores(float(np.median([s.precision for s in micro])),
                      float(np.median([s.recall for s in micro])),
                      float(np.median([s.f1 for s in micro])))

    def median_macro_f1(self) -> Optional[float]:
        return float(np.median([r.macro.f1 for r in self.reports])) if self.reports else None


@dataclass(frozen=True)
class AblationReport:
    rows: Tuple[AblationRow, ...]
    threshold: float
    seeds: Tuple[int, ...]
    config_snapshot: str

    def row(self, name: str) -> AblationRow:
        return next(r for r in self.rows if r.name == name)


def _student_checkpoint(cfg: RunConfig, handle) -> Checkpoint:
    return Checkpoint(role=NetworkRole.STUDENT, members=[handle], config=cfg)


def _ablation_seed(cfg: RunConfig, split: DatasetSplit, seed: int) -> Dict[str, Tuple[Optional[EvalReport], int, str]]:
    """All four rows for one seed: name -> (report or None, parameter count, error)."""
    seed_cfg = replace(cfg, seed=seed)
    results: Dict[str, Tuple[Optional[EvalReport], int, str]] = {}

    def attempt(name: str, run):
        try:
            checkpoint = run()
            results[name] = (evaluate(checkpoint, split, cfg.threshold, seed),
                             sum(parameter_count(m) for m in checkpoint.members), '')
            return checkpoint
        except (DistillError, RuntimeError) as e:
            logger.error(f"Ablation row {name} failed for seed {seed}: {e}")
            results[name] = (None, 0, f"{type(e).__name__}: {e}")
            return None

    logger.info(f"--> Ablation seed {seed}")
    teacher = attempt('teacher_alone', lambda: train_teacher(seed_cfg, split)[0])
    attempt('student_alone', lambda: _student_checkpoint(seed_cfg, train_plain(seed_cfg, split, NetworkRole.STUDENT)[0]))

    if teacher is None:
        for name in ABLATION_ROWS[2:]:
            results[name] = (None, 0, 'teacher stage failed')
        return results

    teacher_records = None

    def from_teacher():
        nonlocal teacher_records
        teacher_records = export_distill_records(teacher, split)
        return train_student(seed_cfg, split, teacher_records, teacher)[0]

    def from_assistant():
        records = teacher_records if teacher_records is not None else export_distill_records(teacher, split)
        assistant, _ = train_assistant(seed_cfg, split, records, teacher)
        assistant_records = export_distill_records(assistant, split)
        if seed_cfg.feature_reference is FeatureReference.TEACHER:
            return train_student(seed_cfg, split, assistant_records, assistant, records, teacher)[0]
        return train_student(seed_cfg, split, assistant_records, assistant)[0]

    attempt('student_from_teacher', from_teacher)
    attempt('student_from_assistant', from_assistant)
    return results


def run_ablation(cfg: RunConfig, split: DatasetSplit) -> AblationReport:
    """
    Train and evaluate teacher_alone, student_alone, student_from_teacher and
    student_from_assistant for every ablation seed on one validation split.
    Student rows share architecture and initialisation seed.
    """
    logger.info("━" * 60)
    logger.info(f"▶ ABLATION over seeds {list(cfg.ablation_seeds)}")
    logger.info("━" * 60)
    per_seed = [(seed, _ablation_seed(cfg, split, seed)) for seed in cfg.ablation_seeds]

    rows = []
    for name in ABLATION_ROWS:
        reports = tuple(r[name][0] for _, r in per_seed if r[name][0] is not None)
        failed = tuple(seed for seed, r in per_seed if r[name][0] is None)
        errors = sorted({r[name][2] for _, r in per_seed if r[name][2]})
        counts = [r[name][1] for _, r in per_seed if r[name][0] is not None]
        rows.append(AblationRow(name=name, reports=reports, parameter_count=counts[0] if counts else None,
                                failed_seeds=failed, error='; '.join(errors)))

    report = AblationReport(rows=tuple(rows), threshold=cfg.threshold, seeds=tuple(cfg.ablation_seeds),
                            config_snapshot=cfg.to_text())
    logger.info("━" * 60)
    logger.info("◼ ABLATION COMPLETE")
    for row in report.rows:
        median = row.median()
        logger.info(f"  {row.name:<24} {'FAILED' if row.failed else f'F1={median.f1:.4f}'}")
    logger.info("━" * 60)
    return report


# ---------------------------------------
# Report emission
# ---------------------------------------
def _fmt(value: Optional[float]) -> str:
    return FAILED if value is None else f"{value:.6f}"


def _seed_text(seed: Optional[int]) -> str:
    return '' if seed is None else str(seed)


def _eval_rows(report: EvalReport) -> List[Tuple[str, Scores]]:
    rows = [(c.name, c.scores) for c in report.per_class]
    return rows + [('micro', report.micro), ('macro', report.macro)]


def _csv_frame(report: Union[EvalReport, AblationReport]) -> pd.DataFrame:
    records = []
    if isinstance(report, EvalReport):
        for name, s in _eval_rows(report):
            records.append([name, _fmt(s.precision), _fmt(s.recall), _fmt(s.f1), _fmt(report.threshold),
                            _seed_text(report.seed)])
    else:
        for row in report.rows:
            for r in row.reports:
                m = r.micro
                records.append([row.name, _fmt(m.precision), _fmt(m.recall), _fmt(m.f1), _fmt(report.threshold),
                                _seed_text(r.seed)])
            for seed in row.failed_seeds:
                records.append([row.name, FAILED, FAILED, FAILED, _fmt(report.threshold), str(seed)])
            median = row.median()
            if row.failed or median is None:
                records.append([row.name, FAILED, FAILED, FAILED, _fmt(report.threshold), 'median'])
            else:
                records.append([row.name, _fmt(median.precision), _fmt(median.recall), _fmt(median.f1),
                                _fmt(report.threshold), 'median'])
    return pd.DataFrame(records, columns=CSV_COLUMNS)


def _text_table(report: Union[EvalReport, AblationReport]) -> str:
    if isinstance(report, EvalReport):
        frame = pd.DataFrame(
            [[c.name, c.tp, c.fp, c.fn, c.tn, _fmt(c.precision), _fmt(c.recall), _fmt(c.f1)]
             for c in report.per_class]
            + [[name, '', '', '', '', _fmt(s.precision), _fmt(s.recall), _fmt(s.f1)]
               for name, s in _eval_rows(report)[-2:]],
            columns=['class', 'tp', 'fp', 'fn', 'tn', 'precision', 'recall', 'f1'],
        )
        header = f"samples: {report.sample_count}  threshold: {_fmt(report.threshold)}"
    else:
        table = []
        for row in report.rows:
            median = None if row.failed else row.median()
            macro = None if row.failed else row.median_macro_f1()
            table.append([row.name,
                          _fmt(median.precision if median else None),
                          _fmt(median.recall if median else None),
                          _fmt(median.f1 if median else None),
                          _fmt(macro),
                          '' if row.parameter_count is None else str(row.parameter_count)])
        frame = pd.DataFrame(table, columns=['row', 'precision', 'recall', 'f1', 'macro_f1', 'parameters'])
        header = f"seeds: {','.join(map(str, report.seeds))}  threshold: {_fmt(report.threshold)}"
    lines = [header, frame.to_string(index=False), ""] + [f"# {line}" for line in FOOTER]
    return "\n".join(lines) + "\n"


def _jsonl(report: Union[EvalReport, AblationReport]) -> str:
    if isinstance(report, EvalReport):
        lines = [{'kind': 'eval', **report.to_dict()}]
    else:
        lines = [{'kind': 'ablation', 'threshold': report.threshold, 'seeds': list(report.seeds),
                  'config_snapshot': report.config_snapshot}]
        for row in report.rows:
            lines.append({'kind': 'row', 'row': row.name, 'status': FAILED if row.failed else 'OK',
                          'parameter_count': row.parameter_count, 'failed_seeds': list(row.failed_seeds),
                          'error': row.error, 'reports': [r.to_dict() for r in row.reports]})
    return "".join(json.dumps(line, sort_keys=True) + "\n" for line in lines)


def from_jsonl(text: str) -> Union[EvalReport, AblationReport]:
    """Inverse of the json-lines emission."""
    lines = [json.loads(line) for line in text.splitlines() if line.strip()]
    if not lines:
        raise ValueError("empty json-lines report")
    head = lines[0]
    if head['kind'] == 'eval':
        return EvalReport.from_dict(head)
    rows = tuple(
        AblationRow(name=line['row'], reports=tuple(EvalReport.from_dict(r) for r in line['reports']),
                    parameter_count=line['parameter_count'], failed_seeds=tuple(line['failed_seeds']),
                    error=line['error'])
        for line in lines[1:]
    )
    return AblationReport(rows=rows, threshold=head['threshold'], seeds=tuple(head['seeds']),
                          config_snapshot=head['config_snapshot'])


def render_report(report: Union[EvalReport, AblationReport], fmt: str) -> str:
    if fmt == 'text-table':
        return _text_table(report)
    if fmt == 'csv':
        return _csv_frame(report).to_csv(index=False, lineterminator='\n')
    if fmt == 'json-lines':
        return _jsonl(report)
    raise ParameterError(f"unknown report format '{fmt}' (expected one of {', '.join(REPORT_FORMATS)})")


def emit_report(report: Union[EvalReport, AblationReport], fmt: str, path: Union[str, Path]) -> Path:
    """Write the report in `fmt`; identical reports give identical bytes."""
    path = atomic_write_text(path, render_report(report, fmt))
    logger.info(f"[OK] Wrote {fmt} report to {path}")
    return path
