# src/cli.py
"""
Command-line entry point.

    python -m src.cli <command> [--config FILE] [--set key=value ...]
                                [--output-dir DIR] [--force]
    python -m src.cli run-pipeline ... [--force | --resume]

Exit codes: 0 success, 2 configuration error, 3 stage failure, 4 I/O error.
Failures print one line to stderr:
    error category=<config|stage|io> type=<ExceptionName> message="<text>"
"""
from __future__ import annotations

import argparse
import os
import shlex
import shutil
import sys
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

from src.core import (
    OUTPUT_ROOT,
    CheckpointError,
    ConfigError,
    DimensionError,
    ManifestParseError,
    NetworkRole,
    NumericalError,
    OutputDirError,
    ParameterError,
    RecordStoreError,
    RegistryError,
    RunConfig,
    StageError,
    ValidationError,
    atomic_write_text,
    config_snapshot_text,
    get_logger,
    setup_logging,
)
from src.data import SynthSpec, load_dataset, synthesize_dataset
from src.distill import (
    ASSISTANT_CKPT,
    REPORTS_DIR,
    STUDENT_CKPT,
    TEACHER_CKPT,
    Checkpoint,
    RecordStore,
    export_distill_records,
    run_pipeline,
    train_assistant,
    train_student,
    train_teacher,
)
from src.metrics import emit_report, evaluate, run_ablation

logger = get_logger('cli')

COMMANDS = ('synth-data', 'train-teacher', 'export-records', 'distill-assistant', 'distill-student',
            'run-pipeline', 'evaluate', 'ablate')
SNAPSHOT_NAME = 'run_config.cfg'
LOCK_NAME = '.lock'
METRICS_DIR = 'metrics'
REPORT_SUFFIXES = {'text-table': '.txt', 'csv': '.csv', 'json-lines': '.jsonl'}

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_CONFIG = 2
EXIT_STAGE = 3
EXIT_IO = 4

_CATEGORIES: Tuple[Tuple[Tuple[type, ...], str, int], ...] = (
    ((ConfigError, ParameterError, RegistryError, ManifestParseError, ValidationError), 'config', EXIT_CONFIG),
    ((StageError, NumericalError, CheckpointError, RecordStoreError, DimensionError), 'stage', EXIT_STAGE),
    ((OSError,), 'io', EXIT_IO),
)


def error_category(exc: BaseException) -> Tuple[str, int]:
    for types, category, code in _CATEGORIES:
        if isinstance(exc, types):
            return category, code
    return 'internal', EXIT_INTERNAL


def error_line(exc: BaseException) -> str:
    category, _ = error_category(exc)
    message = str(exc).replace('\\', '\\\\').replace('"', '\\"').replace('\n', ' ')
    return f'error category={category} type={type(exc).__name__} message="{message}"'


# ---------------------------------------
# Invocation
# ---------------------------------------
@dataclass(frozen=True)
class CommandInvocation:
    command: str
    config_path: Optional[Path]
    overrides: Tuple[str, ...] = ()
    output_dir: Path = field(default_factory=lambda: OUTPUT_ROOT)
    force: bool = False
    resume: bool = False
    checkpoint: Optional[Path] = None
    records: Optional[Path] = None
    feature_checkpoint: Optional[Path] = None
    feature_records: Optional[Path] = None
    argv: Tuple[str, ...] = ()

    def load_config(self) -> RunConfig:
        if self.config_path is not None:
            return RunConfig.from_file(self.config_path, overrides=self.overrides)
        return RunConfig.from_text('', overrides=self.overrides, origin='defaults')


def _config_help() -> str:
    lines = ["recognised config keys (key = default):"]
    lines.extend(f"  {key} = {default}" for key, default in RunConfig.default_items())
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='cxr-distill',
        description='Teacher -> assistant -> student distillation for multi-label image classification',
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=_config_help(),
    )
    subparsers = parser.add_subparsers(dest='command', required=True)
    helps = {
        'synth-data': 'generate the synthetic motif dataset (images + manifest.csv)',
        'train-teacher': 'train the teacher ensemble on hard labels',
        'export-records': 'export soft labels and pooled features from a checkpoint',
        'distill-assistant': 'train the assistant from teacher records',
        'distill-student': 'train the student from assistant (or teacher) records',
        'run-pipeline': 'run teacher, assistant and student stages and evaluate them',
        'evaluate': 'evaluate a checkpoint on the validation split',
        'ablate': 'run the four-row ablation over the configured seeds',
    }
    for command in COMMANDS:
        sub = subparsers.add_parser(command, help=helps[command], description=helps[command],
                                    formatter_class=argparse.RawDescriptionHelpFormatter, epilog=_config_help())
        sub.add_argument('--config', type=Path, help='run configuration file (key = value lines)')
        sub.add_argument('--set', dest='overrides', action='append', default=[], metavar='KEY=VALUE',
                         help='override one config key; repeatable')
        sub.add_argument('--output-dir', type=Path, default=None,
                         help='artifact directory (default: $CXR_DISTILL_OUTPUT_ROOT/<command>)')
        mode = sub.add_mutually_exclusive_group()
        mode.add_argument('--force', action='store_true', help='clear a populated output directory first')
        if command == 'run-pipeline':
            mode.add_argument('--resume', action='store_true',
                              help='reuse artifacts whose stage config and upstream checksum still match')
        if command in ('export-records', 'distill-assistant', 'distill-student', 'evaluate'):
            sub.add_argument('--checkpoint', type=Path, required=True, help='input checkpoint')
        if command in ('distill-assistant', 'distill-student'):
            sub.add_argument('--records', type=Path, required=True, help='record store of --checkpoint')
        if command == 'distill-student':
            sub.add_argument('--feature-checkpoint', type=Path, help='checkpoint producing feature references')
            sub.add_argument('--feature-records', type=Path, help='record store of --feature-checkpoint')
    return parser


def parse_invocation(argv: Sequence[str]) -> CommandInvocation:
    args = build_parser().parse_args(list(argv))
    output_dir = args.output_dir if args.output_dir is not None else OUTPUT_ROOT / args.command
    return CommandInvocation(
        command=args.command,
        config_path=args.config,
        overrides=tuple(args.overrides),
        output_dir=output_dir,
        force=args.force,
        resume=getattr(args, 'resume', False),
        checkpoint=getattr(args, 'checkpoint', None),
        records=getattr(args, 'records', None),
        feature_checkpoint=getattr(args, 'feature_checkpoint', None),
        feature_records=getattr(args, 'feature_records', None),
        argv=tuple(argv),
    )


# ---------------------------------------
# Output directory
# ---------------------------------------
@contextmanager
def output_directory(inv: CommandInvocation) -> Iterator[Path]:
    """
    Create or clear the output directory and hold a lock file in it.
    A populated directory is refused unless --force (or, for run-pipeline,
    --resume) is given.
    """
    out = Path(inv.output_dir)
    lock = out / LOCK_NAME
    if lock.exists():
        raise OutputDirError(f"{out} is locked by another run ({lock} exists)")
    if out.exists() and any(out.iterdir()):
        if inv.force:
            logger.info(f"--force: clearing {out}")
            shutil.rmtree(out)
        elif not inv.resume:
            logger.error(f"Output directory {out} is not empty")
            hint = " or --resume to reuse artifacts" if inv.command == 'run-pipeline' else ""
            raise OutputDirError(f"{out} is not empty; use --force to overwrite{hint}")
    out.mkdir(parents=True, exist_ok=True)

    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise OutputDirError(f"{out} is locked by another run") from None
    with os.fdopen(fd, 'w') as f:
        f.write(f"{os.getpid()}\n")
    try:
        yield out
    finally:
        lock.unlink(missing_ok=True)


def write_snapshot(cfg: RunConfig, out: Path, inv: CommandInvocation) -> Path:
    command = 'cxr-distill ' + ' '.join(shlex.quote(a) for a in inv.argv)
    return atomic_write_text(out / SNAPSHOT_NAME, config_snapshot_text(cfg, command))


def _emit_all(report, directory: Path, stem: str) -> List[Path]:
    return [emit_report(report, fmt, directory / f'{stem}{suffix}') for fmt, suffix in REPORT_SUFFIXES.items()]


# ---------------------------------------
# Commands
# ---------------------------------------
def cmd_synth_data(cfg: RunConfig, out: Path, inv: CommandInvocation) -> RunConfig:
    _, manifest = synthesize_dataset(SynthSpec.from_config(cfg), out)
    return replace(cfg, manifest=str(manifest.resolve()))


def cmd_train_teacher(cfg: RunConfig, out: Path, inv: CommandInvocation) -> RunConfig:
    checkpoint, report = train_teacher(cfg, load_dataset(cfg))
    checkpoint.save(out / TEACHER_CKPT)
    report.write(out / REPORTS_DIR / 'teacher.json')
    return cfg


def cmd_export_records(cfg: RunConfig, out: Path, inv: CommandInvocation) -> RunConfig:
    checkpoint = Checkpoint.load(inv.checkpoint)
    store = export_distill_records(checkpoint, load_dataset(cfg), cfg.temperature, cfg.soft_label_mode,
                                   cfg.missing_image_policy)
    store.write(out / f'{checkpoint.role.value}_records.kdrs')
    return cfg


def cmd_distill_assistant(cfg: RunConfig, out: Path, inv: CommandInvocation) -> RunConfig:
    teacher = Checkpoint.load(inv.checkpoint, expected_role=NetworkRole.TEACHER)
    checkpoint, report = train_assistant(cfg, load_dataset(cfg), RecordStore.read(inv.records), teacher)
    checkpoint.save(out / ASSISTANT_CKPT)
    report.write(out / REPORTS_DIR / 'assistant.json')
    return cfg


def cmd_distill_student(cfg: RunConfig, out: Path, inv: CommandInvocation) -> RunConfig:
    producer = Checkpoint.load(inv.checkpoint)
    feature_records = feature_checkpoint = None
    if inv.feature_records is not None or inv.feature_checkpoint is not None:
        if inv.feature_records is None or inv.feature_checkpoint is None:
            raise ConfigError("--feature-records and --feature-checkpoint must be given together")
        feature_records = RecordStore.read(inv.feature_records)
        feature_checkpoint = Checkpoint.load(inv.feature_checkpoint)
    checkpoint, report = train_student(cfg, load_dataset(cfg), RecordStore.read(inv.records), producer,
                                       feature_records, feature_checkpoint)
    checkpoint.save(out / STUDENT_CKPT)
    report.write(out / REPORTS_DIR / 'student.json')
    return cfg


def cmd_run_pipeline(cfg: RunConfig, out: Path, inv: CommandInvocation) -> RunConfig:
    split = load_dataset(cfg)
    result = run_pipeline(cfg, split, out, resume=inv.resume)
    for role in NetworkRole:
        _emit_all(evaluate(result.checkpoints[role], split, cfg.threshold, cfg.seed), out / METRICS_DIR,
                  f'{role.value}_eval')
    return cfg


def cmd_evaluate(cfg: RunConfig, out: Path, inv: CommandInvocation) -> RunConfig:
    checkpoint = Checkpoint.load(inv.checkpoint)
    report = evaluate(checkpoint, load_dataset(cfg), cfg.threshold, cfg.seed)
    _emit_all(report, out / METRICS_DIR, f'{checkpoint.role.value}_eval')
    return cfg


def cmd_ablate(cfg: RunConfig, out: Path, inv: CommandInvocation) -> RunConfig:
    _emit_all(run_ablation(cfg, load_dataset(cfg)), out, 'ablation')
    return cfg


HANDLERS: Dict[str, Callable[[RunConfig, Path, CommandInvocation], RunConfig]] = {
    'synth-data': cmd_synth_data,
    'train-teacher': cmd_train_teacher,
    'export-records': cmd_export_records,
    'distill-assistant': cmd_distill_assistant,
    'distill-student': cmd_distill_student,
    'run-pipeline': cmd_run_pipeline,
    'evaluate': cmd_evaluate,
    'ablate': cmd_ablate,
}


def dispatch(inv: CommandInvocation) -> int:
    """Run one command; returns the process exit code."""
    logger.info("━" * 60)
    logger.info(f"▶ RUN STARTED: {inv.command}")
    try:
        cfg = inv.load_config()
        with output_directory(inv) as out:
            # Snapshot first so a failed run is still reconstructible
            write_snapshot(cfg, out, inv)
            resolved = HANDLERS[inv.command](cfg, out, inv)
            if resolved != cfg:
                write_snapshot(resolved, out, inv)
    except Exception as e:
        category, code = error_category(e)
        if code == EXIT_INTERNAL:
            logger.exception("Unhandled exception occurred")
        else:
            logger.error(f"{inv.command} failed ({category}): {e}")
        print(error_line(e), file=sys.stderr)
        return code
    logger.info(f"◼ RUN COMPLETE: {inv.command} -> {inv.output_dir}")
    logger.info("━" * 60)
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    setup_logging()
    return dispatch(parse_invocation(argv))


if __name__ == '__main__':
    sys.exit(main())
