# tests/conftest.py
"""
Pytest configuration and shared fixtures for cxr-distill tests
"""
import pytest
import numpy as np
from pathlib import Path
from PIL import Image

# Add src to path
import sys
sys.path.insert(0, str(Path(__file__).parent.parent))

FAST_STAGES = [
    'teacher_epochs=1', 'assistant_epochs=1', 'student_epochs=1',
    'teacher_batch_size=16', 'assistant_batch_size=16', 'student_batch_size=16',
]


def make_config(*overrides, **kwargs):
    """RunConfig from `key=value` overrides on top of a small, fast profile."""
    from src.core import RunConfig

    base = [
        'class_count=3',
        'image_size=32',
        'teacher_backbones=tiny-b6',
        'ablation_seeds=0',
        'synth_n_samples=60',
        'synth_noise=0.2',
        *FAST_STAGES,
    ]
    base.extend(f'{key}={value}' for key, value in kwargs.items())
    return RunConfig.from_text('', overrides=base + list(overrides))


@pytest.fixture
def config_factory():
    return make_config


@pytest.fixture(scope='session')
def synth_dir(tmp_path_factory):
    """Synthetic motif dataset shared by the whole session (60 samples, 3 classes, 32x32)."""
    from src.data import SynthSpec, synthesize_dataset

    directory = tmp_path_factory.mktemp('synth')
    spec = SynthSpec(n_samples=60, class_count=3, image_size=32, rule_seed=0, noise=0.2)
    synthesize_dataset(spec, directory)
    return directory


@pytest.fixture(scope='session')
def synth_manifest(synth_dir):
    return synth_dir / 'manifest.csv'


@pytest.fixture
def tiny_config(synth_manifest):
    return make_config(manifest=str(synth_manifest))


@pytest.fixture
def tiny_split(tiny_config):
    from src.data import load_dataset
    return load_dataset(tiny_config)


@pytest.fixture(scope='session')
def trained_teacher(synth_manifest):
    """One-epoch teacher checkpoint plus its exported records."""
    from src.data import load_dataset
    from src.distill import export_distill_records, train_teacher

    cfg = make_config(manifest=str(synth_manifest))
    split = load_dataset(cfg)
    checkpoint, report = train_teacher(cfg, split)
    records = export_distill_records(checkpoint, split)
    return checkpoint, records, report


@pytest.fixture
def gray_image_dir(tmp_path):
    """Three small grayscale PNGs: a.png, b.png, c.png."""
    image_dir = tmp_path / 'images'
    image_dir.mkdir()
    for index, name in enumerate(('a', 'b', 'c')):
        pixels = np.full((16, 16), 40 * (index + 1), dtype=np.uint8)
        Image.fromarray(pixels).save(image_dir / f'{name}.png')
    return image_dir


@pytest.fixture
def write_manifest(tmp_path):
    """Write manifest text to tmp_path/manifest.csv and return the path."""
    def _write(text, name='manifest.csv'):
        path = tmp_path / name
        path.write_text(text)
        return path
    return _write
