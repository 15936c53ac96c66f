# conftest.py
import sys
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parent
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from modules.data import synth_generate, write_split  # noqa: E402
from modules.losses import LossConfig  # noqa: E402
from modules.model import ModelConfig  # noqa: E402
from modules.settings import get_settings  # noqa: E402


@pytest.fixture(autouse=True)
def isolated_settings(tmp_path, monkeypatch):
    """Cada test con rutas propias y sin .env del desarrollador."""
    monkeypatch.setenv("CAPSULE_ENV_PATH", str(tmp_path / "no.env"))
    monkeypatch.setenv("CAPSULE_DATA_ROOT", str(tmp_path / "data"))
    monkeypatch.setenv("CAPSULE_RUNS_ROOT", str(tmp_path / "runs"))
    monkeypatch.setenv("CAPSULE_LOG_LEVEL", "WARNING")
    monkeypatch.setenv("CAPSULE_NUM_WORKERS", "0")
    monkeypatch.setenv("CAPSULE_DEVICE", "cpu")
    get_settings.cache_clear()
    yield
    get_settings.cache_clear()


@pytest.fixture
def loss_cfg() -> LossConfig:
    return LossConfig()


@pytest.fixture
def tiny_model_cfg() -> ModelConfig:
    """Modelo mínimo a 32 px: tres etapas de stem, 4 tokens, una capa Transformer."""
    return ModelConfig(
        input_size=32,
        patch_size=16,
        stem_channels=(4, 8, 16),
        embed_dim=16,
        depth=1,
        heads=2,
    )


@pytest.fixture
def tiny_samples():
    return synth_generate(8, 32, seed=3, cases=2)


@pytest.fixture
def synth_root(tmp_path):
    """Dataset sintético chico en disco: 16 cortes de entrenamiento y 4 de prueba (2 casos)."""
    root = tmp_path / "dataset"
    write_split(synth_generate(16, 32, seed=1, cases=2), root, "train")
    write_split(synth_generate(4, 32, seed=2, cases=2, case_offset=2), root, "test")
    return root
