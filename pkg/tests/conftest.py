import sys
from pathlib import Path

import numpy as np
import pytest

# Make imports work no matter where pytest is started from
ROOT = Path(__file__).resolve().parent.parent
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

# imported after fixing sys.path
from services.cv_service import TrainConfig
from services.data_service import AugmentationConfig, PatientRecord, generate_synthetic
from services.model_service import ModelConfig


@pytest.fixture(autouse=True)
def sandbox_cwd(tmp_path, monkeypatch):
    """
    Every test runs inside a throwaway directory so relative output paths
    (results/, data/, model/) never touch the repository.
    """
    monkeypatch.chdir(tmp_path)
    # tmp_path is cleaned by pytest
    yield


@pytest.fixture
def tiny_model_config():
    """16x16 inputs and narrow layers: the whole trunk runs in milliseconds."""
    return ModelConfig(image_size=16, conv_channels=(4, 8, 8, 8), kernel_size=3,
                       pool_after=(0, 1, 2), mlp_hidden=16, seed=42)


@pytest.fixture
def fast_train_config():
    return TrainConfig(epochs=2, batch_size=4, learning_rate=3e-3,
                       augmentation=AugmentationConfig.disabled(), seed=0)


@pytest.fixture
def synthetic_manifest(tmp_path):
    """A 10 patient phantom cohort at 16x16, 4 of them CHIP."""
    return generate_synthetic(n_patients=10, chip_fraction=0.4, signal_strength=0.5,
                              missing_view_rate=0.2, seed=3, out_dir=tmp_path / "cohort",
                              image_size=16)


def make_record(patient_id, chip=False, n_sas=2, views=("4CH", "VLA", "LVOT"), size=16, seed=0):
    """helper: an in-memory PatientRecord filled with random pixels"""
    rng = np.random.default_rng(seed)
    return PatientRecord(
        patient_id=patient_id,
        chip_label=chip,
        sas_slices=[rng.random((size, size)) for _ in range(n_sas)],
        ch4=rng.random((size, size)) if "4CH" in views else None,
        vla=rng.random((size, size)) if "VLA" in views else None,
        lvot=rng.random((size, size)) if "LVOT" in views else None,
    )
