from dataclasses import replace

import numpy as np
import pytest

from conftest import make_record
from services.autograd_service import backward, bce_loss
from services.data_service import enumerate_samples
from services.errors import ConfigError, ShapeError, StorageError
from services.model_service import (
    ModelConfig, build_model, forward, forward_batch, load_checkpoint, parameter_count,
    predict_batch, save_checkpoint,
)

# 80 + 1168 + 4640 + 9248 conv weights/biases, 16512 + 129 for the MLP head
DEFAULT_PARAMETER_COUNT = 31777


def one_sample(seed=0, views=("4CH", "VLA", "LVOT")):
    """helper: a single 16x16 ViewSet"""
    return enumerate_samples(make_record("P001", n_sas=1, views=views, seed=seed))[0]


def test_default_parameter_count():
    """positive, closed form and built model agree on the default architecture"""
    assert parameter_count(ModelConfig()) == DEFAULT_PARAMETER_COUNT
    assert build_model(ModelConfig()).parameter_count() == DEFAULT_PARAMETER_COUNT


def test_unshared_trunks_quadruple_trunk_parameters():
    shared = parameter_count(ModelConfig())
    unshared = parameter_count(ModelConfig(shared_trunk=False))
    assert unshared - shared == 3 * (80 + 1168 + 4640 + 9248)
    assert build_model(ModelConfig(shared_trunk=False)).parameter_count() == unshared


def test_same_seed_same_parameters(tiny_model_config):
    a = build_model(tiny_model_config).parameter_vector()
    b = build_model(tiny_model_config).parameter_vector()
    c = build_model(replace(tiny_model_config, seed=43)).parameter_vector()
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


@pytest.mark.parametrize("overrides", [
    {"image_size": 100},
    {"conv_channels": (8, 16, 32)},
    {"kernel_size": 4},
    {"pool_after": (0, 0, 1)},
    {"mlp_hidden": 0},
    {"seed": -1},
])
def test_invalid_configs_rejected(overrides):
    """negative, configs whose conv/pool stack is not shape-total"""
    with pytest.raises(ConfigError):
        build_model(replace(ModelConfig(), **overrides))


def test_forward_is_a_probability(tiny_model_config):
    prob = forward(build_model(tiny_model_config), one_sample())
    assert 0.0 < prob < 1.0


def test_forward_rejects_wrong_image_size(tiny_model_config):
    """negative, a 16x16 model fed 32x32 views"""
    model = build_model(tiny_model_config)
    with pytest.raises(ShapeError):
        forward_batch(model, np.zeros((1, 4, 32, 32)))


def test_swapping_views_changes_output(tiny_model_config):
    """positive, view order matters: concatenation is not order-invariant"""
    model = build_model(tiny_model_config)
    sample = one_sample(seed=5)
    swapped = replace(sample, sas=sample.ch4, ch4=sample.sas)
    assert abs(forward(model, sample) - forward(model, swapped)) > 1e-9


@pytest.mark.parametrize("shared", [True, False])
def test_zero_imputed_views_give_finite_output(tiny_model_config, shared):
    model = build_model(replace(tiny_model_config, shared_trunk=shared))
    sample = one_sample(views=("VLA",))
    assert sample.imputed_mask == (False, True, False, True)
    assert np.isfinite(forward(model, sample))


def test_predict_batch_matches_forward(tiny_model_config):
    model = build_model(tiny_model_config)
    samples = [one_sample(seed=s) for s in range(5)]
    assert predict_batch(model, []) == []
    assert predict_batch(model, samples[:1]) == pytest.approx([forward(model, samples[0])], abs=1e-12)

    probs = predict_batch(model, samples)
    order = [3, 0, 4, 1, 2]
    permuted = predict_batch(model, [samples[i] for i in order])
    assert permuted == pytest.approx([probs[i] for i in order], abs=1e-12)


@pytest.mark.parametrize("shared", [True, False])
def test_every_parameter_receives_a_gradient(tiny_model_config, shared):
    """positive, one backward pass reaches every trunk and head parameter"""
    model = build_model(replace(tiny_model_config, shared_trunk=shared))
    sample = one_sample(seed=2)
    loss = bce_loss(forward_batch(model, sample.stack()[None]), [1.0])
    backward(loss)
    for p in model.parameters():
        assert p.grad is not None, p.name
        assert p.grad.shape == p.shape
    assert model.output[1].grad[0] != 0.0
    for trunk in model.trunks:
        assert any(np.any(kernels.grad != 0.0) for kernels, _ in trunk)


def test_checkpoint_round_trip_is_bit_exact(tiny_model_config, tmp_path):
    model = build_model(tiny_model_config)
    model.trained_patient_ids = frozenset({"P002", "P001"})
    path = save_checkpoint(model, tmp_path / "m.chpv")
    assert path.read_bytes()[:4] == b"CHPV"

    loaded = load_checkpoint(path)
    assert loaded.config == tiny_model_config
    assert loaded.trained_patient_ids == {"P001", "P002"}
    assert np.array_equal(loaded.parameter_vector(), model.parameter_vector())
    sample = one_sample()
    assert forward(loaded, sample) == forward(model, sample)


def test_corrupt_checkpoint(tmp_path):
    """negative, wrong magic bytes"""
    bad = tmp_path / "bad.chpv"
    bad.write_bytes(b"NOPE" + bytes(16))
    with pytest.raises(StorageError):
        load_checkpoint(bad)


def test_truncated_checkpoint(tiny_model_config, tmp_path):
    """negative, a checkpoint cut short"""
    path = save_checkpoint(build_model(tiny_model_config), tmp_path / "m.chpv")
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(StorageError):
        load_checkpoint(path)
