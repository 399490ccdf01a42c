import pytest

import storage
from app import EXIT_IO, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from config import RUN_CONFIG_FILE, RunConfig
from services.cv_service import FoldReport, ImagePrediction, TrainConfig
from services.data_service import AugmentationConfig, generate_synthetic
from services.errors import NumericError, StorageError


@pytest.fixture
def tiny_config_file(tmp_path, tiny_model_config):
    """run config with the tiny model and one epoch without augmentation"""
    train = TrainConfig(epochs=1, batch_size=8, learning_rate=3e-3, augmentation=AugmentationConfig.disabled())
    return storage.write_json(tmp_path / "tiny.json", RunConfig(model=tiny_model_config, train=train).to_dict())


def stub_reports():
    return [
        FoldReport(0, [ImagePrediction("P1", 0, 0.8, 1), ImagePrediction("P2", 0, 0.3, 0)], test_patients=["P1", "P2"]),
        FoldReport(1, [ImagePrediction("P3", 0, 0.6, 1), ImagePrediction("P4", 0, 0.7, 0)], test_patients=["P3", "P4"]),
    ]


# usage

def test_no_command_is_usage_error(capsys):
    assert main([]) == EXIT_USAGE


def test_bad_flag_value_is_usage_error(capsys):
    """negative, argparse problems map to exit 1 rather than 2"""
    assert main(["synth", "--patients", "many"]) == EXIT_USAGE
    assert "invalid int value" in capsys.readouterr().err


# synth

def test_synth_writes_cohort(tmp_path, capsys):
    status = main(["synth", "--out", "d", "--patients", "5", "--image-size", "16", "--seed", "7", "--quiet"])
    assert status == EXIT_OK
    assert (tmp_path / "d" / "manifest.json").is_file()
    out = capsys.readouterr().out
    assert "patients=5" in out and "chip=2" in out


def test_synth_single_patient(capsys):
    """negative, need at least 2 patients"""
    assert main(["synth", "--patients", "1"]) == EXIT_USAGE
    assert "at least 2 patients" in capsys.readouterr().err


def test_synth_io_failure(mocker, capsys):
    mocker.patch("app.generate_synthetic", side_effect=StorageError("disk full"))
    assert main(["synth", "--patients", "4", "--quiet"]) == EXIT_IO
    assert "disk full" in capsys.readouterr().err


# cv

def test_cv_requires_manifest(capsys):
    assert main(["cv", "--quiet"]) == EXIT_USAGE
    assert "manifest" in capsys.readouterr().err


def test_cv_with_stubbed_folds(mocker, synthetic_manifest, tiny_config_file, tmp_path):
    """positive, the cv command hands the resolved config to run_cv and writes the report"""
    run = mocker.patch("app.run_cv", return_value=stub_reports())
    status = main(["cv", "--manifest", str(synthetic_manifest), "--config", str(tiny_config_file),
                   "--out", "res", "--k", "2", "--seed", "4", "--epochs", "3", "--quiet"])
    assert status == EXIT_OK

    run.assert_called_once()
    manifest, train_config, model_config = run.call_args.args
    assert manifest == str(synthetic_manifest)
    assert train_config.epochs == 3
    assert train_config.seed == 4
    assert model_config.image_size == 16
    assert run.call_args.kwargs == {"k": 2, "seed": 4, "out_dir": "res", "jobs": 1, "stratified": True}

    out = tmp_path / "res"
    for name in ("metrics.json", "roc_ratio.csv", "roc_max.csv", "roc.svg", RUN_CONFIG_FILE):
        assert (out / name).is_file(), name
    assert storage.read_json(out / RUN_CONFIG_FILE)["train"]["epochs"] == 3


def test_cv_numeric_failure(mocker, synthetic_manifest, tiny_config_file, capsys):
    mocker.patch("app.run_cv", side_effect=NumericError("Non-finite training loss at epoch 1."))
    status = main(["cv", "--manifest", str(synthetic_manifest), "--config", str(tiny_config_file), "--quiet"])
    assert status == EXIT_NUMERIC
    assert "Non-finite" in capsys.readouterr().err


def test_cv_more_folds_than_patients(tmp_path, tiny_config_file):
    """negative, --k 6 with 5 patients"""
    manifest = generate_synthetic(5, 0.4, 0.5, 0.0, 0, tmp_path / "five", image_size=16)
    status = main(["cv", "--manifest", str(manifest), "--config", str(tiny_config_file), "--k", "6", "--quiet"])
    assert status == EXIT_USAGE


def test_cv_end_to_end_is_reproducible(synthetic_manifest, tiny_config_file, tmp_path):
    """positive, two identical runs give identical metrics and fold reports"""
    for out in ("r1", "r2"):
        status = main(["cv", "--manifest", str(synthetic_manifest), "--config", str(tiny_config_file),
                       "--k", "2", "--out", out, "--quiet"])
        assert status == EXIT_OK
    for name in ("metrics.json", "fold_0.json", "fold_1.json", "roc_ratio.csv"):
        assert (tmp_path / "r1" / name).read_bytes() == (tmp_path / "r2" / name).read_bytes()
    metrics = storage.read_json(tmp_path / "r1" / "metrics.json")
    assert 0.0 <= metrics["auc_ratio"] <= 1.0
    assert metrics["n_patients"] == 10


def test_cv_zero_epochs_is_near_chance(tmp_path):
    """positive, an untrained network scores patients at chance on the 82 patient cohort"""
    assert main(["synth", "--out", "data", "--patients", "82", "--chip-fraction", "0.42",
                 "--image-size", "16", "--seed", "7", "--quiet"]) == EXIT_OK
    status = main(["cv", "--manifest", "data/manifest.json", "--image-size", "16",
                   "--epochs", "0", "--seed", "0", "--out", "untrained", "--quiet"])
    assert status == EXIT_OK
    metrics = storage.read_json(tmp_path / "untrained" / "metrics.json")
    assert metrics["n_patients"] == 82
    assert 0.3 < metrics["auc_ratio"] < 0.7
    assert 0.0 <= metrics["auc_max"] <= 1.0


# train

def test_train_writes_checkpoint(synthetic_manifest, tiny_config_file, tmp_path, capsys):
    status = main(["train", "--manifest", str(synthetic_manifest), "--config", str(tiny_config_file),
                   "--out", "model", "--quiet"])
    assert status == EXIT_OK
    for name in ("model.chpv", "loss_history.json", RUN_CONFIG_FILE):
        assert (tmp_path / "model" / name).is_file(), name
    assert "Trained on 10 patients" in capsys.readouterr().out


# report

def write_stub_results(directory):
    for report in stub_reports():
        storage.write_json(directory / f"fold_{report.fold_index}.json", report.to_dict())


def test_report_from_fold_files(tmp_path):
    results = tmp_path / "results"
    results.mkdir()
    write_stub_results(results)
    assert main(["report", "--results", str(results), "--quiet"]) == EXIT_OK
    assert (results / "roc.svg").read_text().count("<polyline") == 2
    assert storage.read_json(results / "metrics.json")["n_patients"] == 4


def test_report_missing_results(capsys):
    assert main(["report", "--results", "nowhere", "--quiet"]) == EXIT_USAGE


def test_report_corrupt_fold_file(tmp_path):
    """negative, a fold report that is not JSON"""
    results = tmp_path / "results"
    results.mkdir()
    (results / "fold_0.json").write_text("{oops")
    assert main(["report", "--results", str(results), "--quiet"]) == EXIT_USAGE


def test_report_single_class(tmp_path, capsys):
    results = tmp_path / "results"
    results.mkdir()
    report = FoldReport(0, [ImagePrediction("P1", 0, 0.4, 0), ImagePrediction("P2", 0, 0.9, 0)])
    storage.write_json(results / "fold_0.json", report.to_dict())
    assert main(["report", "--results", str(results), "--quiet"]) == EXIT_USAGE
    assert "AUC undefined" in capsys.readouterr().err
