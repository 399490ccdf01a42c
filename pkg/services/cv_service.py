"""
CV Service Module - Grouped Cross-Validation Harness
Assigns whole patients to folds, trains one model per fold with BCE and
collects image-level test predictions for patient-level evaluation.
"""
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from joblib import Parallel, delayed

import storage
from services.autograd_service import backward, bce_loss, init_optimizer, optimizer_step, zero_grad
from services.data_service import (
    AugmentationConfig, PatientRecord, augment, enumerate_samples, load_manifest, stack_views,
)
from services.errors import ConfigError, DataError, LeakageError, NumericError
from services.model_service import (
    ModelConfig, MultiViewModel, build_model, forward_batch, predict_batch, save_checkpoint,
)

logger = logging.getLogger(__name__)

FOLD_REPORT_PATTERN = "fold_{index}.json"
FOLD_CHECKPOINT_PATTERN = "fold_{index}.chpv"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    batch_size: int = 8
    learning_rate: float = 1e-3
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    seed: int = 0

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["augmentation"] = self.augmentation.to_dict()
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> "TrainConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"Unknown train config keys: {sorted(unknown)}")
        values = dict(data)
        if "augmentation" in values:
            values["augmentation"] = AugmentationConfig.from_dict(values["augmentation"])
        return cls(**values)


def validate_train_config(config: TrainConfig) -> None:
    if not isinstance(config.epochs, int) or config.epochs < 0:
        raise ConfigError(f"epochs must be a nonnegative integer, got {config.epochs}.")
    if not isinstance(config.batch_size, int) or config.batch_size < 1:
        raise ConfigError(f"batch_size must be a positive integer, got {config.batch_size}.")
    if not config.learning_rate > 0:
        raise ConfigError(f"learning_rate must be positive, got {config.learning_rate}.")


@dataclass
class FoldAssignment:
    k: int
    fold_of: Dict[str, int]

    def test_ids(self, fold: int) -> List[str]:
        return [pid for pid, f in self.fold_of.items() if f == fold]

    def train_ids(self, fold: int) -> List[str]:
        return [pid for pid, f in self.fold_of.items() if f != fold]

    def sizes(self) -> List[int]:
        counts = [0] * self.k
        for f in self.fold_of.values():
            counts[f] += 1
        return counts


@dataclass
class ImagePrediction:
    patient_id: str
    sample_index: int
    probability: float
    label: int


@dataclass
class FoldReport:
    fold_index: int
    image_predictions: List[ImagePrediction] = field(default_factory=list)
    training_loss_history: List[float] = field(default_factory=list)
    checkpoint_path: Optional[str] = None
    test_patients: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return {
            "fold": self.fold_index,
            "predictions": [
                {"patient": p.patient_id, "sample": p.sample_index, "prob": p.probability, "label": p.label}
                for p in self.image_predictions
            ],
            "loss_history": list(self.training_loss_history),
            "test_patients": list(self.test_patients),
            "checkpoint": self.checkpoint_path,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "FoldReport":
        try:
            predictions = [
                ImagePrediction(str(p["patient"]), int(p["sample"]), float(p["prob"]), int(p["label"]))
                for p in data["predictions"]
            ]
            tested = data.get("test_patients")
            return cls(
                fold_index=int(data["fold"]),
                image_predictions=predictions,
                training_loss_history=[float(v) for v in data.get("loss_history", [])],
                checkpoint_path=data.get("checkpoint"),
                test_patients=list(tested) if tested is not None
                else list(dict.fromkeys(p.patient_id for p in predictions)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"Malformed fold report: {exc}") from exc


def make_folds(patients: Sequence[PatientRecord], k: int = 5, seed: int = 0,
               stratified: bool = True) -> FoldAssignment:
    """
    Patient-level fold assignment.

    A seeded shuffle followed by round-robin dealing; with stratification the
    positives are dealt first and the negatives continue the same rotation,
    so both fold sizes and per-fold CHIP counts differ by at most one.
    """
    n = len(patients)
    if k < 2:
        raise ConfigError(f"k must be at least 2, got {k}.")
    if k > n:
        raise ConfigError(f"k={k} exceeds the number of patients ({n}).")
    ids = [p.patient_id for p in patients]
    if len(set(ids)) != n:
        raise DataError("Patient ids must be unique to build folds.")

    rng = np.random.default_rng(seed)
    if stratified:
        positives = [p.patient_id for p in patients if p.chip_label]
        negatives = [p.patient_id for p in patients if not p.chip_label]
        order = [positives[i] for i in rng.permutation(len(positives))]
        order += [negatives[i] for i in rng.permutation(len(negatives))]
    else:
        order = [ids[i] for i in rng.permutation(n)]
    return FoldAssignment(k=k, fold_of={pid: i % k for i, pid in enumerate(order)})


def train_fold(train_patients: Sequence[PatientRecord], config: TrainConfig,
               model_config: ModelConfig) -> Tuple[MultiViewModel, List[float]]:
    """
    Train a fresh model on the given patients.

    Args:
        train_patients: training cohort (must not be empty)
        config: epochs, batch size, learning rate, augmentation, seed
        model_config: architecture and initialization seed

    Returns:
        tuple: (trained model, mean BCE per epoch)
    """
    if not train_patients:
        raise DataError("Training set is empty.")
    validate_train_config(config)
    if len({bool(p.chip_label) for p in train_patients}) < 2:
        logger.warning("Training set holds a single class (%d patients)", len(train_patients))

    model = build_model(model_config)
    model.trained_patient_ids = frozenset(p.patient_id for p in train_patients)
    samples = [s for p in train_patients for s in enumerate_samples(p)]
    params = model.parameters()
    state = init_optimizer(params, learning_rate=config.learning_rate)
    shuffle_rng = np.random.default_rng(config.seed)
    augment_rng = np.random.default_rng([config.augmentation.seed, config.seed])

    history: List[float] = []
    for epoch in range(config.epochs):
        augmented = [augment(s, config.augmentation, augment_rng) for s in samples]
        order = shuffle_rng.permutation(len(augmented))
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = [augmented[i] for i in order[start:start + config.batch_size]]
            zero_grad(params)
            probs = forward_batch(model, stack_views(batch))
            loss = bce_loss(probs, np.array([float(s.label) for s in batch]))
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(f"Non-finite training loss at epoch {epoch + 1}.")
            backward(loss)
            optimizer_step(params, state)
            total += value * len(batch)
        history.append(total / len(samples))
        logger.debug("epoch %d/%d loss %.6f", epoch + 1, config.epochs, history[-1])
    return model, history


def evaluate_fold(model: MultiViewModel, test_patients: Sequence[PatientRecord],
                  fold_index: int = 0) -> FoldReport:
    """Image-level probabilities for every sample of every test patient, no augmentation."""
    test_ids = [p.patient_id for p in test_patients]
    overlap = model.trained_patient_ids.intersection(test_ids)
    if overlap:
        raise LeakageError(f"Patients {sorted(overlap)} appear in both the training and test sets.")
    samples = [s for p in test_patients for s in enumerate_samples(p)]
    probabilities = predict_batch(model, samples)
    predictions = [
        ImagePrediction(s.patient_id, s.sample_index, prob, int(s.label))
        for s, prob in zip(samples, probabilities)
    ]
    return FoldReport(fold_index=fold_index, image_predictions=predictions, test_patients=test_ids)


def run_fold(fold_index: int, patients: Sequence[PatientRecord], assignment: FoldAssignment,
             train_config: TrainConfig, model_config: ModelConfig, out_dir: Path) -> FoldReport:
    """Train on k-1 folds, evaluate on the held-out one and persist the report."""
    held_out = set(assignment.test_ids(fold_index))
    train = [p for p in patients if p.patient_id not in held_out]
    test = [p for p in patients if p.patient_id in held_out]
    logger.info("Fold %d: %d train / %d test patients", fold_index, len(train), len(test))

    model, history = train_fold(
        train,
        replace(train_config, seed=train_config.seed + fold_index),
        replace(model_config, seed=model_config.seed + fold_index),
    )
    report = evaluate_fold(model, test, fold_index)
    report.training_loss_history = list(history)
    checkpoint = FOLD_CHECKPOINT_PATTERN.format(index=fold_index)
    save_checkpoint(model, out_dir / checkpoint)
    report.checkpoint_path = checkpoint
    storage.write_json(out_dir / FOLD_REPORT_PATTERN.format(index=fold_index), report.to_dict())
    if history:
        logger.info("Fold %d finished, final loss %.6f", fold_index, history[-1])
    return report


def run_cv(manifest: Union[str, Path], train_config: TrainConfig, model_config: ModelConfig,
           k: int = 5, seed: int = 0, out_dir: Union[str, Path] = "results",
           jobs: int = 1, stratified: bool = True) -> List[FoldReport]:
    """
    Full grouped k-fold run.

    Folds are independent (own seeds, own output files), so they may run in
    parallel; the returned list is always ordered by fold index.
    """
    validate_train_config(train_config)
    patients = load_manifest(manifest, image_size=model_config.image_size)
    assignment = make_folds(patients, k=k, seed=seed, stratified=stratified)
    out = storage.ensure_dir(out_dir)
    if jobs < 1:
        raise ConfigError(f"jobs must be at least 1, got {jobs}.")
    reports = Parallel(n_jobs=jobs)(
        delayed(run_fold)(fold, patients, assignment, train_config, model_config, out)
        for fold in range(k)
    )
    return list(reports)


def train_full(manifest: Union[str, Path], train_config: TrainConfig, model_config: ModelConfig,
               out_dir: Union[str, Path]) -> Tuple[MultiViewModel, List[float]]:
    """Single training run on every patient of a manifest; writes checkpoint and loss history."""
    patients = load_manifest(manifest, image_size=model_config.image_size)
    model, history = train_fold(patients, train_config, model_config)
    out = storage.ensure_dir(out_dir)
    save_checkpoint(model, out / "model.chpv")
    storage.write_json(out / "loss_history.json", {"loss_history": history})
    return model, history


def load_fold_reports(results_dir: Union[str, Path]) -> List[FoldReport]:
    directory = Path(results_dir)
    if not directory.is_dir():
        raise DataError(f"Results directory {directory} does not exist.")
    files = sorted(directory.glob("fold_*.json"))
    if not files:
        raise DataError(f"No fold reports found in {directory}.")
    reports = [FoldReport.from_dict(storage.read_json(f)) for f in files]
    return sorted(reports, key=lambda r: r.fold_index)
