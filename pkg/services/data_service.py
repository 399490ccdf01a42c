"""
Data Service Module - Dataset Ingestion, Sample Enumeration and Augmentation
Loads manifest-described CMR view collections, turns patients into 4-view
samples (zero-filling missing views), applies training-time augmentation
and writes synthetic phantom cohorts with a planted label signal.
"""
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

import storage
from services.errors import ConfigError, DataError, StorageError

logger = logging.getLogger(__name__)

VIEW_NAMES = ("SAS", "4CH", "VLA", "LVOT")
SINGLE_VIEWS = ("4CH", "VLA", "LVOT")

# loader warns (does not fail) above this many SAS slices
MAX_SAS_SLICES = 7
DEFAULT_IMAGE_SIZE = 128

GROUND_TRUTH_FILE = "ground_truth.json"
MANIFEST_FILE = "manifest.json"

Image2D = np.ndarray


@dataclass
class PatientRecord:
    patient_id: str
    chip_label: bool
    sas_slices: List[Image2D] = field(default_factory=list)
    ch4: Optional[Image2D] = None
    vla: Optional[Image2D] = None
    lvot: Optional[Image2D] = None

    def single_views(self) -> Tuple[Optional[Image2D], ...]:
        return self.ch4, self.vla, self.lvot

    def image_count(self) -> int:
        return len(self.sas_slices) + sum(v is not None for v in self.single_views())

    def image_shape(self) -> Tuple[int, int]:
        for img in list(self.sas_slices) + list(self.single_views()):
            if img is not None:
                return img.shape
        raise DataError(f"Patient {self.patient_id!r} has no images.")


@dataclass
class ViewSet:
    """One model input: a SAS slice paired with the patient's other three views."""

    sas: Image2D
    ch4: Image2D
    vla: Image2D
    lvot: Image2D
    imputed_mask: Tuple[bool, bool, bool, bool]
    patient_id: str
    label: bool
    sample_index: int = 0

    def views(self) -> Tuple[Image2D, Image2D, Image2D, Image2D]:
        return self.sas, self.ch4, self.vla, self.lvot

    def stack(self) -> np.ndarray:
        return np.stack(self.views())


@dataclass(frozen=True)
class AugmentationConfig:
    enable_flip_h: bool = True
    flip_probability: float = 0.5
    enable_rotation: bool = True
    max_degrees: float = 10.0
    enable_intensity_jitter: bool = True
    max_delta: float = 0.05
    seed: int = 0

    @classmethod
    def disabled(cls, seed: int = 0) -> "AugmentationConfig":
        return cls(enable_flip_h=False, enable_rotation=False, enable_intensity_jitter=False, seed=seed)

    @property
    def is_identity(self) -> bool:
        return not (self.enable_flip_h or self.enable_rotation or self.enable_intensity_jitter)

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "AugmentationConfig":
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"Unknown augmentation config keys: {sorted(unknown)}")
        return cls(**data)


def resize_image(image: Image2D, size: int) -> Image2D:
    """Bilinear resize to size x size; aspect ratio is not preserved."""
    img = np.asarray(image, dtype=np.float64)
    if img.shape == (size, size):
        return img.copy()
    zoomed = ndimage.zoom(img, (size / img.shape[0], size / img.shape[1]), order=1, mode="nearest")
    return np.clip(zoomed[:size, :size], 0.0, 1.0)


def load_image(path: Union[str, Path], image_size: int) -> Image2D:
    pixels, maxval = storage.read_pgm(path)
    return resize_image(pixels.astype(np.float64) / maxval, image_size)


def _parse_entry(entry, index: int) -> Tuple[str, bool, List[str], Dict[str, Optional[str]]]:
    if not isinstance(entry, dict):
        raise DataError(f"Manifest entry #{index} is not an object.")
    pid = entry.get("id")
    if not isinstance(pid, str) or not pid.strip():
        raise DataError(f"Manifest entry #{index} has no patient id.")
    chip = entry.get("chip")
    if not isinstance(chip, bool):
        raise DataError(f"Patient {pid!r}: 'chip' must be true or false.")
    views = entry.get("views")
    if not isinstance(views, dict):
        raise DataError(f"Patient {pid!r}: 'views' must be an object.")
    unknown = set(views) - set(VIEW_NAMES)
    if unknown:
        raise DataError(f"Patient {pid!r}: unknown views {sorted(unknown)}.")
    sas = views.get("SAS") or []
    if not isinstance(sas, list) or not all(isinstance(p, str) for p in sas):
        raise DataError(f"Patient {pid!r}: 'SAS' must be a list of paths.")
    singles = {}
    for name in SINGLE_VIEWS:
        rel = views.get(name)
        if rel is not None and not isinstance(rel, str):
            raise DataError(f"Patient {pid!r}: view {name} must be a path or null.")
        singles[name] = rel
    return pid, chip, sas, singles


def load_manifest(path: Union[str, Path], image_size: Optional[int] = None) -> List[PatientRecord]:
    """
    Load every patient described by a manifest.

    Args:
        path: manifest JSON; image paths inside are relative to its directory
        image_size: square side images are resized to (defaults to the
            manifest's image_size_hint)

    Returns:
        List[PatientRecord]: one record per manifest entry, in file order.
    """
    manifest_path = Path(path)
    document = storage.read_json(manifest_path)
    if not isinstance(document, dict) or not isinstance(document.get("patients"), list):
        raise DataError(f"{manifest_path} is missing the 'patients' list.")
    size = image_size or document.get("image_size_hint") or DEFAULT_IMAGE_SIZE
    base = manifest_path.parent

    records: List[PatientRecord] = []
    seen = set()
    for index, entry in enumerate(document["patients"]):
        pid, chip, sas_paths, singles = _parse_entry(entry, index)
        if pid in seen:
            raise DataError(f"Duplicate patient id {pid!r} in manifest.")
        seen.add(pid)
        if not sas_paths and all(v is None for v in singles.values()):
            raise DataError(f"Patient {pid!r}: patient has no images.")
        if len(sas_paths) > MAX_SAS_SLICES:
            logger.warning("Patient %s has %d SAS slices (more than %d)", pid, len(sas_paths), MAX_SAS_SLICES)

        def fetch(rel: str) -> Image2D:
            try:
                return load_image(base / rel, size)
            except StorageError as exc:
                raise DataError(f"Patient {pid!r}: missing image file {rel}.") from exc
            except DataError as exc:
                raise DataError(f"Patient {pid!r}: {exc}") from exc

        records.append(
            PatientRecord(
                patient_id=pid,
                chip_label=chip,
                sas_slices=[fetch(rel) for rel in sas_paths],
                ch4=fetch(singles["4CH"]) if singles["4CH"] else None,
                vla=fetch(singles["VLA"]) if singles["VLA"] else None,
                lvot=fetch(singles["LVOT"]) if singles["LVOT"] else None,
            )
        )
    logger.info("Loaded %d patients from %s", len(records), manifest_path)
    return records


def summarize_manifest(records: Sequence[PatientRecord]) -> Dict[str, int]:
    """Per-view image counts for a list of records."""
    return {
        "patients": len(records),
        "chip": sum(bool(r.chip_label) for r in records),
        "SAS": sum(len(r.sas_slices) for r in records),
        "4CH": sum(r.ch4 is not None for r in records),
        "VLA": sum(r.vla is not None for r in records),
        "LVOT": sum(r.lvot is not None for r in records),
    }


def enumerate_samples(record: PatientRecord) -> List[ViewSet]:
    """
    One ViewSet per SAS slice (or a single one when SAS is absent).

    Missing views become all-zero images; every sample carries the
    patient's label.
    """
    shape = record.image_shape()
    slices: List[Optional[Image2D]] = list(record.sas_slices) or [None]
    samples = []
    for index, sas in enumerate(slices):
        views = (sas,) + record.single_views()
        mask = tuple(v is None for v in views)
        filled = [np.zeros(shape) if v is None else v for v in views]
        samples.append(
            ViewSet(*filled, imputed_mask=mask, patient_id=record.patient_id,
                    label=bool(record.chip_label), sample_index=index)
        )
    return samples


def stack_views(samples: Sequence[ViewSet]) -> np.ndarray:
    """[B, 4, H, W] array in SAS, 4CH, VLA, LVOT order."""
    return np.stack([s.stack() for s in samples])


def augment(sample: ViewSet, config: AugmentationConfig, rng: np.random.Generator) -> ViewSet:
    """
    Apply one random draw of flip / rotation / intensity jitter to all views.

    The same transform hits every real view of the sample; zero-imputed
    views are left untouched so they stay exactly zero.
    """
    if config.is_identity:
        return sample
    views = list(sample.views())
    real = [not imputed for imputed in sample.imputed_mask]

    if config.enable_flip_h and rng.random() < config.flip_probability:
        views = [v[:, ::-1].copy() if keep else v for v, keep in zip(views, real)]

    if config.enable_rotation and config.max_degrees > 0:
        angle = rng.uniform(-config.max_degrees, config.max_degrees)
        views = [
            np.clip(ndimage.rotate(v, angle, reshape=False, order=1, mode="constant", cval=0.0), 0.0, 1.0)
            if keep else v
            for v, keep in zip(views, real)
        ]

    if config.enable_intensity_jitter and config.max_delta > 0:
        delta = rng.uniform(-config.max_delta, config.max_delta)
        views = [np.clip(v + delta, 0.0, 1.0) if keep else v for v, keep in zip(views, real)]

    return replace(sample, sas=views[0], ch4=views[1], vla=views[2], lvot=views[3])


#######
@dataclass(frozen=True)
class _Anatomy:
    """Per-patient heart outline shared by all of that patient's images."""

    cx: float
    cy: float
    a: float
    b: float
    theta: float
    thickness: float


def _draw_anatomy(rng: np.random.Generator) -> _Anatomy:
    return _Anatomy(
        cx=rng.uniform(-0.15, 0.15),
        cy=rng.uniform(-0.15, 0.15),
        a=rng.uniform(0.45, 0.65),
        b=rng.uniform(0.35, 0.55),
        theta=rng.uniform(0.0, math.pi),
        thickness=rng.uniform(0.18, 0.28),
    )


def _phantom(rng: np.random.Generator, size: int, anatomy: _Anatomy, signal: float) -> Image2D:
    """
    Smoothed elliptical myocardium ring on a dark background.

    With signal > 0, bright patches are added along arcs of the ring
    (the enhancement pattern the classifier is meant to pick up).
    """
    grid = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    yy, xx = np.meshgrid(grid, grid, indexing="ij")
    # small per-image jitter of the shared outline
    cx = anatomy.cx + rng.normal(0.0, 0.02)
    cy = anatomy.cy + rng.normal(0.0, 0.02)
    theta = anatomy.theta + rng.normal(0.0, 0.1)
    dx, dy = xx - cx, yy - cy
    u = dx * math.cos(theta) + dy * math.sin(theta)
    v = -dx * math.sin(theta) + dy * math.cos(theta)
    radius = np.sqrt((u / anatomy.a) ** 2 + (v / anatomy.b) ** 2)
    ring = (radius <= 1.0) & (radius >= 1.0 - anatomy.thickness)
    cavity = radius < 1.0 - anatomy.thickness

    img = 0.06 + 0.30 * ring + 0.12 * cavity
    if signal > 0:
        angle = np.arctan2(v, u)
        patches = np.zeros_like(img, dtype=bool)
        for _ in range(int(rng.integers(2, 5))):
            centre = rng.uniform(-math.pi, math.pi)
            half_width = rng.uniform(0.25, 0.6)
            gap = np.angle(np.exp(1j * (angle - centre)))
            patches |= np.abs(gap) < half_width
        img = img + signal * (ring & patches)
    img = ndimage.gaussian_filter(img, sigma=max(size / 96.0, 0.5))
    img = img + rng.normal(0.0, 0.02, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_synthetic(n_patients: int, chip_fraction: float, signal_strength: float,
                       missing_view_rate: float, seed: int, out_dir: Union[str, Path],
                       image_size: int = DEFAULT_IMAGE_SIZE) -> Path:
    """
    Write a synthetic phantom cohort: PGM images, manifest and ground truth.

    Args:
        n_patients: cohort size (>= 2)
        chip_fraction: share of CHIP-positive patients, in (0, 1)
        signal_strength: amplitude of the bright rim patches (0 = no signal)
        missing_view_rate: chance each of 4CH/VLA/LVOT is absent
        seed: cohort seed; patient i draws from the stream (seed, i)
        out_dir: destination directory
        image_size: side of the square images written

    Returns:
        Path: the manifest file.

    Each patient gets 5-7 SAS slices. A CHIP patient carries the signal on a
    random subset holding at least 60% of their images.
    """
    if n_patients < 2:
        raise ConfigError("Need at least 2 patients.")
    if not 0.0 < chip_fraction < 1.0:
        raise ConfigError("chip_fraction must be strictly between 0 and 1.")
    if signal_strength < 0:
        raise ConfigError("signal_strength must be nonnegative.")
    if not 0.0 <= missing_view_rate <= 1.0:
        raise ConfigError("missing_view_rate must be within [0, 1].")
    if seed < 0:
        raise ConfigError("seed must be nonnegative.")

    root = storage.ensure_dir(out_dir)
    image_dir = storage.ensure_dir(root / "images")

    n_chip = min(max(int(math.floor(n_patients * chip_fraction + 0.5)), 1), n_patients - 1)
    chip_set = set(np.random.default_rng(seed).permutation(n_patients)[:n_chip].tolist())
    width = max(3, len(str(n_patients)))

    manifest_patients = []
    truth_patients = []
    for index in range(n_patients):
        rng = np.random.default_rng([seed, index])
        pid = f"P{index + 1:0{width}d}"
        chip = index in chip_set
        n_sas = int(rng.integers(5, 8))
        present = {name: bool(rng.random() >= missing_view_rate) for name in SINGLE_VIEWS}
        slots = [("SAS", i) for i in range(n_sas)] + [(name, None) for name in SINGLE_VIEWS if present[name]]

        flagged = set()
        if chip:
            n_signal = math.ceil(rng.uniform(0.6, 1.0) * len(slots))
            flagged = set(rng.choice(len(slots), size=n_signal, replace=False).tolist())

        anatomy = _draw_anatomy(rng)
        views: Dict[str, Union[List[str], Optional[str]]] = {"SAS": []}
        signal_flags: Dict[str, Union[List[bool], Optional[bool]]] = {"SAS": []}
        for name in SINGLE_VIEWS:
            views[name] = None
            signal_flags[name] = None
        for slot_index, (name, slice_index) in enumerate(slots):
            has_signal = slot_index in flagged
            img = _phantom(rng, image_size, anatomy, signal_strength if has_signal else 0.0)
            stem = f"{pid}_{name}" if slice_index is None else f"{pid}_{name}_{slice_index}"
            rel = f"images/{stem}.pgm"
            storage.write_pgm(image_dir / f"{stem}.pgm", np.rint(img * 255.0).astype(np.uint8), maxval=255)
            if slice_index is None:
                views[name] = rel
                signal_flags[name] = has_signal
            else:
                views["SAS"].append(rel)
                signal_flags["SAS"].append(has_signal)

        manifest_patients.append({"id": pid, "chip": chip, "views": views})
        truth_patients.append({
            "id": pid,
            "chip": chip,
            "n_sas": n_sas,
            "views": {name: present[name] for name in SINGLE_VIEWS},
            "signal": signal_flags,
        })

    manifest_path = storage.write_json(root / MANIFEST_FILE, {
        "image_size_hint": image_size,
        "patients": manifest_patients,
    })
    storage.write_json(root / GROUND_TRUTH_FILE, {
        "seed": seed,
        "n_patients": n_patients,
        "n_chip": n_chip,
        "image_size": image_size,
        "signal_strength": signal_strength,
        "missing_view_rate": missing_view_rate,
        "counts": {
            "SAS": sum(p["n_sas"] for p in truth_patients),
            **{name: sum(p["views"][name] for p in truth_patients) for name in SINGLE_VIEWS},
        },
        "patients": truth_patients,
    })
    logger.info("Wrote %d synthetic patients (%d CHIP) to %s", n_patients, n_chip, root)
    return manifest_path
