"""Cohort data model, manifest I/O, patient-level splitting, descriptive
statistics, image preprocessing/augmentation and a synthetic cohort generator.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage
from scipy.stats import norm

SUBSETS = ("train", "validation", "test")
MANIFEST_HEADER = ("patient_id", "image_path", "eye", "age", "gender",
                   "hypertension", "diabetes")
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class ManifestError(ValueError):
    """Malformed manifest row."""


class CohortValidationError(ValueError):
    """Manifest parsed but violates a cohort constraint."""


class Gender(str, Enum):
    MALE = "male"
    FEMALE = "female"

    @property
    def code(self) -> int:
        return 0 if self is Gender.MALE else 1

    @classmethod
    def parse(cls, text: str) -> Gender:
        t = text.strip().lower()
        if t in ("m", "male"):
            return cls.MALE
        if t in ("f", "female"):
            return cls.FEMALE
        raise ValueError(f"unknown gender {text!r}")


class Eye(str, Enum):
    LEFT = "L"
    RIGHT = "R"
    UNKNOWN = "U"


@dataclass(frozen=True)
class ImageSample:
    image_id: str
    patient_id: str
    eye: Eye
    path: Path | None = None


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    age: float
    gender: Gender
    hypertension: bool
    diabetes: bool
    images: tuple[ImageSample, ...]

    def __post_init__(self):
        if not (math.isfinite(self.age) and self.age > 0):
            raise CohortValidationError(
                f"patient {self.patient_id}: age must be finite and positive, got {self.age}")
        if not self.images:
            raise CohortValidationError(f"patient {self.patient_id}: no images")


# ---------------------------------------------------------------- manifest

def _flag(value: str, column: str, lineno: int) -> bool:
    if value.strip() not in ("0", "1"):
        raise ManifestError(f"line {lineno}: {column} must be 0 or 1, got {value!r}")
    return value.strip() == "1"


def load_manifest(path, check_files: bool = True) -> list[PatientRecord]:
    """Read a per-image manifest CSV and group rows into patient records.

    Image paths are resolved relative to the manifest's directory.  Rows of
    one patient must agree on every demographic column; a patient id that
    reappears with different demographics is rejected as a duplicate.
    """
    path = Path(path)
    root = path.parent
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != MANIFEST_HEADER:
            raise ManifestError(f"{path}: header must be {','.join(MANIFEST_HEADER)}")
        rows = list(enumerate(reader, start=2))

    demo: dict[str, tuple] = {}
    images: dict[str, list[ImageSample]] = {}
    seen_images: set[str] = set()
    for lineno, row in rows:
        if not row:
            continue
        if len(row) != len(MANIFEST_HEADER):
            raise ManifestError(f"line {lineno}: expected {len(MANIFEST_HEADER)} fields, got {len(row)}")
        pid, image_path, eye, age, gender, htn, dm = (c.strip() for c in row)
        if not pid:
            raise ManifestError(f"line {lineno}: empty patient_id")
        try:
            age_v = float(age)
            eye_v = Eye(eye.upper())
            gender_v = Gender.parse(gender)
        except ValueError as exc:
            raise ManifestError(f"line {lineno}: {exc}") from None
        key = (age_v, gender_v, _flag(htn, "hypertension", lineno), _flag(dm, "diabetes", lineno))
        if pid in demo and demo[pid] != key:
            raise CohortValidationError(
                f"duplicate patient_id {pid!r} with conflicting demographics (line {lineno})")
        demo[pid] = key
        if image_path in seen_images:
            raise CohortValidationError(f"duplicate image {image_path!r} (line {lineno})")
        seen_images.add(image_path)
        resolved = root / image_path
        if check_files and not resolved.is_file():
            raise CohortValidationError(f"line {lineno}: missing image file {image_path}")
        images.setdefault(pid, []).append(ImageSample(image_path, pid, eye_v, resolved))

    records = []
    for pid, (age_v, gender_v, htn_v, dm_v) in demo.items():
        records.append(PatientRecord(pid, age_v, gender_v, htn_v, dm_v, tuple(images[pid])))
    return records


def write_manifest(records, path, root=None) -> None:
    """Write records as a manifest; image paths are made relative to ``root``."""
    path = Path(path)
    root = Path(root) if root is not None else path.parent
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for rec in records:
            for img in rec.images:
                rel = img.image_id if img.path is None else Path(img.path).relative_to(root).as_posix()
                writer.writerow([rec.patient_id, rel, img.eye.value, repr(float(rec.age)),
                                 rec.gender.value, int(rec.hypertension), int(rec.diabetes)])


# ------------------------------------------------------------------- split

@dataclass
class SplitAssignment:
    assignment: dict[str, str]
    seed: int
    ratios: tuple[float, float, float]
    warnings: list[str] = field(default_factory=list)
    tolerances: dict[str, dict[str, float]] = field(default_factory=dict)

    def sizes(self) -> dict[str, int]:
        out = {s: 0 for s in SUBSETS}
        for subset in self.assignment.values():
            out[subset] += 1
        return out

    def patients(self, subset: str) -> list[str]:
        return sorted(p for p, s in self.assignment.items() if s == subset)

    def select(self, records, subset: str) -> list[PatientRecord]:
        if subset not in SUBSETS:
            raise ValueError(f"unknown subset {subset!r}")
        return [r for r in records if self.assignment[r.patient_id] == subset]

    def write(self, csv_path, json_path) -> None:
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["patient_id", "subset"])
            for pid in sorted(self.assignment):
                writer.writerow([pid, self.assignment[pid]])
        sidecar = {"seed": self.seed, "ratios": list(self.ratios), "sizes": self.sizes(),
                   "stratum_tolerances": self.tolerances, "warnings": self.warnings}
        Path(json_path).write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")

    @classmethod
    def read(cls, csv_path, json_path=None) -> SplitAssignment:
        with open(csv_path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            assignment = {row["patient_id"]: row["subset"] for row in reader}
        bad = {s for s in assignment.values() if s not in SUBSETS}
        if bad:
            raise ValueError(f"{csv_path}: unknown subsets {sorted(bad)}")
        meta = json.loads(Path(json_path).read_text()) if json_path else {}
        return cls(assignment, meta.get("seed", 0), tuple(meta.get("ratios", (0.6, 0.2, 0.2))),
                   meta.get("warnings", []), meta.get("stratum_tolerances", {}))


def validate_ratios(ratios) -> tuple[float, float, float]:
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(not 0 <= r <= 1 for r in ratios):
        raise ValueError("ratios: need three fractions in [0, 1]")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios: must sum to 1, got {sum(ratios):.6g}")
    return ratios


def subset_targets(n: int, ratios) -> tuple[int, int, int]:
    """Validation and test sizes rounded half-up; train takes the rest."""
    _, r_val, r_test = validate_ratios(ratios)
    val = min(n, math.floor(n * r_val + 0.5))
    test = min(n - val, math.floor(n * r_test + 0.5))
    return n - val - test, val, test


def _controlled_round(sizes, targets) -> np.ndarray:
    """Held-out counts per row and column.

    Column sums equal ``targets`` exactly, each cell is the floor or ceiling
    of its proportional share (before the rare capacity repair), and no row
    receives more than its size.
    """
    sizes = np.asarray(sizes, dtype=np.int64)
    n = int(sizes.sum())
    cells = np.zeros((len(sizes), len(targets)), dtype=np.int64)
    if n == 0:
        return cells
    cum = np.concatenate([[0], np.cumsum(sizes)])
    for k, t in enumerate(targets):
        cells[:, k] = np.diff((2 * cum * t + n) // (2 * n))
    ideal = sizes[:, None] * np.asarray(targets)[None, :] / n
    for g in range(len(sizes)):
        while cells[g].sum() > sizes[g]:
            k = int(np.argmax(cells[g] - ideal[g]))
            slack = sizes - cells.sum(axis=1)
            candidates = [h for h in range(len(sizes)) if h != g and slack[h] > 0]
            h = min(candidates, key=lambda h: cells[h, k] - ideal[h, k])
            cells[g, k] -= 1
            cells[h, k] += 1
    return cells


def stratified_patient_split(records, ratios=(0.6, 0.2, 0.2), seed: int = 0) -> SplitAssignment:
    """Patient-level split stratified on hypertension, then diabetes within it.

    Subset sizes follow :func:`subset_targets`.  Allocation is nested: the
    hypertension groups are apportioned first so every subset's prevalence
    is within one patient of proportional, then each hypertension group is
    apportioned between diabetic and non-diabetic patients.  Patients are
    shuffled inside each stratum with the seeded generator and dealt out.
    """
    ratios = validate_ratios(ratios)
    records = sorted(records, key=lambda r: r.patient_id)
    if not records:
        raise ValueError("records must be non-empty")
    n = len(records)
    _, t_val, t_test = subset_targets(n, ratios)
    rng = np.random.default_rng(seed)

    outer = [[r for r in records if r.hypertension == h] for h in (True, False)]
    outer_cells = _controlled_round([len(g) for g in outer], [t_val, t_test])
    assignment: dict[str, str] = {}
    warnings: list[str] = []
    for g, group in enumerate(outer):
        inner = [[r for r in group if r.diabetes == d] for d in (True, False)]
        cells = _controlled_round([len(s) for s in inner], list(outer_cells[g]))
        for s, stratum in enumerate(inner):
            if not stratum:
                continue
            order = rng.permutation(len(stratum))
            n_val, n_test = int(cells[s, 0]), int(cells[s, 1])
            for rank, idx in enumerate(order):
                subset = ("validation" if rank < n_val else
                          "test" if rank < n_val + n_test else "train")
                assignment[stratum[idx].patient_id] = subset
            counts = {"train": len(stratum) - n_val - n_test, "validation": n_val, "test": n_test}
            name = f"{'htn' if g == 0 else 'non-htn'}/{'dm' if s == 0 else 'non-dm'}"
            for subset, target in zip(SUBSETS, ratios):
                if target > 0 and counts[subset] == 0:
                    warnings.append(f"stratum {name} has no patients in {subset}")

    split = SplitAssignment(assignment, seed, ratios, warnings)
    split.tolerances = split_tolerances(records, split)
    return split


def split_tolerances(records, split: SplitAssignment) -> dict[str, dict[str, float]]:
    """Per-subset hypertension prevalence and diabetes-among-hypertensive share,
    with their deviation (percentage points) from the whole cohort."""
    def shares(rs):
        htn = [r for r in rs if r.hypertension]
        prev = 100.0 * len(htn) / len(rs) if rs else float("nan")
        dm = 100.0 * sum(r.diabetes for r in htn) / len(htn) if htn else float("nan")
        return prev, dm

    g_prev, g_dm = shares(records)
    out = {}
    for subset in SUBSETS:
        prev, dm = shares(split.select(records, subset))
        out[subset] = {"htn_prevalence": prev, "htn_prevalence_dev": abs(prev - g_prev),
                       "dm_in_htn": dm, "dm_in_htn_dev": abs(dm - g_dm)}
    return out


# ----------------------------------------------------------------- summary

@dataclass(frozen=True)
class CellStats:
    n: int
    age_mean: float | None
    age_std: float | None
    age_ci: tuple[float, float] | None
    diabetes_n: int
    diabetes_pct: float
    gender_n: int
    gender_pct: float

    def age_text(self, digits: int = 1) -> str:
        if self.age_mean is None:
            return "n/a"
        if self.age_std is None:
            return f"{self.age_mean:.{digits}f}"
        lo, hi = self.age_ci
        return (f"{self.age_mean:.{digits}f}±{self.age_std:.{digits}f} "
                f"[{lo:.{digits}f}, {hi:.{digits}f}]")


@dataclass
class CohortSummary:
    cells: dict[tuple[str, str], CellStats]
    total: int

    ROWS = ("hypertension", "non-hypertension", "all")
    GENDERS = ("male", "female")

    def to_dict(self) -> dict:
        return {"total": self.total,
                "cells": {f"{row}/{g}": asdict(self.cells[row, g])
                          for row in self.ROWS for g in self.GENDERS}}

    def render(self) -> str:
        head = ["Patient Characteristics", "Age Male", "Age Female", "Diabetes Male",
                "Diabetes Female", "Gender Male", "Gender Female"]
        lines = ["\t".join(head)]
        for row in self.ROWS:
            m, f = self.cells[row, "male"], self.cells[row, "female"]
            lines.append("\t".join([
                row.capitalize(), m.age_text(), f.age_text(),
                f"{m.diabetes_pct:.0f}% (n={m.diabetes_n})", f"{f.diabetes_pct:.0f}% (n={f.diabetes_n})",
                f"{m.gender_pct:.0f}% (n={m.gender_n})", f"{f.gender_pct:.0f}% (n={f.gender_n})"]))
        return "\n".join(lines) + "\n"


def age_statistics(ages) -> tuple[float | None, float | None, tuple[float, float] | None]:
    """Mean, sample std and normal-approximation 95% CI (mean +- 1.96 std/sqrt(n))."""
    ages = np.asarray(ages, dtype=np.float64)
    if len(ages) == 0:
        return None, None, None
    mean = float(ages.mean())
    if len(ages) == 1:
        return mean, None, None
    std = float(ages.std(ddof=1))
    half = 1.96 * std / math.sqrt(len(ages))
    return mean, std, (mean - half, mean + half)


def cohort_summary(records) -> CohortSummary:
    """Age, diabetes share and gender split per gender and hypertension status."""
    if not records:
        raise ValueError("records must be non-empty")
    rows = {"hypertension": [r for r in records if r.hypertension],
            "non-hypertension": [r for r in records if not r.hypertension],
            "all": list(records)}
    cells = {}
    for row, members in rows.items():
        for g in CohortSummary.GENDERS:
            sel = [r for r in members if r.gender.value == g]
            mean, std, ci = age_statistics([r.age for r in sel])
            dm = sum(r.diabetes for r in sel)
            cells[row, g] = CellStats(
                n=len(sel), age_mean=mean, age_std=std, age_ci=ci,
                diabetes_n=dm, diabetes_pct=100.0 * dm / len(sel) if sel else 0.0,
                gender_n=len(sel), gender_pct=100.0 * len(sel) / len(members) if members else 0.0)
    return CohortSummary(cells, len(records))


# -------------------------------------------------------------- preprocess

@dataclass(frozen=True)
class PreprocessConfig:
    image_size: int = 512
    channel_mean: tuple[float, float, float] = IMAGENET_MEAN
    channel_std: tuple[float, float, float] = IMAGENET_STD

    def __post_init__(self):
        if self.image_size < 1:
            raise ValueError("image_size must be positive")
        if len(self.channel_mean) != 3 or len(self.channel_std) != 3:
            raise ValueError("channel statistics need three values")
        if min(self.channel_std) <= 0:
            raise ValueError("channel_std must be positive")


def _check_image(raw) -> np.ndarray:
    raw = np.asarray(raw)
    if raw.ndim != 3 or raw.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 image, got shape {raw.shape}")
    if raw.shape[0] == 0 or raw.shape[1] == 0:
        raise ValueError("image has zero area")
    return raw


def crop_resize(raw, size: int) -> np.ndarray:
    """Center-crop to a square, then bilinear resize to ``size`` (float32)."""
    raw = _check_image(raw)
    h, w = raw.shape[:2]
    side = min(h, w)
    top, left = (h - side) // 2, (w - side) // 2
    sq = raw[top:top + side, left:left + side].astype(np.float32)
    if side == size:
        return np.ascontiguousarray(sq)
    return np.stack([np.asarray(Image.fromarray(sq[..., c], mode="F")
                                .resize((size, size), Image.BILINEAR))
                     for c in range(3)], axis=-1)


def minmax_scale(img) -> np.ndarray:
    """Global min-max to [0, 1]; a constant image maps to zeros."""
    img = np.asarray(img, dtype=np.float32)
    lo, hi = float(img.min()), float(img.max())
    if hi == lo:
        return np.zeros_like(img)
    return (img - lo) / (hi - lo)


def zscore(img, mean=IMAGENET_MEAN, std=IMAGENET_STD) -> np.ndarray:
    mean = np.asarray(mean, dtype=np.float32)
    std = np.asarray(std, dtype=np.float32)
    return (np.asarray(img, dtype=np.float32) - mean) / std


def preprocess_image(raw, cfg: PreprocessConfig = PreprocessConfig()) -> np.ndarray:
    """Crop/resize, min-max scale and per-channel standardize one HxWx3 image."""
    out = zscore(minmax_scale(crop_resize(raw, cfg.image_size)), cfg.channel_mean, cfg.channel_std)
    if not np.all(np.isfinite(out)):
        raise ValueError("preprocessing produced non-finite values")
    return out


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


# ---------------------------------------------------------------- augment

@dataclass(frozen=True)
class AugmentConfig:
    max_rotation_degrees: float = 360.0
    hflip_probability: float = 0.5
    blur_kernel: int = 3
    blur_probability: float = 0.5
    blur_sigma: float | None = None

    def __post_init__(self):
        if self.blur_kernel < 1 or self.blur_kernel % 2 == 0:
            raise ValueError("blur_kernel must be odd and >= 1")
        for name in ("hflip_probability", "blur_probability"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")

    @property
    def sigma(self) -> float:
        # OpenCV's rule for a sigma implied by the kernel size
        if self.blur_sigma is not None:
            return self.blur_sigma
        return 0.3 * ((self.blur_kernel - 1) * 0.5 - 1) + 0.8


NO_AUGMENT = AugmentConfig(0.0, 0.0, 1, 0.0)


def gaussian_kernel1d(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    w = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return w / w.sum()


def augment_image(img, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Rotate, maybe flip horizontally, maybe blur; shape is preserved.

    Exactly three uniforms are consumed per call so the stream position does
    not depend on which branches fire.
    """
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != img.shape[1]:
        raise ValueError("augment_image expects a square HxWxC image")
    angle, flip_u, blur_u = rng.random(3)
    out = img
    angle *= cfg.max_rotation_degrees
    if angle != 0.0:
        out = ndimage.rotate(out, angle, axes=(1, 0), reshape=False, order=1,
                             mode="constant", cval=0.0)
    if flip_u < cfg.hflip_probability:
        out = out[:, ::-1]
    if blur_u < cfg.blur_probability and cfg.blur_kernel > 1:
        k = gaussian_kernel1d(cfg.blur_kernel, cfg.sigma)
        out = ndimage.correlate1d(out, k, axis=0, mode="reflect")
        out = ndimage.correlate1d(out, k, axis=1, mode="reflect")
    return np.ascontiguousarray(out, dtype=img.dtype)


# ---------------------------------------------------------------- age scale

def standardize_age(age, train_mean: float, train_std: float):
    if not train_std > 0:
        raise ValueError("training age std must be positive (degenerate training cohort)")
    return (np.asarray(age, dtype=np.float64) - train_mean) / train_std


@dataclass(frozen=True)
class AgeScaler:
    mean: float
    std: float

    @classmethod
    def fit(cls, train_records) -> AgeScaler:
        ages = np.array([r.age for r in train_records], dtype=np.float64)
        if len(ages) < 2:
            raise ValueError("need at least two training patients to standardize age")
        std = float(ages.std(ddof=1))
        if std == 0:
            raise ValueError("training age std is zero (degenerate training cohort)")
        return cls(float(ages.mean()), std)

    def __call__(self, age):
        return standardize_age(age, self.mean, self.std)


# --------------------------------------------------------------- synthetic

@dataclass(frozen=True)
class SignalConfig:
    image_signal: float = 1.0
    age_signal: float = 1.0
    noise: float = 0.3
    htn_prevalence: float = 0.55
    dm_given_htn: float = 0.9
    dm_given_no_htn: float = 0.55
    female_fraction: float = 0.56
    age_mean: float = 58.0
    age_sd: float = 13.0
    both_eyes_fraction: float = 0.84
    image_size: int = 64

    def __post_init__(self):
        for name in ("htn_prevalence", "dm_given_htn", "dm_given_no_htn",
                     "female_fraction", "both_eyes_fraction"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")
        if not 0 < self.htn_prevalence < 1:
            raise ValueError("htn_prevalence must lie strictly between 0 and 1")
        if min(self.image_signal, self.age_signal) < 0 or self.noise <= 0:
            raise ValueError("signal strengths must be >= 0 and noise > 0")
        if self.age_sd <= 0 or self.image_size < 16:
            raise ValueError("age_sd must be positive and image_size >= 16")


@dataclass
class SyntheticCohort:
    records: list[PatientRecord]
    lesion: dict[str, float]
    manifest_path: Path | None = None


def render_fundus(size: int, lesion: float, eye: Eye, rng: np.random.Generator) -> np.ndarray:
    """A toy fundus: dark-red disc, bright optic disc, vessels and yellow spots
    whose brightness rises with ``lesion`` (any real number)."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    c = (size - 1) / 2
    r = np.hypot(yy - c, xx - c) / (size / 2)
    img = np.zeros((size, size, 3), dtype=np.float32)
    inside = r < 0.95
    shade = 1.0 - 0.35 * r ** 2
    img[inside] = np.stack([0.55 * shade, 0.22 * shade, 0.10 * shade], -1)[inside]

    side = -1 if eye is Eye.LEFT else 1
    dx, dy = c + side * size * 0.22, c + rng.uniform(-0.05, 0.05) * size
    for _ in range(5):
        theta = rng.uniform(0, 2 * np.pi)
        bend = rng.uniform(-0.8, 0.8)
        t = np.linspace(0, 1, 4 * size)
        ang = theta + bend * t
        px = (dx + t * size * 0.6 * np.cos(ang)).astype(int)
        py = (dy + t * size * 0.6 * np.sin(ang)).astype(int)
        keep = (px >= 0) & (px < size) & (py >= 0) & (py < size)
        px, py = px[keep], py[keep]
        keep = inside[py, px]
        img[py[keep], px[keep]] = (0.35, 0.05, 0.05)
    disc = np.hypot(yy - dy, xx - dx) < size * 0.08
    img[disc] = (1.0, 0.95, 0.8)

    strength = 1.0 / (1.0 + np.exp(-lesion))
    for _ in range(6):
        while True:
            sy, sx = rng.uniform(0.2, 0.8, 2) * size
            if np.hypot(sy - c, sx - c) < size * 0.35 and np.hypot(sy - dy, sx - dx) > size * 0.12:
                break
        spot = np.hypot(yy - sy, xx - sx) < size * 0.045
        img[spot] = (0.55 + 0.35 * strength, 0.2 + 0.6 * strength, 0.1)
    img += rng.normal(0, 0.01, img.shape).astype(np.float32)
    img[~inside] = 0.0
    return np.clip(img, 0.0, 1.0)


def generate_synthetic_cohort(n_patients: int, signal: SignalConfig = SignalConfig(),
                              seed: int = 0, out_dir=None) -> SyntheticCohort:
    """Synthetic patients whose label depends on a lesion latent and on age.

    ``score = image_signal * lesion + age_signal * age_z + noise * eps`` and the
    label is ``score > t`` with ``t`` set so the prevalence matches the
    configured value.  The lesion latent is rendered as spot brightness in
    every image of the patient, so each modality carries part of the signal.
    When ``out_dir`` is given, PNG images and ``manifest.csv`` are written there.
    """
    if n_patients < 2:
        raise ValueError("n_patients must be >= 2")
    rng = np.random.default_rng(seed)
    lesion = rng.standard_normal(n_patients)
    age_z = rng.standard_normal(n_patients)
    eps = rng.standard_normal(n_patients)
    score = signal.image_signal * lesion + signal.age_signal * age_z + signal.noise * eps
    scale = math.sqrt(signal.image_signal ** 2 + signal.age_signal ** 2 + signal.noise ** 2)
    htn = score > norm.ppf(1 - signal.htn_prevalence) * scale
    dm_u, fem_u, eye_u, side_u = rng.random((4, n_patients))
    dm = np.where(htn, dm_u < signal.dm_given_htn, dm_u < signal.dm_given_no_htn)
    ages = np.clip(signal.age_mean + signal.age_sd * age_z, 18.0, 95.0)

    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
    width = len(str(n_patients))
    records, latent = [], {}
    for i in range(n_patients):
        pid = f"P{i:0{width}d}"
        eyes = [Eye.LEFT, Eye.RIGHT] if eye_u[i] < signal.both_eyes_fraction else \
            [Eye.LEFT if side_u[i] < 0.5 else Eye.RIGHT]
        samples = []
        for eye in eyes:
            rel = f"images/{pid}_{eye.value}.png"
            path = None
            if out_dir is not None:
                path = out_dir / rel
                img_rng = np.random.default_rng([seed, i, 0 if eye is Eye.LEFT else 1])
                pix = render_fundus(signal.image_size, lesion[i], eye, img_rng)
                Image.fromarray((pix * 255).round().astype(np.uint8)).save(path)
            samples.append(ImageSample(rel, pid, eye, path))
        records.append(PatientRecord(pid, float(round(ages[i], 1)),
                                     Gender.FEMALE if fem_u[i] < signal.female_fraction else Gender.MALE,
                                     bool(htn[i]), bool(dm[i]), tuple(samples)))
        latent[pid] = float(lesion[i])
    manifest = None
    if out_dir is not None:
        manifest = out_dir / "manifest.csv"
        write_manifest(records, manifest, root=out_dir)
    return SyntheticCohort(records, latent, manifest)
