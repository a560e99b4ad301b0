"""Aligned per-image predictions: the unit every statistic consumes."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CSV_HEADER = ("image_id", "patient_id", "probability", "label", "diabetes")


@dataclass(frozen=True)
class PredictionSet:
    image_id: np.ndarray
    patient_id: np.ndarray
    probability: np.ndarray
    label: np.ndarray
    diabetes: np.ndarray

    def __post_init__(self):
        n = len(self.image_id)
        if n == 0:
            raise ValueError("PredictionSet must be non-empty")
        for name in ("patient_id", "probability", "label", "diabetes"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"column {name!r} has length "
                                 f"{len(getattr(self, name))}, expected {n}")
        prob = np.asarray(self.probability, dtype=np.float64)
        if not np.all(np.isfinite(prob)) or prob.min() < 0 or prob.max() > 1:
            raise ValueError("probabilities must be finite and in [0, 1]")
        for name in ("label", "diabetes"):
            col = np.asarray(getattr(self, name))
            if not np.all((col == 0) | (col == 1)):
                raise ValueError(f"{name} must be 0/1")
        if len(set(self.image_id)) != n:
            raise ValueError("image ids must be unique")
        object.__setattr__(self, "image_id", np.asarray(self.image_id, dtype=str))
        object.__setattr__(self, "patient_id", np.asarray(self.patient_id, dtype=str))
        object.__setattr__(self, "probability", prob)
        object.__setattr__(self, "label", np.asarray(self.label, dtype=np.int64))
        object.__setattr__(self, "diabetes", np.asarray(self.diabetes, dtype=np.int64))

    @classmethod
    def from_arrays(cls, probability, label, image_id=None, patient_id=None,
                    diabetes=None) -> PredictionSet:
        """Convenience constructor; ids default to zero-padded positions."""
        n = len(probability)
        if image_id is None:
            image_id = [f"img{i:06d}" for i in range(n)]
        if patient_id is None:
            patient_id = list(image_id)
        if diabetes is None:
            diabetes = np.zeros(n, dtype=np.int64)
        return cls(np.asarray(image_id), np.asarray(patient_id),
                   np.asarray(probability, dtype=np.float64),
                   np.asarray(label), np.asarray(diabetes))

    def __len__(self):
        return len(self.image_id)

    def take(self, idx) -> PredictionSet:
        idx = np.asarray(idx)
        return PredictionSet(self.image_id[idx], self.patient_id[idx],
                             self.probability[idx], self.label[idx],
                             self.diabetes[idx])

    def canonical(self) -> PredictionSet:
        """Rows sorted by image id; bootstrap indices refer to this order."""
        return self.take(np.argsort(self.image_id, kind="stable"))

    def with_probability(self, probability) -> PredictionSet:
        return PredictionSet(self.image_id, self.patient_id,
                             np.asarray(probability, dtype=np.float64),
                             self.label, self.diabetes)

    def same_rows(self, other: PredictionSet) -> bool:
        a, b = self.canonical(), other.canonical()
        return (len(a) == len(b) and np.array_equal(a.image_id, b.image_id)
                and np.array_equal(a.label, b.label))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(CSV_HEADER)
            for row in zip(self.image_id, self.patient_id, self.probability,
                           self.label, self.diabetes):
                writer.writerow([row[0], row[1], repr(float(row[2])),
                                 int(row[3]), int(row[4])])

    @classmethod
    def from_csv(cls, path) -> PredictionSet:
        with open(Path(path), newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != CSV_HEADER:
                raise ValueError(f"{path}: expected header {','.join(CSV_HEADER)}")
            rows = list(reader)
        return cls(np.array([r["image_id"] for r in rows]),
                   np.array([r["patient_id"] for r in rows]),
                   np.array([float(r["probability"]) for r in rows]),
                   np.array([int(r["label"]) for r in rows]),
                   np.array([int(r["diabetes"]) for r in rows]))
