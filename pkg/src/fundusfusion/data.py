"""In-memory tables the training loop and predictors consume, and the
access layer that keeps the test split out of training."""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
import torch

from .cohort import (
    AgeScaler,
    AugmentConfig,
    PreprocessConfig,
    SplitAssignment,
    augment_image,
    crop_resize,
    load_image,
    minmax_scale,
    zscore,
)


class SplitAccessError(RuntimeError):
    """Test-split data requested during a training phase."""


@dataclass
class ImageTable:
    """Per-image rows; ``images`` holds min-max scaled HxWx3 arrays (or None
    for demographics-only use).  Z-scoring happens per batch, after
    augmentation, so rotation fills with black."""

    image_id: np.ndarray
    patient_id: np.ndarray
    label: np.ndarray
    diabetes: np.ndarray
    age_std: np.ndarray
    gender: np.ndarray
    images: np.ndarray | None
    preprocess: PreprocessConfig

    def __len__(self):
        return len(self.image_id)

    @classmethod
    def from_records(cls, records, scaler: AgeScaler, preprocess: PreprocessConfig,
                     load_images: bool = True, cache: dict | None = None) -> ImageTable:
        rows = [(rec, img) for rec in records for img in rec.images]
        if not rows:
            raise ValueError("no images in the requested records")
        images = None
        if load_images:
            cache = {} if cache is None else cache
            arrs = []
            for _, img in rows:
                key = (str(img.path), preprocess.image_size)
                if key not in cache:
                    if img.path is None:
                        raise ValueError(f"image {img.image_id} has no file")
                    cache[key] = minmax_scale(crop_resize(load_image(img.path),
                                                          preprocess.image_size))
                arrs.append(cache[key])
            images = np.stack(arrs).astype(np.float32)
        return cls(
            image_id=np.array([img.image_id for _, img in rows]),
            patient_id=np.array([rec.patient_id for rec, _ in rows]),
            label=np.array([int(rec.hypertension) for rec, _ in rows], dtype=np.int64),
            diabetes=np.array([int(rec.diabetes) for rec, _ in rows], dtype=np.int64),
            age_std=np.asarray(scaler([rec.age for rec, _ in rows]), dtype=np.float64),
            gender=np.array([rec.gender.code for rec, _ in rows], dtype=np.int64),
            images=images,
            preprocess=preprocess,
        )

    def demographics(self) -> np.ndarray:
        return np.stack([self.age_std, self.gender.astype(np.float64)], axis=1)

    def batch(self, idx, augment: AugmentConfig | None = None,
              rng: np.random.Generator | None = None, dtype=torch.float32):
        idx = np.asarray(idx)
        inputs = {"demo": torch.as_tensor(self.demographics()[idx], dtype=dtype)}
        if self.images is not None:
            imgs = self.images[idx]
            if augment is not None:
                imgs = np.stack([augment_image(im, augment, rng) for im in imgs])
            imgs = zscore(imgs, self.preprocess.channel_mean, self.preprocess.channel_std)
            inputs["images"] = torch.as_tensor(imgs.transpose(0, 3, 1, 2).copy(), dtype=dtype)
        else:
            inputs["images"] = None
        return inputs, torch.as_tensor(self.label[idx], dtype=dtype)


@dataclass
class TabularTable:
    """Feature matrix rows aligned with an ImageTable (for classifier heads)."""

    x: np.ndarray
    label: np.ndarray

    def __len__(self):
        return len(self.label)

    def batch(self, idx, augment=None, rng=None, dtype=torch.float32):
        idx = np.asarray(idx)
        return ({"x": torch.as_tensor(self.x[idx], dtype=dtype)},
                torch.as_tensor(self.label[idx], dtype=dtype))


class CohortAccess:
    """Serves split tables and logs every access.

    Inside ``with access.phase("training")`` any request for the test subset
    raises :class:`SplitAccessError`.
    """

    def __init__(self, records, split: SplitAssignment, preprocess: PreprocessConfig,
                 load_images: bool = True):
        self.records = list(records)
        self.split = split
        self.preprocess = preprocess
        self.load_images = load_images
        self.scaler = AgeScaler.fit(split.select(self.records, "train"))
        self.access_log: list[dict] = []
        self._phase = "setup"
        self._tables: dict[str, ImageTable] = {}
        self._image_cache: dict = {}

    @contextmanager
    def phase(self, name: str):
        prev, self._phase = self._phase, name
        try:
            yield self
        finally:
            self._phase = prev

    def table(self, subset: str) -> ImageTable:
        if subset == "test" and self._phase == "training":
            self.access_log.append({"phase": self._phase, "subset": subset, "granted": False})
            raise SplitAccessError("training phase attempted to read the test split")
        self.access_log.append({"phase": self._phase, "subset": subset, "granted": True})
        if subset not in self._tables:
            recs = self.split.select(self.records, subset)
            if not recs:
                raise ValueError(f"subset {subset!r} is empty")
            self._tables[subset] = ImageTable.from_records(
                recs, self.scaler, self.preprocess, self.load_images, self._image_cache)
        return self._tables[subset]
