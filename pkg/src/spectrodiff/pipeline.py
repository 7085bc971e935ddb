"""End-to-end glue between series, spectrogram images and the diffusion model."""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .diffusion import EdmParams, GuidanceSpec, build_schedule, sample
from .errors import ArtifactIOError, NumericError, ValidationError
from .rng import substream
from .signal_io import SubjectRecord
from .tfimage import FramePlan, NormStats, WftConfig, normalize, plan_frames, pooled_stats, wft


@dataclass
class SpectralCodec:
    """Maps (D, T) cohorts to (D, 2, S, S) normalized images and back.

    Each ROI is z-scored with training-cohort statistics before the transform;
    each ROI's spectrogram channels are normalized with statistics pooled over
    the training cohort. Both are reused to decode synthetic images.
    """
    plan: FramePlan
    roi_mean: np.ndarray
    roi_std: np.ndarray
    norm: list[NormStats]

    @property
    def D(self) -> int:
        return len(self.roi_mean)

    @property
    def T(self) -> int:
        return self.plan.config.T

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (2, self.plan.image_size, self.plan.image_size)

    @classmethod
    def fit(cls, records: Sequence[SubjectRecord], image_size: int, window_kind: str = "hann",
            N: int | None = None, h: int | None = None) -> "SpectralCodec":
        if not records:
            raise ValidationError("cannot fit a codec on an empty cohort")
        x = np.stack([r.series for r in records])  # (S, D, T)
        T = x.shape[2]
        plan = plan_frames(T, image_size, window_kind, N, h)
        mean = x.mean(axis=(0, 2))
        std = np.maximum(x.std(axis=(0, 2)), 1e-8)
        z = (x - mean[None, :, None]) / std[None, :, None]
        norm = []
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            for r in range(x.shape[1]):
                norm.append(pooled_stats([wft(z[s, r], plan.config) for s in range(x.shape[0])]))
        return cls(plan, mean, std, norm)

    def encode(self, series: np.ndarray) -> np.ndarray:
        series = np.asarray(series, dtype=np.float64)
        if series.shape != (self.D, self.T):
            raise ValidationError(f"expected a ({self.D}, {self.T}) series, got {series.shape}")
        z = (series - self.roi_mean[:, None]) / self.roi_std[:, None]
        imgs = []
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            for r in range(self.D):
                spec, _ = normalize(wft(z[r], self.plan.config), self.norm[r])
                imgs.append(self.plan.to_image(spec))
        return np.stack(imgs)

    def decode(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        if images.shape != (self.D, *self.image_shape):
            raise ValidationError(f"expected images {(self.D, *self.image_shape)}, got {images.shape}")
        rows = [self.plan.decode(images[r], self.norm[r]) for r in range(self.D)]
        return np.stack(rows) * self.roi_std[:, None] + self.roi_mean[:, None]

    def sample_mask(self) -> np.ndarray:
        return self.plan.sample_mask()

    def to_dict(self) -> dict:
        cfg = self.plan.config
        return {
            "wft": {"N": cfg.N, "h": cfg.h, "window": cfg.window_kind, "T": cfg.T},
            "image_size": self.plan.image_size,
            "crop": self.plan.crop,
            "pad_left": self.plan.pad_left,
            "cols": self.plan.cols,
            "roi_mean": [float(v) for v in self.roi_mean],
            "roi_std": [float(v) for v in self.roi_std],
            "norm": [list(s.as_tuple()) for s in self.norm],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "SpectralCodec":
        try:
            w = doc["wft"]
            cfg = WftConfig(int(w["N"]), int(w["h"]), str(w["window"]), int(w["T"]))
            cfg.validate()
            plan = FramePlan(cfg, int(doc["image_size"]), int(doc["crop"]), int(doc["pad_left"]),
                             int(doc["cols"]))
            return cls(plan, np.array(doc["roi_mean"], dtype=np.float64),
                       np.array(doc["roi_std"], dtype=np.float64),
                       [NormStats(*map(float, s)) for s in doc["norm"]])
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed codec description: {exc}") from exc

    def save(self, path) -> None:
        try:
            Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")
        except OSError as exc:
            raise ArtifactIOError(f"cannot write {path}: {exc}") from exc

    @classmethod
    def load(cls, path) -> "SpectralCodec":
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ValidationError(f"codec file not found: {path}") from exc
        except (OSError, json.JSONDecodeError) as exc:
            raise ArtifactIOError(f"cannot read {path}: {exc}") from exc
        return cls.from_dict(doc)


def training_set(records: Sequence[SubjectRecord], codec: SpectralCodec):
    """Stack every (subject, ROI) image with its class label and ROI index."""
    images, labels, rois = [], [], []
    for rec in records:
        imgs = codec.encode(rec.series)
        images.append(imgs)
        labels.extend([rec.class_label] * codec.D)
        rois.extend(range(codec.D))
    return np.concatenate(images), np.array(labels, dtype=int), np.array(rois, dtype=int)


def synthesize(denoiser_factory, codec: SpectralCodec, class_label: int | None, count: int,
               edm: EdmParams, guidance_scale: float = 1.0, seed: int = 0, first_index: int = 0,
               id_prefix: str = "syn") -> list[SubjectRecord]:
    """Generate ``count`` subjects ROI by ROI.

    ``denoiser_factory(rois)`` returns a conditional denoiser ``D(x, sigma,
    labels)`` for a batch whose items belong to the given ROIs. Sample (i, r)
    draws all of its noise from substream (seed, "sample", label, i, r), so
    the output does not depend on batching.
    """
    if count == 0:
        return []
    schedule = build_schedule(edm)
    guidance = GuidanceSpec(guidance_scale, class_label)
    label_key = -1 if class_label is None else int(class_label)
    records = []
    for i in range(first_index, first_index + count):
        rois = np.arange(codec.D)
        rngs = [substream(seed, "sample", label_key + 1, i, int(r)) for r in rois]
        x = sample(denoiser_factory(rois), schedule, guidance, (codec.D, *codec.image_shape), rngs, edm)
        series = codec.decode(x)
        if not np.all(np.isfinite(series)):
            raise NumericError(f"synthetic subject {i} contains non-finite values")
        label = 0 if class_label is None else int(class_label)
        records.append(SubjectRecord(f"{id_prefix}_c{label}_{i:04d}", label, series, "synthetic"))
    return records


def periodogram(x: np.ndarray) -> np.ndarray:
    """|rfft|^2 / T of a mean-removed series (last axis)."""
    x = np.asarray(x, dtype=np.float64)
    x = x - x.mean(axis=-1, keepdims=True)
    return np.abs(np.fft.rfft(x, axis=-1)) ** 2 / x.shape[-1]


def mean_periodogram(records: Sequence[SubjectRecord], mask: np.ndarray | None = None) -> np.ndarray:
    """Periodogram averaged over subjects and ROIs, restricted to ``mask`` samples."""
    specs = []
    for r in records:
        x = r.series if mask is None else r.series[:, mask]
        specs.append(periodogram(x).mean(axis=0))
    return np.mean(specs, axis=0)
