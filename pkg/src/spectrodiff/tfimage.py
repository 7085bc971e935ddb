"""Windowed Fourier spectrogram images and their inverse.

A length-T series is cut into M frames of N samples at hop h, each frame is
windowed and transformed with an N-point DFT, and the first K = N/2 + 1 bins
are kept as a two-channel (real, imaginary) K x M image. Inversion rebuilds
each frame from its Hermitian half-spectrum, applies the synthesis window and
overlap-adds, dividing by the accumulated squared window.

Samples whose squared-window envelope is below ``ENVELOPE_EPS`` cannot be
recovered. With the periodic Hann window this is sample 0 (w[0] = 0), plus any
trailing samples that no complete frame reaches. ``coverage_mask`` reports
them; ``iwft`` fills them with zeros unless ``strict=True``.

Near either end a sample is seen by a single frame with a small window
weight, so exact inversion divides by a tiny envelope. That is harmless for a
spectrogram computed from a signal but amplifies any error in a generated one.
``interior_mask`` marks the samples that enjoy the full overlap pattern
[N - h, M*h); ``iwft(..., envelope_floor=...)`` caps the amplification at the
ends while leaving the interior exact.

Spectrogram files use the ``SPC1`` format::

    b"SPC1" | u32 K | u32 M | f32 mean_re, std_re, mean_im, std_im (NaN = absent)
    | K*M f32 re | K*M f32 im      (row-major, little-endian)
"""
from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import ArtifactIOError, ValidationError

ENVELOPE_EPS = 1e-10
STD_EPS = 1e-8
SPC_MAGIC = b"SPC1"
_SPC_HEADER = struct.Struct("<4sII4f")


@dataclass(frozen=True)
class WftConfig:
    N: int = 16
    h: int = 8
    window_kind: str = "hann"
    T: int = 232

    @property
    def K(self) -> int:
        return self.N // 2 + 1

    @property
    def M(self) -> int:
        return (self.T - self.N) // self.h + 1

    @property
    def covered(self) -> int:
        """Number of leading samples reached by a complete frame."""
        return (self.M - 1) * self.h + self.N

    def validate(self) -> None:
        if self.window_kind not in ("hann", "rect"):
            raise ValidationError(f"unknown window {self.window_kind!r}")
        if self.N < 2 or self.N % 2:
            raise ValidationError(f"window length N={self.N} must be even and >= 2")
        if not 1 <= self.h <= self.N:
            raise ValidationError(f"hop h={self.h} must satisfy 1 <= h <= N={self.N}")
        if self.N > self.T:
            raise ValidationError(f"window length N={self.N} exceeds signal length T={self.T}")
        if self.window_kind == "hann" and self.h > self.N // 2:
            raise ValidationError(f"hann inversion needs h <= N/2, got h={self.h}, N={self.N}")


@dataclass(frozen=True)
class NormStats:
    mean_re: float
    std_re: float
    mean_im: float
    std_im: float

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.mean_re, self.std_re, self.mean_im, self.std_im)


@dataclass
class Spectrogram:
    re: np.ndarray  # (K, M)
    im: np.ndarray  # (K, M)
    config: WftConfig
    norm_stats: NormStats | None = None

    def stack(self) -> np.ndarray:
        return np.stack([self.re, self.im])


def window(kind: str, N: int) -> np.ndarray:
    if kind == "hann":
        return 0.5 * (1.0 - np.cos(2.0 * np.pi * np.arange(N) / N))
    if kind == "rect":
        return np.ones(N)
    raise ValidationError(f"unknown window {kind!r}")


def _dft_matrix(N: int) -> np.ndarray:
    n = np.arange(N)
    k = np.arange(N // 2 + 1)
    return np.exp(-2j * np.pi * np.outer(k, n) / N)


def frames(series: np.ndarray, config: WftConfig) -> np.ndarray:
    """(M, N) view of the analysis frames."""
    idx = np.arange(config.M)[:, None] * config.h + np.arange(config.N)[None, :]
    return series[idx]


def wft(series, config: WftConfig) -> Spectrogram:
    config.validate()
    x = np.asarray(series, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != config.T:
        raise ValidationError(f"expected a length-{config.T} series, got shape {x.shape}")
    if config.M < 1:
        raise ValidationError("signal too short for a single window")
    dropped = config.T - config.covered
    if dropped:
        warnings.warn(f"{dropped} trailing samples not covered by a complete window", stacklevel=2)
    segs = frames(x, config) * window(config.window_kind, config.N)
    spec = _dft_matrix(config.N) @ segs.T  # (K, M)
    im = spec.imag.copy()
    # DC and (even N) Nyquist bins are real for real input.
    im[0] = 0.0
    im[-1] = 0.0
    return Spectrogram(spec.real.copy(), im, config)


def envelope(config: WftConfig) -> np.ndarray:
    w2 = window(config.window_kind, config.N) ** 2
    env = np.zeros(config.T)
    for m in range(config.M):
        env[m * config.h:m * config.h + config.N] += w2
    return env


def coverage_mask(config: WftConfig) -> np.ndarray:
    """True where ``iwft`` reconstructs the sample exactly."""
    return envelope(config) >= ENVELOPE_EPS


def interior_mask(config: WftConfig) -> np.ndarray:
    """Samples covered with the full overlap pattern, [N - h, M*h)."""
    mask = np.zeros(config.T, dtype=bool)
    mask[max(config.N - config.h, 0):min(config.M * config.h, config.T)] = True
    return mask & coverage_mask(config)


def interior_floor(config: WftConfig) -> float:
    """Smallest envelope value over the interior (0 when the interior is empty)."""
    mask = interior_mask(config)
    return float(envelope(config)[mask].min()) if mask.any() else 0.0


def iwft(spec: Spectrogram, strict: bool = False, envelope_floor: float = 0.0) -> np.ndarray:
    """Inverse of ``wft`` by Hermitian completion, synthesis windowing and overlap-add.

    Uncovered samples (see ``coverage_mask``) are set to zero; with
    ``strict=True`` they raise instead. A gap in coverage strictly between
    covered samples always raises. A positive ``envelope_floor`` divides by
    ``max(envelope, envelope_floor)``, which attenuates rather than amplifies
    the poorly covered ends.
    """
    if spec.norm_stats is not None:
        raise ValidationError("spectrogram is normalized; unnormalize before inverting")
    cfg = spec.config
    cfg.validate()
    if spec.re.shape != (cfg.K, cfg.M) or spec.im.shape != (cfg.K, cfg.M):
        raise ValidationError(f"spectrogram shape {spec.re.shape} does not match ({cfg.K}, {cfg.M})")
    X = spec.re + 1j * spec.im
    # Hermitian completion: bins 1..N/2-1 appear twice in the full spectrum.
    weights = np.full(cfg.K, 2.0)
    weights[0] = 1.0
    weights[-1] = 1.0
    n = np.arange(cfg.N)
    k = np.arange(cfg.K)
    basis = np.exp(2j * np.pi * np.outer(n, k) / cfg.N)  # (N, K)
    segs = ((basis * weights) @ X).real / cfg.N  # (N, M)
    w = window(cfg.window_kind, cfg.N)
    out = np.zeros(cfg.T)
    for m in range(cfg.M):
        out[m * cfg.h:m * cfg.h + cfg.N] += segs[:, m] * w
    env = envelope(cfg)
    ok = env >= ENVELOPE_EPS
    covered = np.flatnonzero(ok)
    if covered.size == 0:
        raise ValidationError("no sample is covered by the window envelope")
    interior = np.arange(covered[0], covered[-1] + 1)
    if not ok[interior].all():
        raise ValidationError("window/hop pair leaves gaps in the overlap-add envelope")
    if strict and not ok.all():
        raise ValidationError(f"{int((~ok).sum())} edge samples are not covered by any window")
    out[ok] /= np.maximum(env[ok], envelope_floor)
    out[~ok] = 0.0
    return out


def normalize(spec: Spectrogram, stats: NormStats | None = None) -> tuple[Spectrogram, NormStats]:
    """Per-channel z-score over the whole image.

    Statistics are computed from ``spec`` unless given (e.g. pooled training
    statistics). Standard deviations are floored at ``STD_EPS``.
    """
    if spec.norm_stats is not None:
        raise ValidationError("spectrogram is already normalized")
    if stats is None:
        stats = NormStats(float(spec.re.mean()), max(float(spec.re.std()), STD_EPS),
                          float(spec.im.mean()), max(float(spec.im.std()), STD_EPS))
    re = (spec.re - stats.mean_re) / stats.std_re
    im = (spec.im - stats.mean_im) / stats.std_im
    return Spectrogram(re, im, spec.config, stats), stats


def unnormalize(spec: Spectrogram, stats: NormStats | None = None) -> Spectrogram:
    stats = stats if stats is not None else spec.norm_stats
    if stats is None:
        raise ValidationError("no normalization statistics available")
    re = spec.re * stats.std_re + stats.mean_re
    im = spec.im * stats.std_im + stats.mean_im
    return Spectrogram(re, im, spec.config, None)


def pooled_stats(specs) -> NormStats:
    """Channel statistics pooled over several unnormalized spectrograms."""
    re = np.concatenate([s.re.ravel() for s in specs])
    im = np.concatenate([s.im.ravel() for s in specs])
    return NormStats(float(re.mean()), max(float(re.std()), STD_EPS),
                     float(im.mean()), max(float(im.std()), STD_EPS))


def subject_to_spectrograms(series: np.ndarray, config: WftConfig, stats=None):
    """wft + normalize for every ROI row; returns ``[(spectrogram, roi_index), ...]``.

    ``stats`` may be a sequence of per-ROI ``NormStats`` to use instead of
    per-image statistics.
    """
    x = np.asarray(getattr(series, "series", series), dtype=np.float64)
    out = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for r, row in enumerate(x):
            spec, _ = normalize(wft(row, config), None if stats is None else stats[r])
            out.append((spec, r))
    return out


def spectrograms_to_subject(specs, stats=None, config: WftConfig | None = None) -> np.ndarray:
    """Reassemble a (D, T) series from ``(spectrogram, roi_index)`` pairs in any order."""
    if not specs:
        raise ValidationError("no spectrograms given")
    ordered = sorted(specs, key=lambda p: p[1])
    rois = [r for _, r in ordered]
    if rois != list(range(len(rois))):
        raise ValidationError(f"ROI indices {rois} are not a complete 0..D-1 set")
    cfg = config or ordered[0][0].config
    rows = []
    for spec, r in ordered:
        if spec.config != cfg:
            raise ValidationError(f"ROI {r}: inconsistent transform configuration")
        roi_stats = stats[r] if stats is not None else spec.norm_stats
        rows.append(iwft(unnormalize(spec, roi_stats)))
    return np.stack(rows)


# -- fixed-size images ---------------------------------------------------------

@dataclass(frozen=True)
class FramePlan:
    """Transform configuration plus placement into a square image.

    The true K x M spectrogram occupies rows ``[0, K)`` of the image; its
    frames ``[crop, crop + cols)`` occupy columns ``[pad_left, pad_left + cols)``.
    Everything else is zero.
    """
    config: WftConfig
    image_size: int
    crop: int
    pad_left: int
    cols: int

    def to_image(self, spec: Spectrogram) -> np.ndarray:
        S = self.image_size
        img = np.zeros((2, S, S))
        K = self.config.K
        sl = slice(self.crop, self.crop + self.cols)
        img[0, :K, self.pad_left:self.pad_left + self.cols] = spec.re[:, sl]
        img[1, :K, self.pad_left:self.pad_left + self.cols] = spec.im[:, sl]
        return img

    @property
    def kept_config(self) -> WftConfig:
        """Configuration describing only the frames that fit in the image."""
        cfg = self.config
        return WftConfig(cfg.N, cfg.h, cfg.window_kind, (self.cols - 1) * cfg.h + cfg.N)

    def from_image(self, img: np.ndarray, stats: NormStats | None = None) -> Spectrogram:
        """Kept frames as a spectrogram over ``kept_config``."""
        K = self.config.K
        cols = slice(self.pad_left, self.pad_left + self.cols)
        return Spectrogram(img[0, :K, cols].copy(), img[1, :K, cols].copy(), self.kept_config, stats)

    def decode(self, img: np.ndarray, stats: NormStats) -> np.ndarray:
        """Normalized image back to a length-T series; unrecoverable samples are 0.

        The overlap-add envelope is floored at its interior minimum so errors in
        generated images are not amplified at the ends.
        """
        kept_cfg = self.kept_config
        kept = iwft(unnormalize(self.from_image(img, stats)), envelope_floor=interior_floor(kept_cfg))
        out = np.zeros(self.config.T)
        start = self.crop * self.config.h
        out[start:start + kept.shape[0]] = kept
        return out

    def sample_mask(self) -> np.ndarray:
        """Interior samples of the kept frames; ``decode`` is exact there."""
        kept = self.kept_config
        mask = np.zeros(self.config.T, dtype=bool)
        start = self.crop * self.config.h
        mask[start:start + kept.T] = interior_mask(kept)
        return mask


def plan_frames(T: int, image_size: int, window_kind: str = "hann",
                N: int | None = None, h: int | None = None) -> FramePlan:
    """Choose (N, h) for a square image of side ``image_size``.

    With explicit N and h these are used as given. Otherwise the search keeps
    K <= image_size and maximizes (interior samples of the kept frames) x
    (filled pixels), preferring smaller hops on ties. Neither factor alone
    works: filling the image with a long window leaves no interior, and short
    windows leave most of the image empty.
    Frames beyond ``image_size`` are center-cropped; missing frames are zero
    padded on the right.
    """
    S = int(image_size)
    if S < 2:
        raise ValidationError("image_size must be >= 2")
    if N is not None or h is not None:
        if N is None or h is None:
            raise ValidationError("N and h must be given together")
        cfg = WftConfig(int(N), int(h), window_kind, T)
        cfg.validate()
        if cfg.K > S:
            raise ValidationError(f"K={cfg.K} frequency bins exceed image_size={S}")
        return _place(cfg, S)
    best = None
    for n in range(2, min(2 * S - 2, T) + 1, 2):
        max_h = n // 2 if window_kind == "hann" else n
        for hop in range(1, max_h + 1):
            cfg = WftConfig(n, hop, window_kind, T)
            if cfg.M < 1:
                continue
            plan = _place(cfg, S)
            key = (int(plan.sample_mask().sum()) * cfg.K * plan.cols, -hop)
            if best is None or key > best[0]:
                best = (key, plan)
    if best is None:
        raise ValidationError(
            f"signal length T={T} is too short for any window at image_size={S}")
    return best[1]


def _place(cfg: WftConfig, S: int) -> FramePlan:
    if cfg.M > S:
        return FramePlan(cfg, S, (cfg.M - S) // 2, 0, S)
    return FramePlan(cfg, S, 0, 0, cfg.M)


# -- SPC1 files ----------------------------------------------------------------

def write_spectrogram(path, spec: Spectrogram) -> None:
    K, M = spec.re.shape
    stats = spec.norm_stats.as_tuple() if spec.norm_stats else (float("nan"),) * 4
    try:
        with open(path, "wb") as f:
            f.write(_SPC_HEADER.pack(SPC_MAGIC, K, M, *stats))
            f.write(np.ascontiguousarray(spec.re, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(spec.im, dtype="<f4").tobytes())
    except OSError as exc:
        raise ArtifactIOError(f"cannot write {path}: {exc}") from exc


def read_spectrogram(path, config: WftConfig) -> Spectrogram:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise ArtifactIOError(f"cannot read {path}: {exc}") from exc
    if len(data) < _SPC_HEADER.size:
        raise ValidationError(f"{path}: truncated SPC1 header")
    magic, K, M, *stats = _SPC_HEADER.unpack_from(data)
    if magic != SPC_MAGIC:
        raise ValidationError(f"{path}: bad magic {magic!r}")
    if len(data) != _SPC_HEADER.size + 8 * K * M:
        raise ValidationError(f"{path}: size does not match K={K}, M={M}")
    if (K, M) != (config.K, config.M):
        raise ValidationError(f"{path}: shape ({K}, {M}) does not match config ({config.K}, {config.M})")
    body = np.frombuffer(data, dtype="<f4", offset=_SPC_HEADER.size).astype(np.float64)
    re = body[:K * M].reshape(K, M)
    im = body[K * M:].reshape(K, M)
    norm = None if any(np.isnan(stats)) else NormStats(*(float(s) for s in stats))
    return Spectrogram(re, im, config, norm)


def with_T(config: WftConfig, T: int) -> WftConfig:
    return replace(config, T=T)
