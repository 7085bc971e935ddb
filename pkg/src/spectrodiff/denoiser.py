"""Denoisers: a closed-form Gaussian oracle and a preconditioned MLP.

The MLP sees ``c_in * x`` flattened, Fourier features of ``c_noise`` and the
sum of a class embedding and an ROI embedding. The class table has one extra
row, index ``num_classes``, for the null token. Gradients are computed by
hand-written reverse-mode accumulation.

Checkpoints use the ``MDL1`` format (all little-endian)::

    b"MDL1" | u32 n_widths | u32 widths[n_widths] | u32 num_classes | u32 D
    | u32 K | u32 M | f32 sigma_data | u32 fourier_dim | u32 embed_dim
    | f32 parameters in declaration order (W0, b0, W1, b1, ..., class_embed, roi_embed)
"""
from __future__ import annotations

import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .diffusion import sample_training_sigma
from .errors import ArtifactIOError, NumericError, ValidationError
from .rng import substream

MDL_MAGIC = b"MDL1"
# Unit-scale embeddings: at 0.02 the class signal is swamped by the image inputs
# and stays too weak to condition samples within a few thousand Adam steps.
EMBED_INIT_STD = 1.0


# -- analytic oracle -------------------------------------------------------------

def analytic_denoise(x, sigma, mu=0.0, s=1.0):
    """Posterior mean E[x0 | x] for x0 ~ N(mu, s^2 I) and x = x0 + sigma * eps."""
    s2 = s * s
    v = sigma * sigma
    return (s2 * np.asarray(x, dtype=np.float64) + v * np.asarray(mu, dtype=np.float64)) / (s2 + v)


@dataclass
class AnalyticGaussianDenoiser:
    mu: np.ndarray | float = 0.0
    s: float = 1.0

    def __call__(self, x, sigma, labels=None):
        return analytic_denoise(x, sigma, self.mu, self.s)


# -- preconditioning --------------------------------------------------------------

def precondition(sigma, sigma_data: float):
    """(c_skip, c_out, c_in, c_noise) for noise level ``sigma``."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0) or sigma_data <= 0:
        raise ValidationError("preconditioning needs sigma > 0 and sigma_data > 0")
    sd2 = sigma_data * sigma_data
    total = sigma * sigma + sd2
    c_skip = sd2 / total
    c_out = sigma * sigma_data / np.sqrt(total)
    c_in = 1.0 / np.sqrt(total)
    c_noise = np.log(sigma) / 4.0
    return c_skip, c_out, c_in, c_noise


def loss_weight(sigma, sigma_data: float):
    return (sigma * sigma + sigma_data * sigma_data) / (sigma * sigma_data) ** 2


# -- MLP --------------------------------------------------------------------------

def silu(z):
    return z / (1.0 + np.exp(-z))


def silu_grad(z):
    s = 1.0 / (1.0 + np.exp(-z))
    return s * (1.0 + z * (1.0 - s))


def _matmul_rows(h: np.ndarray, W: np.ndarray) -> np.ndarray:
    """``h @ W`` one row at a time.

    BLAS rounds differently depending on how many rows it is given, so a
    sample's output would otherwise depend on what else shares its batch.
    """
    out = np.empty((h.shape[0], W.shape[1]))
    for i in range(h.shape[0]):
        out[i] = h[i] @ W
    return out


def fourier_features(c_noise, dim: int) -> np.ndarray:
    """(B, dim) cos/sin features at frequencies 0.25 * 2**i."""
    c = np.atleast_1d(np.asarray(c_noise, dtype=np.float64))
    freqs = 0.25 * 2.0 ** np.arange(dim // 2)
    angles = 2.0 * np.pi * c[:, None] * freqs[None, :]
    return np.concatenate([np.cos(angles), np.sin(angles)], axis=1)


@dataclass
class MlpDenoiser:
    widths: list[int]  # [input, hidden..., output]
    num_classes: int
    num_rois: int
    image_shape: tuple[int, int, int]  # (2, K, M)
    sigma_data: float = 0.5
    fourier_dim: int = 16
    embed_dim: int = 32
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def data_dim(self) -> int:
        return int(np.prod(self.image_shape))

    @property
    def null_label(self) -> int:
        return self.num_classes

    @classmethod
    def create(cls, image_shape, num_classes: int, num_rois: int = 1, hidden=(512, 512),
               sigma_data: float = 0.5, fourier_dim: int = 16, embed_dim: int = 32,
               seed: int = 0) -> "MlpDenoiser":
        image_shape = tuple(int(s) for s in image_shape)
        data_dim = int(np.prod(image_shape))
        widths = [data_dim + fourier_dim + embed_dim, *map(int, hidden), data_dim]
        model = cls(widths, num_classes, num_rois, image_shape, sigma_data, fourier_dim, embed_dim)
        rng = substream(seed, "init")
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            bound = 1.0 / math.sqrt(fan_in)
            model.params[f"W{i}"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
            model.params[f"b{i}"] = rng.uniform(-bound, bound, size=fan_out)
        model.params["class_embed"] = EMBED_INIT_STD * rng.standard_normal((num_classes + 1, embed_dim))
        model.params["roi_embed"] = EMBED_INIT_STD * rng.standard_normal((num_rois, embed_dim))
        model.validate()
        return model

    @property
    def num_layers(self) -> int:
        return len(self.widths) - 1

    def param_names(self) -> list[str]:
        names = []
        for i in range(self.num_layers):
            names += [f"W{i}", f"b{i}"]
        return names + ["class_embed", "roi_embed"]

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        for i, (a, b) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            shapes[f"W{i}"] = (a, b)
            shapes[f"b{i}"] = (b,)
        shapes["class_embed"] = (self.num_classes + 1, self.embed_dim)
        shapes["roi_embed"] = (self.num_rois, self.embed_dim)
        return shapes

    def validate(self) -> None:
        if self.widths[0] != self.data_dim + self.fourier_dim + self.embed_dim:
            raise ValidationError("input width does not match data, noise and embedding widths")
        if self.widths[-1] != self.data_dim:
            raise ValidationError("output width must equal the flattened image size")
        if self.fourier_dim % 2:
            raise ValidationError("fourier_dim must be even")
        for name, shape in self.param_shapes().items():
            if self.params[name].shape != shape:
                raise ValidationError(f"{name} has shape {self.params[name].shape}, expected {shape}")

    def copy(self) -> "MlpDenoiser":
        return MlpDenoiser(list(self.widths), self.num_classes, self.num_rois, self.image_shape,
                           self.sigma_data, self.fourier_dim, self.embed_dim,
                           {k: v.copy() for k, v in self.params.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([self.params[n].ravel() for n in self.param_names()])

    def set_flat(self, vec: np.ndarray) -> None:
        offset = 0
        for name, shape in self.param_shapes().items():
            size = int(np.prod(shape))
            self.params[name] = np.array(vec[offset:offset + size], dtype=np.float64).reshape(shape)
            offset += size

    # -- network ------------------------------------------------------------

    def _labels(self, labels, batch: int) -> np.ndarray:
        if labels is None:
            return np.full(batch, self.null_label, dtype=int)
        labels = np.broadcast_to(np.asarray(labels, dtype=int), (batch,))
        if np.any(labels < 0) or np.any(labels > self.num_classes):
            raise ValidationError(f"labels must lie in [0, {self.num_classes}]")
        return labels

    def _rois(self, rois, batch: int) -> np.ndarray:
        if rois is None:
            return np.zeros(batch, dtype=int)
        rois = np.broadcast_to(np.asarray(rois, dtype=int), (batch,))
        if np.any(rois < 0) or np.any(rois >= self.num_rois):
            raise ValidationError(f"roi indices must lie in [0, {self.num_rois})")
        return rois

    def forward(self, x_flat, c_noise, labels=None, rois=None, cache: bool = False):
        """Raw network output F(x_flat, c_noise, cond); ``labels=None`` means null token."""
        x_flat = np.asarray(x_flat, dtype=np.float64)
        if x_flat.ndim == 1:
            x_flat = x_flat[None]
        B = x_flat.shape[0]
        if x_flat.shape[1] != self.data_dim:
            raise ValidationError(f"input width {x_flat.shape[1]} != {self.data_dim}")
        labels = self._labels(labels, B)
        rois = self._rois(rois, B)
        c_noise = np.broadcast_to(np.asarray(c_noise, dtype=np.float64), (B,))
        emb = self.params["class_embed"][labels] + self.params["roi_embed"][rois]
        h = np.concatenate([x_flat, fourier_features(c_noise, self.fourier_dim), emb], axis=1)
        acts, pre = [h], []
        for i in range(self.num_layers):
            z = _matmul_rows(h, self.params[f"W{i}"]) + self.params[f"b{i}"]
            if i < self.num_layers - 1:
                pre.append(z)
                h = silu(z)
                acts.append(h)
            else:
                h = z
        if cache:
            return h, (acts, pre, labels, rois)
        return h

    def backward(self, dout, tape) -> dict[str, np.ndarray]:
        acts, pre, labels, rois = tape
        grads = {}
        g = dout
        for i in reversed(range(self.num_layers)):
            grads[f"W{i}"] = acts[i].T @ g
            grads[f"b{i}"] = g.sum(axis=0)
            g = g @ self.params[f"W{i}"].T
            if i > 0:
                g = g * silu_grad(pre[i - 1])
        g_emb = g[:, self.data_dim + self.fourier_dim:]
        grads["class_embed"] = np.zeros_like(self.params["class_embed"])
        np.add.at(grads["class_embed"], labels, g_emb)
        grads["roi_embed"] = np.zeros_like(self.params["roi_embed"])
        np.add.at(grads["roi_embed"], rois, g_emb)
        return grads

    def denoise(self, x, sigma, labels=None, rois=None) -> np.ndarray:
        """Preconditioned D(x, sigma, cond) on a batch shaped ``(B, *image_shape)``."""
        x = np.asarray(x, dtype=np.float64)
        B = x.shape[0]
        c_skip, c_out, c_in, c_noise = precondition(sigma, self.sigma_data)
        flat = x.reshape(B, -1)
        F = self.forward(np.reshape(c_in, (-1, 1)) * flat, c_noise, labels, rois)
        out = np.reshape(c_skip, (-1, 1)) * flat + np.reshape(c_out, (-1, 1)) * F
        return out.reshape(x.shape)

    def bind(self, rois=None):
        """Denoiser callable ``D(x, sigma, labels)`` with ROI conditioning fixed."""
        def D(x, sigma, labels):
            return self.denoise(x, sigma, labels, rois)
        return D


# -- loss -------------------------------------------------------------------------

@dataclass
class NoiseDraw:
    sigma: np.ndarray  # (B,)
    eps: np.ndarray  # (B, data_dim)
    drop: np.ndarray  # (B,) bool, True where the label is replaced by the null token


def draw_noise(rng: np.random.Generator, batch: int, data_dim: int, p_null: float,
               P_mean: float = -1.2, P_std: float = 1.2) -> NoiseDraw:
    sigma = sample_training_sigma(rng, P_mean, P_std, size=batch)
    eps = rng.standard_normal((batch, data_dim))
    drop = rng.random(batch) < p_null
    return NoiseDraw(sigma, eps, drop)


def loss_and_grad(model: MlpDenoiser, x0, labels, noise: NoiseDraw, rois=None,
                  with_grad: bool = True):
    """EDM-weighted denoising loss averaged over the batch, and its gradient.

    Per item: ``lambda(sigma) * mean((D(x0 + sigma*eps) - x0)**2)`` with the
    mean taken over image entries.
    """
    x0 = np.asarray(x0, dtype=np.float64).reshape(len(noise.sigma), -1)
    B, P = x0.shape
    labels = np.where(noise.drop, model.null_label, np.asarray(labels, dtype=int))
    sigma = noise.sigma
    c_skip, c_out, c_in, c_noise = precondition(sigma, model.sigma_data)
    x_t = x0 + sigma[:, None] * noise.eps
    F, tape = model.forward(c_in[:, None] * x_t, c_noise, labels, rois, cache=True)
    resid = c_skip[:, None] * x_t + c_out[:, None] * F - x0
    lam = loss_weight(sigma, model.sigma_data)
    per_item = lam * np.mean(resid * resid, axis=1)
    loss = float(per_item.mean())
    if not with_grad:
        return loss, None
    dF = (2.0 / (B * P)) * (lam * c_out)[:, None] * resid
    return loss, model.backward(dF, tape)


# -- training ---------------------------------------------------------------------

@dataclass
class TrainConfig:
    learning_rate: float = 3e-4
    epochs: int = 1000
    batch_size: int = 4
    p_null: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    sigma_data: float = 0.5
    hidden: tuple[int, ...] = (512, 512)
    fourier_dim: int = 16
    embed_dim: int = 32
    P_mean: float = -1.2
    P_std: float = 1.2
    resample_noise: bool = True
    workers: int = 1

    def validate(self) -> None:
        if not 0.0 <= self.p_null <= 1.0:
            raise ValidationError("p_null must lie in [0, 1]")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValidationError("need epochs >= 0 and batch_size >= 1")
        if not self.learning_rate > 0:
            raise ValidationError("learning_rate must be positive")
        if self.workers < 1:
            raise ValidationError("workers must be >= 1")


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    epoch: int = 0

    @classmethod
    def zeros(cls, model: MlpDenoiser) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in model.params.items()},
                   {k: np.zeros_like(p) for k, p in model.params.items()})


def adam_update(model: MlpDenoiser, grads, state: AdamState, cfg: TrainConfig) -> None:
    state.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    corr1 = 1.0 - b1 ** state.step
    corr2 = 1.0 - b2 ** state.step
    for name in model.param_names():
        g = grads[name]
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = state.m[name] / corr1
        v_hat = state.v[name] / corr2
        model.params[name] = model.params[name] - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)


@dataclass
class TrainResult:
    model: MlpDenoiser
    state: AdamState
    losses: list[tuple[int, float]]


def _chunked_loss_and_grad(model, x0, labels, noise, rois, workers: int):
    """Split a batch into ``workers`` fixed chunks; reduce in chunk order."""
    B = len(noise.sigma)
    bounds = np.linspace(0, B, workers + 1).astype(int)
    jobs = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        if hi > lo:
            sub = NoiseDraw(noise.sigma[lo:hi], noise.eps[lo:hi], noise.drop[lo:hi])
            jobs.append((lo, hi, sub))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(
            lambda job: loss_and_grad(model, x0[job[0]:job[1]], labels[job[0]:job[1]], job[2],
                                      None if rois is None else rois[job[0]:job[1]]),
            jobs))
    loss = 0.0
    grads = {k: np.zeros_like(v) for k, v in model.params.items()}
    for (lo, hi, _), (l, g) in zip(jobs, results):
        w = (hi - lo) / B
        loss += w * l
        for k in grads:
            grads[k] += w * g[k]
    return loss, grads


def train(images, labels, config: TrainConfig, rois=None, num_classes: int | None = None,
          num_rois: int | None = None, model: MlpDenoiser | None = None,
          state: AdamState | None = None, log=None) -> TrainResult:
    """Adam training with null-token dropout.

    Epoch ``e`` draws its shuffling and noise from substream (seed, "train", e),
    so a run resumed from a saved (model, state) continues bit-identically.
    """
    config.validate()
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    if images.shape[0] == 0:
        raise ValidationError("training set is empty")
    n = images.shape[0]
    rois = np.zeros(n, dtype=int) if rois is None else np.asarray(rois, dtype=int)
    if model is None:
        model = MlpDenoiser.create(
            images.shape[1:], num_classes if num_classes is not None else int(labels.max()) + 1,
            num_rois if num_rois is not None else int(rois.max()) + 1, config.hidden,
            config.sigma_data, config.fourier_dim, config.embed_dim, config.seed)
    elif tuple(model.image_shape) != tuple(images.shape[1:]):
        raise ValidationError(f"model expects images {model.image_shape}, got {images.shape[1:]}")
    state = state or AdamState.zeros(model)
    flat = images.reshape(n, -1)
    fixed = None
    if not config.resample_noise:
        fixed = draw_noise(substream(config.seed, "train-fixed"), n, model.data_dim,
                           config.p_null, config.P_mean, config.P_std)
    losses = []
    for _ in range(config.epochs):
        epoch = state.epoch
        rng = substream(config.seed, "train", epoch)
        order = rng.permutation(n)
        total = 0.0
        for lo in range(0, n, config.batch_size):
            idx = order[lo:lo + config.batch_size]
            if fixed is None:
                noise = draw_noise(rng, len(idx), model.data_dim, config.p_null,
                                   config.P_mean, config.P_std)
            else:
                noise = NoiseDraw(fixed.sigma[idx], fixed.eps[idx], fixed.drop[idx])
            if config.workers > 1:
                loss, grads = _chunked_loss_and_grad(model, flat[idx], labels[idx], noise,
                                                     rois[idx], config.workers)
            else:
                loss, grads = loss_and_grad(model, flat[idx], labels[idx], noise, rois[idx])
            if not math.isfinite(loss):
                raise NumericError(
                    f"non-finite loss at epoch {epoch}: sigmas {noise.sigma.tolist()}, "
                    f"items {idx.tolist()}")
            adam_update(model, grads, state, config)
            total += loss * len(idx)
        state.epoch += 1
        losses.append((epoch, total / n))
        if log is not None:
            log(epoch, total / n)
    return TrainResult(model, state, losses)


def smoothed(values: Sequence[float], window: int | None = None) -> tuple[float, float]:
    """Mean of the first and last ``window`` values (default a tenth of the run)."""
    values = np.asarray(values, dtype=np.float64)
    w = window or max(1, len(values) // 10)
    return float(values[:w].mean()), float(values[-w:].mean())


# -- checkpoints ------------------------------------------------------------------

def save_checkpoint(path, model: MlpDenoiser) -> None:
    _, K, M = model.image_shape
    header = struct.pack(f"<4sI{len(model.widths)}I", MDL_MAGIC, len(model.widths), *model.widths)
    header += struct.pack("<IIIIfII", model.num_classes, model.num_rois, K, M,
                          model.sigma_data, model.fourier_dim, model.embed_dim)
    body = np.concatenate([model.params[n].ravel() for n in model.param_names()]).astype("<f4")
    try:
        Path(path).write_bytes(header + body.tobytes())
    except OSError as exc:
        raise ArtifactIOError(f"cannot write {path}: {exc}") from exc


def load_checkpoint(path) -> MlpDenoiser:
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise ValidationError(f"checkpoint not found: {path}") from exc
    except OSError as exc:
        raise ArtifactIOError(f"cannot read {path}: {exc}") from exc
    try:
        magic, n_widths = struct.unpack_from("<4sI", data)
        if magic != MDL_MAGIC:
            raise ValidationError(f"{path}: bad magic {magic!r}")
        off = 8
        widths = list(struct.unpack_from(f"<{n_widths}I", data, off))
        off += 4 * n_widths
        num_classes, num_rois, K, M, sigma_data, fdim, edim = struct.unpack_from("<IIIIfII", data, off)
        off += 28
    except struct.error as exc:
        raise ValidationError(f"{path}: truncated checkpoint header") from exc
    model = MlpDenoiser(widths, num_classes, num_rois, (2, K, M), float(sigma_data), fdim, edim)
    sizes = {k: int(np.prod(s)) for k, s in model.param_shapes().items()}
    body = np.frombuffer(data, dtype="<f4", offset=off)
    if body.size != sum(sizes.values()):
        raise ValidationError(f"{path}: parameter count {body.size} does not match architecture")
    model.set_flat(body.astype(np.float64))
    model.validate()
    return model


def save_train_state(path, model: MlpDenoiser, state: AdamState) -> None:
    """Full-precision parameters and Adam moments for exact resumption (.npy)."""
    names = model.param_names()
    vec = np.concatenate(
        [model.flat()] + [np.concatenate([d[n].ravel() for n in names]) for d in (state.m, state.v)]
        + [np.array([state.step, state.epoch], dtype=np.float64)])
    try:
        with open(path, "wb") as f:
            np.save(f, vec, allow_pickle=False)
    except OSError as exc:
        raise ArtifactIOError(f"cannot write {path}: {exc}") from exc


def load_train_state(path, template: MlpDenoiser) -> tuple[MlpDenoiser, AdamState]:
    try:
        vec = np.load(path, allow_pickle=False)
    except OSError as exc:
        raise ArtifactIOError(f"cannot read {path}: {exc}") from exc
    size = template.flat().size
    if vec.size != 3 * size + 2:
        raise ValidationError(f"{path}: training state does not match the model architecture")
    model = template.copy()
    model.set_flat(vec[:size])
    moments = []
    for part in (vec[size:2 * size], vec[2 * size:3 * size]):
        holder = template.copy()
        holder.set_flat(part)
        moments.append(holder.params)
    return model, AdamState(moments[0], moments[1], int(vec[-2]), int(vec[-1]))
