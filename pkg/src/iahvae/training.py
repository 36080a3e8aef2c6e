"""Synthetic datasets, Adam and the ELBO training loop."""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from . import tensor as T
from .model import Hierarchy, _fmt, _parse
from .rng import Rng
from .serialization import save_checkpoint
from .spectral import centered_freq, dft2, idft2

DATASET_KINDS = ("gp-texture", "ellipse-phantom")
_TEST_STREAM_OFFSET = 1 << 40
_BATCH_STREAM_OFFSET = 1 << 48


# ---------------------------------------------------------------------------
# data


@dataclass
class DatasetSpec:
    kind: str = "gp-texture"
    resolution: int = 16
    count: int = 256
    test_count: int = 0
    seed: int = 0
    spectral_decay: float = 3.0

    def __post_init__(self):
        if self.kind not in DATASET_KINDS:
            raise ValueError(f"dataset kind must be one of {DATASET_KINDS}, got {self.kind!r}")
        if self.count < 1 or self.test_count < 0:
            raise ValueError("count must be >= 1 and test_count >= 0")


@dataclass
class Dataset:
    spec: DatasetSpec
    train: np.ndarray
    test: np.ndarray
    mean: float
    std: float

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std


def _gp_texture(rng: Rng, n: int, decay: float) -> np.ndarray:
    f = centered_freq(n).astype(np.float64)
    r2 = f[:, None] ** 2 + f[None, :] ** 2
    amp = (1.0 + r2) ** (-decay / 4.0)  # power falls as (1 + |f|^2)^(-decay/2)
    return idft2(dft2(rng.normal((n, n))) * amp)


def _ellipse_phantom(rng: Rng, n: int) -> np.ndarray:
    c = (np.arange(n) + 0.5) / n * 2.0 - 1.0
    yy, xx = np.meshgrid(c, c, indexing="ij")
    img = ((xx / 0.9) ** 2 + (yy / 0.8) ** 2 <= 1.0).astype(np.float64)
    count = 3 + int(rng.uniform(1)[0] * 5)
    for _ in range(count):
        cx, cy, a, b, theta, val = rng.uniform(6)
        cx, cy = 1.2 * cx - 0.6, 1.2 * cy - 0.6
        a, b = 0.1 + 0.4 * a, 0.1 + 0.4 * b
        theta *= math.pi
        ct, st = math.cos(theta), math.sin(theta)
        u = (xx - cx) * ct + (yy - cy) * st
        v = -(xx - cx) * st + (yy - cy) * ct
        img += (2.0 * val - 1.0) * ((u / a) ** 2 + (v / b) ** 2 <= 1.0)
    return img


def generate_image(spec: DatasetSpec, stream: int, seed: int | None = None) -> np.ndarray:
    rng = Rng(spec.seed if seed is None else seed, stream)
    if spec.kind == "gp-texture":
        return _gp_texture(rng, spec.resolution, spec.spectral_decay)
    return _ellipse_phantom(rng, spec.resolution)


def generate_synthetic(spec: DatasetSpec, seed: int | None = None) -> Dataset:
    """Deterministic train/test images normalized with train statistics."""
    train = np.stack([generate_image(spec, i, seed) for i in range(spec.count)])
    test = np.stack([generate_image(spec, _TEST_STREAM_OFFSET + i, seed) for i in range(spec.test_count)]) \
        if spec.test_count else np.zeros((0, spec.resolution, spec.resolution))
    mean = float(train.mean())
    std = float(train.std())
    if std == 0.0:
        std = 1.0
    return Dataset(spec, (train - mean) / std, (test - mean) / std, mean, std)


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    def __init__(self, params, lr: float = 3e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale gradients in place so their global norm is at most ``max_norm``."""
    grads = [p.grad for p in params if p.grad is not None]
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    if max_norm > 0 and norm > max_norm:
        s = max_norm / norm
        for g in grads:
            g *= s
    return norm


# ---------------------------------------------------------------------------
# loop


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 16
    lr: float = 3e-4
    clip_norm: float = 1.0
    seed: int = 0
    width_factor: float = 0.25

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.lr < 0 or self.clip_norm <= 0 or self.width_factor <= 0:
            raise ValueError("lr must be >= 0; clip_norm and width_factor must be positive")

    def to_lines(self, prefix: str = "train.") -> list[str]:
        return [f"{prefix}{k}={_fmt(v)}" for k, v in asdict(self).items()]

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{f.name: _parse(d[f.name], f.type) for f in fields(cls) if f.name in d})


@dataclass
class TrainResult:
    epoch_losses: list[float] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    grad_norms: list[float] = field(default_factory=list)
    kl_per_layer: np.ndarray | None = None
    steps: int = 0
    seconds: float = 0.0


class TrainingDiverged(FloatingPointError):
    def __init__(self, msg: str, result: TrainResult):
        super().__init__(msg)
        self.result = result


def train(model: Hierarchy, images: np.ndarray, config: TrainConfig, checkpoint_path=None,
          on_epoch: Callable[[int, float], None] | None = None) -> TrainResult:
    """Minimize the per-pixel negative ELBO with Adam.

    Batches are drawn from a per-epoch permutation and latent noise from a
    per-step stream, so the loss curve is a pure function of the inputs.
    On a non-finite loss or gradient the last good parameters are restored
    (and checkpointed when a path is given) before raising.
    """
    images = np.asarray(images, dtype=np.float64)
    res = model.config.resolution
    if images.shape[1:] != (res, res):
        raise ValueError(f"images {images.shape[1:]} do not match model resolution {res}")
    params = model.parameters()
    opt = Adam(params, lr=config.lr)
    out = TrainResult()
    n = len(images)
    bs = min(config.batch_size, n)
    kl_acc = np.zeros(model.n_layers)
    t0 = time.perf_counter()
    good = model.state()
    for epoch in range(config.epochs):
        order = Rng(config.seed, epoch).permutation(n)
        losses = []
        kl_acc[:] = 0.0
        for start in range(0, n - bs + 1, bs):
            batch = images[order[start:start + bs]]
            rng = Rng(config.seed, _BATCH_STREAM_OFFSET + out.steps)
            model.zero_grad()
            try:
                loss, diag = model.loss(batch, rng)
                T.backward(loss)
                norm = clip_grad_norm(params, config.clip_norm)
                if not (math.isfinite(loss.item()) and math.isfinite(norm)):
                    raise T.NonFiniteError(f"loss {loss.item()} grad norm {norm}")
            except T.NonFiniteError as exc:
                T.get_tape().clear()
                model.load_state(good)
                if checkpoint_path is not None:
                    save_checkpoint(model, checkpoint_path, step=out.steps)
                raise TrainingDiverged(f"training diverged at step {out.steps}: {exc}", out) from exc
            opt.step()
            good = model.state()
            out.steps += 1
            losses.append(loss.item())
            out.step_losses.append(loss.item())
            out.grad_norms.append(norm)
            kl_acc += diag["kl"].mean(axis=0)
        ep = float(np.mean(losses))
        out.epoch_losses.append(ep)
        out.kl_per_layer = kl_acc / max(1, len(losses))
        if on_epoch is not None:
            on_epoch(epoch, ep)
    out.seconds = time.perf_counter() - t0
    if checkpoint_path is not None:
        save_checkpoint(model, checkpoint_path, step=out.steps,
                        rng_state=Rng(config.seed, config.epochs).get_state(),
                        extra=dict(line.split("=", 1) for line in config.to_lines()))
    return out
