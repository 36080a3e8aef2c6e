"""Hierarchical VAE whose decoder emits one spectrum per scale.

Latents are grouped by scale.  Each layer ``l`` has a prior net, a posterior
net and a contribution net acting on the running context of its scale; after
the last layer of a scale a reconstruction head maps the context to that
scale's dof vector, and the image is the inverse DFT of the summed spectra.
A scale's spectrum therefore depends on its own latents only through the
layers of that scale.

All nets act per spatial position (1x1 mixing); spatial mixing happens in the
nearest-neighbour upsampling between scales, the average pooling of the
bottom-up path and the dense maps of the reconstruction heads.
"""
from __future__ import annotations

import math
from collections import Counter
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .rng import Rng
from .spectral import ScalePartition, analyze, partition, synthesize
from .tensor import Tensor

LOG_SIGMA_MIN = -7.0
LOG_SIGMA_MAX = 2.0
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@dataclass
class ModelConfig:
    resolution: int = 16
    layers_per_scale: int = 2
    width_factor: float = 0.25
    outer_channels: int = 128
    inner_channels: int = 64
    blocks_per_scale: int = 3
    head_channels: int = 1
    zero_init: bool = True
    obs_sigma: float = 0.1
    seed: int = 0

    @property
    def channels(self) -> int:
        return max(1, round(self.outer_channels * self.width_factor))

    @property
    def inner(self) -> int:
        return max(1, round(self.inner_channels * self.width_factor))

    def to_lines(self, prefix: str = "model.") -> list[str]:
        return [f"{prefix}{k}={_fmt(v)}" for k, v in asdict(self).items()]

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        out = {}
        for f in fields(cls):
            if f.name in d:
                out[f.name] = _parse(d[f.name], f.type)
        return cls(**out)


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def _parse(text, typ):
    if not isinstance(text, str):
        return text
    if typ in ("bool", bool):
        if text.lower() not in ("true", "false", "1", "0"):
            raise ValueError(f"not a boolean: {text!r}")
        return text.lower() in ("true", "1")
    if typ in ("int", int):
        return int(text)
    if typ in ("float", float):
        return float(text)
    return text


# ---------------------------------------------------------------------------
# building blocks


class Affine:
    def __init__(self, n_in: int, n_out: int, rng: Rng, gain: float = 1.0):
        w = rng.normal((n_in, n_out)) * (gain / math.sqrt(n_in)) if gain else np.zeros((n_in, n_out))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(n_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)

    def named_parameters(self, prefix: str):
        yield prefix + "weight", self.weight
        yield prefix + "bias", self.bias


class ResBlock:
    """``x + W2 swish(W1 x)``, outer -> inner -> outer channels."""

    def __init__(self, channels: int, inner: int, rng: Rng, out_gain: float):
        self.a1 = Affine(channels, inner, rng)
        self.a2 = Affine(inner, channels, rng, gain=out_gain)

    def __call__(self, x: Tensor) -> Tensor:
        return x + self.a2(T.swish(self.a1(x)))

    def named_parameters(self, prefix: str):
        yield from self.a1.named_parameters(prefix + "a1.")
        yield from self.a2.named_parameters(prefix + "a2.")


@dataclass
class GaussianParams:
    mu: Tensor
    log_sigma: Tensor

    @classmethod
    def clamped(cls, mu: Tensor, raw_log_sigma: Tensor) -> "GaussianParams":
        return cls(mu, T.clip(raw_log_sigma, LOG_SIGMA_MIN, LOG_SIGMA_MAX))

    @classmethod
    def standard(cls, shape) -> "GaussianParams":
        return cls(Tensor(np.zeros(shape)), Tensor(np.zeros(shape)))

    def sample(self, rng) -> Tensor:
        return T.gaussian_sample(self.mu, self.log_sigma, rng)

    def detach(self) -> "GaussianParams":
        return GaussianParams(self.mu.detach(), self.log_sigma.detach())


def kl_gaussian(q: GaussianParams, p: GaussianParams, axis=None) -> Tensor:
    """Closed-form KL(q || p) between diagonal Gaussians, summed over ``axis``."""
    if q.mu.shape != p.mu.shape:
        raise T.ShapeError(f"KL shapes differ: {q.mu.shape} vs {p.mu.shape}")
    var_ratio = T.exp(2.0 * (q.log_sigma - p.log_sigma))
    mean_term = T.square(q.mu - p.mu) * T.exp(-2.0 * p.log_sigma)
    kl = (p.log_sigma - q.log_sigma) + 0.5 * (var_ratio + mean_term) - 0.5
    return kl.sum(axis=axis)


def gaussian_nll(z, p: GaussianParams, axis=None) -> Tensor:
    """``-log N(z; mu, sigma)`` summed over ``axis``."""
    r = (z - p.mu) * T.exp(-p.log_sigma)
    return (0.5 * T.square(r) + p.log_sigma + HALF_LOG_2PI).sum(axis=axis)


# ---------------------------------------------------------------------------
# the hierarchy


@dataclass
class Context:
    """Running decoder state ``h_hat`` of one scale, shape (B, positions, C)."""

    scale: int
    state: Tensor

    @property
    def batch(self) -> int:
        return self.state.shape[0]


@dataclass
class LayerSpec:
    index: int
    scale: int
    side: int
    prior_hidden: Affine
    prior_mu: Affine
    prior_logsig: Affine
    post_ctx: Affine
    post_feat: Tensor
    post_mu: Affine
    post_logsig: Affine
    contrib_in: Affine
    contrib_z: Tensor
    contrib_out: Affine

    @property
    def latent_shape(self) -> tuple[int, int]:
        return (self.side * self.side, 1)

    def named_parameters(self):
        p = f"layer{self.index}."
        for name in ("prior_hidden", "prior_mu", "prior_logsig", "post_ctx",
                     "post_mu", "post_logsig", "contrib_in", "contrib_out"):
            yield from getattr(self, name).named_parameters(p + name + ".")
        yield p + "post_feat", self.post_feat
        yield p + "contrib_z", self.contrib_z


class Hierarchy:
    def __init__(self, config: ModelConfig):
        self.config = config
        self.partition: ScalePartition = partition(config.resolution)
        self.n_scales = self.partition.n_scales
        if config.layers_per_scale < 1:
            raise ValueError("layers_per_scale must be >= 1")
        if not config.obs_sigma > 0:
            raise ValueError("obs_sigma must be > 0")
        C, Ci = config.channels, config.inner
        rng = Rng(config.seed, stream=0x5EED)
        head_gain = 0.0 if config.zero_init else 0.5
        block_gain = 1.0 / math.sqrt(config.blocks_per_scale * self.n_scales)

        self.stem = Affine(1, C, rng)
        self.enc_blocks = [[ResBlock(C, Ci, rng, block_gain) for _ in range(config.blocks_per_scale)]
                           for _ in range(self.n_scales)]
        self.up_blocks = [None] + [ResBlock(C, Ci, rng, block_gain) for _ in range(1, self.n_scales)]

        self.layers: list[LayerSpec] = []
        self.scale_layers: list[list[int]] = []
        for k in range(self.n_scales):
            ids = []
            for _ in range(config.layers_per_scale):
                idx = len(self.layers)
                self.layers.append(LayerSpec(
                    index=idx, scale=k, side=2**k,
                    prior_hidden=Affine(C, Ci, rng),
                    prior_mu=Affine(Ci, 1, rng, gain=head_gain),
                    prior_logsig=Affine(Ci, 1, rng, gain=head_gain),
                    post_ctx=Affine(C, Ci, rng),
                    post_feat=Tensor(rng.normal((C, Ci)) / math.sqrt(C), requires_grad=True),
                    post_mu=Affine(Ci, 1, rng, gain=head_gain),
                    post_logsig=Affine(Ci, 1, rng, gain=head_gain),
                    contrib_in=Affine(C, Ci, rng),
                    contrib_z=Tensor(rng.normal((1, Ci)), requires_grad=True),
                    contrib_out=Affine(Ci, C, rng, gain=head_gain * block_gain),
                ))
                ids.append(idx)
            self.scale_layers.append(ids)

        hc = config.head_channels
        self.head_blocks = [[ResBlock(C, Ci, rng, block_gain) for _ in range(config.blocks_per_scale)]
                            for _ in range(self.n_scales)]
        self.head_proj = [Affine(C, hc, rng) for _ in range(self.n_scales)]
        self.head_dense = [Affine(4**k * hc, self.partition.dof(k), rng) for k in range(self.n_scales)]
        self.out_scale = math.sqrt(self.partition.height * self.partition.width)

        self.counters: Counter = Counter()
        self.order_log: list | None = None

    # -- bookkeeping ------------------------------------------------------
    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def layers_in_scale(self, k: int) -> list[int]:
        return self.scale_layers[k]

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}

        def put(items):
            for name, t in items:
                out[name] = t

        put(self.stem.named_parameters("stem."))
        for k in range(self.n_scales):
            for i, b in enumerate(self.enc_blocks[k]):
                put(b.named_parameters(f"enc{k}.{i}."))
            if self.up_blocks[k] is not None:
                put(self.up_blocks[k].named_parameters(f"up{k}."))
            for i, b in enumerate(self.head_blocks[k]):
                put(b.named_parameters(f"head{k}.{i}."))
            put(self.head_proj[k].named_parameters(f"head{k}.proj."))
            put(self.head_dense[k].named_parameters(f"head{k}.dense."))
        for layer in self.layers:
            put(layer.named_parameters())
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def requires_grad_(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag

    @contextmanager
    def frozen(self):
        """Parameters stop requiring gradients for the duration."""
        params = self.parameters()
        prev = [p.requires_grad for p in params]
        for p in params:
            p.requires_grad = False
        try:
            yield self
        finally:
            for p, f in zip(params, prev):
                p.requires_grad = f

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"parameter mismatch: missing {sorted(missing)[:3]}, unexpected {sorted(extra)[:3]}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise T.ShapeError(f"{name}: checkpoint shape {arr.shape} vs model {p.shape}")
            p.data = arr.copy()

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    # -- encoder ----------------------------------------------------------
    def bottom_up(self, x) -> list[Tensor]:
        """Per-scale features, index ``k`` has shape (B, 4**k, C)."""
        x = T.as_tensor(x)
        res = self.config.resolution
        if x.ndim == 2:
            x = x.reshape(1, res, res)
        if x.shape[-2:] != (res, res):
            raise T.ShapeError(f"input {x.shape} does not match model resolution {res}")
        batch = x.shape[0]
        h = self.stem(x.reshape(batch, res * res, 1))
        feats: list[Tensor] = [None] * self.n_scales
        for k in range(self.n_scales - 1, -1, -1):
            if k < self.n_scales - 1:
                h = _avgpool(h, 2 ** (k + 1))
            for block in self.enc_blocks[k]:
                h = block(h)
            feats[k] = h
        return feats

    # -- decoder ----------------------------------------------------------
    def initial_context(self, batch: int) -> Context:
        return Context(0, Tensor(np.zeros((batch, 1, self.config.channels))))

    def lift(self, ctx: Context, k: int) -> Context:
        """Bring a context up to scale ``k`` (nearest upsample + residual block per step)."""
        if ctx.scale > k:
            raise ValueError(f"cannot lower context from scale {ctx.scale} to {k}")
        while ctx.scale < k:
            s = ctx.scale + 1
            self.counters["lift"] += 1
            ctx = Context(s, self.up_blocks[s](_upsample(ctx.state, 2 ** (s - 1))))
        return ctx

    def prior_params(self, l: int, ctx: Context) -> GaussianParams:
        layer = self.layers[l]
        ctx = self.lift(ctx, layer.scale)
        if self.order_log is not None:
            self.order_log.append(("prior", l))
        h = T.swish(layer.prior_hidden(ctx.state))
        return GaussianParams.clamped(layer.prior_mu(h), layer.prior_logsig(h))

    def posterior_params(self, l: int, ctx: Context, feat: Tensor) -> GaussianParams:
        layer = self.layers[l]
        ctx = self.lift(ctx, layer.scale)
        if self.order_log is not None:
            self.order_log.append(("posterior", l))
        h = T.swish(layer.post_ctx(ctx.state) + feat @ layer.post_feat)
        return GaussianParams.clamped(layer.post_mu(h), layer.post_logsig(h))

    def contribute(self, l: int, ctx: Context, z) -> Context:
        """Residual update of the context with latent ``z_l`` of shape (B, P, 1)."""
        layer = self.layers[l]
        ctx = self.lift(ctx, layer.scale)
        z = T.as_tensor(z)
        want = (ctx.batch,) + layer.latent_shape
        if z.shape != want:
            raise T.ShapeError(f"latent for layer {l} has shape {z.shape}, expected {want}")
        self.counters["contribute"] += 1
        h = T.swish(layer.contrib_in(ctx.state) + z * layer.contrib_z)
        return Context(ctx.scale, ctx.state + layer.contrib_out(h))

    def reconstruct_scale(self, k: int, ctx: Context) -> Tensor:
        """Dof vector (B, dof_k) of scale ``k`` from that scale's context."""
        ctx = self.lift(ctx, k)
        self.counters["head"] += 1
        h = ctx.state
        for block in self.head_blocks[k]:
            h = block(h)
        h = self.head_proj[k](h)
        h = h.reshape(ctx.batch, -1)
        return self.head_dense[k](h) * self.out_scale

    def synthesize(self, dofs: list) -> Tensor:
        return synthesize(dofs, self.partition)

    def analyze(self, x) -> list[Tensor]:
        return analyze(x, self.partition)

    def decode(self, latents: list, batch: int | None = None) -> tuple[list[Tensor], Tensor]:
        """Deterministic decoder pass for a full latent set."""
        batch = batch or T.as_tensor(latents[0]).shape[0]
        ctx = self.initial_context(batch)
        dofs = []
        for k in range(self.n_scales):
            ctx = self.lift(ctx, k)
            for l in self.scale_layers[k]:
                ctx = self.contribute(l, ctx, latents[l])
            dofs.append(self.reconstruct_scale(k, ctx))
        return dofs, self.synthesize(dofs)

    # -- objective ----------------------------------------------------------
    def negative_elbo(self, x, rng) -> tuple[Tensor, dict]:
        """Per-image ``-ELBO`` in nats, shape (B,), and diagnostics.

        Likelihood is an isotropic Gaussian on pixels with fixed scale
        ``obs_sigma``, so the reconstruction term is a weighted squared error
        plus a constant.
        """
        x = T.as_tensor(x)
        if x.ndim == 2:
            x = x.reshape(1, *x.shape)
        batch = x.shape[0]
        feats = self.bottom_up(x)
        ctx = self.initial_context(batch)
        kls, dofs, latents = [], [], []
        for k in range(self.n_scales):
            ctx = self.lift(ctx, k)
            for l in self.scale_layers[k]:
                p = self.prior_params(l, ctx)
                q = self.posterior_params(l, ctx, feats[k])
                z = q.sample(rng)
                kls.append(kl_gaussian(q, p, axis=(1, 2)))
                latents.append(z.data)
                ctx = self.contribute(l, ctx, z)
            dofs.append(self.reconstruct_scale(k, ctx))
        x_hat = self.synthesize(dofs)
        n_pix = x.shape[-1] * x.shape[-2]
        sq = T.square(x_hat - x).sum(axis=(1, 2))
        sig = self.config.obs_sigma
        recon = (0.5 / sig**2) * sq + n_pix * (HALF_LOG_2PI + math.log(sig))
        total_kl = kls[0]
        for kl in kls[1:]:
            total_kl = total_kl + kl
        neg = recon + total_kl
        diag = {
            "recon": recon.data.copy(),
            "mse": sq.data / n_pix,
            "kl": np.stack([kl.data for kl in kls], axis=1),
            "x_hat": x_hat.data,
            "latents": latents,
        }
        return neg, diag

    def elbo(self, x, rng) -> tuple[float, dict]:
        """Batch-mean ELBO in nats and per-layer diagnostics (no gradients)."""
        with T.no_grad():
            neg, diag = self.negative_elbo(x, rng)
        n_pix = self.config.resolution**2
        diag["kl_per_layer"] = diag["kl"].mean(axis=0)
        diag["nll_nats_per_dim"] = float(neg.data.mean() / n_pix)
        return -float(neg.data.mean()), diag

    def loss(self, x, rng) -> tuple[Tensor, dict]:
        """Training loss: batch-mean ``-ELBO`` per pixel."""
        neg, diag = self.negative_elbo(x, rng)
        n_pix = self.config.resolution**2
        return neg.mean() * (1.0 / n_pix), diag


def active_units(kl_per_layer: np.ndarray, threshold: float = 0.01) -> np.ndarray:
    """Layers whose average KL exceeds ``threshold`` nats."""
    return np.asarray(kl_per_layer) > threshold


def _avgpool(h: Tensor, side: int) -> Tensor:
    """2x2 average pooling of (B, side*side, C) to (B, side*side/4, C)."""
    b, _, c = h.shape
    half = side // 2
    return h.reshape(b, half, 2, half, 2, c).mean(axis=(2, 4)).reshape(b, half * half, c)


def _upsample(h: Tensor, side: int) -> Tensor:
    """Nearest-neighbour 2x upsampling of (B, side*side, C)."""
    b, _, c = h.shape
    g = h.reshape(b, side, 1, side, 1, c)
    g = T.broadcast_to(g, (b, side, 2, side, 2, c))
    return g.reshape(b, 4 * side * side, c)


def build_model(**overrides) -> Hierarchy:
    return Hierarchy(ModelConfig(**overrides))
