"""Amortized, iterative and hybrid posterior inference.

Hybrid inference walks the hierarchy top-down.  Each layer takes one
amortized sample from the posterior, then ``N`` gradient steps on

    J(z_l) = -log N(z_l; mu_p, sigma_p) + beta * L(h^s, h_hat^s)

where ``h_hat^s`` is produced by finishing only the layers of the current
scale and its reconstruction head.  Iterative inference is the same loop
started from a prior sample.  :func:`vanilla_grad` is the full-decoder
gradient used as the baseline: it runs every layer after ``l`` and every
head, synthesizes the image and differentiates an image-domain loss.
"""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .model import Context, GaussianParams, Hierarchy, gaussian_nll
from .rng import RngStreams
from .spectral import scale_dofs
from .tensor import Tensor

MODES = ("amortized", "iterative", "hybrid")
LOSSES = ("l1", "l2")


class InferenceError(RuntimeError):
    pass


@dataclass
class InferenceConfig:
    mode: str = "hybrid"
    n_iter: int | None = None
    step_size: float = 1e-3
    beta: float = 1.0
    loss: str = "l1"
    cutoff_scale: int | None = None
    layer_beta: dict[int, float] = field(default_factory=dict)
    layer_n_iter: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.n_iter is None:
            self.n_iter = 0 if self.mode == "amortized" else 25
        if self.mode == "amortized" and (self.n_iter or any(self.layer_n_iter.values())):
            raise ValueError("amortized inference takes no refinement steps (N must be 0)")
        if self.n_iter < 0 or any(n < 0 for n in self.layer_n_iter.values()):
            raise ValueError("N must be >= 0")
        if not self.step_size > 0:
            raise ValueError("step size must be > 0")
        if self.beta < 0 or any(b < 0 for b in self.layer_beta.values()):
            raise ValueError("beta must be >= 0")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}, got {self.loss!r}")

    def steps_for(self, layer: int) -> int:
        return self.layer_n_iter.get(layer, self.n_iter)

    def beta_for(self, layer: int) -> float:
        return self.layer_beta.get(layer, self.beta)


@dataclass
class TraceEntry:
    layer: int
    scale: int
    iteration: int
    objective: np.ndarray
    prior_nll: np.ndarray
    recon: np.ndarray
    time_s: float


@dataclass
class InferenceTrace:
    entries: list[TraceEntry] = field(default_factory=list)
    dofs: list[np.ndarray] = field(default_factory=list)
    image: np.ndarray | None = None

    def for_layer(self, layer: int) -> list[TraceEntry]:
        return [e for e in self.entries if e.layer == layer]

    def objectives(self, layer: int) -> np.ndarray:
        """(N, B) objective values of one layer."""
        return np.array([e.objective for e in self.for_layer(layer)])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["layer", "scale", "iteration", "objective", "prior_nll", "recon_loss", "time_s"])
            for e in self.entries:
                w.writerow([e.layer, e.scale, e.iteration, repr(float(e.objective.mean())),
                            repr(float(e.prior_nll.mean())), repr(float(e.recon.mean())), f"{e.time_s:.6e}"])


@dataclass
class InferenceResult:
    x_hat: np.ndarray
    latents: list[np.ndarray]
    dofs: list[np.ndarray]
    trace: InferenceTrace
    priors: list[tuple[np.ndarray, np.ndarray]]
    elapsed: float = 0.0

    def prior_nll(self) -> np.ndarray:
        """Per-image ``-log p(z)`` summed over all latents."""
        total = 0.0
        for z, (mu, ls) in zip(self.latents, self.priors):
            r = (z - mu) * np.exp(-ls)
            total = total + (0.5 * r * r + ls + 0.5 * np.log(2 * np.pi)).sum(axis=(1, 2))
        return total


# ---------------------------------------------------------------------------
# objective pieces


def reconstruction_loss(predicted, target, kind: str = "l1") -> Tensor:
    """Per-image loss over a scale's dof vector (real and imaginary parts)."""
    diff = T.as_tensor(predicted) - T.as_tensor(target)
    if kind == "l1":
        return T.abs_(diff).sum(axis=-1)
    if kind == "l2":
        return T.square(diff).sum(axis=-1)
    raise ValueError(f"unknown loss {kind!r}")


def refinement_objective(z, prior: GaussianParams, target, predicted, beta: float, loss: str = "l1"):
    """Per-image ``J``, prior NLL and reconstruction loss (all shape (B,))."""
    nll = gaussian_nll(z, prior, axis=(1, 2))
    rec = reconstruction_loss(predicted, target, loss)
    return nll + beta * rec, nll, rec


def complete_scale(model: Hierarchy, l: int, ctx: Context, z_l, placeholders: Sequence[tuple[int, np.ndarray]]) -> Tensor:
    """Scale dof vector after adding ``z_l`` and the rest of its scale subset."""
    c = model.contribute(l, ctx, z_l)
    for m, z_m in placeholders:
        c = model.contribute(m, c, z_m)
    return model.reconstruct_scale(model.layers[l].scale, c)


def refine_layer(model: Hierarchy, l: int, z: np.ndarray, ctx: Context, prior: GaussianParams,
                 target: np.ndarray, placeholders, config: InferenceConfig, step_size: float | None = None):
    """One descent step ``z - lambda * dJ/dz``; returns (new z, J, prior nll, recon)."""
    lam = config.step_size if step_size is None else step_size
    zt = Tensor(z, requires_grad=True)
    pred = complete_scale(model, l, ctx, zt, placeholders)
    J, nll, rec = refinement_objective(zt, prior, target, pred, config.beta_for(l), config.loss)
    T.backward(J.sum())
    g = zt.grad
    if not np.isfinite(g).all():
        raise InferenceError(f"non-finite gradient at layer {l}")
    return z - lam * g, J.data.copy(), nll.data.copy(), rec.data.copy()


def subset_grad(model: Hierarchy, l: int, ctx: Context, z: np.ndarray, placeholders,
                target: np.ndarray, loss: str = "l1", beta: float = 1.0) -> np.ndarray:
    """Gradient of ``beta * L(h^s, h_hat^s)`` w.r.t. ``z_l`` through the scale subset only."""
    zt = Tensor(z, requires_grad=True)
    pred = complete_scale(model, l, ctx, zt, placeholders)
    T.backward((beta * reconstruction_loss(pred, target, loss)).sum())
    return zt.grad


def context_before(model: Hierarchy, latents: Sequence[np.ndarray], l: int):
    """Context entering layer ``l`` and head outputs of all earlier scales (no grad)."""
    s = model.layers[l].scale
    batch = np.asarray(latents[0]).shape[0]
    with T.no_grad():
        ctx = model.initial_context(batch)
        dofs = []
        for k in range(s + 1):
            ctx = model.lift(ctx, k)
            for m in model.scale_layers[k]:
                if m == l:
                    return ctx, dofs
                ctx = model.contribute(m, ctx, latents[m])
            dofs.append(model.reconstruct_scale(k, ctx))
    raise IndexError(l)


def vanilla_grad(model: Hierarchy, l: int, latents: Sequence[np.ndarray], target, loss: str = "l1",
                 beta: float = 1.0, restrict: bool = True, state=None) -> np.ndarray:
    """Full-path gradient w.r.t. ``z_l`` of an image-domain loss.

    Runs layers ``l..L`` and all remaining heads, synthesizes ``x_hat`` and
    measures ``L(B^-1 x_hat, target)``.  ``target`` is an image or a list of
    per-scale dof arrays.  With ``restrict`` the loss covers only the bins of
    layer ``l``'s scale.  ``state`` is an optional ``context_before`` result.
    """
    targets = target if isinstance(target, (list, tuple)) else scale_dofs(np.asarray(target), model.partition)
    ctx, dofs = state if state is not None else context_before(model, latents, l)
    s = model.layers[l].scale
    zt = Tensor(latents[l], requires_grad=True)
    heads = list(dofs)
    c = model.contribute(l, ctx, zt)
    for k in range(s, model.n_scales):
        c = model.lift(c, k)
        for m in model.scale_layers[k]:
            if m > l:
                c = model.contribute(m, c, latents[m])
        heads.append(model.reconstruct_scale(k, c))
    x_hat = model.synthesize(heads)
    pred = model.analyze(x_hat)
    if restrict:
        total = reconstruction_loss(pred[s], targets[s], loss)
    else:
        total = reconstruction_loss(pred[0], targets[0], loss)
        for k in range(1, model.n_scales):
            total = total + reconstruction_loss(pred[k], targets[k], loss)
    T.backward((beta * total).sum())
    return zt.grad


# ---------------------------------------------------------------------------
# the inference sweep


def _placeholders(model: Hierarchy, l: int, ctx: Context, z: np.ndarray, rest: list[int],
                  feat, use_posterior: bool) -> list[tuple[int, np.ndarray]]:
    """Mean latents for the unvisited members of the scale subset (constants)."""
    out = []
    with T.no_grad():
        c = model.contribute(l, ctx, z)
        for m in rest:
            p = model.posterior_params(m, c, feat) if use_posterior else model.prior_params(m, c)
            out.append((m, p.mu.data))
            c = model.contribute(m, c, p.mu)
    return out


def infer(model: Hierarchy, x, config: InferenceConfig, seed: int = 0, streams=None) -> InferenceResult:
    """Top-down inference on a batch ``x`` of shape (B, H, W)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    res = model.config.resolution
    if x.shape[-2:] != (res, res):
        raise InferenceError(f"observation {x.shape[-2:]} does not match model resolution {res}")
    cutoff = model.n_scales - 1 if config.cutoff_scale is None else config.cutoff_scale
    if not 0 <= cutoff < model.n_scales:
        raise InferenceError(f"cutoff scale {cutoff} outside 0..{model.n_scales - 1}")
    batch = x.shape[0]
    rng = RngStreams(seed, range(batch) if streams is None else streams)
    targets = scale_dofs(x, model.partition)
    trace = InferenceTrace()
    latents, priors, dofs = [], [], []
    use_posterior = config.mode != "iterative"

    t0 = time.perf_counter()
    with model.frozen():
        with T.no_grad():
            feats = model.bottom_up(x) if use_posterior else [None] * model.n_scales
            ctx = model.initial_context(batch)
        for k in range(model.n_scales):
            with T.no_grad():
                ctx = model.lift(ctx, k)
            guided = k <= cutoff
            layer_ids = model.scale_layers[k]
            for j, l in enumerate(layer_ids):
                with T.no_grad():
                    prior = model.prior_params(l, ctx)
                    if use_posterior and guided:
                        z = model.posterior_params(l, ctx, feats[k]).sample(rng).data
                    else:
                        z = prior.sample(rng).data
                n_steps = config.steps_for(l) if guided else 0
                if n_steps:
                    rest = _placeholders(model, l, ctx, z, layer_ids[j + 1:], feats[k], use_posterior)
                    for n in range(n_steps):
                        ts = time.perf_counter()
                        z, J, nll, rec = refine_layer(model, l, z, ctx, prior, targets[k], rest, config)
                        trace.entries.append(TraceEntry(l, k, n, J, nll, rec, time.perf_counter() - ts))
                with T.no_grad():
                    ctx = model.contribute(l, ctx, z)
                latents.append(z)
                priors.append((prior.mu.data, prior.log_sigma.data))
            with T.no_grad():
                dofs.append(model.reconstruct_scale(k, ctx).data)
        with T.no_grad():
            x_hat = model.synthesize(dofs).data
    elapsed = time.perf_counter() - t0
    trace.dofs = dofs
    trace.image = x_hat
    return InferenceResult(x_hat, latents, dofs, trace, priors, elapsed)


def amortized_infer(model: Hierarchy, x, seed: int = 0, **kw) -> InferenceResult:
    return infer(model, x, InferenceConfig(mode="amortized", **kw), seed)


def hybrid_infer(model: Hierarchy, x, config: InferenceConfig | None = None, seed: int = 0) -> InferenceResult:
    config = config or InferenceConfig(mode="hybrid")
    if config.mode != "hybrid":
        raise ValueError("hybrid_infer needs mode='hybrid'")
    return infer(model, x, config, seed)


def iterative_infer(model: Hierarchy, x, config: InferenceConfig | None = None, seed: int = 0) -> InferenceResult:
    config = config or InferenceConfig(mode="iterative")
    if config.mode != "iterative":
        raise ValueError("iterative_infer needs mode='iterative'")
    return infer(model, x, config, seed)
