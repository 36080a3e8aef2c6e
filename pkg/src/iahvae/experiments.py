"""Depth-scaling benchmark, inference-quality table and inverse problems."""
from __future__ import annotations

import csv
import math
import os
import statistics
import time
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .inference import (InferenceConfig, context_before, infer, reconstruction_loss, refine_layer,
                        vanilla_grad)
from .model import Hierarchy, ModelConfig
from .rng import Rng, RngStreams
from .spectral import log_magnitude, partition, scale_dofs

QUALITY_HEADER = ["depth", "mode", "N", "mse", "nll_nats_per_dim", "time_s"]
BENCH_HEADER = ["depth", "layers_per_scale", "N", "amortized_s", "subset_s", "vanilla_s", "ratio",
                "subset_evals", "vanilla_evals", "threads"]
_NOISE_STREAM_OFFSET = 1 << 44


@contextmanager
def single_thread():
    """Pin BLAS pools to one thread for the duration (no-op without threadpoolctl)."""
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        yield 1
        return
    with threadpool_limits(limits=1):
        yield 1


def _median_time(fn, repeats: int, warmup: int) -> float:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


# ---------------------------------------------------------------------------
# depth benchmark


@dataclass
class BenchResult:
    depth: int
    layers_per_scale: int
    n_iter: int
    amortized_s: float
    subset_s: float
    vanilla_s: float
    subset_evals: int
    vanilla_evals: int
    threads: int = 1

    @property
    def ratio(self) -> float:
        return self.vanilla_s / self.subset_s

    def row(self) -> list:
        return [self.depth, self.layers_per_scale, self.n_iter, f"{self.amortized_s:.6e}",
                f"{self.subset_s:.6e}", f"{self.vanilla_s:.6e}", f"{self.ratio:.4f}",
                self.subset_evals, self.vanilla_evals, self.threads]


def refinement_sweep(model: Hierarchy, x: np.ndarray, latents: list[np.ndarray], n_iter: int,
                     method: str = "subset", step_size: float = 1e-3, beta: float = 1.0,
                     loss: str = "l1") -> tuple[list[np.ndarray], int]:
    """Refine every layer top-down for ``n_iter`` steps from the given latents.

    ``method="subset"`` differentiates through the layer's scale subset only;
    ``method="vanilla"`` differentiates the image-domain loss through every
    later layer and head.  Returns the refined latents and the number of
    contribution passes made inside gradient evaluations.
    """
    if method not in ("subset", "vanilla"):
        raise ValueError(f"unknown method {method!r}")
    lat = [np.array(z, copy=True) for z in latents]
    targets = scale_dofs(x, model.partition)
    cfg = InferenceConfig(mode="hybrid", n_iter=n_iter, step_size=step_size, beta=beta, loss=loss)
    evals = 0
    with model.frozen():
        for l in range(model.n_layers):
            k = model.layers[l].scale
            state = context_before(model, lat, l)
            ctx = state[0]
            with T.no_grad():
                prior = model.prior_params(l, ctx)
            before = model.counters["contribute"]
            if method == "subset":
                rest = [(m, lat[m]) for m in model.scale_layers[k] if m > l]
                for _ in range(n_iter):
                    lat[l] = refine_layer(model, l, lat[l], ctx, prior, targets[k], rest, cfg)[0]
            else:
                mu, ls = prior.mu.data, prior.log_sigma.data
                for _ in range(n_iter):
                    g = vanilla_grad(model, l, lat, targets, loss=loss, beta=beta, restrict=False, state=state)
                    g = g + (lat[l] - mu) * np.exp(-2.0 * ls)
                    lat[l] = lat[l] - step_size * g
            evals += model.counters["contribute"] - before
    return lat, evals


def bench_model(depth: int, resolution: int = 32, seed: int = 0) -> Hierarchy:
    n_scales = partition(resolution).n_scales
    if depth % n_scales:
        raise ValueError(f"depth {depth} is not a multiple of the {n_scales} scales at {resolution}x{resolution}")
    return Hierarchy(ModelConfig(resolution=resolution, layers_per_scale=depth // n_scales,
                                 zero_init=False, seed=seed))


def bench_depth(depths, n_iter: int = 25, resolution: int = 32, batch: int = 1, repeats: int = 5,
                warmup: int = 2, seed: int = 0) -> list[BenchResult]:
    """Time amortized, subset-refined and vanilla-refined inference per depth."""
    if repeats < 5 or warmup < 2:
        raise ValueError("timing protocol needs repeats >= 5 and warmup >= 2")
    out = []
    x = Rng(seed, 0).normal((batch, resolution, resolution))
    with single_thread() as threads:
        for depth in depths:
            model = bench_model(depth, resolution, seed)
            base = infer(model, x, InferenceConfig(mode="amortized"), seed=seed)
            t_amort = _median_time(lambda: infer(model, x, InferenceConfig(mode="amortized"), seed=seed),
                                   repeats, warmup)
            t_sub = _median_time(lambda: refinement_sweep(model, x, base.latents, n_iter, "subset"),
                                 repeats, warmup)
            t_van = _median_time(lambda: refinement_sweep(model, x, base.latents, n_iter, "vanilla"),
                                 repeats, warmup)
            sub_evals = refinement_sweep(model, x, base.latents, 1, "subset")[1]
            van_evals = refinement_sweep(model, x, base.latents, 1, "vanilla")[1]
            out.append(BenchResult(depth, model.config.layers_per_scale, n_iter, t_amort, t_sub, t_van,
                                   sub_evals, van_evals, threads))
    return out


def expected_evals(n_layers: int, per_scale: list[int]) -> tuple[int, int]:
    """Closed-form contribution passes for one sweep: (vanilla, subset)."""
    return n_layers * (n_layers + 1) // 2, sum(m * (m + 1) // 2 for m in per_scale)


def write_bench_csv(results: list[BenchResult], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(BENCH_HEADER)
        for r in results:
            w.writerow(r.row())


# ---------------------------------------------------------------------------
# quality table


@dataclass
class QualityRow:
    depth: int
    mode: str
    n_iter: int
    mse: float
    nll_nats_per_dim: float
    time_s: float
    joint_nll_nats_per_dim: float = float("nan")

    def row(self) -> list:
        return [self.depth, self.mode, self.n_iter, repr(self.mse), repr(self.nll_nats_per_dim), f"{self.time_s:.6e}"]


def latent_nll_per_dim(model: Hierarchy, result) -> np.ndarray:
    """Per-image ``-log p(z)`` of the inferred latents divided by the pixel count."""
    return result.prior_nll() / model.config.resolution**2


def joint_nll_per_dim(model: Hierarchy, x: np.ndarray, result) -> np.ndarray:
    """Per-image ``-log p(x | z) - log p(z)`` divided by the pixel count."""
    sig = model.config.obs_sigma
    n_pix = model.config.resolution**2
    sq = ((result.x_hat - x) ** 2).sum(axis=(1, 2))
    rec = 0.5 * sq / sig**2 + n_pix * (0.5 * math.log(2 * math.pi) + math.log(sig))
    return (rec + result.prior_nll()) / n_pix


def evaluate(model: Hierarchy, x: np.ndarray, config: InferenceConfig, seed: int = 0,
             chunk: int = 64, observed: np.ndarray | None = None):
    """Run inference in chunks with per-image streams; returns stacked arrays."""
    x = np.asarray(x, dtype=np.float64)
    obs = x if observed is None else observed
    x_hat, lat_nll, joint, elapsed = [], [], [], 0.0
    for s in range(0, len(x), chunk):
        res = infer(model, obs[s:s + chunk], config, seed, streams=range(s, min(s + chunk, len(x))))
        elapsed += res.elapsed
        x_hat.append(res.x_hat)
        lat_nll.append(latent_nll_per_dim(model, res))
        joint.append(joint_nll_per_dim(model, obs[s:s + chunk], res))
    return np.concatenate(x_hat), np.concatenate(lat_nll), np.concatenate(joint), elapsed / len(x)


def quality_table(model: Hierarchy, images, ns=(5, 10, 20, 25, 50), seed: int = 0,
                  modes=("amortized", "iterative", "hybrid"), step_size: float = 1e-3,
                  beta: float = 1.0, loss: str = "l1", chunk: int = 64) -> list[QualityRow]:
    """MSE, latent NLL per dim and time per image for each inference mode."""
    images = np.asarray(images, dtype=np.float64)
    rows = []
    for mode in modes:
        for n in ([0] if mode == "amortized" else list(ns)):
            cfg = InferenceConfig(mode=mode, n_iter=n, step_size=step_size, beta=beta, loss=loss)
            x_hat, nll, joint, t = evaluate(model, images, cfg, seed, chunk)
            mse = float(((x_hat - images) ** 2).mean())
            rows.append(QualityRow(model.n_layers, mode, n, mse, float(nll.mean()), t, float(joint.mean())))
    return rows


def write_quality_csv(rows: list[QualityRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(QUALITY_HEADER)
        for r in rows:
            w.writerow(r.row())


# ---------------------------------------------------------------------------
# inverse problems

OBSERVATION_KINDS = ("full", "frequency-mask", "additive-noise")


@dataclass
class ObservationSpec:
    kind: str = "full"
    cutoff_scale: int | None = None
    sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in OBSERVATION_KINDS:
            raise ValueError(f"observation kind must be one of {OBSERVATION_KINDS}")
        if self.kind == "frequency-mask" and self.cutoff_scale is None:
            raise ValueError("frequency-mask observation needs cutoff_scale")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")

    def observe(self, x: np.ndarray, streams=None) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if self.kind == "full":
            return x.copy()
        if self.kind == "frequency-mask":
            part = partition(x.shape[-1])
            if not 0 <= self.cutoff_scale < part.n_scales:
                raise ValueError(f"cutoff scale {self.cutoff_scale} outside 0..{part.n_scales - 1}")
            dofs = scale_dofs(x, part)
            kept = [d if k <= self.cutoff_scale else np.zeros_like(d) for k, d in enumerate(dofs)]
            from .spectral import dofs_to_image
            return dofs_to_image(kept, part)
        streams = range(len(x)) if streams is None else streams
        noise = RngStreams(self.seed, [_NOISE_STREAM_OFFSET + s for s in streams]).normal(x.shape)
        return x + self.sigma * noise


def cutoff_from_side(side: int, resolution: int) -> int:
    """Scale index whose grid has ``side`` positions per axis."""
    if side < 1 or side & (side - 1) or side > resolution:
        raise ValueError(f"cutoff {side} must be a power of two no larger than {resolution}")
    return int(round(math.log2(side)))


def observation_l1(model: Hierarchy, x_hat: np.ndarray, observed: np.ndarray, cutoff: int) -> np.ndarray:
    """Per-image relative L1 between measured bins of ``x_hat`` and the observation."""
    a = scale_dofs(x_hat, model.partition)
    b = scale_dofs(observed, model.partition)
    num = sum(np.abs(a[k] - b[k]).sum(axis=-1) for k in range(cutoff + 1))
    den = sum(np.abs(b[k]).sum(axis=-1) for k in range(cutoff + 1))
    return num / np.maximum(den, 1e-300)


@dataclass
class DeblurResult:
    cutoff_scale: int
    observed: np.ndarray
    hybrid: np.ndarray
    amortized: np.ndarray
    hybrid_l1: np.ndarray
    amortized_l1: np.ndarray
    spectra: dict[str, np.ndarray] = field(default_factory=dict)


def deblur(model: Hierarchy, x, cutoff_scale: int, n_iter: int = 25, seed: int = 0,
           step_size: float = 1e-3, beta: float = 1.0, chunk: int = 64) -> DeblurResult:
    """Guided inference on measured low-frequency scales, prior sampling above."""
    x = np.asarray(x, dtype=np.float64)
    if not 0 <= cutoff_scale < model.n_scales:
        raise ValueError(f"cutoff scale {cutoff_scale} outside 0..{model.n_scales - 1}")
    obs = ObservationSpec("frequency-mask", cutoff_scale=cutoff_scale).observe(x)
    hyb_cfg = InferenceConfig(mode="hybrid", n_iter=n_iter, step_size=step_size, beta=beta,
                              cutoff_scale=cutoff_scale)
    am_cfg = InferenceConfig(mode="amortized", cutoff_scale=cutoff_scale)
    hyb = evaluate(model, obs, hyb_cfg, seed, chunk)[0]
    am = evaluate(model, obs, am_cfg, seed, chunk)[0]
    spectra = {"observed": log_magnitude(obs), "hybrid": log_magnitude(hyb), "amortized": log_magnitude(am),
               "clean": log_magnitude(x)}
    return DeblurResult(cutoff_scale, obs, hyb, am, observation_l1(model, hyb, obs, cutoff_scale),
                        observation_l1(model, am, obs, cutoff_scale), spectra)


@dataclass
class DenoiseResult:
    sigma: float
    noisy: np.ndarray
    hybrid: np.ndarray
    amortized: np.ndarray
    hybrid_mse: float
    amortized_mse: float
    input_mse: float


def denoise(model: Hierarchy, x_clean, sigma: float = 1.0, n_iter: int = 25, seed: int = 0,
            step_size: float = 1e-3, beta: float = 1.0, chunk: int = 64) -> DenoiseResult:
    """Guided inference toward a noisy observation, scored against the clean image."""
    x = np.asarray(x_clean, dtype=np.float64)
    noisy = ObservationSpec("additive-noise", sigma=sigma, seed=seed).observe(x)
    hyb = evaluate(model, noisy, InferenceConfig(mode="hybrid", n_iter=n_iter, step_size=step_size, beta=beta),
                   seed, chunk)[0]
    am = evaluate(model, noisy, InferenceConfig(mode="amortized"), seed, chunk)[0]
    mse = lambda a: float(((a - x) ** 2).mean())  # noqa: E731
    return DenoiseResult(sigma, noisy, hyb, am, mse(hyb), mse(am), mse(noisy))


def thread_count() -> int:
    return int(os.environ.get("IAHVAE_THREADS", "0") or 0)
