"""Command-line entry point: train | infer | bench | inverse | decompose.

Settings come from built-in defaults, then an optional ``--config`` file of
``key=value`` lines (``#`` starts a comment), then command-line flags.  The
effective settings are written to ``<out>/config.lock``.

Exit codes: 0 success, 2 configuration error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import tensor as T
from .experiments import (bench_depth, cutoff_from_side, deblur, denoise, evaluate, write_bench_csv,
                          write_quality_csv, QualityRow)
from .inference import InferenceConfig, InferenceError, infer
from .model import Hierarchy, ModelConfig
from .serialization import FormatError, load_checkpoint, load_raw, read_pgm, save_raw, write_pgm
from .spectral import SpectralError, decompose, log_magnitude, partition, recompose
from .training import DatasetSpec, TrainConfig, TrainingDiverged, generate_synthetic, train


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    t = str(text).lower()
    if t not in ("true", "false", "1", "0", "yes", "no"):
        raise ValueError(f"not a boolean: {text!r}")
    return t in ("true", "1", "yes")


def _int_list(text: str) -> list[int]:
    return [int(t) for t in str(text).replace(" ", "").split(",") if t]


COMMON = {"seed": (int, 0), "out": (str, "runs/out")}
DATA = {"dataset": (str, "gp-texture"), "data_seed": (int, 0), "train_count": (int, 256)}
COMMANDS: dict[str, dict[str, tuple]] = {
    "train": {**COMMON, **DATA,
              "resolution": (int, 16), "layers_per_scale": (int, 2), "width_factor": (float, 0.25),
              "obs_sigma": (float, 0.1), "epochs": (int, 20), "batch_size": (int, 16),
              "lr": (float, 3e-4), "clip_norm": (float, 1.0), "checkpoint": (str, "")},
    "infer": {**COMMON, **DATA,
              "checkpoint": (str, ""), "input": (str, ""), "count": (int, 8), "mode": (str, "hybrid"),
              "N": (int, 25), "lam": (float, 1e-3), "beta": (float, 1.0), "loss": (str, "l1"),
              "cutoff": (int, 0)},
    "bench": {**COMMON, "depths": (_int_list, "6,12,18,24,30"), "N": (int, 25), "resolution": (int, 32),
              "batch": (int, 1), "repeats": (int, 5), "warmup": (int, 2)},
    "inverse": {**COMMON, **DATA,
                "checkpoint": (str, ""), "input": (str, ""), "count": (int, 64), "task": (str, "denoise"),
                "cutoff": (int, 8), "sigma": (float, 1.0), "N": (int, 25), "lam": (float, 1e-3),
                "beta": (float, 1.0), "dump": (int, 4)},
    "decompose": {**COMMON, "input": (str, "")},
}


def read_config_file(path) -> dict[str, str]:
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key=value, got {raw!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = v
    return out


def resolve(command: str, file_values: dict[str, str], flags: dict[str, str | None]) -> dict:
    table = COMMANDS[command]
    unknown = sorted(set(file_values) - set(table))
    if unknown:
        raise ConfigError(f"unknown config key(s) for {command}: {', '.join(unknown)}")
    merged = {k: d for k, (_, d) in table.items()}
    merged.update(file_values)
    merged.update({k: v for k, v in flags.items() if v is not None})
    out = {}
    for k, (conv, _) in table.items():
        try:
            out[k] = conv(merged[k]) if isinstance(merged[k], str) or conv is not str else merged[k]
        except ValueError as exc:
            raise ConfigError(f"bad value for {k}: {merged[k]!r} ({exc})") from exc
    return out


def write_lock(command: str, cfg: dict, out: Path) -> None:
    lines = [f"command={command}"]
    for k in sorted(cfg):
        v = cfg[k]
        lines.append(f"{k}={','.join(map(str, v)) if isinstance(v, list) else v}")
    (out / "config.lock").write_text("\n".join(lines) + "\n")


def _threads_env(default: int | None):
    raw = os.environ.get("IAHVAE_THREADS", "")
    n = int(raw) if raw.strip() else default
    if n is None:
        return nullcontext()
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return nullcontext()
    return threadpool_limits(limits=max(1, n))


# ---------------------------------------------------------------------------
# commands


def _load_model(cfg) -> tuple[Hierarchy, dict]:
    if not cfg["checkpoint"]:
        raise ConfigError("checkpoint is required")
    if not Path(cfg["checkpoint"]).exists():
        raise ConfigError(f"checkpoint not found: {cfg['checkpoint']}")
    model, ckpt = load_checkpoint(cfg["checkpoint"])
    return model, ckpt.header


def _load_images(cfg, model: Hierarchy, header: dict) -> np.ndarray:
    res = model.config.resolution
    if cfg["input"]:
        p = Path(cfg["input"])
        x = read_pgm(p) if p.suffix.lower() == ".pgm" else load_raw(p)
        x = x.reshape((-1,) + x.shape[-2:])
        if x.shape[-2:] != (res, res):
            raise ConfigError(f"input images are {x.shape[-2:]}, model expects {(res, res)}")
        return x
    spec = DatasetSpec(kind=header.get("data.dataset", cfg["dataset"]), resolution=res,
                       count=int(header.get("data.train_count", cfg["train_count"])),
                       test_count=cfg["count"], seed=int(header.get("data.data_seed", cfg["data_seed"])))
    return generate_synthetic(spec).test


def cmd_train(cfg, out: Path) -> int:
    mcfg = ModelConfig(resolution=cfg["resolution"], layers_per_scale=cfg["layers_per_scale"],
                       width_factor=cfg["width_factor"], obs_sigma=cfg["obs_sigma"], seed=cfg["seed"])
    tcfg = TrainConfig(epochs=cfg["epochs"], batch_size=cfg["batch_size"], lr=cfg["lr"],
                       clip_norm=cfg["clip_norm"], seed=cfg["seed"], width_factor=cfg["width_factor"])
    spec = DatasetSpec(kind=cfg["dataset"], resolution=cfg["resolution"], count=cfg["train_count"],
                       seed=cfg["data_seed"])
    data = generate_synthetic(spec)
    model = Hierarchy(mcfg)
    ckpt = Path(cfg["checkpoint"] or out / "model.iahk")
    res = train(model, data.train, tcfg, checkpoint_path=None,
                on_epoch=lambda e, l: print(f"epoch {e + 1} loss {l:.6f}", flush=True))
    from .serialization import save_checkpoint
    from .rng import Rng
    extra = dict(line.split("=", 1) for line in tcfg.to_lines())
    extra.update({"data.dataset": spec.kind, "data.train_count": spec.count, "data.data_seed": spec.seed,
                  "data.mean": repr(data.mean), "data.std": repr(data.std)})
    save_checkpoint(model, ckpt, step=res.steps, rng_state=Rng(tcfg.seed, tcfg.epochs).get_state(), extra=extra)
    with open(out / "loss_curve.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss"])
        for i, l in enumerate(res.epoch_losses, 1):
            w.writerow([i, repr(l)])
    with open(out / "kl_per_layer.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["layer", "kl_nats"])
        for i, v in enumerate(res.kl_per_layer):
            w.writerow([i, repr(float(v))])
    print(f"wrote {ckpt}")
    return 0


def cmd_infer(cfg, out: Path) -> int:
    model, header = _load_model(cfg)
    x = _load_images(cfg, model, header)
    cutoff = cutoff_from_side(cfg["cutoff"], model.config.resolution) if cfg["cutoff"] else None
    try:
        icfg = InferenceConfig(mode=cfg["mode"], n_iter=cfg["N"], step_size=cfg["lam"], beta=cfg["beta"],
                               loss=cfg["loss"], cutoff_scale=cutoff)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    res = infer(model, x, icfg, seed=cfg["seed"])
    res.trace.write_csv(out / "trace.csv")
    save_raw(res.x_hat, out / "reconstruction.iaht")
    for i, img in enumerate(res.x_hat):
        write_pgm(img, out / f"recon_{i:03d}.pgm")
    mse = float(((res.x_hat - x) ** 2).mean())
    nll = float((res.prior_nll() / model.config.resolution**2).mean())
    write_quality_csv([QualityRow(model.n_layers, cfg["mode"], icfg.n_iter, mse, nll, res.elapsed / len(x))],
                      out / "metrics.csv")
    print(f"mode={cfg['mode']} N={icfg.n_iter} mse={mse:.6f} nll_nats_per_dim={nll:.6f}")
    return 0


def cmd_bench(cfg, out: Path) -> int:
    results = bench_depth(cfg["depths"], n_iter=cfg["N"], resolution=cfg["resolution"], batch=cfg["batch"],
                          repeats=cfg["repeats"], warmup=cfg["warmup"], seed=cfg["seed"])
    write_bench_csv(results, out / "bench.csv")
    for r in results:
        print(f"L={r.depth} amortized={r.amortized_s:.4f}s subset={r.subset_s:.4f}s "
              f"vanilla={r.vanilla_s:.4f}s ratio={r.ratio:.2f}")
    return 0


def cmd_inverse(cfg, out: Path) -> int:
    model, header = _load_model(cfg)
    x = _load_images(cfg, model, header)
    rows = []
    if cfg["task"] == "deblur":
        cutoff = cutoff_from_side(cfg["cutoff"], model.config.resolution)
        r = deblur(model, x, cutoff, n_iter=cfg["N"], seed=cfg["seed"], step_size=cfg["lam"], beta=cfg["beta"])
        rows = [["deblur", "hybrid", r.hybrid_l1.mean(), ((r.hybrid - x) ** 2).mean()],
                ["deblur", "amortized", r.amortized_l1.mean(), ((r.amortized - x) ** 2).mean()]]
        dumps = {"observed": r.observed, "hybrid": r.hybrid, "amortized": r.amortized, "clean": x}
        for name, spec in r.spectra.items():
            for i in range(min(cfg["dump"], len(x))):
                write_pgm(spec[i], out / f"kspace_{name}_{i:03d}.pgm")
    elif cfg["task"] == "denoise":
        r = denoise(model, x, sigma=cfg["sigma"], n_iter=cfg["N"], seed=cfg["seed"], step_size=cfg["lam"],
                    beta=cfg["beta"])
        rows = [["denoise", "hybrid", float("nan"), r.hybrid_mse], ["denoise", "amortized", float("nan"),
                r.amortized_mse], ["denoise", "noisy-input", float("nan"), r.input_mse]]
        dumps = {"noisy": r.noisy, "hybrid": r.hybrid, "amortized": r.amortized, "clean": x}
    else:
        raise ConfigError(f"task must be deblur or denoise, got {cfg['task']!r}")
    for name, imgs in dumps.items():
        for i in range(min(cfg["dump"], len(x))):
            write_pgm(imgs[i], out / f"{name}_{i:03d}.pgm")
    with open(out / "inverse.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["task", "method", "observation_l1", "mse_to_clean"])
        for row in rows:
            w.writerow(row[:2] + [repr(float(v)) for v in row[2:]])
    for row in rows:
        print(" ".join(str(v) for v in row))
    return 0


def cmd_decompose(cfg, out: Path) -> int:
    if not cfg["input"]:
        raise ConfigError("input is required")
    p = Path(cfg["input"])
    if not p.exists():
        raise ConfigError(f"input not found: {p}")
    x = read_pgm(p) if p.suffix.lower() == ".pgm" else load_raw(p)
    if x.ndim != 2 or x.shape[0] != x.shape[1]:
        raise ConfigError(f"decompose needs one square image, got shape {x.shape}")
    part = partition(x.shape[0])
    spectra = decompose(x, part)
    for s in spectra:
        band = recompose([t if t.scale == s.scale else type(t)(t.scale, np.zeros_like(t.coeffs)) for t in spectra],
                         part)
        side = 2**s.scale
        save_raw(np.stack([s.coeffs.real, s.coeffs.imag]), out / f"scale_{side}x{side}.iaht")
        write_pgm(band, out / f"band_{side}x{side}.pgm")
        print(f"scale {s.scale} ({side}x{side}): {part.count(s.scale)} bins, energy {np.sum(np.abs(s.coeffs)**2):.6g}")
    write_pgm(log_magnitude(x), out / "log_magnitude.pgm")
    return 0


HANDLERS = {"train": cmd_train, "infer": cmd_infer, "bench": cmd_bench, "inverse": cmd_inverse,
            "decompose": cmd_decompose}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="iahvae", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, table in COMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="key=value config file")
        for key in table:
            p.add_argument(f"--{key}", dest=key, default=None)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    command = args.command
    flags = {k: getattr(args, k) for k in COMMANDS[command]}
    try:
        file_values = read_config_file(args.config) if args.config else {}
        cfg = resolve(command, file_values, flags)
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        write_lock(command, cfg, out)
        with _threads_env(1 if command == "bench" else None):
            return HANDLERS[command](cfg, out)
    except (ConfigError, FormatError, SpectralError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (TrainingDiverged, T.NonFiniteError, InferenceError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
