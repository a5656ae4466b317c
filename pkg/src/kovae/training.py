"""Training loop, checkpoints and the (alpha, beta) sweep."""
from __future__ import annotations

import copy
import csv
import json
import logging
import os
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError, ExperimentConfig
from .data import (PendulumParams, SeriesBatch, drop_observations, generate_pendulum, generate_sines,
                   load_csv_dataset, normalize)
from .model import (KoVAE, LossWeights, ModelConfig, NonFiniteLossError, forward_loss, model_inputs,
                    set_normalization)
from .ncde import NCDEConfig, build_path

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
METRIC_COLUMNS = ("step", "recon", "pred", "kl", "eig", "total")


class DivergenceError(RuntimeError):
    def __init__(self, step: int, terms: dict):
        self.step = step
        self.terms = terms
        super().__init__(f"training diverged at step {step}: {terms}")


def stream_seed(seed: int, name: str) -> int:
    """Independent 63-bit seed for the named RNG stream."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(name.encode())])
    return int(ss.generate_state(2, dtype=np.uint64)[0] >> np.uint64(1))


@dataclass
class Dataset:
    """Full regular data (evaluation reference) and the training view."""

    real: SeriesBatch  # normalized, fully observed
    train: SeriesBatch  # normalized, possibly irregular


def data_dir() -> Path:
    return Path(os.environ.get("KOVAE_DATA_DIR", "data"))


def resolve_csv(path: str) -> Path:
    p = Path(path)
    if p.is_file():
        return p
    q = data_dir() / path
    if q.is_file():
        return q
    raise ConfigError(f"CSV dataset not found: {path} (also looked in {data_dir()})")


def load_raw(cfg: ExperimentConfig) -> SeriesBatch:
    seed = cfg.resolved_data_seed
    if cfg.dataset == "sines":
        return generate_sines(cfg.n_samples, cfg.seq_len, cfg.n_features, seed=seed, dt=cfg.sines_dt)
    if cfg.dataset == "pendulum":
        params = PendulumParams(noise_scale=cfg.pendulum_noise)
        return generate_pendulum(cfg.n_samples, params, seed=seed)
    batch = load_csv_dataset(resolve_csv(cfg.csv_path), cfg.n_features, cfg.seq_len, seed=seed)
    if batch.n > cfg.n_samples:
        batch = batch.subset(np.arange(cfg.n_samples))
    return batch


def build_dataset(cfg: ExperimentConfig) -> Dataset:
    raw = load_raw(cfg)
    observed = drop_observations(raw, cfg.drop_rate, seed=cfg.resolved_data_seed) if cfg.drop_rate > 0 else raw
    train = normalize(observed)
    real = normalize(raw, reference=train)
    return Dataset(real=real, train=train)


def model_config(cfg: ExperimentConfig, input_dim: int) -> ModelConfig:
    return ModelConfig(
        input_dim=input_dim, latent_dim=cfg.latent_dim, enc_hidden=cfg.enc_hidden, dec_hidden=cfg.dec_hidden,
        prior_hidden=cfg.prior_hidden, enc_layers=cfg.enc_layers, dec_layers=cfg.dec_layers, mode=cfg.mode,
        ncde=NCDEConfig(cfg.ncde_hidden, cfg.ncde_width, cfg.ncde_depth, cfg.ncde_steps),
    )


def loss_weights(cfg: ExperimentConfig) -> LossWeights:
    return LossWeights(cfg.alpha, cfg.beta, cfg.gamma_eig, tuple(cfg.eig_targets))


def init_model(cfg: ExperimentConfig, input_dim: int) -> KoVAE:
    with torch.random.fork_rng():
        torch.manual_seed(stream_seed(cfg.seed, "init"))
        return KoVAE(model_config(cfg, input_dim))


def _optimizer(cfg: ExperimentConfig, params):
    if cfg.optimizer == "adamw":
        return torch.optim.AdamW(params, lr=cfg.lr)
    return torch.optim.Adam(params, lr=cfg.lr)


def save_checkpoint(path, model: KoVAE, cfg: ExperimentConfig, step: int, optimizer=None,
                    rng_state: dict | None = None) -> None:
    payload = {
        "schema_version": SCHEMA_VERSION,
        "config": cfg.to_dict(),
        "model_config": asdict(model.cfg),
        "state_dict": model.state_dict(),
        "normalization": {"norm_lo": model.norm_lo.tolist(), "norm_hi": model.norm_hi.tolist()},
        "rng_state": rng_state or {},
        "step": int(step),
    }
    if optimizer is not None:
        payload["optimizer"] = optimizer.state_dict()
    tmp = Path(str(path) + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path):
    """Returns (model, config, payload)."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("schema_version", 0)
    if version > SCHEMA_VERSION:
        raise ValueError(f"checkpoint schema {version} is newer than supported {SCHEMA_VERSION}")
    cfg = ExperimentConfig.from_dict(payload["config"])
    model = KoVAE(ModelConfig(**payload["model_config"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, cfg, payload


@dataclass
class TrainResult:
    model: KoVAE
    config: ExperimentConfig
    dataset: Dataset
    history: list[dict] = field(default_factory=list)
    checkpoint: Path | None = None


def _finite_params(model) -> bool:
    return all(bool(torch.isfinite(p).all()) for p in model.parameters())


@torch.enable_grad()
def train(cfg: ExperimentConfig, out_dir=None, dataset: Dataset | None = None, progress: bool = False) -> TrainResult:
    """Minimize the total loss with minibatch Adam.

    Writes ``metrics.csv`` (one row per step, first line is the resolved
    config as a ``#`` comment), periodic ``checkpoint_<step>.pt`` and a final
    ``checkpoint.pt`` when ``out_dir`` is given. A non-finite loss rolls back
    the previous update and retries once at a tenth of the learning rate;
    a second failure raises DivergenceError.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    dataset = dataset or build_dataset(cfg)
    data = dataset.train
    model = init_model(cfg, data.d)
    set_normalization(model, data)
    model.train()
    weights = loss_weights(cfg)
    opt = _optimizer(cfg, model.parameters())

    inputs_all = model_inputs(data, model)
    path_all = inputs_all.path
    if path_all is not None:
        path_all.solver_derivatives(data.t_len, cfg.ncde_steps)  # warm the grid cache once

    order_rng = np.random.default_rng(stream_seed(cfg.seed, "batches"))
    sample_gen = torch.Generator().manual_seed(stream_seed(cfg.seed, "sampling"))
    bs = min(cfg.batch_size, data.n)

    def next_batch():
        idx = order_rng.choice(data.n, size=bs, replace=False)
        sub = type(inputs_all)(inputs_all.x[idx], inputs_all.mask[idx], path_all[idx] if path_all is not None else None)
        return sub

    metrics_fh = writer = None
    if out is not None:
        metrics_fh = open(out / "metrics.csv", "w", newline="")
        metrics_fh.write("# config: " + cfg.to_json() + "\n")
        writer = csv.writer(metrics_fh)
        writer.writerow(METRIC_COLUMNS)

    def step_once(inputs, lr_scale=1.0):
        for g in opt.param_groups:
            g["lr"] = cfg.lr * lr_scale
        breakdown, *_ = forward_loss(model, inputs, weights, sample_gen)
        opt.zero_grad(set_to_none=True)
        breakdown.total.backward()
        if cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        opt.step()
        return breakdown

    history: list[dict] = []
    prev_state = None
    try:
        for step in range(cfg.steps):
            inputs = next_batch()
            snapshot = (copy.deepcopy(model.state_dict()), copy.deepcopy(opt.state_dict()))
            try:
                breakdown = step_once(inputs)
                if not _finite_params(model):
                    raise NonFiniteLossError({"params": float("nan")})
            except NonFiniteLossError as err:
                restore = prev_state or snapshot
                model.load_state_dict(restore[0])
                opt.load_state_dict(restore[1])
                log.warning("step %d: %s; retrying at lr/10", step, err)
                try:
                    breakdown = step_once(inputs, lr_scale=0.1)
                    if not _finite_params(model):
                        raise NonFiniteLossError({"params": float("nan")})
                except NonFiniteLossError as err2:
                    raise DivergenceError(step, err2.terms) from None
            prev_state = snapshot
            row = {"step": step, **breakdown.as_floats()}
            history.append(row)
            if writer is not None:
                writer.writerow([row[c] for c in METRIC_COLUMNS])
            if progress and (step % 200 == 0 or step == cfg.steps - 1):
                log.info("step %d %s", step, " ".join(f"{k}={v:.5g}" for k, v in row.items() if k != "step"))
            if out is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0 and step + 1 < cfg.steps:
                save_checkpoint(out / f"checkpoint_{step + 1}.pt", model, cfg, step + 1, opt,
                                {"sampling": sample_gen.get_state().tolist()})
    finally:
        if metrics_fh is not None:
            metrics_fh.close()

    model.eval()
    ckpt = None
    if out is not None:
        ckpt = out / "checkpoint.pt"
        save_checkpoint(ckpt, model, cfg, cfg.steps, opt, {"sampling": sample_gen.get_state().tolist()})
    return TrainResult(model=model, config=cfg, dataset=dataset, history=history, checkpoint=ckpt)


def read_metrics(path) -> tuple[dict, list[dict]]:
    """Parse a metrics log back into (config dict, rows)."""
    with open(path) as fh:
        first = fh.readline()
        cfg = json.loads(first[len("# config: "):]) if first.startswith("# config: ") else {}
        rows = [{k: float(v) for k, v in r.items()} for r in csv.DictReader(fh)]
    return cfg, rows


def _sweep_cell(args):
    cfg_dict, alpha, beta, cell_dir = args
    from .evaluation import discriminative_score
    from .model import generate

    try:
        cfg = ExperimentConfig.from_dict(cfg_dict).replace(alpha=alpha, beta=beta, out_dir=str(cell_dir))
        res = train(cfg, cell_dir)
        real = res.dataset.real
        fake = generate(res.model, real.n, real.t_len, seed=stream_seed(cfg.seed, "generate"), normalized=True)
        mean, std, _ = discriminative_score(real, fake, seed=cfg.seed, runs=cfg.eval_runs, steps=cfg.eval_steps)
        return {"alpha": alpha, "beta": beta, "discriminative": mean, "discriminative_std": std, "error": ""}
    except Exception as e:  # noqa: BLE001 - a failed cell must not abort the sweep
        return {"alpha": alpha, "beta": beta, "discriminative": float("nan"), "discriminative_std": float("nan"),
                "error": f"{type(e).__name__}: {e}"}


def sweep(cfg: ExperimentConfig, alpha_grid, beta_grid, out_dir, workers: int = 1) -> list[dict]:
    """Train and score one model per (alpha, beta) cell; writes sweep.csv and sweep.png."""
    alpha_grid, beta_grid = list(alpha_grid), list(beta_grid)
    if not alpha_grid or not beta_grid:
        raise ValueError("sweep grids must be non-empty")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(cfg.to_dict(), a, b, out / f"cell_a{a:g}_b{b:g}") for a in alpha_grid for b in beta_grid]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            rows = list(ex.map(_sweep_cell, jobs))
    else:
        rows = [_sweep_cell(j) for j in jobs]
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["alpha", "beta", "discriminative", "discriminative_std", "error"])
        w.writeheader()
        w.writerows(rows)
    plot_sweep(rows, out / "sweep.png")
    return rows


def plot_sweep(rows: list[dict], path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ok = [r for r in rows if np.isfinite(r["discriminative"])]
    fig, ax = plt.subplots(figsize=(5, 4))
    if ok:
        sc = ax.scatter([r["alpha"] for r in ok], [r["beta"] for r in ok], c=[r["discriminative"] for r in ok],
                        cmap="viridis", s=40)
        fig.colorbar(sc, ax=ax, label="discriminative score")
        best = min(ok, key=lambda r: r["discriminative"])
        ax.scatter([best["alpha"]], [best["beta"]], marker="*", s=200, color="red")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("alpha")
    ax.set_ylabel("beta")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
