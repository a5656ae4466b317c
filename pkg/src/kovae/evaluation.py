"""Post-hoc generative quality metrics and diagnostic plots.

Scores follow the usual time-series generation protocol: a recurrent
classifier separating real from synthetic sequences (discriminative score
``|0.5 - accuracy|``) and a recurrent one-step predictor trained on
synthetic data and tested on real data (predictive score, MAE).
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .data import SeriesBatch, op_rng


@dataclass
class MetricCapacity:
    """Fixed metric-model capacity so scores stay comparable across runs."""

    layers: int = 2
    steps: int = 2000
    batch_size: int = 128
    lr: float = 1e-3
    version: str = "gru2-v1"

    @staticmethod
    def hidden(d: int, t_len: int) -> int:
        return max(1, max(d, t_len) // 2)


@dataclass
class EvalReport:
    discriminative: float
    discriminative_std: float
    predictive: float
    predictive_std: float
    original_predictive: float
    original_predictive_std: float
    runs: int
    plots: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        (out / "report.json").write_text(self.to_json())
        with open(out / "scores.csv", "w") as fh:
            fh.write("metric,mean,std\n")
            fh.write(f"discriminative,{self.discriminative:.6f},{self.discriminative_std:.6f}\n")
            fh.write(f"predictive,{self.predictive:.6f},{self.predictive_std:.6f}\n")
            fh.write(f"original_predictive,{self.original_predictive:.6f},{self.original_predictive_std:.6f}\n")


def _values(batch) -> np.ndarray:
    return batch.values if isinstance(batch, SeriesBatch) else np.asarray(batch)


class _Classifier(nn.Module):
    def __init__(self, d, hidden, layers):
        super().__init__()
        self.rnn = nn.GRU(d, hidden, num_layers=layers, batch_first=True)
        self.head = nn.Linear(hidden, 1)

    def forward(self, x):
        _, h = self.rnn(x)
        return self.head(h[-1]).squeeze(-1)


class _Predictor(nn.Module):
    def __init__(self, d, hidden, layers):
        super().__init__()
        self.rnn = nn.GRU(d, hidden, num_layers=layers, batch_first=True)
        self.head = nn.Linear(hidden, d)

    def forward(self, x):
        h, _ = self.rnn(x)
        return torch.sigmoid(self.head(h))


def _check_pair(real, fake):
    r, f = _values(real), _values(fake)
    if r.shape != f.shape:
        raise ValueError(f"real {r.shape} and fake {f.shape} must have equal N, T, d")
    return r, f


def discriminative_run(real: np.ndarray, fake: np.ndarray, seed: int, cap: MetricCapacity) -> float:
    n, t, d = real.shape
    rng = op_rng(seed, "discriminative")
    with torch.random.fork_rng():
        torch.manual_seed(int(rng.integers(2**31)))
        model = _Classifier(d, cap.hidden(d, t), cap.layers)
    split = {}
    for name, arr in (("real", real), ("fake", fake)):
        perm = rng.permutation(n)
        cut = int(0.8 * n)
        split[name] = (arr[perm[:cut]], arr[perm[cut:]])
    x_tr = torch.as_tensor(np.concatenate([split["real"][0], split["fake"][0]]), dtype=torch.float32)
    y_tr = torch.cat([torch.ones(len(split["real"][0])), torch.zeros(len(split["fake"][0]))])
    x_te = torch.as_tensor(np.concatenate([split["real"][1], split["fake"][1]]), dtype=torch.float32)
    y_te = torch.cat([torch.ones(len(split["real"][1])), torch.zeros(len(split["fake"][1]))])
    opt = torch.optim.Adam(model.parameters(), lr=cap.lr)
    bs = min(cap.batch_size, len(x_tr))
    lossf = nn.BCEWithLogitsLoss()
    for _ in range(cap.steps):
        idx = torch.as_tensor(rng.choice(len(x_tr), size=bs, replace=False))
        loss = lossf(model(x_tr[idx]), y_tr[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
    with torch.no_grad():
        acc = float(((model(x_te) > 0).float() == y_te).float().mean())
    return abs(0.5 - acc)


def discriminative_score(real, fake, seed: int = 0, runs: int = 3, steps: int | None = None,
                         cap: MetricCapacity | None = None):
    """Mean and std of ``|0.5 - held-out accuracy|`` over ``runs`` classifiers.

    Returns (mean, std, per-run scores).
    """
    r, f = _check_pair(real, fake)
    if r.shape[0] < 20:
        raise ValueError("discriminative score needs at least 20 sequences per side")
    cap = cap or MetricCapacity()
    if steps is not None:
        cap = MetricCapacity(cap.layers, steps, cap.batch_size, cap.lr, cap.version)
    scores = [discriminative_run(r, f, seed * 1000 + i, cap) for i in range(runs)]
    return float(np.mean(scores)), float(np.std(scores)), scores


def predictive_run(real: np.ndarray, fake: np.ndarray, seed: int, cap: MetricCapacity) -> float:
    n, t, d = fake.shape
    rng = op_rng(seed, "predictive")
    with torch.random.fork_rng():
        torch.manual_seed(int(rng.integers(2**31)))
        model = _Predictor(d, cap.hidden(d, t), cap.layers)
    x_tr = torch.as_tensor(fake, dtype=torch.float32)
    opt = torch.optim.Adam(model.parameters(), lr=cap.lr)
    bs = min(cap.batch_size, n)
    for _ in range(cap.steps):
        idx = torch.as_tensor(rng.choice(n, size=bs, replace=False))
        xb = x_tr[idx]
        loss = (model(xb[:, :-1]) - xb[:, 1:]).abs().mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
    with torch.no_grad():
        xr = torch.as_tensor(real, dtype=torch.float32)
        return float((model(xr[:, :-1]) - xr[:, 1:]).abs().mean())


def predictive_score(real, fake, seed: int = 0, runs: int = 3, steps: int | None = None,
                     cap: MetricCapacity | None = None):
    """Train-on-synthetic, test-on-real next-step MAE. Returns (mean, std, per-run)."""
    r = _values(real)
    f = _values(fake)
    if r.shape[1:] != f.shape[1:]:
        raise ValueError("real and fake must share T and d")
    if r.shape[1] < 3:
        raise ValueError("predictive score needs T >= 3")
    cap = cap or MetricCapacity()
    if steps is not None:
        cap = MetricCapacity(cap.layers, steps, cap.batch_size, cap.lr, cap.version)
    scores = [predictive_run(r, f, seed * 1000 + i, cap) for i in range(runs)]
    return float(np.mean(scores)), float(np.std(scores)), scores


def evaluate(real: SeriesBatch, fake: SeriesBatch, seed: int = 0, runs: int = 3, steps: int | None = None,
             out_dir=None, plots: bool = True) -> EvalReport:
    """Discriminative, predictive and real-data predictive baseline scores."""
    d_mean, d_std, d_all = discriminative_score(real, fake, seed, runs, steps)
    p_mean, p_std, p_all = predictive_score(real, fake, seed, runs, steps)
    o_mean, o_std, _ = predictive_score(real, real, seed, runs, steps)
    report = EvalReport(d_mean, d_std, p_mean, p_std, o_mean, o_std, runs,
                        extra={"discriminative_runs": d_all, "predictive_runs": p_all})
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        if plots and real.n >= 100:
            q = qualitative_report(real, fake, out, seed=seed)
            report.plots = {"tsne": q["tsne"], "kde": q["kde"]}
            report.extra["kde_l1"] = q["kde_l1"]
        report.write(out)
    return report


# qualitative diagnostics

def feature_mean_sequences(batch, limit: int | None = None, seed: int = 0) -> np.ndarray:
    v = _values(batch)
    if limit is not None and v.shape[0] > limit:
        v = v[op_rng(seed, "subsample").choice(v.shape[0], size=limit, replace=False)]
    return v.mean(axis=2)


def scott_bandwidth(values: np.ndarray) -> float:
    values = np.asarray(values, dtype=np.float64).ravel()
    sd = values.std(ddof=1)
    return float(sd * values.size ** (-1.0 / 5.0)) if sd > 0 else 1e-3


def kde_curve(values: np.ndarray, grid: np.ndarray, bandwidth: float, chunk: int = 4096) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64).ravel()
    dens = np.zeros_like(grid)
    for i in range(0, values.size, chunk):
        u = (grid[:, None] - values[None, i:i + chunk]) / bandwidth
        dens += np.exp(-0.5 * u * u).sum(axis=1)
    return dens / (values.size * bandwidth * np.sqrt(2 * np.pi))


def kde_compare(real, fake, n_grid: int = 512, limit: int = 1000, seed: int = 0) -> dict:
    """Gaussian KDE of feature-averaged values with a shared Scott bandwidth;
    returns grid, both curves and their L1 distance."""
    r = feature_mean_sequences(real, limit, seed).ravel()
    f = feature_mean_sequences(fake, limit, seed).ravel()
    pooled = np.concatenate([r, f])
    h = scott_bandwidth(pooled)
    grid = np.linspace(pooled.min() - 4 * h, pooled.max() + 4 * h, n_grid)
    pr, pf = kde_curve(r, grid, h), kde_curve(f, grid, h)
    return {"grid": grid, "real": pr, "fake": pf, "bandwidth": h, "l1": float(np.trapezoid(np.abs(pr - pf), grid))}


def qualitative_report(real, fake, out_dir, seed: int = 0, limit: int = 1000, perplexity: float = 30.0) -> dict:
    """t-SNE scatter and KDE curves (real vs synthetic) written as PNG files."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from sklearn.manifold import TSNE

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    r = feature_mean_sequences(real, limit, seed)
    f = feature_mean_sequences(fake, limit, seed + 1)
    emb = TSNE(n_components=2, perplexity=min(perplexity, (len(r) + len(f) - 1) / 3), random_state=seed,
               init="pca").fit_transform(np.concatenate([r, f]))
    fig, ax = plt.subplots(figsize=(4.5, 4))
    ax.scatter(emb[: len(r), 0], emb[: len(r), 1], s=4, alpha=0.5, c="tab:red", label="real")
    ax.scatter(emb[len(r):, 0], emb[len(r):, 1], s=4, alpha=0.5, c="tab:blue", label="synthetic")
    ax.legend(markerscale=3)
    ax.set_xticks([])
    ax.set_yticks([])
    fig.tight_layout()
    tsne_path = out / "tsne.png"
    fig.savefig(tsne_path, dpi=120)
    plt.close(fig)

    kde = kde_compare(real, fake, limit=limit, seed=seed)
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    ax.plot(kde["grid"], kde["real"], color="tab:red", label="real")
    ax.plot(kde["grid"], kde["fake"], color="tab:blue", label="synthetic")
    ax.set_xlabel("value")
    ax.set_ylabel("density")
    ax.legend()
    fig.tight_layout()
    kde_path = out / "kde.png"
    fig.savefig(kde_path, dpi=120)
    plt.close(fig)
    return {"tsne": str(tsne_path), "kde": str(kde_path), "kde_l1": kde["l1"], "embedding": emb}


def reconstruction_report(model, batch: SeriesBatch, out_dir=None, truth: SeriesBatch | None = None,
                          n_features: int = 5, index: int = 0) -> dict:
    """Decode the mean posterior and compare with the data.

    ``batch`` is the normalized model input (possibly irregular); ``truth``
    optionally holds the fully observed normalized values so inferred
    (masked-out) steps can be scored too. MSE is in normalized units.
    """
    from .data import denormalize_values
    from .model import reconstruct

    recon = reconstruct(model, batch)
    target = truth.values if truth is not None else batch.values
    sq = (recon - target) ** 2
    observed = batch.mask[..., None].repeat(batch.d, axis=2)
    table = {
        "mse_per_feature": sq.mean(axis=(0, 1)).tolist(),
        "mse": float(sq.mean()),
        "mse_observed": float(sq[observed].mean()),
    }
    if truth is not None and (~observed).any():
        table["mse_masked"] = float(sq[~observed].mean())
    result = {"table": table, "reconstruction": recon}
    if out_dir is not None:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        lo, hi = batch.norm_lo, batch.norm_hi
        x_true = denormalize_values(target[index], lo, hi)
        x_rec = denormalize_values(recon[index], lo, hi)
        nf = min(n_features, batch.d)
        fig, axes = plt.subplots(1, nf, figsize=(3 * nf, 2.5), squeeze=False)
        ts = batch.timestamps[index]
        for j in range(nf):
            ax = axes[0, j]
            ax.plot(ts, x_true[:, j], "-", color="tab:blue")
            ax.plot(ts, x_rec[:, j], "--", color="tab:orange")
            obs = batch.mask[index]
            if not obs.all():
                ax.plot(ts[obs], x_true[obs, j], ".", color="tab:blue", ms=4)
        fig.tight_layout()
        plot_path = out / "reconstruction.png"
        fig.savefig(plot_path, dpi=120)
        plt.close(fig)
        with open(out / "reconstruction.json", "w") as fh:
            json.dump(table, fh, indent=2)
        result["plot"] = str(plot_path)
    return result
