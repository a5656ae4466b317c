"""Linear latent transition operator: least-squares fit, rollout and spectrum."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import torch

RIDGE = 1e-6
EIG_GAP_TOL = 1e-6
MARGINAL_TOL = 0.05


class KoopmanOperator:
    """k x k transition matrix with a lazily cached eigendecomposition.

    Eigenpairs are sorted by eigenvalue modulus, largest first.
    """

    def __init__(self, A: torch.Tensor):
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValueError(f"operator must be square, got {tuple(A.shape)}")
        self.A = A

    @property
    def k(self) -> int:
        return self.A.shape[0]

    @cached_property
    def _eig(self):
        vals, vecs = torch.linalg.eig(self.A.to(torch.float64))
        order = torch.argsort(vals.abs(), descending=True)
        return vals[order], vecs[:, order]

    @property
    def eigenvalues(self) -> torch.Tensor:
        return self._eig[0]

    @property
    def eigenvectors(self) -> torch.Tensor:
        return self._eig[1]

    def detach(self) -> "KoopmanOperator":
        return KoopmanOperator(self.A.detach())


def fit_operator(z_prev: torch.Tensor, z_next: torch.Tensor, ridge: float = RIDGE) -> KoopmanOperator:
    """Ridge least-squares A with A @ z_prev ~= z_next; inputs are [k, M].

    Solved in float64 via the normal equations
    ``A = z_next z_prev^T (z_prev z_prev^T + ridge I)^-1`` and returned in
    the input dtype. Differentiable in both arguments.
    """
    if z_prev.ndim != 2 or z_prev.shape != z_next.shape:
        raise ValueError(f"snapshot matrices must both be [k, M], got {tuple(z_prev.shape)} and {tuple(z_next.shape)}")
    dtype = z_prev.dtype
    x0 = z_prev.to(torch.float64)
    x1 = z_next.to(torch.float64)
    k = x0.shape[0]
    gram = x0 @ x0.T + ridge * torch.eye(k, dtype=torch.float64, device=x0.device)
    # gram is symmetric: A^T = gram^-1 (x0 x1^T)
    A = torch.linalg.solve(gram, x0 @ x1.T).T
    return KoopmanOperator(A.to(dtype))


def fit_from_sequences(z_bar: torch.Tensor, ridge: float = RIDGE) -> KoopmanOperator:
    """Pool all transitions of ``z_bar`` [N, T+1, k] into one operator."""
    k = z_bar.shape[-1]
    z_prev = z_bar[:, :-1].reshape(-1, k).T
    z_next = z_bar[:, 1:].reshape(-1, k).T
    return fit_operator(z_prev, z_next, ridge)


def rollout(op: KoopmanOperator, z_bar: torch.Tensor) -> torch.Tensor:
    """One-step predictions ``A z_bar[:, t-1]`` for t = 1..T.

    ``z_bar`` is [N, T+1, k] with the initial state at index 0; returns [N, T, k].
    """
    if z_bar.shape[-1] != op.k:
        raise ValueError(f"latent width {z_bar.shape[-1]} does not match operator size {op.k}")
    return z_bar[:, :-1] @ op.A.T


@dataclass
class EigTargets:
    c: tuple[float, ...]

    def __post_init__(self):
        self.c = tuple(float(v) for v in self.c)
        if any(v < 0 for v in self.c):
            raise ValueError("eigenvalue modulus targets must be >= 0")


def _min_gap(vals: torch.Tensor) -> float:
    if vals.numel() < 2:
        return math.inf
    diff = (vals[:, None] - vals[None, :]).abs()
    eye = torch.eye(len(vals), dtype=torch.bool, device=diff.device)
    return float(diff.masked_fill(eye, math.inf).min())


def eig_penalty(op: KoopmanOperator, targets: EigTargets) -> torch.Tensor:
    """Sum of squared gaps between the r largest eigenvalue moduli and targets.

    When two eigenvalues nearly coincide the eigen-derivative blows up, so
    the penalty is returned detached (zero gradient) for that step.
    """
    r = len(targets.c)
    if r > op.k:
        raise ValueError(f"{r} targets for a {op.k}x{op.k} operator")
    if r == 0:
        return op.A.new_zeros(())
    vals = op.eigenvalues
    moduli = vals[:r].abs()
    c = torch.tensor(targets.c, dtype=moduli.dtype, device=moduli.device)
    pen = ((moduli - c) ** 2).sum().to(op.A.dtype)
    if _min_gap(vals.detach()) < EIG_GAP_TOL:
        pen = pen.detach()
    return pen


def classify(modulus: float, tol: float = MARGINAL_TOL) -> str:
    if modulus < 1.0 - tol:
        return "decaying"
    if modulus > 1.0 + tol:
        return "unstable"
    return "marginal"


def spectral_report(op: KoopmanOperator, tol: float = MARGINAL_TOL) -> list[dict]:
    """Rows of modulus, phase and stability class, largest modulus first."""
    vals = op.eigenvalues.detach().cpu().numpy()
    return [
        {"real": float(v.real), "imag": float(v.imag), "modulus": float(abs(v)),
         "phase": float(np.angle(v)), "class": classify(abs(v), tol)}
        for v in vals
    ]


def write_spectrum_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["modulus", "phase", "class", "real", "imag"])
        for r in rows:
            w.writerow([f"{r['modulus']:.8g}", f"{r['phase']:.8g}", r["class"], f"{r['real']:.8g}", f"{r['imag']:.8g}"])


def plot_spectrum(rows: list[dict], path, title: str | None = None) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    colors = {"decaying": "tab:green", "marginal": "tab:purple", "unstable": "tab:red"}
    fig, ax = plt.subplots(figsize=(4, 4))
    theta = np.linspace(0, 2 * np.pi, 400)
    ax.plot(np.cos(theta), np.sin(theta), color="0.6", lw=1)
    for cls, color in colors.items():
        pts = [(r["real"], r["imag"]) for r in rows if r["class"] == cls]
        if pts:
            xs, ys = zip(*pts)
            ax.scatter(xs, ys, color=color, label=cls, zorder=3)
    lim = max(1.2, max((r["modulus"] for r in rows), default=1.0) * 1.1)
    ax.set_xlim(-lim, lim)
    ax.set_ylim(-lim, lim)
    ax.set_aspect("equal")
    ax.axhline(0, color="0.85", lw=0.5)
    ax.axvline(0, color="0.85", lw=0.5)
    ax.legend(loc="upper right", fontsize=8)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
