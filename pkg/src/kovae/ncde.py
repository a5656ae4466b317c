"""Neural controlled differential equation embedding.

An irregularly observed sequence is interpolated into a continuous control
path X(s), and a hidden state is driven by ``dh = f(h) dX``; the state read
out on a uniform grid is a regular sequence for the recurrent encoder.

Time is reparametrized per sequence to s in [0, 1] (first to last
observation). The CDE integral is invariant to this reparametrization, so
shifted or rescaled timestamps give the same embedding.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy.interpolate import CubicSpline
from torch import nn

from .data import SeriesBatch


@dataclass
class NCDEConfig:
    hidden_dim: int = 32
    field_width: int = 64
    field_depth: int = 2
    solver_steps_per_interval: int = 4

    def __post_init__(self):
        for name in ("hidden_dim", "field_width", "field_depth", "solver_steps_per_interval"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


class ControlPath:
    """Piecewise-cubic control path per sequence, time appended as a channel.

    ``knots`` [N, K] holds reparametrized observation times (padded with
    +inf past ``n_knots``); ``coeffs`` [N, K-1, 4, C] are power-basis
    coefficients of each segment, highest order first, over local time
    ``s - knots[:, j]``. Channel C-1 is the time channel (X = s).
    """

    def __init__(self, knots: np.ndarray, coeffs: np.ndarray, n_knots: np.ndarray, first: np.ndarray):
        self.knots = knots
        self.coeffs = coeffs
        self.n_knots = n_knots
        self.first = first  # X(0) per sequence, [N, C]
        self._grid_cache: dict = {}

    @property
    def n(self) -> int:
        return self.knots.shape[0]

    @property
    def channels(self) -> int:
        return self.coeffs.shape[-1]

    def __getitem__(self, idx) -> "ControlPath":
        sub = ControlPath(self.knots[idx], self.coeffs[idx], self.n_knots[idx], self.first[idx])
        for key, val in self._grid_cache.items():
            sub._grid_cache[key] = val[idx]
        return sub

    def _locate(self, s: np.ndarray):
        # segment index j with knots[j] <= s, clipped to valid segments
        s = np.asarray(s, dtype=np.float64)
        if s.ndim == 1:
            s = np.broadcast_to(s, (self.n, s.shape[0]))
        j = np.empty(s.shape, dtype=np.int64)
        for i in range(self.n):
            j[i] = np.searchsorted(self.knots[i, : self.n_knots[i]], s[i], side="right") - 1
        j = np.clip(j, 0, (self.n_knots - 2)[:, None])
        local = s - np.take_along_axis(self.knots, j, axis=1)
        c = self.coeffs[np.arange(self.n)[:, None], j]  # [N, P, 4, C]
        return local[..., None], c

    def evaluate(self, s) -> np.ndarray:
        """X(s) at reparametrized times ``s`` ([P] or [N, P]) -> [N, P, C]."""
        u, c = self._locate(s)
        return ((c[..., 0, :] * u + c[..., 1, :]) * u + c[..., 2, :]) * u + c[..., 3, :]

    def derivative(self, s) -> np.ndarray:
        """dX/ds at reparametrized times -> [N, P, C]."""
        u, c = self._locate(s)
        return (3 * c[..., 0, :] * u + 2 * c[..., 1, :]) * u + c[..., 2, :]

    def to_reparam(self, t: np.ndarray, t_first: np.ndarray, t_last: np.ndarray) -> np.ndarray:
        return (t - t_first[:, None]) / (t_last - t_first)[:, None]

    def solver_derivatives(self, t_len: int, steps: int) -> np.ndarray:
        """dX/ds at the start and midpoint of every solver substep on a
        uniform ``t_len`` grid: [N, (t_len-1)*steps, 2, C] (cached)."""
        key = (t_len, steps)
        if key not in self._grid_cache:
            n_sub = max(t_len - 1, 0) * steps
            if n_sub == 0:
                self._grid_cache[key] = np.zeros((self.n, 0, 2, self.channels))
            else:
                h = 1.0 / n_sub
                starts = np.arange(n_sub) * h
                pts = np.stack([starts, starts + 0.5 * h], axis=-1).reshape(-1)
                self._grid_cache[key] = self.derivative(pts).reshape(self.n, n_sub, 2, self.channels)
        return self._grid_cache[key]


def build_path(batch: SeriesBatch, kind: str = "cubic") -> ControlPath:
    """Interpolate each sequence's observed (timestamp, value) pairs.

    ``kind`` is ``"cubic"`` (natural cubic spline) or ``"linear"``.
    """
    if kind not in ("cubic", "linear"):
        raise ValueError(f"unknown path kind {kind!r}")
    n, _, d = batch.values.shape
    counts = batch.mask.sum(axis=1)
    if (counts < 2).any():
        raise ValueError("every sequence needs at least 2 observed steps")
    k = int(counts.max())
    c_dim = d + 1
    knots = np.full((n, k), np.inf)
    coeffs = np.zeros((n, k - 1, 4, c_dim))
    first = np.zeros((n, c_dim))
    for i in range(n):
        m = batch.mask[i]
        t = batch.timestamps[i, m]
        if np.any(np.diff(t) <= 0):
            raise ValueError(f"sequence {i}: timestamps must be strictly increasing (duplicates found)")
        s = (t - t[0]) / (t[-1] - t[0])
        x = np.concatenate([batch.values[i, m], s[:, None]], axis=1)
        nk = len(s)
        knots[i, :nk] = s
        first[i] = x[0]
        if kind == "linear" or nk == 2:
            slope = np.diff(x, axis=0) / np.diff(s)[:, None]
            coeffs[i, : nk - 1, 2] = slope
            coeffs[i, : nk - 1, 3] = x[:-1]
        else:
            spline = CubicSpline(s, x, bc_type="natural", axis=0)
            coeffs[i, : nk - 1] = np.moveaxis(spline.c, 0, 1)
    return ControlPath(knots, coeffs, counts.astype(np.int64), first)


class VectorField(nn.Module):
    """f(h) -> [hidden, channels] matrix; tanh MLP, small final layer."""

    def __init__(self, hidden_dim: int, channels: int, width: int, depth: int, final_scale: float = 0.1):
        super().__init__()
        self.hidden_dim = hidden_dim
        self.channels = channels
        layers: list[nn.Module] = []
        size = hidden_dim
        for _ in range(depth):
            layers += [nn.Linear(size, width), nn.Tanh()]
            size = width
        self.body = nn.Sequential(*layers)
        self.out = nn.Linear(size, hidden_dim * channels)
        with torch.no_grad():
            self.out.weight.mul_(final_scale)
            self.out.bias.mul_(final_scale)

    def forward(self, h):
        return torch.tanh(self.out(self.body(h))).view(*h.shape[:-1], self.hidden_dim, self.channels)


class NCDEEmbedding(nn.Module):
    """Learned lift of the first observation plus a fixed-step midpoint CDE solve."""

    def __init__(self, input_dim: int, cfg: NCDEConfig):
        super().__init__()
        self.cfg = cfg
        channels = input_dim + 1
        self.lift = nn.Linear(channels, cfg.hidden_dim)
        self.field = VectorField(cfg.hidden_dim, channels, cfg.field_width, cfg.field_depth)

    def forward(self, path: ControlPath, t_len: int):
        if t_len < 1:
            raise ValueError("t_len must be >= 1")
        steps = self.cfg.solver_steps_per_interval
        p = self.lift.weight
        dxds = torch.as_tensor(path.solver_derivatives(t_len, steps), dtype=p.dtype, device=p.device)
        h = self.lift(torch.as_tensor(path.first, dtype=p.dtype, device=p.device))
        n_sub = dxds.shape[1]
        dt = 1.0 / n_sub if n_sub else 0.0
        out = [h]
        for j in range(n_sub):
            k1 = (self.field(h) @ dxds[:, j, 0, :, None]).squeeze(-1)
            h_mid = h + 0.5 * dt * k1
            k2 = (self.field(h_mid) @ dxds[:, j, 1, :, None]).squeeze(-1)
            h = h + dt * k2
            if (j + 1) % steps == 0:
                out.append(h)
        return torch.stack(out, dim=1)


def embed(path: ControlPath, cfg: NCDEConfig, params: NCDEEmbedding, t_len: int) -> torch.Tensor:
    """Functional form: ``params`` is the embedding module holding the weights."""
    if params.cfg != cfg:
        raise ValueError("embedding weights were built for a different NCDEConfig")
    return params(path, t_len)
