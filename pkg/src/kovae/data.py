"""Time-series datasets: synthetic generators, CSV windowing, scaling and
irregular subsampling.

All arrays are numpy; conversion to torch happens at the model boundary.
"""
from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np


def op_rng(seed: int, op_name: str) -> np.random.Generator:
    """Independent RNG stream derived from ``(seed, op_name)``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(op_name.encode())]))


@dataclass(frozen=True)
class SeriesBatch:
    """A batch of possibly irregularly observed multivariate sequences.

    values: [N, T, d]; timestamps: [N, T]; mask: [N, T] (True = observed).
    Masked-out positions hold the last observed value.
    """

    values: np.ndarray
    timestamps: np.ndarray
    mask: np.ndarray
    norm_lo: np.ndarray | None = None
    norm_hi: np.ndarray | None = None

    def __post_init__(self):
        if self.values.ndim != 3:
            raise ValueError(f"values must be [N, T, d], got shape {self.values.shape}")
        n, t, _ = self.values.shape
        if self.timestamps.shape != (n, t) or self.mask.shape != (n, t):
            raise ValueError("timestamps and mask must be [N, T]")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def t_len(self) -> int:
        return self.values.shape[1]

    @property
    def d(self) -> int:
        return self.values.shape[2]

    @property
    def normalized(self) -> bool:
        return self.norm_lo is not None

    def subset(self, idx) -> "SeriesBatch":
        return replace(self, values=self.values[idx], timestamps=self.timestamps[idx], mask=self.mask[idx])

    def save(self, path) -> None:
        arrays = dict(values=self.values, timestamps=self.timestamps, mask=self.mask)
        if self.norm_lo is not None:
            arrays.update(norm_lo=self.norm_lo, norm_hi=self.norm_hi)
        np.savez(path, **arrays)

    @classmethod
    def load(cls, path) -> "SeriesBatch":
        with np.load(path) as f:
            return cls(
                values=f["values"],
                timestamps=f["timestamps"],
                mask=f["mask"].astype(bool),
                norm_lo=f["norm_lo"] if "norm_lo" in f else None,
                norm_hi=f["norm_hi"] if "norm_hi" in f else None,
            )


def _regular(values: np.ndarray, dt: float = 1.0) -> SeriesBatch:
    n, t, _ = values.shape
    timestamps = np.broadcast_to(np.arange(t, dtype=np.float64) * dt, (n, t)).copy()
    return SeriesBatch(values=values, timestamps=timestamps, mask=np.ones((n, t), dtype=bool))


def _check_dims(**dims):
    for name, v in dims.items():
        if int(v) < 1:
            raise ValueError(f"{name} must be >= 1, got {v}")


def sines_values(freq: np.ndarray, phase: np.ndarray, times: np.ndarray) -> np.ndarray:
    """``sin(2*pi*freq*t + phase)`` at ``times`` [T]; freq/phase are [n, d]."""
    t = np.asarray(times, dtype=np.float64)[None, :, None]
    return np.sin(2 * np.pi * freq[:, None, :] * t + phase[:, None, :])


def generate_sines(n: int, t_len: int = 24, d: int = 5, seed: int = 0, dt: float | None = None) -> SeriesBatch:
    """Multichannel sinusoids with per sequence-channel frequency and phase.

    freq ~ U[0, 1], phase ~ U[-pi, pi], one draw per (sequence, channel).
    Samples sit at t = k*dt; the default dt = 1/t_len makes freq a count of
    cycles per window. dt = 1 gives integer time, where frequencies alias
    up to the Nyquist rate.
    """
    _check_dims(n=n, t_len=t_len, d=d)
    dt = 1.0 / t_len if dt is None else float(dt)
    if dt <= 0:
        raise ValueError("dt must be positive")
    rng = op_rng(seed, "generate_sines")
    freq = rng.uniform(0.0, 1.0, size=(n, d))
    phase = rng.uniform(-np.pi, np.pi, size=(n, d))
    return _regular(sines_values(freq, phase, np.arange(t_len) * dt), dt=dt)


@dataclass(frozen=True)
class PendulumParams:
    length: float = 1.0
    gravity: float = 9.8
    dt: float = 0.1
    horizon: float = 17.0
    noise_scale: float = 0.08
    theta0_lo: float = 0.5
    theta0_hi: float = 2.7
    # RK4 substeps per output sample
    substeps: int = 4

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.theta0_lo >= self.theta0_hi:
            raise ValueError("theta0_lo must be < theta0_hi")
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")
        if self.t_len < 2:
            raise ValueError("horizon/dt must give at least 2 samples")

    @property
    def t_len(self) -> int:
        return int(round(self.horizon / self.dt))


def _pendulum_rhs(state: np.ndarray, g_over_l: float) -> np.ndarray:
    theta, omega = state[..., 0], state[..., 1]
    return np.stack([omega, -g_over_l * np.sin(theta)], axis=-1)


def integrate_pendulum(theta0: np.ndarray, params: PendulumParams, dt: float | None = None,
                       substeps: int | None = None) -> np.ndarray:
    """Clean (theta, theta_dot) trajectories [n, T, 2] sampled every ``params.dt``.

    Fixed-step RK4 with ``substeps`` internal steps per sample; theta_dot(0) = 0.
    """
    dt = params.dt if dt is None else dt
    substeps = params.substeps if substeps is None else substeps
    g_over_l = params.gravity / params.length
    h = dt / substeps
    state = np.stack([np.asarray(theta0, dtype=np.float64), np.zeros_like(theta0, dtype=np.float64)], -1)
    out = np.empty(state.shape[:-1] + (params.t_len, 2))
    for i in range(params.t_len):
        out[..., i, :] = state
        for _ in range(substeps):
            k1 = _pendulum_rhs(state, g_over_l)
            k2 = _pendulum_rhs(state + 0.5 * h * k1, g_over_l)
            k3 = _pendulum_rhs(state + 0.5 * h * k2, g_over_l)
            k4 = _pendulum_rhs(state + h * k3, g_over_l)
            state = state + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return out


def pendulum_energy(traj: np.ndarray, params: PendulumParams) -> np.ndarray:
    """Energy per unit mass-length^2: 0.5*theta_dot^2 + (g/l)(1 - cos theta)."""
    g_over_l = params.gravity / params.length
    return 0.5 * traj[..., 1] ** 2 + g_over_l * (1.0 - np.cos(traj[..., 0]))


def generate_pendulum(n: int, params: PendulumParams | None = None, seed: int = 0,
                      noisy: bool = True) -> SeriesBatch:
    """Nonlinear pendulum trajectories with additive Gaussian sensor noise."""
    _check_dims(n=n)
    params = params or PendulumParams()
    rng = op_rng(seed, "generate_pendulum")
    theta0 = rng.uniform(params.theta0_lo, params.theta0_hi, size=n)
    traj = integrate_pendulum(theta0, params)
    if noisy:
        traj = traj + params.noise_scale * rng.standard_normal(traj.shape)
    return _regular(traj, dt=params.dt)


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def read_csv_matrix(path, d: int | None = None) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if rows and not all(_is_number(c) for c in rows[0]):
        rows = rows[1:]
    data = []
    for lineno, row in enumerate(rows, start=1):
        try:
            data.append([float(c) for c in row])
        except ValueError as e:
            raise ValueError(f"{path}: non-numeric cell in data row {lineno}: {e}") from None
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{path}: ragged rows")
    if d is not None and arr.shape[1] != d:
        raise ValueError(f"{path}: expected {d} columns, found {arr.shape[1]}")
    return arr


def load_csv_dataset(path, d: int | None = None, t_len: int = 24, seed: int = 0) -> SeriesBatch:
    """Stride-1 sliding windows of length ``t_len`` over a chronological CSV,
    shuffled under ``seed``. A non-numeric first row is treated as a header."""
    _check_dims(t_len=t_len)
    arr = read_csv_matrix(path, d)
    if arr.shape[0] < t_len:
        raise ValueError(f"{path}: {arr.shape[0]} rows is fewer than t_len={t_len}")
    n = arr.shape[0] - t_len + 1
    windows = np.lib.stride_tricks.sliding_window_view(arr, t_len, axis=0)  # [n, d, T]
    windows = np.ascontiguousarray(windows.transpose(0, 2, 1))
    order = op_rng(seed, "load_csv_dataset").permutation(n)
    return _regular(windows[order])


def normalize(batch: SeriesBatch, reference: SeriesBatch | None = None) -> SeriesBatch:
    """Min-max scale each feature to [0, 1] using observed entries.

    Ranges come from ``batch`` itself, or from an already-normalized
    ``reference`` (e.g. the training split). Constant features map to 0.5.
    """
    if batch.normalized:
        raise ValueError("batch is already normalized")
    if reference is not None:
        if not reference.normalized:
            raise ValueError("reference batch carries no normalization ranges")
        lo, hi = reference.norm_lo, reference.norm_hi
    else:
        obs = batch.values[batch.mask]
        lo, hi = obs.min(axis=0), obs.max(axis=0)
    span = hi - lo
    const = span <= 0
    scaled = (batch.values - lo) / np.where(const, 1.0, span)
    scaled = np.where(const, 0.5, scaled)
    return replace(batch, values=scaled, norm_lo=np.array(lo, dtype=np.float64), norm_hi=np.array(hi, dtype=np.float64))


def denormalize_values(values: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    span = hi - lo
    return np.where(span <= 0, lo, lo + values * span)


def denormalize(batch: SeriesBatch) -> SeriesBatch:
    if not batch.normalized:
        raise ValueError("denormalize requires stored normalization ranges")
    return replace(batch, values=denormalize_values(batch.values, batch.norm_lo, batch.norm_hi),
                   norm_lo=None, norm_hi=None)


def fill_forward(values: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Replace masked-out steps with the last observed value along time."""
    n, t = mask.shape
    idx = np.where(mask, np.arange(t)[None, :], 0)
    np.maximum.accumulate(idx, axis=1, out=idx)
    return values[np.arange(n)[:, None], idx]


def drop_observations(batch: SeriesBatch, rate: float, seed: int = 0) -> SeriesBatch:
    """Hide exactly ``round(rate*T)`` interior steps per sequence.

    The first and last steps always stay observed so the control path spans
    the full time grid. Timestamps are untouched.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"rate must be in [0, 1), got {rate}")
    t = batch.t_len
    n_drop = int(round(rate * t))
    if n_drop == 0:
        return batch
    if t - n_drop < 2 or n_drop > t - 2:
        raise ValueError(f"rate {rate} leaves fewer than 2 observations (or exceeds interior) for T={t}")
    rng = op_rng(seed, "drop_observations")
    mask = batch.mask.copy()
    for i in range(batch.n):
        mask[i, 1 + rng.choice(t - 2, size=n_drop, replace=False)] = False
    mask &= batch.mask
    values = fill_forward(batch.values, mask)
    return replace(batch, values=values, mask=mask)


def train_test_split(batch: SeriesBatch, train_frac: float = 0.8, seed: int = 0) -> tuple[SeriesBatch, SeriesBatch]:
    perm = op_rng(seed, "train_test_split").permutation(batch.n)
    cut = int(round(train_frac * batch.n))
    return batch.subset(perm[:cut]), batch.subset(perm[cut:])
