import csv

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from kovae.koopman import (EigTargets, KoopmanOperator, classify, eig_penalty, fit_from_sequences, fit_operator,
                           plot_spectrum, rollout, spectral_report, write_spectrum_csv)

ROT = torch.tensor([[0.0, -1.0], [1.0, 0.0]], dtype=torch.float64)


def _rel_fro(a, b):
    return (torch.linalg.norm(a - b) / torch.linalg.norm(b)).item()


def _stable_matrix(k, seed, radius=0.95):
    g = np.random.default_rng(seed)
    m = g.normal(size=(k, k))
    m *= radius / max(abs(np.linalg.eigvals(m)))
    return torch.tensor(m)


def test_rotation_recovered_from_identity_basis():
    op = fit_operator(torch.eye(2, dtype=torch.float64), ROT.clone())
    assert _rel_fro(op.A, ROT) < 1e-5


def test_known_operator_from_linear_trajectories():
    k, n, t = 4, 6, 12
    a0 = _stable_matrix(k, 0)
    z = [torch.tensor(np.random.default_rng(1).normal(size=(n, k)))]
    for _ in range(t):
        z.append(z[-1] @ a0.T)
    z_bar = torch.stack(z, 1)
    assert _rel_fro(fit_from_sequences(z_bar).A, a0) < 1e-5


def test_single_transition_matches_rank1_pseudo_inverse():
    zp = torch.tensor([[1.0], [2.0], [-1.0]], dtype=torch.float64)
    zn = torch.tensor([[0.5], [0.0], [3.0]], dtype=torch.float64)
    A = fit_operator(zp, zn).A
    pinv = zn @ zp.T / (zp.T @ zp)
    assert torch.allclose(A, pinv, atol=1e-6)
    assert torch.allclose(A @ zp, zn, atol=1e-6)
    # minimum-norm: nothing acts on the orthogonal complement of zp
    ortho = torch.tensor([[2.0], [-1.0], [0.0]], dtype=torch.float64)
    assert torch.allclose(A @ ortho, torch.zeros(3, 1, dtype=torch.float64), atol=1e-6)


def test_fit_rejects_mismatched_shapes():
    with pytest.raises(ValueError):
        fit_operator(torch.zeros(3, 5), torch.zeros(2, 5))
    with pytest.raises(ValueError):
        KoopmanOperator(torch.zeros(2, 3))


def test_fit_keeps_input_dtype():
    assert fit_operator(torch.randn(3, 10), torch.randn(3, 10)).A.dtype == torch.float32


def test_eigenpairs_sorted_and_consistent():
    A = _stable_matrix(5, 3)
    op = KoopmanOperator(A)
    vals, vecs = op.eigenvalues, op.eigenvectors
    assert (vals.abs()[:-1] >= vals.abs()[1:]).all()
    lhs = A.to(torch.complex128) @ vecs
    assert (torch.linalg.norm(lhs - vecs * vals) / torch.linalg.norm(lhs)) < 1e-5


def test_rollout_examples():
    z_bar = torch.randn(3, 6, 2, dtype=torch.float64)
    assert torch.equal(rollout(KoopmanOperator(torch.eye(2, dtype=torch.float64)), z_bar), z_bar[:, :-1])
    assert torch.equal(rollout(KoopmanOperator(torch.zeros(2, 2, dtype=torch.float64)), z_bar),
                       torch.zeros(3, 5, 2, dtype=torch.float64))
    with pytest.raises(ValueError):
        rollout(KoopmanOperator(torch.eye(3)), torch.zeros(1, 4, 2))


def test_rotation_orbit_matches_matrix_powers():
    op = KoopmanOperator(ROT)
    z0 = torch.tensor([1.0, 0.0], dtype=torch.float64)
    orbit = torch.stack([torch.linalg.matrix_power(ROT, t) @ z0 for t in range(6)])[None]
    pred = rollout(op, orbit)
    assert torch.allclose(pred, orbit[:, 1:])
    assert torch.allclose(pred[0, :3], torch.tensor([[0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]], dtype=torch.float64))


def test_eig_penalty_examples():
    assert eig_penalty(KoopmanOperator(ROT), EigTargets((1.0, 1.0))).item() == pytest.approx(0.0, abs=1e-12)
    half = KoopmanOperator(torch.tensor([[0.5]], dtype=torch.float64))
    assert eig_penalty(half, EigTargets((1.0,))).item() == pytest.approx(0.25, abs=1e-12)
    assert eig_penalty(half, EigTargets(())).item() == 0.0
    with pytest.raises(ValueError):
        eig_penalty(half, EigTargets((1.0, 1.0)))
    with pytest.raises(ValueError):
        EigTargets((-0.1,))


def test_eig_penalty_pairs_largest_first():
    op = KoopmanOperator(torch.diag(torch.tensor([0.2, 0.9, -0.6], dtype=torch.float64)))
    pen = eig_penalty(op, EigTargets((1.0, 0.5)))
    assert pen.item() == pytest.approx(0.1 ** 2 + 0.1 ** 2)


def test_eig_penalty_detached_on_repeated_eigenvalues():
    A = torch.eye(2, dtype=torch.float64, requires_grad=True) * 0.5
    pen = eig_penalty(KoopmanOperator(A), EigTargets((1.0,)))
    assert pen.item() == pytest.approx(0.25)
    assert not pen.requires_grad


def _fd_check(fn, x, eps=1e-6, tol=1e-4, samples=8, seed=0):
    x = x.clone().requires_grad_(True)
    fn(x).backward()
    g = x.grad.clone()
    rng = np.random.default_rng(seed)
    for _ in range(samples):
        idx = tuple(int(rng.integers(0, s)) for s in x.shape)
        with torch.no_grad():
            xp, xm = x.detach().clone(), x.detach().clone()
            xp[idx] += eps
            xm[idx] -= eps
            fd = (fn(xp) - fn(xm)).item() / (2 * eps)
        assert abs(g[idx].item() - fd) <= tol * max(abs(fd), 1e-3), (idx, g[idx].item(), fd)


def test_fit_operator_gradients():
    g = torch.Generator().manual_seed(0)
    zp = torch.randn(3, 20, generator=g, dtype=torch.float64)
    zn = torch.randn(3, 20, generator=g, dtype=torch.float64)
    w = torch.randn(3, 3, generator=g, dtype=torch.float64)
    _fd_check(lambda x: (fit_operator(x, zn).A * w).sum(), zp)
    _fd_check(lambda x: (fit_operator(zp, x).A * w).sum(), zn)


def test_eig_penalty_gradient():
    A = _stable_matrix(4, 7, radius=0.8)
    targets = EigTargets((1.0, 1.0))
    _fd_check(lambda x: eig_penalty(KoopmanOperator(x), targets), A)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_least_squares_optimality(seed):
    g = np.random.default_rng(seed)
    zp = torch.tensor(g.normal(size=(4, 30)))
    zn = torch.tensor(g.normal(size=(4, 30)))
    A = fit_operator(zp, zn).A
    base = torch.linalg.norm(A @ zp - zn) ** 2
    d = torch.tensor(g.normal(size=(4, 4)))
    d = 1e-3 * d / torch.linalg.norm(d)
    assert torch.linalg.norm((A + d) @ zp - zn) ** 2 >= base - 1e-9


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_spectrum_similarity_invariance(seed):
    g = np.random.default_rng(seed)
    vals = g.choice([0.3, -0.7, 1.0, 1.3], size=4)
    A = torch.tensor(np.diag(vals))
    P = torch.tensor(g.normal(size=(4, 4)) + 4 * np.eye(4))
    B = P @ A @ torch.linalg.inv(P)
    ra, rb = spectral_report(KoopmanOperator(A)), spectral_report(KoopmanOperator(B))
    assert [r["class"] for r in ra] == [r["class"] for r in rb]
    assert np.allclose([r["modulus"] for r in ra], [r["modulus"] for r in rb], atol=1e-6)


@pytest.mark.parametrize("A,classes", [
    (0.5 * torch.eye(2), ["decaying", "decaying"]),
    (ROT, ["marginal", "marginal"]),
    (torch.diag(torch.tensor([1.2, 0.3])), ["unstable", "decaying"]),
])
def test_spectral_classes(A, classes):
    assert [r["class"] for r in spectral_report(KoopmanOperator(A.double()))] == classes


def test_classify_boundaries():
    assert classify(0.95) == "marginal"
    assert classify(0.949) == "decaying"
    assert classify(1.051) == "unstable"


def test_spectrum_outputs(tmp_path):
    rows = spectral_report(KoopmanOperator(ROT))
    write_spectrum_csv(rows, tmp_path / "s.csv")
    with open(tmp_path / "s.csv") as fh:
        got = list(csv.DictReader(fh))
    assert len(got) == 2 and float(got[0]["modulus"]) == pytest.approx(1.0)
    plot_spectrum(rows, tmp_path / "s.png")
    assert (tmp_path / "s.png").stat().st_size > 0


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), r=st.integers(1, 4), delta=st.floats(1e-3, 0.5))
def test_eig_penalty_zero_set(seed, r, delta):
    op = KoopmanOperator(_stable_matrix(4, seed))
    moduli = op.eigenvalues.abs()[:r].tolist()
    assert eig_penalty(op, EigTargets(moduli)).item() == pytest.approx(0.0, abs=1e-20)
    shifted = [moduli[0] + delta] + moduli[1:]
    assert eig_penalty(op, EigTargets(shifted)).item() == pytest.approx(delta ** 2, rel=1e-9)
