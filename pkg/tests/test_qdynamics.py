import numpy as np
import pytest
from scipy.linalg import expm

from app.core.config import settings
from app.core.exceptions import MarginalRangeError, MemoryBudgetError, PathRangeError, StepSizeError
from app.services.hilbert import (
    DensityOperator,
    SpaceGrid,
    coherent_columns,
    coherent_state,
    momentum_operator,
)
from app.services.qdynamics import (
    HartreeState,
    NBodyState,
    apply_frozen_path,
    hartree_step,
    marginal_operator,
    nbody_step,
    pair_potential,
    propagate_hartree,
    propagate_nbody,
    rho_of,
)

HBAR = 0.5


@pytest.fixture
def grid():
    # p_max = 8 at hbar = 0.5
    return SpaceGrid(-2 * np.pi, 2 * np.pi, 64)


def _coherent_mixture(grid, points, weights):
    cols = coherent_columns(np.asarray(points), HBAR, grid, normalize=True)
    return DensityOperator.from_mixture(grid, HBAR, np.asarray(weights), cols)


# ── Hartree ──────────────────────────────────────────────────────────


def test_hartree_preserves_trace_and_purity(grid, cosine):
    R0 = _coherent_mixture(grid, [(0.0, 0.5), (1.0, -0.5)], [0.6, 0.4])
    traj = propagate_hartree(R0, cosine, 0.01, 1.0, [0.0, 0.5, 1.0])
    assert traj.times.tolist() == pytest.approx([0.0, 0.5, 1.0])
    assert np.abs(traj.traces - 1.0).max() <= 1e-10
    assert np.abs(traj.purities - traj.purities[0]).max() <= 1e-8


def test_rho_of_is_a_probability_density(grid):
    R = _coherent_mixture(grid, [(0.0, 0.5), (1.0, -0.5)], [0.6, 0.4])
    rho = rho_of(R)
    assert rho.shape == (grid.n_x,)
    assert rho.min() >= -1e-15
    assert rho.sum() * grid.h == pytest.approx(1.0, abs=1e-10)


def test_hartree_step_matches_propagation(grid, cosine):
    R0 = coherent_state((0.0, 0.5), HBAR, grid).projector()
    state = HartreeState(R=R0, t=0.0, V=cosine)
    for _ in range(3):
        state = hartree_step(state, 0.01)
    assert state.t == pytest.approx(0.03)
    traj = propagate_hartree(R0, cosine, 0.01, 0.03, [0.03])
    assert np.allclose(state.R.matrix, traj.states[-1].matrix, atol=1e-12)
    with pytest.raises(StepSizeError):
        hartree_step(state, 0.05)


def test_hartree_energy_nearly_conserved(grid, cosine):
    R0 = coherent_state((0.0, 0.5), HBAR, grid).projector()
    traj = propagate_hartree(R0, cosine, 0.005, 1.0)
    drift = np.abs(traj.energies - traj.energies[0]).max() / abs(traj.energies[0])
    assert drift < 1e-3


def test_free_hartree_matches_exact_propagator(grid, free):
    R0 = coherent_state((0.0, 1.0), HBAR, grid).projector()
    traj = propagate_hartree(R0, free, 0.01, 0.5, [0.5])
    P = momentum_operator(grid, HBAR)
    U = expm(-0.5j / HBAR * 0.5 * (P @ P))
    expected = U @ R0.matrix @ U.conj().T
    assert np.allclose(traj.states[-1].matrix, expected, atol=1e-8)


def test_hartree_second_order_in_dt(grid, cosine):
    R0 = coherent_state((0.0, 0.5), HBAR, grid).projector()
    finals = [
        propagate_hartree(R0, cosine, dt, 0.5, [0.5]).states[-1].matrix
        for dt in (0.01, 0.005, 0.0025)
    ]
    e1 = np.linalg.norm(finals[0] - finals[1])
    e2 = np.linalg.norm(finals[1] - finals[2])
    assert 1.7 <= np.log2(e1 / e2) <= 2.3


def test_hartree_rejects_large_steps(grid, cosine):
    R0 = coherent_state((0.0, 0.0), HBAR, grid).projector()
    with pytest.raises(StepSizeError):
        propagate_hartree(R0, cosine, 0.05, 1.0)


def test_frozen_path_reproduces_trajectory(grid, cosine):
    R0 = _coherent_mixture(grid, [(0.0, 0.5), (1.0, -0.5)], [0.6, 0.4])
    traj = propagate_hartree(R0, cosine, 0.01, 0.4, [0.0, 0.2, 0.4])
    moved = apply_frozen_path(R0.mix_vectors, traj, grid, HBAR, 0.4)
    replay = DensityOperator.from_mixture(grid, HBAR, R0.mix_weights, moved)
    assert np.allclose(replay.matrix, traj.at(0.4).matrix, atol=1e-12)


def test_frozen_path_composes(grid, cosine):
    R0 = coherent_state((0.0, 0.5), HBAR, grid).projector()
    traj = propagate_hartree(R0, cosine, 0.01, 0.4)
    v = coherent_columns(np.array([[0.5, -0.3]]), HBAR, grid, normalize=True)
    direct = apply_frozen_path(v, traj, grid, HBAR, 0.4)
    staged = apply_frozen_path(apply_frozen_path(v, traj, grid, HBAR, 0.2), traj, grid, HBAR, 0.4, t_start=0.2)
    assert np.allclose(direct, staged, atol=1e-12)
    assert np.linalg.norm(direct) == pytest.approx(1.0, abs=1e-12)


def test_frozen_path_range(grid, cosine):
    R0 = coherent_state((0.0, 0.0), HBAR, grid).projector()
    traj = propagate_hartree(R0, cosine, 0.01, 0.2)
    v = R0.mix_vectors
    with pytest.raises(PathRangeError):
        apply_frozen_path(v, traj, grid, HBAR, 0.3)
    with pytest.raises(PathRangeError):
        apply_frozen_path(v, traj, grid, HBAR, 0.105)
    with pytest.raises(PathRangeError):
        apply_frozen_path(v, traj, grid, HBAR, 0.1, t_start=0.2)


# ── N-body ───────────────────────────────────────────────────────────


def test_pair_potential_is_symmetric(grid, cosine):
    W = pair_potential(grid, 2, cosine)
    assert np.allclose(W, W.T)
    # at x_1 = x_2 all four terms equal V(0)
    assert W[0, 0] == pytest.approx(1.0)


def test_nbody_conserves_norm_and_symmetry(grid, cosine):
    col = coherent_columns(np.array([[0.0, 0.5]]), HBAR, grid, normalize=True)
    other = coherent_columns(np.array([[1.0, -0.5]]), HBAR, grid, normalize=True)
    # symmetric mixture: |a b><a b| and |b a><b a| with equal weights
    s0 = NBodyState.product_mixture(
        grid, HBAR, np.array([0.5, 0.5]),
        [np.hstack([col, other]), np.hstack([other, col])], cosine,
    )
    traj = propagate_nbody(s0, 0.01, 0.5, [0.0, 0.5])
    assert np.abs(traj.norms - 1.0).max() <= 1e-10
    amps = traj.states[-1].amplitudes
    assert np.allclose(amps[0].T, amps[1], atol=1e-12)
    density = traj.states[-1].position_density()
    assert np.allclose(density, density.T, atol=1e-12)


def test_nbody_step_matches_propagation(grid, cosine):
    col = coherent_columns(np.array([[0.0, 0.5]]), HBAR, grid, normalize=True)
    s0 = NBodyState.product_mixture(grid, HBAR, np.ones(1), [col, col], cosine)
    s = nbody_step(nbody_step(s0, 0.01), 0.01)
    assert s.t == pytest.approx(0.02)
    traj = propagate_nbody(s0, 0.01, 0.02, [0.02])
    assert np.allclose(s.amplitudes, traj.states[-1].amplitudes, atol=1e-12)


def test_free_nbody_marginal_matches_hartree(grid, free):
    col = coherent_columns(np.array([[0.0, 0.5]]), HBAR, grid, normalize=True)
    s0 = NBodyState.product_mixture(grid, HBAR, np.ones(1), [col, col], free)
    ntraj = propagate_nbody(s0, 0.01, 0.3, [0.3])
    R0 = DensityOperator.from_mixture(grid, HBAR, np.ones(1), col)
    htraj = propagate_hartree(R0, free, 0.01, 0.3, [0.3])
    one_body = marginal_operator(ntraj.states[-1], 1)
    assert np.allclose(one_body.matrix, htraj.states[-1].matrix, atol=1e-10)


def test_nbody_energy_conserved(grid, cosine):
    col = coherent_columns(np.array([[0.0, 0.5]]), HBAR, grid, normalize=True)
    s0 = NBodyState.product_mixture(grid, HBAR, np.ones(1), [col, col], cosine)
    traj = propagate_nbody(s0, 0.01, 0.5)
    drift = np.abs(traj.energies - traj.energies[0]).max() / abs(traj.energies[0])
    assert drift < 1e-3


def test_pure_state_wraps_wave_function(grid, cosine):
    psi = coherent_state((0.0, 0.0), HBAR, grid)
    s = NBodyState.pure(psi, cosine)
    assert s.n_bodies == 1
    assert s.psi.norm_squared == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(MarginalRangeError):
        marginal_operator(s, 2)


def test_nbody_amplitude_budget(grid, cosine, monkeypatch):
    monkeypatch.setattr(settings, "NBODY_MAX_AMPLITUDES", 1000)
    col = coherent_columns(np.array([[0.0, 0.0]]), HBAR, grid, normalize=True)
    with pytest.raises(MemoryBudgetError):
        NBodyState.product_mixture(grid, HBAR, np.ones(1), [col, col], cosine)


def test_stored_nbody_trajectory_budget(grid, cosine):
    # three bodies, 27 mixture components, 64 points: one state fits, 16 do not
    amps = np.broadcast_to(np.zeros(1, dtype=complex), (27, 64, 64, 64))
    s0 = NBodyState(grid, HBAR, np.full(27, 1.0 / 27), amps, 0.0, cosine)
    assert amps.size <= settings.NBODY_MAX_AMPLITUDES
    with pytest.raises(MemoryBudgetError):
        propagate_nbody(s0, 0.01, 1.5, np.linspace(0.0, 1.5, 16))


def test_observed_nbody_run_keeps_only_observations(grid, cosine, monkeypatch):
    col = coherent_columns(np.array([[0.0, 0.5]]), HBAR, grid, normalize=True)
    s0 = NBodyState.product_mixture(grid, HBAR, np.ones(1), [col, col], cosine)
    monkeypatch.setattr(settings, "NBODY_MAX_AMPLITUDES", 2 * s0.amplitudes.size)
    with pytest.raises(MemoryBudgetError):
        propagate_nbody(s0, 0.01, 0.1, [0.0, 0.05, 0.1])
    traj = propagate_nbody(s0, 0.01, 0.1, [0.0, 0.05, 0.1], observe=lambda s: marginal_operator(s, 1))
    assert traj.states == ()
    assert len(traj.observations) == 3
    full = propagate_nbody(s0, 0.01, 0.1, [0.1])
    assert np.allclose(traj.observations[-1].matrix, marginal_operator(full.states[-1], 1).matrix, atol=1e-12)
