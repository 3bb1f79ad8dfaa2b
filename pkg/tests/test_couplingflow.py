import numpy as np
import pytest

from app.core.exceptions import IncompatibleInputsError, MarginalRangeError
from app.services.couplingflow import (
    consistency_term,
    husimi_grid_for,
    moment_functional,
    nccs_check,
    nccs_gap,
    nbody_sampler,
    propagate_coupling_hartree,
    random_nccs_trials,
    verify_dobrushin,
    verify_thv,
    verify_tnsv,
    verify_tsl,
    _marginal_lhs,
)
from app.services.hilbert import SpaceGrid, coherent_columns, toeplitz_quantize
from app.services.phasespace import PhaseDensity, gamma_constant, lambda_constant, propagate_vlasov
from app.services.qcdist import CouplingField, toeplitz_lift_coupling
from app.services.qdynamics import NBodyState, propagate_hartree
from app.services.transport import DiscreteMeasure, mk2_squared

HBAR = 0.5


@pytest.fixture
def grid():
    return SpaceGrid(-2 * np.pi, 2 * np.pi, 64)


@pytest.fixture
def three_atoms(phase_grid):
    points = np.array([[0.0, 0.0], [0.5, 0.3], [-0.4, -0.2]])
    return PhaseDensity.from_atoms(phase_grid, points, np.array([0.5, 0.3, 0.2]))


# ── helpers ──────────────────────────────────────────────────────────


def test_consistency_term(cosine):
    gamma = gamma_constant(cosine)
    assert consistency_term(3, cosine, gamma, 0.0) == pytest.approx(0.0)
    expected = 4.0 / 2 * np.expm1(gamma * 0.5) / gamma
    assert consistency_term(3, cosine, gamma, 0.5) == pytest.approx(expected)
    # decays like 1/(N - 1)
    assert consistency_term(11, cosine, gamma, 0.5) == pytest.approx(expected / 5)
    with pytest.raises(MarginalRangeError):
        consistency_term(1, cosine, gamma, 0.5)


def test_husimi_grid_sizes():
    points = np.array([[0.0, 0.0], [1.0, -1.0]])
    one = husimi_grid_for(points, HBAR)
    assert one.shape == (44, 44)
    assert one.x_min <= -8.0 * np.sqrt(HBAR)
    assert husimi_grid_for(points, HBAR, refine=0.5).shape == (22, 22)
    # 6^4 = 1296 <= 2048 < 7^4
    pair = points.reshape(1, 4)
    assert husimi_grid_for(pair, HBAR, n_marginal=2).shape == (6, 6)
    assert husimi_grid_for(pair, HBAR, n_marginal=2, refine=1.5).shape == (6, 6)
    assert husimi_grid_for(pair, HBAR, n_marginal=2, refine=0.5).shape == (3, 3)
    assert husimi_grid_for(np.zeros((1, 6)), HBAR, n_marginal=3).shape == (3, 3)


def test_two_body_marginal_cost_uses_exact_transport(cosine):
    grid = SpaceGrid(-2 * np.pi, 2 * np.pi, 32)
    atoms = np.array([[0.0, 0.5], [1.0, -0.5]])
    cols = coherent_columns(atoms, HBAR, grid, normalize=True)
    state = NBodyState.product_mixture(
        grid, HBAR, np.full(4, 0.25), [cols[:, [0, 0, 1, 1]], cols[:, [0, 1, 0, 1]]], cosine,
    )
    pairs = np.array([np.concatenate([a, b]) for a in atoms for b in atoms])
    sample = nbody_sampler(np.zeros(1), [pairs], 2)(state)
    assert sample.husimi[0].shape == (6 ** 4, 4)
    value, exact = _marginal_lhs(pairs, np.full(4, 0.25), sample.husimi, 2)
    assert exact
    assert value >= 0.0


def test_only_separable_couplings_propagate(grid):
    blocks = np.eye(grid.n_x)[None] / grid.n_x
    q = CouplingField(grid, HBAR, np.zeros((1, 2)), np.ones(1), blocks=blocks)
    with pytest.raises(IncompatibleInputsError):
        propagate_coupling_hartree(q, None, None, None, [0.0])


def test_toeplitz_lift_follows_the_flows(grid, three_atoms, cosine):
    times = [0.0, 0.1, 0.2]
    f_traj = propagate_vlasov(three_atoms, cosine, 0.01, 0.2, times)
    R_traj = propagate_hartree(toeplitz_quantize(three_atoms, HBAR, grid), cosine, 0.01, 0.2, times)
    measure, _ = DiscreteMeasure.from_phase_density(three_atoms)
    _, plan = mk2_squared(measure, measure)
    Q0 = toeplitz_lift_coupling(plan, HBAR, grid)

    traj = propagate_coupling_hartree(Q0, f_traj, R_traj, cosine, times)
    energies = moment_functional(traj)
    assert traj.times.tolist() == pytest.approx(times)
    assert energies[0] == pytest.approx(0.5 * HBAR, rel=1e-6)
    assert np.all(energies <= np.exp(lambda_constant(cosine) * traj.times) * energies[0] * 1.05)
    assert traj.classical_drift.max() <= 5e-6
    assert traj.quantum_drift.max() <= 5e-6


# ── non-commutative Cauchy-Schwarz ───────────────────────────────────


def test_nccs_random_trials(rng):
    violations, worst = random_nccs_trials(rng, n_trials=200, dim=4)
    assert violations == 0
    assert worst >= -1e-12


def test_nccs_equal_operators_give_zero_gap(rng):
    H = rng.normal(size=(3, 3))
    H = H + H.T
    R = np.eye(3) / 3
    gap, _ = nccs_gap(R, H, H)
    assert gap == pytest.approx(0.0, abs=1e-12)
    assert nccs_check(R, H, H)


def test_nccs_anticommuting_pair():
    X = np.array([[0.0, 1.0], [1.0, 0.0]])
    Z = np.diag([1.0, -1.0])
    gap, _ = nccs_gap(np.eye(2) / 2, X, Z)
    assert gap == pytest.approx(2.0)
    with pytest.raises(IncompatibleInputsError):
        nccs_gap(np.eye(3) / 3, X, Z)


# ── one-body bounds ──────────────────────────────────────────────────


def test_thv_with_matched_symbol(grid, phase_grid, rng, cosine):
    f_in = PhaseDensity.sample_gaussian(phase_grid, (0.0, 0.0), (0.4, 0.4), 16, rng)
    R_in = toeplitz_quantize(f_in, HBAR, grid)
    report = verify_thv(f_in, R_in, cosine, 0.2, 3, 0.01, symbol=f_in)
    assert report.tag == "T-HV"
    assert report.times == pytest.approx([0.0, 0.1, 0.2])
    assert all(report.checks.values()), report.checks
    # Töplitz lift of the matched plan costs exactly hbar/2
    assert report.series["energy_functional"][0] == pytest.approx(0.5 * HBAR, rel=1e-6)
    assert report.rhs[0] == pytest.approx(HBAR, rel=1e-6)
    assert max(report.series["classical_drift"]) <= 1e-10
    assert max(report.series["quantum_drift"]) <= 1e-8
    for lhs, rhs in zip(report.lhs, report.rhs):
        assert lhs <= rhs * 1.05


def test_thv_with_trivial_coupling(grid, phase_grid, rng, cosine):
    f_in = PhaseDensity.sample_gaussian(phase_grid, (0.0, 0.0), (0.4, 0.4), 12, rng)
    R_in = toeplitz_quantize(PhaseDensity.point_mass(phase_grid, (0.2, 0.1)), HBAR, grid)
    report = verify_thv(f_in, R_in, cosine, 0.1, 2, 0.01)
    assert "trivial" in report.notes[0]
    assert report.constants["Lambda"] == pytest.approx(5.0)
    assert report.passed, report.summary_line()


def test_dobrushin_starts_tight(phase_grid, rng, cosine):
    f_in = PhaseDensity.sample_gaussian(phase_grid, (0.0, 0.0), (0.5, 0.5), 20, rng)
    g_in = PhaseDensity.sample_gaussian(phase_grid, (0.5, 0.0), (0.5, 0.5), 20, rng)
    report = verify_dobrushin(f_in, g_in, cosine, 0.5, 6, 0.01)
    assert report.tag == "DOBRUSHIN"
    assert report.lhs[0] == pytest.approx(report.rhs[0])
    assert report.passed, report.summary_line()


# ── N-body bounds ────────────────────────────────────────────────────


def test_tnsv_two_bodies(grid, three_atoms, cosine):
    report = verify_tnsv(three_atoms, 2, 1, cosine, 0.2, 3, 0.01, HBAR, grid, symbol=three_atoms)
    assert report.tag == "T-NSV"
    assert report.n_bodies == 2 and report.n_marginal == 1
    assert report.series["consistency_term"][0] == pytest.approx(0.0)
    for name in ("exchange_reduction", "coupling_symmetry", "norm_conservation"):
        assert report.checks[name], name
    assert max(report.series["quantum_drift"]) <= 1e-8


def test_tsl_two_bodies(grid, three_atoms, cosine):
    report = verify_tsl(three_atoms, 2, 1, cosine, 0.2, 3, 0.01, HBAR, grid, symbol=three_atoms)
    assert report.tag == "T-SL"
    assert len(report.series["liouville_hamiltonian"]) == 3
    for name in ("exchange_reduction", "coupling_symmetry", "norm_conservation"):
        assert report.checks[name], name
    assert max(report.series["classical_drift"]) <= 1e-10


def test_marginal_order_must_fit(grid, three_atoms, cosine):
    with pytest.raises(MarginalRangeError):
        verify_tnsv(three_atoms, 2, 3, cosine, 0.2, 3, 0.01, HBAR, grid)
    with pytest.raises(MarginalRangeError):
        verify_tsl(three_atoms, 2, 0, cosine, 0.2, 3, 0.01, HBAR, grid)
