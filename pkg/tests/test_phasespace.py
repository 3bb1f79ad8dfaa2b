import numpy as np
import pytest

from app.core.exceptions import (
    BoundaryViolationError,
    DensityNotNormalizedError,
    InvalidGridError,
    MarginalRangeError,
    PathRangeError,
    PotentialHypothesisError,
    StepSizeError,
)
from app.services.phasespace import (
    ClassicalEnsembleN,
    ParticleCloud,
    PhaseDensity,
    PhaseGrid,
    Potential,
    characteristic_flow,
    check_boundary,
    check_step,
    deposit,
    gamma_constant,
    lambda_constant,
    liouville_step,
    make_potential,
    marginal_classical,
    mean_field_force,
    moment_envelope,
    propagate_vlasov,
    second_moment,
    vlasov_step,
)


def _gaussian(phase_grid, rng, n=64, center=(0.0, 0.0), sigma=(0.5, 0.5)):
    return PhaseDensity.sample_gaussian(phase_grid, center, sigma, n, rng)


# ── grids and densities ──────────────────────────────────────────────


def test_grid_rejects_empty_box():
    with pytest.raises(InvalidGridError):
        PhaseGrid(1.0, 1.0, 8, -1.0, 1.0, 8)
    with pytest.raises(InvalidGridError):
        PhaseGrid(-1.0, 1.0, 1, -1.0, 1.0, 8)
    with pytest.raises(InvalidGridError):
        PhaseGrid(-1.0, 1.0, 8, -1.0, 1.0, 8, d=2)


def test_locate_clips_into_grid():
    grid = PhaseGrid(0.0, 4.0, 4, 0.0, 2.0, 2)
    i, j = grid.locate(np.array([[0.5, 0.5], [3.9, 1.9], [-10.0, 10.0]]))
    assert i.tolist() == [0, 3, 0]
    assert j.tolist() == [0, 1, 1]


def test_deposit_conserves_mass(phase_grid, rng):
    n = 500
    cloud = ParticleCloud(
        x=rng.uniform(-7.0, 7.0, n),  # some particles fall outside the box
        xi=rng.normal(0.0, 2.0, n),
        w=rng.dirichlet(np.ones(n)),
    )
    weights = deposit(phase_grid, cloud)
    assert weights.min() >= 0.0
    assert weights.sum() == pytest.approx(1.0, abs=1e-12)


def test_from_weights_normalises(phase_grid):
    p = PhaseDensity.from_weights(phase_grid, 3.0 * np.ones(phase_grid.shape))
    assert p.is_normalized()
    with pytest.raises(DensityNotNormalizedError):
        PhaseDensity.from_weights(phase_grid, np.zeros(phase_grid.shape))


def test_point_mass_has_one_atom(phase_grid):
    p = PhaseDensity.point_mass(phase_grid, (0.3, -0.2))
    points, masses = p.atoms()
    assert points.tolist() == [[0.3, -0.2]]
    assert masses.tolist() == [1.0]
    assert p.total_mass == pytest.approx(1.0, abs=1e-12)


def test_gaussian_grid_second_moment(phase_grid):
    p = PhaseDensity.gaussian_grid(phase_grid, (0.0, 0.0), (0.5, 0.8))
    # 1/2 (sigma_x^2 + sigma_xi^2) up to midpoint-rule error
    assert second_moment(p) == pytest.approx(0.5 * (0.25 + 0.64), rel=0.05)


def test_representation_gap_small_for_dense_cloud(phase_grid, rng):
    p = _gaussian(phase_grid, rng, n=2000)
    gap = p.representation_gap()
    assert gap["mass"] < 1e-12
    # truncated stencils shift each particle by a small fraction of a cell
    assert gap["mean_x"] < 0.2 * phase_grid.h_x
    assert gap["mean_xi"] < 0.2 * phase_grid.h_xi


def test_check_boundary_flags_mass_near_edge(phase_grid):
    inside = PhaseDensity.point_mass(phase_grid, (0.0, 0.0))
    assert check_boundary(inside) == 0.0
    edge = PhaseDensity.point_mass(phase_grid, (phase_grid.x_max - 0.05, 0.0))
    with pytest.raises(BoundaryViolationError):
        check_boundary(edge)


# ── potentials and constants ─────────────────────────────────────────


@pytest.mark.parametrize("tag", ["cosine", "gaussian-bump", "zero"])
def test_shipped_potentials_satisfy_hypotheses(tag, rng):
    assert make_potential(tag).check_hypotheses(rng)


def test_unknown_potential_rejected():
    with pytest.raises(PotentialHypothesisError):
        make_potential("coulomb")


def test_odd_potential_rejected(rng):
    odd = Potential(
        tag="odd", value=np.sin, gradient=np.cos, sup_V=1.0, sup_gradV=1.0, lipschitz_gradV=1.0,
    )
    with pytest.raises(PotentialHypothesisError):
        odd.check_hypotheses(rng)


def test_understated_lipschitz_constant_rejected(rng):
    base = make_potential("cosine", wavenumber=2.0)
    wrong = Potential(
        tag="cosine-wrong", value=base.value, gradient=base.gradient,
        sup_V=base.sup_V, sup_gradV=base.sup_gradV, lipschitz_gradV=1.0,
    )
    with pytest.raises(PotentialHypothesisError):
        wrong.check_hypotheses(rng)


def test_gronwall_constants(cosine, free):
    assert lambda_constant(cosine) == pytest.approx(5.0)
    assert gamma_constant(cosine) == pytest.approx(6.0)
    assert lambda_constant(free) == pytest.approx(2.0)
    assert gamma_constant(free) == pytest.approx(3.0)
    steep = make_potential("cosine", wavenumber=2.0)  # L = 4
    assert lambda_constant(steep) == pytest.approx(65.0)
    assert gamma_constant(steep) == pytest.approx(66.0)


def test_check_step_limits_dt(cosine):
    check_step(0.01, cosine)
    with pytest.raises(StepSizeError):
        check_step(0.02, cosine)
    with pytest.raises(StepSizeError):
        check_step(0.0, cosine)
    with pytest.raises(StepSizeError):
        check_step(0.005, make_potential("cosine", wavenumber=2.0))


# ── Vlasov and characteristics ───────────────────────────────────────


def test_mean_field_force_of_point_masses(phase_grid, cosine):
    single = PhaseDensity.from_atoms(phase_grid, np.array([[0.5, 0.0]]), np.ones(1))
    assert mean_field_force(single, cosine, 1.2) == pytest.approx(float(cosine.grad(0.7)))

    pair = PhaseDensity.from_atoms(phase_grid, np.array([[-0.8, 0.3], [0.8, -0.3]]), np.array([0.5, 0.5]))
    force = mean_field_force(pair, cosine, np.array([0.0, 0.4]))
    # grad V is odd, so symmetric sources cancel at the origin
    assert force.shape == (2,)
    assert force[0] == pytest.approx(0.0, abs=1e-14)
    assert force[1] == pytest.approx(0.5 * float(cosine.grad(1.2) + cosine.grad(-0.4)))


def test_free_streaming_is_exact(phase_grid, rng, free):
    p = _gaussian(phase_grid, rng)
    traj = propagate_vlasov(p, free, 0.01, 1.0, [0.0, 1.0])
    start, end = traj.densities[0].particles, traj.densities[-1].particles
    assert np.allclose(end.xi, start.xi, atol=1e-14)
    assert np.allclose(end.x, start.x + start.xi, atol=1e-12)


def test_vlasov_step_preserves_mass(phase_grid, rng, cosine):
    p = _gaussian(phase_grid, rng)
    q = vlasov_step(p, cosine, 0.01)
    assert q.total_mass == pytest.approx(1.0, abs=1e-12)
    assert q.particles.total_mass == pytest.approx(1.0, abs=1e-12)


def test_verlet_energy_drift_small(phase_grid, rng, cosine):
    traj = propagate_vlasov(_gaussian(phase_grid, rng), cosine, 0.01, 1.0)
    drift = np.abs(traj.energies - traj.energies[0]).max() / abs(traj.energies[0])
    assert drift < 1e-3


def test_yoshida_energy_drift_below_acceptance(phase_grid, rng, cosine):
    traj = propagate_vlasov(_gaussian(phase_grid, rng), cosine, 0.01, 1.0, integrator="yoshida4")
    drift = np.abs(traj.energies - traj.energies[0]).max() / abs(traj.energies[0])
    assert drift < 1e-6


def test_second_moment_stays_under_envelope(phase_grid, rng, cosine):
    traj = propagate_vlasov(_gaussian(phase_grid, rng), cosine, 0.01, 1.0)
    envelope = moment_envelope(traj.second_moments[0], cosine, traj.times)
    assert np.all(traj.second_moments <= envelope)


def test_sample_times_snap_to_step_grid(phase_grid, rng, cosine):
    traj = propagate_vlasov(_gaussian(phase_grid, rng), cosine, 0.01, 0.5, [0.0, 0.123, 0.5])
    assert np.allclose(traj.times, [0.0, 0.12, 0.5])
    assert len(traj.densities) == 3


def test_characteristic_flow_replays_stored_particles(phase_grid, rng, cosine):
    p = _gaussian(phase_grid, rng)
    traj = propagate_vlasov(p, cosine, 0.01, 0.5, [0.0, 0.5])
    flowed = characteristic_flow(p.particles.points, 0.0, 0.5, traj.path, cosine)
    assert np.allclose(flowed, traj.densities[-1].particles.points, atol=1e-10)


def test_characteristic_flow_is_reversible(phase_grid, rng, cosine):
    p = _gaussian(phase_grid, rng)
    traj = propagate_vlasov(p, cosine, 0.01, 0.5, [0.0, 0.5])
    z0 = np.array([[0.3, -0.4], [-1.0, 0.7]])
    forward = characteristic_flow(z0, 0.0, 0.5, traj.path, cosine)
    back = characteristic_flow(forward, 0.5, 0.0, traj.path, cosine)
    assert np.allclose(back, z0, atol=1e-10)
    # a single point keeps its shape
    assert characteristic_flow(z0[0], 0.0, 0.5, traj.path, cosine).shape == (2,)


def test_characteristic_flow_outside_path(phase_grid, rng, cosine):
    traj = propagate_vlasov(_gaussian(phase_grid, rng), cosine, 0.01, 0.2)
    with pytest.raises(PathRangeError):
        characteristic_flow([0.0, 0.0], 0.0, 0.5, traj.path, cosine)


# ── N-body Liouville ─────────────────────────────────────────────────


def test_product_ensemble_marginal_matches_factor(phase_grid, rng):
    p = _gaussian(phase_grid, rng, n=6)
    ensemble = ClassicalEnsembleN.product(p, 2)
    assert ensemble.n_samples == 36
    assert ensemble.weights.sum() == pytest.approx(1.0, abs=1e-12)
    marginal = marginal_classical(ensemble, 1)
    order = np.argsort(p.particles.x)
    assert np.allclose(np.sort(marginal.positions[:, 0]), p.particles.x[order])
    assert np.allclose(marginal.weights, p.particles.w[order])


def test_marginal_order_range(phase_grid, rng):
    ensemble = ClassicalEnsembleN.product(_gaussian(phase_grid, rng, n=3), 2)
    with pytest.raises(MarginalRangeError):
        marginal_classical(ensemble, 3)


def test_build_symmetrises_samples():
    e = ClassicalEnsembleN.build([[0.0, 1.0]], [[0.5, -0.5]], [1.0])
    assert e.n_samples == 2
    swapped = e.permuted([1, 0])
    assert sorted(map(tuple, swapped.points)) == sorted(map(tuple, e.points))


def test_one_body_liouville_is_free_streaming(phase_grid, rng, cosine):
    # the self term grad V(0) vanishes for an even potential
    e = ClassicalEnsembleN.product(_gaussian(phase_grid, rng, n=8), 1)
    out = liouville_step(e, cosine, 0.01)
    assert np.allclose(out.positions, e.positions + 0.01 * e.momenta, atol=1e-14)
    assert np.allclose(out.momenta, e.momenta, atol=1e-14)


def test_liouville_energy_conserved(phase_grid, rng, cosine):
    e = ClassicalEnsembleN.product(_gaussian(phase_grid, rng, n=6), 2)
    h0 = float(e.weights @ e.hamiltonian(cosine))
    for _ in range(100):
        e = liouville_step(e, cosine, 0.01, integrator="yoshida4")
    h1 = float(e.weights @ e.hamiltonian(cosine))
    assert abs(h1 - h0) / abs(h0) < 1e-6


@pytest.mark.parametrize("sigma", [(1, 0, 2), (2, 0, 1), (2, 1, 0)])
def test_liouville_flow_commutes_with_relabeling(rng, cosine, sigma):
    e = ClassicalEnsembleN.build(
        rng.normal(size=(4, 3)), rng.normal(size=(4, 3)), np.full(4, 0.25), symmetrize=False
    )
    moved = liouville_step(e.permuted(sigma), cosine, 0.01, integrator="yoshida4")
    expected = liouville_step(e, cosine, 0.01, integrator="yoshida4").permuted(sigma)
    assert np.allclose(moved.points, expected.points, atol=1e-13)
    assert np.array_equal(moved.weights, expected.weights)


@pytest.mark.parametrize("n", [1, 2])
def test_marginals_ignore_relabeling(rng, n):
    e = ClassicalEnsembleN.build(rng.normal(size=(3, 3)), rng.normal(size=(3, 3)), np.full(3, 1.0 / 3))
    base = marginal_classical(e, n)
    for sigma in [(1, 0, 2), (2, 0, 1), (1, 2, 0)]:
        relabeled = marginal_classical(e.permuted(sigma), n)
        assert np.allclose(relabeled.points, base.points)
        assert np.allclose(relabeled.weights, base.weights)
