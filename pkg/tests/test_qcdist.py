import numpy as np
import pytest

from app.core.exceptions import IncompatibleInputsError, MemoryBudgetError, NoFeasibleCouplingError
from app.services.hilbert import DensityOperator, SpaceGrid, coherent_columns, husimi_values, toeplitz_quantize
from app.services.phasespace import PhaseDensity, PhaseGrid
from app.services.qcdist import (
    CouplingField,
    cost_field,
    ehbar_exact_tiny,
    ehbar_lower,
    ehbar_upper,
    toeplitz_interval,
    toeplitz_lift_coupling,
    trivial_coupling,
)
from app.services.transport import DiscreteMeasure, mk2_squared

HBAR = 0.5


@pytest.fixture
def grid():
    # coherent states fit for |x| < 2 and |xi| < 0.6 at hbar = 0.5
    return SpaceGrid(-6.0, 6.0, 32)


@pytest.fixture
def cells():
    return PhaseGrid(-1.5, 1.5, 6, -1.5, 1.5, 6)


def _mixture(grid, points, weights):
    cols = coherent_columns(np.asarray(points, dtype=float), HBAR, grid, normalize=True)
    return DensityOperator.from_mixture(grid, HBAR, np.asarray(weights, dtype=float), cols)


def _near_husimi(R, cells, rng):
    """Classical density close to the Husimi function of R on the tiny cell grid"""
    hus = husimi_values(R, cells.centers()).reshape(cells.shape)
    return PhaseDensity.from_weights(cells, hus * (1 + 0.3 * rng.uniform(-1, 1, cells.shape)))


# ── cost operator ────────────────────────────────────────────────────


def test_cost_operator_floor():
    grid = SpaceGrid(-2 * np.pi, 2 * np.pi, 64)
    nodes = np.array([(0.0, 0.0), (1.0, 0.5), (-1.0, -0.5)])
    energies = cost_field(grid, HBAR, nodes).ground_energies()
    assert np.allclose(energies, 0.5 * HBAR, rtol=1e-3)


def test_cost_operator_at_matches_nodes(grid):
    nodes = np.array([(0.2, -0.1), (1.0, 0.3)])
    field = cost_field(grid, HBAR, nodes)
    assert np.allclose(field.at(nodes[1]), field.matrix(1))
    assert np.allclose(field.matrix(0), field.matrix(0).conj().T)


def test_cost_on_coherent_state(grid):
    # tr(c(z) |w><w|) = |z - w|^2 / 2 + hbar / 2
    w = (0.3, 0.2)
    R = _mixture(grid, [w], [1.0])
    z = np.array([[1.3, -0.4]])
    value = np.real(np.trace(cost_field(grid, HBAR, z).matrix(0) @ R.matrix))
    assert value == pytest.approx(0.5 * (1.0 + 0.36) + 0.5 * HBAR, rel=1e-6)


# ── couplings ────────────────────────────────────────────────────────


def test_trivial_coupling_is_a_coupling(grid, cells, rng):
    R = _mixture(grid, [(0.0, 0.0), (0.5, 0.3)], [0.7, 0.3])
    p = _near_husimi(R, cells, rng)
    q = trivial_coupling(p, R)
    assert q.check_marginals(R).ok(1e-8, 1e-7)
    field = cost_field(grid, HBAR, q.nodes)
    direct = sum(m * np.real(np.trace(field.matrix(k) @ R.matrix)) for k, m in enumerate(q.masses))
    assert q.objective() == pytest.approx(direct, rel=1e-10)


def test_trivial_coupling_of_dense_operator(grid, cells, rng):
    R = _mixture(grid, [(0.0, 0.0), (0.5, 0.3)], [0.7, 0.3])
    dense = DensityOperator.from_matrix(grid, HBAR, R.matrix)
    p = _near_husimi(R, cells, rng)
    assert trivial_coupling(p, dense).objective() == pytest.approx(trivial_coupling(p, R).objective(), rel=1e-8)


def test_toeplitz_lift_objective(grid, cells, rng):
    mu = PhaseDensity.from_atoms(cells, np.array([[0.0, 0.0], [0.8, -0.3]]), np.array([0.4, 0.6]))
    R = toeplitz_quantize(mu, HBAR, grid)
    p = _near_husimi(R, cells, rng)
    a, _ = DiscreteMeasure.from_phase_density(p)
    b, _ = DiscreteMeasure.from_phase_density(mu)
    cost, plan = mk2_squared(a, b)
    q = toeplitz_lift_coupling(plan, HBAR, grid)
    assert q.separable
    assert q.check_marginals(R).ok(1e-8, 1e-7)
    assert q.objective() == pytest.approx(cost + 0.5 * HBAR, rel=1e-6)


def test_block_coupling_objective_matches_separable(grid, cells, rng):
    R = _mixture(grid, [(0.0, 0.0), (0.5, 0.3)], [0.7, 0.3])
    q = trivial_coupling(_near_husimi(R, cells, rng), R)
    blocks = np.stack([q.block(k) for k in range(q.n_nodes)])
    dense = CouplingField(grid, HBAR, q.nodes, q.masses, blocks=blocks)
    assert dense.objective() == pytest.approx(q.objective(), rel=1e-10)
    assert not dense.separable


# ── bounds ───────────────────────────────────────────────────────────


def test_upper_bound_takes_best_candidate(grid, cells, rng):
    mu = PhaseDensity.from_atoms(cells, np.array([[0.0, 0.0], [0.8, -0.3]]), np.array([0.4, 0.6]))
    R = toeplitz_quantize(mu, HBAR, grid)
    p = _near_husimi(R, cells, rng)
    upper = ehbar_upper(p, R, symbol=mu)
    assert set(upper.candidates) == {"trivial", "toeplitz-lift"}
    assert upper.value == pytest.approx(min(upper.candidates.values()))
    assert upper.strategy in upper.candidates


def test_upper_bound_needs_a_strategy(grid, cells, rng):
    R = _mixture(grid, [(0.0, 0.0)], [1.0])
    with pytest.raises(NoFeasibleCouplingError):
        ehbar_upper(_near_husimi(R, cells, rng), R, strategies=())


def test_lower_bound_floor(grid, cells, rng):
    R = _mixture(grid, [(0.0, 0.0), (0.5, 0.3)], [0.7, 0.3])
    lower = ehbar_lower(_near_husimi(R, cells, rng), R)
    assert lower.value >= 0.5 * HBAR
    assert lower.exact_transport
    assert lower.husimi_mass_defect <= 1e-4


def test_sandwich_on_tiny_instance(grid, cells, rng):
    R = _mixture(grid, [(0.0, 0.0), (0.6, 0.2)], [0.5, 0.5])
    mu = PhaseDensity.from_atoms(cells, np.array([[0.0, 0.0], [0.6, 0.2]]), np.array([0.5, 0.5]))
    p = _near_husimi(R, cells, rng)
    lower = ehbar_lower(p, R).value
    exact = ehbar_exact_tiny(p, R)
    upper = ehbar_upper(p, R, symbol=mu).value
    assert lower <= exact.value * (1 + 1e-3)
    assert exact.value <= upper * (1 + 1e-5)
    assert exact.coupling.check_marginals(R).ok(1e-4, 1e-4, psd_tol=1e-6)


def test_single_atom_is_fully_constrained(grid, cells):
    R = _mixture(grid, [(0.0, 0.0), (0.6, 0.2), (-0.4, -0.3)], [0.2, 0.3, 0.5])
    z = (0.2, -0.1)
    result = ehbar_exact_tiny(PhaseDensity.point_mass(cells, z), R)
    direct = np.real(np.trace(cost_field(grid, HBAR, np.array([z])).matrix(0) @ R.matrix))
    assert result.converged
    assert result.value == pytest.approx(direct, abs=1e-8)


def test_cell_relabeling_permutes_the_optimum(grid):
    R = _mixture(grid, [(0.0, 0.0), (0.6, 0.2)], [0.6, 0.4])
    points = np.array([[0.0, 0.0], [0.6, 0.2], [-0.4, 0.1]])
    masses = np.array([0.5, 0.3, 0.2])
    order = [2, 0, 1]
    base = ehbar_exact_tiny(DiscreteMeasure(points, masses), R)
    relabeled = ehbar_exact_tiny(DiscreteMeasure(points[order], masses[order]), R)
    assert relabeled.converged == base.converged
    assert relabeled.value == pytest.approx(base.value, rel=1e-5)
    assert np.allclose(relabeled.coupling.nodes, base.coupling.nodes[order])
    for k, j in enumerate(order):
        assert np.allclose(relabeled.coupling.block(k), base.coupling.block(j), atol=1e-4)


def test_unconverged_solve_reports_a_feasible_upper_bound(grid, cells, rng):
    R = _mixture(grid, [(0.0, 0.0), (0.6, 0.2)], [0.5, 0.5])
    mu = PhaseDensity.from_atoms(cells, np.array([[0.0, 0.0], [0.6, 0.2]]), np.array([0.5, 0.5]))
    p = _near_husimi(R, cells, rng)
    result = ehbar_exact_tiny(p, R, max_iter=3, symbol=mu)
    assert not result.converged
    assert "not-converged" in result.flags
    assert result.iterations == 3
    assert result.value <= trivial_coupling(p, R).objective() * (1 + 1e-12)
    assert result.coupling.check_marginals(R).ok(1e-6, 1e-6, psd_tol=1e-9)
    assert result.value >= ehbar_lower(p, R).value * (1 - 1e-3)


def test_tiny_solver_limits(grid, cells):
    R = _mixture(grid, [(0.0, 0.0)], [1.0])
    many_cells = PhaseDensity.gaussian_grid(PhaseGrid(-1.5, 1.5, 10, -1.5, 1.5, 10), (0.0, 0.0), (1.0, 1.0))
    with pytest.raises(MemoryBudgetError):
        ehbar_exact_tiny(many_cells, R)

    wide = DensityOperator.from_matrix(grid, HBAR, np.eye(grid.n_x) / grid.n_x)
    with pytest.raises(MemoryBudgetError):
        ehbar_exact_tiny(PhaseDensity.point_mass(cells, (0.0, 0.0)), wide)


def test_toeplitz_interval_orders(grid, cells, rng):
    mu = PhaseDensity.from_atoms(cells, np.array([[0.0, 0.0], [0.8, -0.3]]), np.array([0.4, 0.6]))
    R = toeplitz_quantize(mu, HBAR, grid)
    p = _near_husimi(R, cells, rng)
    lower, upper = toeplitz_interval(p, mu, HBAR, grid)
    assert 0.5 * HBAR <= lower <= upper * (1 + 1e-2)
    with pytest.raises(IncompatibleInputsError):
        toeplitz_interval(p, DiscreteMeasure.from_phase_density(mu)[0], HBAR, grid)
