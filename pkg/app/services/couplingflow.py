"""
Coupled Classical-Quantum Dynamics

Propagates couplings along the exact solution formula
Q(t, z) = M(t) Q_in(Z(0, t, z)) M(t)* and verifies the Gronwall estimates.

The coupling is Lagrangian: each node (a classical atom) carries a PSD
payload sum_j G_kj |phi_j><phi_j|. Nodes move with the characteristic flow
(one-body and tensorised routes) or with the N-body Liouville flow; payload
vectors move with the quantum propagator. Marginals are rechecked at every
sample and a drift beyond COUPLING_DRIFT_TOL aborts the run.

Verifications
1. verify_thv: Hartree vs Vlasov, rate Lambda = 1 + max(1, 4L^2).
2. verify_tnsv: N-body Schrödinger vs Vlasov, rate Gamma = 2 + max(4L^2, 1)
   plus the consistency term 4|grad V|^2 (e^{Gamma t} - 1) / ((N - 1) Gamma).
3. verify_tsl: N-body Schrödinger vs N-body Liouville, rate Lambda.
4. verify_dobrushin: two Vlasov solutions, rate Lambda.
"""

import itertools
import logging
from dataclasses import dataclass
from functools import reduce
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.core.config import settings
from app.core.exceptions import CouplingDriftError, IncompatibleInputsError, MarginalRangeError
from app.schemas.report import BoundReport
from app.services.hilbert import (
    DensityOperator,
    SpaceGrid,
    coherent_columns,
    husimi_nbody,
    husimi_with_audit,
)
from app.services.phasespace import (
    ClassicalEnsembleN,
    ParticleCloud,
    PhaseDensity,
    PhaseGrid,
    Potential,
    VlasovTrajectory,
    characteristic_flow,
    check_step,
    deposit,
    gamma_constant,
    lambda_constant,
    liouville_step,
    marginal_classical,
    moment_envelope,
    propagate_vlasov,
)
from app.services.qcdist import CouplingField, ehbar_upper, toeplitz_lift_coupling
from app.services.qdynamics import (
    HartreeTrajectory,
    NBodyState,
    NBodyTrajectory,
    apply_frozen_path,
    marginal_operator,
    propagate_hartree,
    propagate_nbody,
)
from app.services.transport import DiscreteMeasure, ProductMeasure, mk2_squared, tensor_mk2_bound

logger = logging.getLogger(__name__)

# Grid error allowed below the hbar/2 floor of the moment functional
FLOOR_SLACK = 0.02


def consistency_term(n_bodies: int, V: Potential, gamma: float, t) -> np.ndarray:
    """4 |grad V|_inf^2 / (N - 1) * (e^{gamma t} - 1) / gamma"""
    if n_bodies < 2:
        raise MarginalRangeError("The consistency term needs N >= 2")
    t = np.asarray(t, dtype=float)
    return 4.0 * V.sup_gradV ** 2 / (n_bodies - 1) * np.expm1(gamma * t) / gamma


def husimi_grid_for(points: np.ndarray, hbar: float, n_marginal: int = 1, refine: float = 1.0) -> PhaseGrid:
    """Covering grid of the atoms, padded by 8 sqrt(hbar).

    Without refinement the n-fold product of cells fits
    EXACT_TRANSPORT_MAX_SUPPORT. One body: 44 x 44, scaled freely by `refine`.
    n >= 2 bodies: `refine` may coarsen the grid but never enlarges it.
    """
    limit = settings.EXACT_TRANSPORT_MAX_SUPPORT
    cap = int(limit ** (1.0 / (2 * n_marginal)) + 1e-9)
    while cap > 1 and cap ** (2 * n_marginal) > limit:
        cap -= 1
    if n_marginal == 1:
        cells = int(round(min(cap, 44) * refine))
    else:
        cells = max(1, min(int(round(cap * refine)), cap))
    return PhaseGrid.covering(np.reshape(points, (-1, 2)), 8.0 * np.sqrt(hbar), cells, cells)


def _sample_times(t_final: float, samples: int, dt: float) -> np.ndarray:
    """`samples` equally spaced times, snapped to the step grid"""
    raw = np.linspace(0.0, t_final, samples)
    return np.unique(np.rint(raw / dt)) * dt


def _classical_drift(nodes: np.ndarray, masses: np.ndarray, f: PhaseDensity) -> float:
    cloud = ParticleCloud(x=nodes[:, 0].copy(), xi=nodes[:, 1].copy(), w=masses)
    return float(np.abs(deposit(f.grid, cloud) - f.weights).max())


# ─────────────────────────────────────────────────────────────────────
# One-body coupled flow
# ─────────────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class CoupledTrajectory:
    times: np.ndarray
    couplings: Tuple[CouplingField, ...]
    energies: np.ndarray
    classical_drift: np.ndarray
    quantum_drift: np.ndarray


def propagate_coupling_hartree(
    Q0: CouplingField,
    f_traj: VlasovTrajectory,
    R_traj: HartreeTrajectory,
    V: Potential,
    t_grid: Sequence[float],
) -> CoupledTrajectory:
    """Push Q0 along the stored Vlasov and Hartree paths, checking marginals at each t"""
    if not Q0.separable:
        raise IncompatibleInputsError("Only separable couplings can be propagated")
    times = np.sort(np.asarray(t_grid, dtype=float))
    grid, hbar = Q0.grid, Q0.hbar
    nodes, vectors, t_prev = Q0.nodes, Q0.vectors, 0.0
    couplings, energies, c_drift, q_drift = [], [], [], []
    for t in times:
        nodes = characteristic_flow(nodes, t_prev, t, f_traj.path, V)
        vectors = apply_frozen_path(vectors, R_traj, grid, hbar, t, t_start=t_prev)
        t_prev = t
        q = Q0.moved(nodes, vectors)
        R_t = R_traj.at(t)
        drift_c = _classical_drift(nodes, Q0.masses, f_traj.at(t))
        drift_q = float(np.linalg.norm(q.total() - R_t.matrix, ord=2))
        if max(drift_c, drift_q) > settings.COUPLING_DRIFT_TOL:
            raise CouplingDriftError(
                f"Coupling left C(f(t), R(t)) at t={t:.4f}: classical {drift_c:.3e}, quantum {drift_q:.3e}"
            )
        couplings.append(q)
        energies.append(q.objective())
        c_drift.append(drift_c)
        q_drift.append(drift_q)
    return CoupledTrajectory(times, tuple(couplings), np.array(energies), np.array(c_drift), np.array(q_drift))


def moment_functional(traj) -> np.ndarray:
    """E(t) for one-body trajectories, D(t) for N-body ones"""
    if isinstance(traj, NBodyCoupledTrajectory):
        return traj.d_full
    return traj.energies


def verify_thv(
    f_in: PhaseDensity,
    R_in: DensityOperator,
    V: Potential,
    t_final: float,
    samples: int,
    dt: float,
    symbol: Optional[PhaseDensity] = None,
    report_tol: Optional[float] = None,
    transport_refine: float = 1.0,
) -> BoundReport:
    """MK2^2(f(t), Husimi[R(t)]) <= e^{Lambda t} E(0)^2 + hbar/2.

    The Vlasov run uses Verlet so the characteristic flow replays it exactly.

    With a Töplitz symbol, E(0)^2 <= MK2^2(f_in, mu) + hbar/2 by lifting the
    optimal plan; otherwise the certified upper bound of the trivial coupling.
    """
    report_tol = settings.REPORT_TOL if report_tol is None else report_tol
    hbar = R_in.hbar
    lam = lambda_constant(V)
    times = _sample_times(t_final, samples, dt)
    logger.info(f"T-HV: hbar={hbar}, Lambda={lam}, {times.size} samples to t={t_final}")

    f_traj = propagate_vlasov(f_in, V, dt, t_final, times)
    R_traj = propagate_hartree(R_in, V, dt, t_final, times)

    notes = []
    if symbol is not None:
        f_measure, _ = DiscreteMeasure.from_phase_density(f_in)
        mu_measure, _ = DiscreteMeasure.from_phase_density(symbol)
        _, plan = mk2_squared(f_measure, mu_measure)
        Q0 = toeplitz_lift_coupling(plan, hbar, R_in.grid)
        notes.append(f"E(0)^2 bounded by Töplitz lift: MK2^2(f_in, mu_in) = {plan.cost:.6e}")
    else:
        upper = ehbar_upper(f_in, R_in, strategies=("trivial",))
        Q0 = upper.coupling
        notes.append(f"E(0)^2 bounded by the {upper.strategy} coupling (upper bound, not exact)")

    coupled = propagate_coupling_hartree(Q0, f_traj, R_traj, V, times)
    e0 = float(coupled.energies[0])

    lhs, defects, exact = [], [], True
    for k, t in enumerate(times):
        f_t = f_traj.densities[k]
        pts, _ = f_t.atoms()
        hus, audit = husimi_with_audit(R_traj.states[k], husimi_grid_for(pts, hbar, refine=transport_refine))
        f_measure, _ = DiscreteMeasure.from_phase_density(f_t)
        hus_measure, _ = DiscreteMeasure.from_phase_density(hus)
        cost, plan = mk2_squared(f_measure, hus_measure)
        exact = exact and plan.exact
        lhs.append(cost)
        defects.append(audit.mass_defect)
    if not exact:
        notes.append("entropic transport fallback used for some samples")

    envelope = np.exp(lam * times) * e0
    rhs = envelope + 0.5 * hbar
    energies = coupled.energies
    checks = {
        "gronwall_energy_functional": bool(np.all(energies <= envelope * (1 + report_tol))),
        "energy_functional_floor": bool(np.all(energies >= 0.5 * hbar * (1 - FLOOR_SLACK))),
        "moment_bound": bool(np.all(
            f_traj.second_moments <= moment_envelope(f_traj.second_moments[0], V, times) * (1 + 1e-12)
        )),
    }
    return BoundReport(
        tag="T-HV",
        hbar=hbar,
        constants={"L": V.lipschitz_gradV, "Lambda": lam, "E0_upper": e0},
        report_tol=report_tol,
        times=times.tolist(),
        lhs=lhs,
        rhs=rhs.tolist(),
        series={
            "energy_functional": energies.tolist(),
            "energy_envelope": envelope.tolist(),
            "classical_drift": coupled.classical_drift.tolist(),
            "quantum_drift": coupled.quantum_drift.tolist(),
            "husimi_mass_defect": defects,
            "vlasov_energy": f_traj.energies.tolist(),
            "hartree_trace": R_traj.traces.tolist(),
        },
        checks=checks,
        notes=notes,
    )


def verify_dobrushin(
    f_in: PhaseDensity,
    g_in: PhaseDensity,
    V: Potential,
    t_final: float,
    samples: int,
    dt: float,
    integrator: str = "verlet",
    report_tol: Optional[float] = None,
) -> BoundReport:
    """MK2^2(f(t), g(t)) <= e^{Lambda t} MK2^2(f_in, g_in) for two Vlasov solutions"""
    report_tol = settings.REPORT_TOL if report_tol is None else report_tol
    lam = lambda_constant(V)
    times = _sample_times(t_final, samples, dt)
    f_traj = propagate_vlasov(f_in, V, dt, t_final, times, integrator=integrator)
    g_traj = propagate_vlasov(g_in, V, dt, t_final, times, integrator=integrator)
    lhs = []
    for f_t, g_t in zip(f_traj.densities, g_traj.densities):
        a, _ = DiscreteMeasure.from_phase_density(f_t)
        b, _ = DiscreteMeasure.from_phase_density(g_t)
        lhs.append(mk2_squared(a, b)[0])
    rhs = np.exp(lam * times) * lhs[0]
    return BoundReport(
        tag="DOBRUSHIN",
        constants={"L": V.lipschitz_gradV, "Lambda": lam},
        report_tol=report_tol,
        times=times.tolist(),
        lhs=lhs,
        rhs=rhs.tolist(),
        series={"f_energy": f_traj.energies.tolist(), "g_energy": g_traj.energies.tolist()},
    )


# ─────────────────────────────────────────────────────────────────────
# N-body coupled flow
# ─────────────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class NBodyCoupledTrajectory:
    times: np.ndarray
    d_full: np.ndarray
    d_marginal: np.ndarray
    symmetry_defect: np.ndarray
    classical_drift: np.ndarray
    quantum_drift: np.ndarray
    marginal_couplings: Tuple[CouplingField, ...]


def body_moments(state: NBodyState) -> np.ndarray:
    """(r, N, 3) array of <X_i>, <P_i>, <(X_i^2 + P_i^2)/2> per component and body"""
    grid, hbar, N = state.grid, state.hbar, state.n_bodies
    amps = state.amplitudes
    x = grid.points
    k = hbar * grid.wavenumbers
    out = np.empty((amps.shape[0], N, 3))
    vol = grid.h ** N
    for i in range(N):
        others = tuple(a for a in range(1, N + 1) if a != i + 1)
        pos = np.sum(np.abs(amps) ** 2, axis=others) * vol
        mom = np.sum(np.abs(np.fft.fft(amps, axis=i + 1)) ** 2, axis=others) * vol / grid.n_x
        out[:, i, 0] = pos @ x
        out[:, i, 1] = mom @ k
        out[:, i, 2] = 0.5 * (pos @ x ** 2 + mom @ k ** 2)
    return out


def _one_body_marginals(state: NBodyState) -> np.ndarray:
    """(r, n_x, n_x) first-body reduced matrices of each component"""
    vecs = state.vectors().T.reshape(state.weights.size, state.grid.n_x, -1)
    return np.einsum("rib,rjb->rij", vecs, vecs.conj())


@dataclass(frozen=True)
class NBodySample:
    """What the coupled N-body checks keep of one sampled state"""
    grid: SpaceGrid
    hbar: float
    moments: np.ndarray  # (r, N, 3)
    one_body: np.ndarray  # (r, n_x, n_x)
    marginal: DensityOperator  # one-body marginal
    husimi: Tuple[np.ndarray, np.ndarray]  # n-body Husimi atoms and masses


def nbody_sampler(
    times: np.ndarray, classical_points: Sequence[np.ndarray], n: int, refine: float = 1.0
) -> Callable[[NBodyState], NBodySample]:
    """Observer for propagate_nbody; sample k uses the Husimi grid covering classical_points[k]"""
    times = np.asarray(times, dtype=float)

    def observe(state: NBodyState) -> NBodySample:
        k = int(np.argmin(np.abs(times - state.t)))
        R_n = marginal_operator(state, n)
        phase_grid = husimi_grid_for(classical_points[k], state.hbar, n, refine)
        return NBodySample(
            grid=state.grid,
            hbar=state.hbar,
            moments=body_moments(state),
            one_body=_one_body_marginals(state),
            marginal=R_n if n == 1 else marginal_operator(state, 1),
            husimi=husimi_nbody(R_n, phase_grid),
        )

    return observe


def _nbody_dissipation(G: np.ndarray, node_points: np.ndarray, moments: np.ndarray) -> np.ndarray:
    """Per-body sum_kj G_kj tr(c_i(z_k,i) |phi_j><phi_j|), node_points (S, N, 2)"""
    N = node_points.shape[1]
    per_body = np.empty(N)
    for i in range(N):
        x, xi = node_points[:, i, 0], node_points[:, i, 1]
        term = (
            moments[None, :, i, 2]
            - x[:, None] * moments[None, :, i, 0]
            - xi[:, None] * moments[None, :, i, 1]
            + 0.5 * (x ** 2 + xi ** 2)[:, None]
        )
        per_body[i] = np.sum(G * term)
    return per_body


def _symmetry_defect(G: np.ndarray, node_index: np.ndarray, moments: np.ndarray) -> float:
    """max |m(sigma.k, i) - m(k, sigma(i))| of the node-resolved payload moments"""
    N = node_index.shape[1]
    m = np.einsum("kj,jic->kic", G, moments)
    lookup = {tuple(row): k for k, row in enumerate(node_index)}
    worst = 0.0
    for sigma in itertools.permutations(range(N)):
        sigma = list(sigma)
        target = np.array([lookup[tuple(row)] for row in node_index[:, sigma]])
        worst = max(worst, float(np.abs(m[target] - m[:, sigma]).max()))
    return worst


def propagate_coupling_nbody(
    plan_nodes: np.ndarray,
    plan_masses: np.ndarray,
    G1: np.ndarray,
    q_traj: NBodyTrajectory,
    node_path,
    classical_marginal,
) -> NBodyCoupledTrajectory:
    """Tensor-product Töplitz-lift coupling pushed by the classical and quantum N-body flows.

    `node_path(k)` returns node coordinates (S, N, 2) at sample k;
    `classical_marginal(k)` the one-body classical marginal at sample k.
    Payload vectors are the components of the N-body state, so the quantum
    marginal is exact by construction and checked at the one-body level.
    `q_traj` must carry NBodySample observations (see nbody_sampler).
    """
    if not q_traj.observations:
        raise IncompatibleInputsError("The N-body run kept no samples; propagate it with nbody_sampler")
    N = q_traj.observations[0].moments.shape[1]
    K = plan_nodes.shape[0]
    node_index = np.array(list(itertools.product(range(K), repeat=N)))
    G = reduce(np.kron, [G1] * N)
    d_full, d_marg, sym, c_drift, q_drift, marginals = [], [], [], [], [], []
    for k, sample in enumerate(q_traj.observations):
        pts = node_path(k)
        moments = sample.moments
        per_body = _nbody_dissipation(G, pts, moments)
        d_full.append(per_body.mean())
        sym.append(_symmetry_defect(G, node_index, moments))

        # one-body marginal coupling: node k carries sum_j G_kj tr_{2..N} |phi_j><phi_j|
        blocks = np.einsum("kj,jxy->kxy", G, sample.one_body)
        q1 = CouplingField(
            grid=sample.grid, hbar=sample.hbar, nodes=pts[:, 0, :], masses=G.sum(axis=1),
            blocks=blocks, label="one-body-marginal",
        )
        d_marg.append(q1.objective())
        check = q1.check_marginals(sample.marginal)
        c_drift.append(_classical_drift(pts[:, 0, :], G.sum(axis=1), classical_marginal(k)))
        q_drift.append(max(check.sum_error, check.trace_error))
        if max(c_drift[-1], q_drift[-1]) > settings.COUPLING_DRIFT_TOL:
            raise CouplingDriftError(
                f"N-body coupling marginal drift at t={q_traj.times[k]:.4f}: "
                f"classical {c_drift[-1]:.3e}, quantum {q_drift[-1]:.3e}"
            )
        marginals.append(q1)
    return NBodyCoupledTrajectory(
        times=q_traj.times,
        d_full=np.array(d_full),
        d_marginal=np.array(d_marg),
        symmetry_defect=np.array(sym),
        classical_drift=np.array(c_drift),
        quantum_drift=np.array(q_drift),
        marginal_couplings=tuple(marginals),
    )


def _product_setup(f_in: PhaseDensity, symbol: Optional[PhaseDensity], n_bodies: int, grid: SpaceGrid, hbar: float, V: Potential):
    """One-body optimal plan, its product lift and the Töplitz N-body initial state"""
    f_measure, _ = DiscreteMeasure.from_phase_density(f_in)
    mu_measure, _ = DiscreteMeasure.from_phase_density(symbol if symbol is not None else f_in)
    one_body_cost, plan = mk2_squared(f_measure, mu_measure)
    cols = coherent_columns(mu_measure.points, hbar, grid, normalize=True)
    jdx = np.array(list(itertools.product(range(mu_measure.size), repeat=n_bodies)))
    weights = np.prod(mu_measure.masses[jdx], axis=1)
    state0 = NBodyState.product_mixture(grid, hbar, weights, [cols[:, jdx[:, i]] for i in range(n_bodies)], V)
    tensor_cost = tensor_mk2_bound(
        ProductMeasure((f_measure,) * n_bodies), ProductMeasure((mu_measure,) * n_bodies)
    )
    return plan, state0, tensor_cost


def _marginal_lhs(points: np.ndarray, masses: np.ndarray, husimi: Tuple[np.ndarray, np.ndarray], n: int) -> Tuple[float, bool]:
    """(1/n) MK2^2(classical n-body marginal, Husimi of the quantum n-body marginal)"""
    hus_pts, hus_w = husimi
    a, _ = DiscreteMeasure.from_atoms(points, masses)
    b, _ = DiscreteMeasure.from_atoms(hus_pts, hus_w)
    cost, plan = mk2_squared(a, b)
    return cost / n, plan.exact


def _nbody_report(
    tag: str,
    times: np.ndarray,
    lhs: List[float],
    rhs: np.ndarray,
    coupled: NBodyCoupledTrajectory,
    q_traj: NBodyTrajectory,
    d_envelope: np.ndarray,
    constants: Dict[str, float],
    hbar: float,
    N: int,
    n: int,
    report_tol: float,
    extra_series: Dict[str, List[float]],
    notes: List[str],
) -> BoundReport:
    checks = {
        "gronwall_dissipation": bool(np.all(coupled.d_full <= d_envelope * (1 + report_tol))),
        "exchange_reduction": bool(np.all(np.abs(coupled.d_full - coupled.d_marginal) <= 1e-8 * max(1.0, coupled.d_full.max()))),
        "coupling_symmetry": bool(np.all(coupled.symmetry_defect <= 1e-8)),
        "norm_conservation": bool(np.all(np.abs(q_traj.norms - 1.0) <= settings.TRACE_TOL * max(1.0, times[-1]))),
    }
    series = {
        "dissipation": coupled.d_full.tolist(),
        "dissipation_marginal": coupled.d_marginal.tolist(),
        "dissipation_envelope": d_envelope.tolist(),
        "symmetry_defect": coupled.symmetry_defect.tolist(),
        "classical_drift": coupled.classical_drift.tolist(),
        "quantum_drift": coupled.quantum_drift.tolist(),
        "nbody_energy": q_traj.energies.tolist(),
        **extra_series,
    }
    return BoundReport(
        tag=tag, hbar=hbar, n_bodies=N, n_marginal=n, constants=constants, report_tol=report_tol,
        times=times.tolist(), lhs=lhs, rhs=rhs.tolist(), series=series, checks=checks, notes=notes,
    )


def verify_tnsv(
    f_in: PhaseDensity,
    n_bodies: int,
    n: int,
    V: Potential,
    t_final: float,
    samples: int,
    dt: float,
    hbar: float,
    grid: SpaceGrid,
    symbol: Optional[PhaseDensity] = None,
    report_tol: Optional[float] = None,
    transport_refine: float = 1.0,
) -> BoundReport:
    """(1/n) MK2^2(f(t)^{⊗n}, Husimi[R^n(t)]) against the mean-field N-body estimate"""
    report_tol = settings.REPORT_TOL if report_tol is None else report_tol
    if not 1 <= n <= n_bodies:
        raise MarginalRangeError(f"Marginal order {n} outside 1..{n_bodies}")
    check_step(dt, V)
    gamma = gamma_constant(V)
    times = _sample_times(t_final, samples, dt)
    logger.info(f"T-NSV: N={n_bodies}, n={n}, hbar={hbar}, Gamma={gamma}")

    plan, state0, tensor_cost = _product_setup(f_in, symbol, n_bodies, grid, hbar, V)
    # the plan's source atoms are the Vlasov particles, merged and sorted
    source = PhaseDensity.from_atoms(f_in.grid, plan.source.points, plan.source.masses)
    f_traj = propagate_vlasov(source, V, dt, t_final, times)
    prods = []
    for density in f_traj.densities:
        pts, w = density.atoms()
        prods.append(ProductMeasure((DiscreteMeasure.from_atoms(pts, w)[0],) * n).materialize())
    observe = nbody_sampler(times, [p.points for p in prods], n, transport_refine)
    q_traj = propagate_nbody(state0, dt, t_final, times, observe=observe)

    K = plan.source.size
    node_index = np.array(list(itertools.product(range(K), repeat=n_bodies)))
    flowed = [characteristic_flow(plan.source.points, 0.0, t, f_traj.path, V) for t in times]

    coupled = propagate_coupling_nbody(
        plan.source.points, plan.source.masses, plan.plan, q_traj,
        node_path=lambda k: flowed[k][node_index],
        classical_marginal=lambda k: f_traj.densities[k],
    )

    e0 = tensor_cost / n_bodies + 0.5 * hbar
    lhs, exact = [], True
    for k, prod in enumerate(prods):
        value, ok = _marginal_lhs(prod.points, prod.masses, q_traj.observations[k].husimi, n)
        lhs.append(value)
        exact = exact and ok
    consistency = consistency_term(n_bodies, V, gamma, times)
    rhs = e0 * np.exp(gamma * times) + consistency + 0.5 * hbar
    d_env = coupled.d_full[0] * np.exp(gamma * times) + consistency
    notes = [f"(1/N) E((f_in)^N, R_in)^2 replaced by its Töplitz-lift upper bound {e0:.6e}"]
    if not exact:
        notes.append("entropic transport fallback used for some samples")
    return _nbody_report(
        "T-NSV", times, lhs, rhs, coupled, q_traj, d_env,
        {"L": V.lipschitz_gradV, "Gamma": gamma, "E0_upper": e0},
        hbar, n_bodies, n, report_tol, {"consistency_term": consistency.tolist()}, notes,
    )


def verify_tsl(
    f_in: PhaseDensity,
    n_bodies: int,
    n: int,
    V: Potential,
    t_final: float,
    samples: int,
    dt: float,
    hbar: float,
    grid: SpaceGrid,
    symbol: Optional[PhaseDensity] = None,
    integrator: str = "verlet",
    report_tol: Optional[float] = None,
    transport_refine: float = 1.0,
) -> BoundReport:
    """(1/n) MK2^2(F^n(t), Husimi[R^n(t)]) <= ((1/N) MK2^2(F_in, mu_N) + hbar/2) e^{Lambda t} + hbar/2.

    F_in = f_in^{⊗N}; mu_N = symbol^{⊗N} (F_in itself by default).
    """
    report_tol = settings.REPORT_TOL if report_tol is None else report_tol
    if not 1 <= n <= n_bodies:
        raise MarginalRangeError(f"Marginal order {n} outside 1..{n_bodies}")
    check_step(dt, V)
    lam = lambda_constant(V)
    times = _sample_times(t_final, samples, dt)
    logger.info(f"T-SL: N={n_bodies}, n={n}, hbar={hbar}, Lambda={lam}")

    plan, state0, tensor_cost = _product_setup(f_in, symbol, n_bodies, grid, hbar, V)
    source = PhaseDensity.from_atoms(f_in.grid, plan.source.points, plan.source.masses)
    ensemble = ClassicalEnsembleN.product(source, n_bodies)

    wanted = set(np.rint(times / dt).astype(int).tolist())
    snapshots, current = [], ensemble
    for step in range(max(wanted) + 1):
        if step > 0:
            current = liouville_step(current, V, dt, integrator=integrator)
        if step in wanted:
            snapshots.append(current)
    marginals = [marginal_classical(e, n) for e in snapshots]
    observe = nbody_sampler(times, [m.points for m in marginals], n, transport_refine)
    q_traj = propagate_nbody(state0, dt, t_final, times, observe=observe)

    def node_path(k):
        e = snapshots[k]
        return np.stack([e.positions, e.momenta], axis=-1)

    def classical_marginal(k):
        return marginal_classical(snapshots[k], 1).as_phase_density(f_in.grid)

    coupled = propagate_coupling_nbody(
        plan.source.points, plan.source.masses, plan.plan, q_traj, node_path, classical_marginal,
    )

    lhs, exact = [], True
    for k, marg in enumerate(marginals):
        value, ok = _marginal_lhs(marg.points, marg.weights, q_traj.observations[k].husimi, n)
        lhs.append(value)
        exact = exact and ok
    e0 = tensor_cost / n_bodies + 0.5 * hbar
    rhs = e0 * np.exp(lam * times) + 0.5 * hbar
    d_env = coupled.d_full[0] * np.exp(lam * times)
    hamiltonian = [float(s.weights @ s.hamiltonian(V)) for s in snapshots]
    notes = [f"(1/N) E(F_in, R_in)^2 replaced by its Töplitz-lift upper bound {e0:.6e}"]
    if not exact:
        notes.append("entropic transport fallback used for some samples")
    return _nbody_report(
        "T-SL", times, lhs, rhs, coupled, q_traj, d_env,
        {"L": V.lipschitz_gradV, "Lambda": lam, "E0_upper": e0},
        hbar, n_bodies, n, report_tol, {"liouville_hamiltonian": hamiltonian}, notes,
    )


# ─────────────────────────────────────────────────────────────────────
# Non-commutative Cauchy-Schwarz guard
# ─────────────────────────────────────────────────────────────────────


def nccs_gap(R: np.ndarray, A: np.ndarray, B: np.ndarray) -> Tuple[float, float]:
    """(tr(R(A^2 + B^2)) - tr(R(AB + BA)), scale)"""
    if not (R.shape == A.shape == B.shape):
        raise IncompatibleInputsError("R, A and B must have matching shapes")
    lhs = np.real(np.trace(R @ (A @ B + B @ A)))
    rhs = np.real(np.trace(R @ (A @ A + B @ B)))
    scale = max(1.0, abs(lhs), abs(rhs))
    return float(rhs - lhs), float(scale)


def nccs_check(R: np.ndarray, A: np.ndarray, B: np.ndarray, tol: float = 1e-10) -> bool:
    """tr(R(AB + BA)) <= tr(R(A^2 + B^2)) within tol * scale"""
    gap, scale = nccs_gap(R, A, B)
    return gap >= -tol * scale


def random_nccs_trials(rng: np.random.Generator, n_trials: int = 1000, dim: int = 6) -> Tuple[int, float]:
    """(violations, smallest relative gap) over random PSD R and Hermitian A, B"""
    violations, worst = 0, np.inf
    for _ in range(n_trials):
        Z = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
        R = Z @ Z.conj().T
        R /= np.trace(R).real
        mats = []
        for _ in range(2):
            H = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
            mats.append(0.5 * (H + H.conj().T))
        gap, scale = nccs_gap(R, *mats)
        worst = min(worst, gap / scale)
        violations += not nccs_check(R, *mats)
    return violations, float(worst)
