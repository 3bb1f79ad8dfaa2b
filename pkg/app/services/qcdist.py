"""
Quantum-Classical Pseudo-Distance

E_hbar(p, R)^2 = inf over couplings Q of sum_k tr(c_hbar(z_k) Q_k), where a
coupling has tr Q_k = p_k, sum_k Q_k = R and Q_k >= 0, and
c_hbar(x, xi) = 1/2 ((x - X)^2 + (xi - P)^2).

The infimum is never claimed outside the tiny regime. Instead:
1. ehbar_upper: objective of explicit couplings (trivial p ⊗ R, Töplitz lift
   of an optimal plan, or any caller-supplied coupling); min over them.
2. ehbar_lower: max(hbar/2, MK2^2(p, Husimi[R]) - hbar/2).
3. ehbar_exact_tiny: ADMM on the PSD-constrained linear program, restricted
   to the numerical range of R, for at most 64 cells and 16 modes.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from app.core.config import settings
from app.core.exceptions import (
    IncompatibleInputsError,
    InfeasiblePlanError,
    MemoryBudgetError,
    NoFeasibleCouplingError,
)
from app.services.hilbert import (
    DensityOperator,
    SpaceGrid,
    coherent_columns,
    husimi_with_audit,
    momentum_operator,
    toeplitz_quantize,
)
from app.services.phasespace import PhaseDensity, PhaseGrid
from app.services.transport import DiscreteMeasure, TransportPlan, mk2_squared

logger = logging.getLogger(__name__)

ClassicalInput = Union[PhaseDensity, DiscreteMeasure]


def _atoms(p: ClassicalInput) -> Tuple[np.ndarray, np.ndarray]:
    if isinstance(p, DiscreteMeasure):
        return p.points, p.masses
    return p.atoms()


def _measure(p: ClassicalInput) -> DiscreteMeasure:
    if isinstance(p, DiscreteMeasure):
        return p
    measure, dropped = DiscreteMeasure.from_phase_density(p)
    if dropped > settings.DROPPED_MASS_TOL:
        logger.warning(f"Support truncation dropped {dropped:.3e} of the mass")
    return measure


# ─────────────────────────────────────────────────────────────────────
# Cost operator
# ─────────────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class CostOperatorField:
    """c_hbar(z_k) = S - x_k X - xi_k P + |z_k|^2/2, S = (X^2 + P^2)/2"""
    grid: SpaceGrid
    hbar: float
    nodes: np.ndarray
    X: np.ndarray
    P: np.ndarray
    S: np.ndarray

    def matrix(self, k: int) -> np.ndarray:
        x, xi = self.nodes[k]
        n = self.grid.n_x
        return self.S - x * self.X - xi * self.P + 0.5 * (x * x + xi * xi) * np.eye(n)

    def at(self, z: Sequence[float]) -> np.ndarray:
        n = self.grid.n_x
        return self.S - z[0] * self.X - z[1] * self.P + 0.5 * (z[0] ** 2 + z[1] ** 2) * np.eye(n)

    def ground_energies(self, indices: Optional[Sequence[int]] = None) -> np.ndarray:
        indices = range(len(self.nodes)) if indices is None else indices
        return np.array([np.linalg.eigvalsh(self.matrix(k))[0] for k in indices])

    def vector_moments(self, vectors: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(<S>, <X>, <P>) for each unit column"""
        def expect(A):
            return np.real(np.sum(vectors.conj() * (A @ vectors), axis=0))
        return expect(self.S), expect(self.X), expect(self.P)


def cost_field(grid: SpaceGrid, hbar: float, nodes: Union[np.ndarray, PhaseGrid]) -> CostOperatorField:
    """Position part diagonal, momentum part spectral"""
    if isinstance(nodes, PhaseGrid):
        nodes = nodes.centers()
    X = np.diag(grid.points).astype(complex)
    P = momentum_operator(grid, hbar)
    S = 0.5 * (X @ X + P @ P)
    S = 0.5 * (S + S.conj().T)
    return CostOperatorField(grid=grid, hbar=hbar, nodes=np.atleast_2d(nodes), X=X, P=P, S=S)


# ─────────────────────────────────────────────────────────────────────
# Couplings
# ─────────────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class MarginalCheck:
    trace_error: float
    sum_error: float
    min_eigenvalue: float

    def ok(self, trace_tol: float, sum_tol: float, psd_tol: float = 1e-9) -> bool:
        return self.trace_error <= trace_tol and self.sum_error <= sum_tol and self.min_eigenvalue >= -psd_tol


@dataclass(frozen=True)
class CouplingField:
    """Operator-valued measure on phase nodes.

    Either separable, Q_k = sum_j G_kj |phi_j><phi_j| with G >= 0 and unit
    columns phi_j, or dense blocks Q_k (M, n, n).
    """
    grid: SpaceGrid
    hbar: float
    nodes: np.ndarray
    masses: np.ndarray
    G: Optional[np.ndarray] = None
    vectors: Optional[np.ndarray] = None
    blocks: Optional[np.ndarray] = None
    label: str = ""

    def __post_init__(self):
        if self.blocks is None and (self.G is None or self.vectors is None):
            raise IncompatibleInputsError("CouplingField needs blocks or a separable form")
        if self.G is not None and np.any(self.G < 0):
            raise InfeasiblePlanError("Separable coupling weights must be nonnegative")

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def separable(self) -> bool:
        return self.blocks is None

    def traces(self) -> np.ndarray:
        if self.separable:
            return self.G.sum(axis=1)
        return np.real(np.trace(self.blocks, axis1=1, axis2=2))

    def total(self) -> np.ndarray:
        """sum_k Q_k"""
        if self.separable:
            w = self.G.sum(axis=0)
            return (self.vectors * w) @ self.vectors.conj().T
        return self.blocks.sum(axis=0)

    def block(self, k: int) -> np.ndarray:
        if self.separable:
            return (self.vectors * self.G[k]) @ self.vectors.conj().T
        return self.blocks[k]

    def check_marginals(self, R: DensityOperator) -> MarginalCheck:
        trace_err = float(np.abs(self.traces() - self.masses).max())
        sum_err = float(np.linalg.norm(self.total() - R.matrix, ord=2))
        if self.separable:
            low = float(self.G.min(initial=0.0))
        else:
            low = float(min(np.linalg.eigvalsh(b)[0] for b in self.blocks))
        return MarginalCheck(trace_error=trace_err, sum_error=sum_err, min_eigenvalue=low)

    def require_valid(self, R: DensityOperator, error_cls=InfeasiblePlanError):
        check = self.check_marginals(R)
        if not check.ok(settings.COUPLING_TRACE_TOL, settings.COUPLING_SUM_TOL):
            raise error_cls(
                f"Coupling '{self.label}' off its marginals: trace {check.trace_error:.3e}, "
                f"sum {check.sum_error:.3e}, min eig {check.min_eigenvalue:.3e}"
            )
        return check

    def objective(self, cost: Optional[CostOperatorField] = None) -> float:
        """sum_k tr(c_hbar(z_k) Q_k)"""
        cost = cost or cost_field(self.grid, self.hbar, self.nodes)
        x, xi = self.nodes[:, 0], self.nodes[:, 1]
        if self.separable:
            s, a, b = cost.vector_moments(self.vectors)
            per_pair = s[None, :] - x[:, None] * a[None, :] - xi[:, None] * b[None, :]
            per_pair += 0.5 * (x ** 2 + xi ** 2)[:, None]
            return float(np.sum(self.G * per_pair))
        total = 0.0
        for k in range(self.n_nodes):
            total += float(np.real(np.sum(cost.matrix(k) * self.blocks[k].T)))
        return total

    def moved(self, nodes: np.ndarray, vectors: np.ndarray, label: Optional[str] = None) -> "CouplingField":
        """Same weights on moved nodes with transformed payload vectors"""
        return CouplingField(
            grid=self.grid, hbar=self.hbar, nodes=nodes, masses=self.masses,
            G=self.G, vectors=vectors, label=label or self.label,
        )


def trivial_coupling(p: ClassicalInput, R: DensityOperator) -> CouplingField:
    """Q_k = p_k R"""
    nodes, masses = _atoms(p)
    if R.is_mixture:
        weights, vectors = R.mix_weights, R.mix_vectors
    else:
        weights, vectors = np.linalg.eigh(R.matrix)
        weights = np.clip(weights, 0.0, None)
        weights = weights / weights.sum()
    keep = weights > 0
    return CouplingField(
        grid=R.grid, hbar=R.hbar, nodes=nodes, masses=masses,
        G=np.outer(masses, weights[keep]), vectors=vectors[:, keep], label="trivial",
    )


def toeplitz_lift_coupling(plan: TransportPlan, hbar: float, grid: SpaceGrid) -> CouplingField:
    """Q_k = sum_j plan_kj |z_j><z_j| over the target nodes z_j"""
    plan.check_feasible()
    target = plan.target.points
    cols = coherent_columns(target, hbar, grid, normalize=True)
    return CouplingField(
        grid=grid, hbar=hbar, nodes=plan.source.points, masses=plan.source.masses,
        G=np.clip(plan.plan, 0.0, None), vectors=cols, label="toeplitz-lift",
    )


# ─────────────────────────────────────────────────────────────────────
# Bounds
# ─────────────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class UpperBound:
    value: float
    strategy: str
    coupling: CouplingField
    candidates: dict = field(default_factory=dict)


def ehbar_upper(
    p: ClassicalInput,
    R: DensityOperator,
    strategies: Sequence[str] = ("trivial", "toeplitz"),
    symbol: Optional[ClassicalInput] = None,
    extra: Sequence[CouplingField] = (),
) -> UpperBound:
    """Squared upper bound on E_hbar: min objective over the available couplings.

    "toeplitz" applies when R = toeplitz_quantize(symbol); `extra` couplings
    must already be couplings of (p, R).
    """
    candidates: List[CouplingField] = list(extra)
    if "trivial" in strategies:
        candidates.append(trivial_coupling(p, R))
    if "toeplitz" in strategies and symbol is not None:
        _, plan = mk2_squared(_measure(p), _measure(symbol))
        candidates.append(toeplitz_lift_coupling(plan, R.hbar, R.grid))
    if not candidates:
        raise NoFeasibleCouplingError(f"No coupling construction among {list(strategies)} applies")

    values = {}
    best = None
    for q in candidates:
        value = q.objective()
        values[q.label or f"extra-{len(values)}"] = value
        if best is None or value < best[0]:
            best = (value, q)
    return UpperBound(value=best[0], strategy=best[1].label, coupling=best[1], candidates=values)


@dataclass(frozen=True)
class LowerBound:
    value: float
    transport_cost: float
    exact_transport: bool
    husimi_mass_defect: float


def ehbar_lower(p: ClassicalInput, R: DensityOperator, husimi_grid: Optional[PhaseGrid] = None) -> LowerBound:
    """max(hbar/2, MK2^2(p, Husimi[R]) - hbar/2), d = 1"""
    floor = 0.5 * R.hbar
    hus, audit = husimi_with_audit(R, husimi_grid)
    cost, plan = mk2_squared(_measure(p), _measure(hus))
    return LowerBound(
        value=max(floor, cost - floor),
        transport_cost=cost,
        exact_transport=plan.exact,
        husimi_mass_defect=audit.mass_defect,
    )


def toeplitz_interval(
    p: ClassicalInput,
    mu: ClassicalInput,
    hbar: float,
    grid: SpaceGrid,
    husimi_grid: Optional[PhaseGrid] = None,
) -> Tuple[float, float]:
    """[MK2^2(p, Husimi[OP^T(mu)]) - hbar/2, MK2^2(p, mu) + hbar/2] for R = OP^T((2 pi hbar) mu)"""
    mu_density = mu if isinstance(mu, PhaseDensity) else None
    if mu_density is None:
        raise IncompatibleInputsError("The Töplitz symbol must be a PhaseDensity")
    R = toeplitz_quantize(mu_density, hbar, grid)
    lower = ehbar_lower(p, R, husimi_grid).value
    upper = mk2_squared(_measure(p), _measure(mu))[0] + 0.5 * hbar
    return lower, upper


# ─────────────────────────────────────────────────────────────────────
# Exact solve, tiny regime
# ─────────────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class TinySolveResult:
    value: float
    coupling: CouplingField
    converged: bool
    iterations: int
    primal_residual: float
    dual_residual: float
    flags: Tuple[str, ...] = ()


def _project_simplex(values: np.ndarray, total: np.ndarray) -> np.ndarray:
    """Row-wise Euclidean projection onto {y >= 0, sum y = total}"""
    n = values.shape[1]
    srt = -np.sort(-values, axis=1)
    cssv = np.cumsum(srt, axis=1) - total[:, None]
    ind = np.arange(1, n + 1)
    cond = srt - cssv / ind > 0
    rho = n - 1 - np.argmax(cond[:, ::-1], axis=1)
    theta = cssv[np.arange(values.shape[0]), rho] / (rho + 1)
    return np.clip(values - theta[:, None], 0.0, None)


def _project_spectraplex(Y: np.ndarray, traces: np.ndarray) -> np.ndarray:
    """Per block: nearest PSD matrix with trace p_k"""
    Y = 0.5 * (Y + np.conj(np.swapaxes(Y, 1, 2)))
    w, U = np.linalg.eigh(Y)
    w = _project_simplex(w, traces)
    return (U * w[:, None, :]) @ np.conj(np.swapaxes(U, 1, 2))


def _repair_feasible(Q: np.ndarray, masses: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """Exactly feasible blocks near an ADMM iterate, in the eigenbasis of R.

    Shifting Q_k by p_k (T - sum Q) fixes both marginals; mixing with the
    trivial blocks p_k T by the smallest common weight restores PSD.
    """
    T = np.diag(lam).astype(complex)
    shifted = Q - masses[:, None, None] * (Q.sum(axis=0) - T)[None]
    inv_sqrt = 1.0 / np.sqrt(lam)
    scaled = inv_sqrt[None, :, None] * shifted * inv_sqrt[None, None, :]
    scaled = 0.5 * (scaled + np.conj(np.swapaxes(scaled, 1, 2)))
    lowest = np.linalg.eigvalsh(scaled)[:, 0]
    s = float(np.max(np.clip(-lowest / masses, 0.0, None)))
    theta = s / (1.0 + s)
    return (1.0 - theta) * shifted + theta * masses[:, None, None] * T[None]


def ehbar_exact_tiny(
    p: ClassicalInput,
    R: DensityOperator,
    tol: Optional[float] = None,
    max_iter: Optional[int] = None,
    symbol: Optional[ClassicalInput] = None,
) -> TinySolveResult:
    """ADMM splitting {Q_k PSD, tr Q_k = p_k} against {sum Q_k = R}.

    Works in the numerical range of R; zero-mass cells are eliminated. The
    penalty only ever doubles. Without convergence the result is the best
    feasible upper bound among the repaired last iterate, the trivial
    coupling and (given `symbol`) the Töplitz lift, flagged "not-converged".
    """
    tol = settings.SDP_TOL if tol is None else tol
    max_iter = settings.SDP_MAX_ITER if max_iter is None else max_iter
    nodes, masses = _atoms(p)
    keep = masses > 0
    nodes, masses = nodes[keep], masses[keep]
    if nodes.shape[0] > 64:
        raise MemoryBudgetError(f"{nodes.shape[0]} cells exceed the tiny-solver limit of 64")

    lam, U = np.linalg.eigh(R.matrix)
    in_range = lam > settings.SDP_RANGE_CUTOFF
    lam, U = lam[in_range], U[:, in_range]
    if lam.size > 16:
        raise MemoryBudgetError(f"Numerical range of R has dimension {lam.size} > 16")
    cost = cost_field(R.grid, R.hbar, nodes)

    if nodes.shape[0] == 1:
        blocks = R.matrix[None].copy()
        q = CouplingField(R.grid, R.hbar, nodes, masses, blocks=blocks, label="exact")
        return TinySolveResult(q.objective(cost), q, True, 0, 0.0, 0.0)

    M, r = nodes.shape[0], lam.size
    Ut = U.conj().T
    S_r, X_r, P_r = Ut @ cost.S @ U, Ut @ cost.X @ U, Ut @ cost.P @ U
    eye = np.eye(r)
    C = np.stack([
        S_r - x * X_r - xi * P_r + 0.5 * (x * x + xi * xi) * eye for x, xi in nodes
    ])
    C = 0.5 * (C + np.conj(np.swapaxes(C, 1, 2)))
    target = np.diag(lam).astype(complex)

    def project_sum(Y):
        return Y - (Y.sum(axis=0) - target)[None] / M

    Z = masses[:, None, None] * target[None]
    Wd = np.zeros_like(Z)
    rho = 1.0
    prev_obj = np.inf
    converged = False
    r_prim = s_dual = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        Q = _project_spectraplex(Z - Wd - C / rho, masses)
        Z_prev = Z
        Z = project_sum(Q + Wd)
        Wd = Wd + Q - Z
        r_prim = float(np.linalg.norm(Q - Z))
        s_dual = float(rho * np.linalg.norm(Z - Z_prev))
        obj = float(np.real(np.sum(C * np.swapaxes(Q, 1, 2))))
        stall = abs(obj - prev_obj) <= settings.SDP_STALL_TOL * max(1.0, abs(obj))
        prev_obj = obj
        if r_prim <= tol and s_dual <= tol and stall:
            converged = True
            break
        if r_prim > 10 * s_dual:
            rho *= 2.0
            Wd /= 2.0

    if not converged:
        repaired = CouplingField(
            R.grid, R.hbar, nodes, masses,
            blocks=U[None] @ _repair_feasible(Q, masses, lam) @ Ut[None], label="repaired-iterate",
        )
        best = ehbar_upper(
            DiscreteMeasure(nodes, masses / masses.sum()), R,
            strategies=("trivial", "toeplitz"), symbol=symbol, extra=(repaired,),
        )
        logger.warning(
            f"Tiny SDP did not converge in {max_iter} iterations "
            f"(primal {r_prim:.2e}, dual {s_dual:.2e}); reporting the {best.strategy} bound {best.value:.8f}"
        )
        return TinySolveResult(
            best.value, best.coupling, False, it, r_prim, s_dual, ("not-converged", f"bound={best.strategy}")
        )

    blocks = U[None] @ Q @ Ut[None]
    q = CouplingField(R.grid, R.hbar, nodes, masses, blocks=blocks, label="exact")
    logger.info(f"Tiny SDP converged in {it} iterations: value {obj:.8f}, M={M}, rank={r}")
    return TinySolveResult(obj, q, True, it, r_prim, s_dual)
