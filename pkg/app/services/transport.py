"""
Quadratic Optimal Transport

Exact Monge-Kantorovich transport between finitely supported phase-space
measures, with the cost Gamma(z, w) = 1/2 |z - w|^2.

1. mk2_squared solves the transport LP by network simplex (POT ``ot.emd``)
   while both supports fit EXACT_TRANSPORT_MAX_SUPPORT; beyond that it falls
   back to a debiased entropic (Sinkhorn) estimate and flags the result.
2. dual_certificate recovers Kantorovich potentials from a plan by
   complementary slackness on its support graph.
3. tensor_mk2_bound adds factor costs for explicit product measures.

"cost" always carries the 1/2; the conventional W2^2 is 2 * cost.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple, Union

import numpy as np
import ot
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import (
    NegativeCycleError,
    breadth_first_order,
    connected_components,
    csgraph_from_dense,
    shortest_path,
)

from app.core.config import settings
from app.core.exceptions import (
    DensityNotNormalizedError,
    IncompatibleInputsError,
    InfeasiblePlanError,
    NonProductMeasureError,
)
from app.services.phasespace import PhaseDensity

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DiscreteMeasure:
    """Probability measure on finitely many distinct phase points (M, 2k)"""
    points: np.ndarray
    masses: np.ndarray

    def __post_init__(self):
        if self.points.ndim != 2 or self.points.shape[0] != self.masses.size:
            raise IncompatibleInputsError("Need one mass per support point")
        if np.any(self.masses < 0):
            raise DensityNotNormalizedError("Masses must be nonnegative")
        if abs(self.masses.sum() - 1.0) > 1e-10:
            raise DensityNotNormalizedError(f"Masses sum to {self.masses.sum()!r}")

    @property
    def size(self) -> int:
        return self.masses.size

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @classmethod
    def from_atoms(
        cls,
        points: np.ndarray,
        masses: np.ndarray,
        cutoff: Optional[float] = None,
    ) -> Tuple["DiscreteMeasure", float]:
        """Deduplicate, drop atoms below `cutoff`, renormalise; returns (measure, dropped mass)"""
        cutoff = settings.SUPPORT_CUTOFF if cutoff is None else cutoff
        points = np.atleast_2d(np.asarray(points, dtype=float))
        masses = np.asarray(masses, dtype=float)
        keys, inverse = np.unique(points, axis=0, return_inverse=True)
        merged = np.zeros(keys.shape[0])
        np.add.at(merged, inverse.ravel(), masses)
        total = merged.sum()
        keep = merged >= cutoff
        dropped = float(merged[~keep].sum() / total)
        kept = merged[keep]
        return cls(points=keys[keep], masses=kept / kept.sum()), dropped

    @classmethod
    def from_phase_density(cls, p: PhaseDensity, cutoff: Optional[float] = None) -> Tuple["DiscreteMeasure", float]:
        return cls.from_atoms(*p.atoms(), cutoff=cutoff)

    def shifted(self, offset) -> "DiscreteMeasure":
        return DiscreteMeasure(points=self.points + np.asarray(offset, float), masses=self.masses)

    def scaled(self, factor: float) -> "DiscreteMeasure":
        return DiscreteMeasure(points=self.points * factor, masses=self.masses)


def cost_matrix(a: DiscreteMeasure, b: DiscreteMeasure) -> np.ndarray:
    """Gamma_ij = 1/2 |z_i - w_j|^2"""
    if a.dim != b.dim:
        raise IncompatibleInputsError(f"Measures live in dimensions {a.dim} and {b.dim}")
    return 0.5 * ot.dist(a.points, b.points, metric="sqeuclidean")


@dataclass(frozen=True)
class TransportPlan:
    source: DiscreteMeasure
    target: DiscreteMeasure
    plan: np.ndarray
    cost: float
    exact: bool = True
    regularization: Optional[float] = None

    @property
    def w2_squared(self) -> float:
        """Conventional W2^2 without the 1/2, for display only"""
        return 2.0 * self.cost

    def marginal_error(self) -> float:
        rows = np.abs(self.plan.sum(axis=1) - self.source.masses).max()
        cols = np.abs(self.plan.sum(axis=0) - self.target.masses).max()
        return float(max(rows, cols))

    def check_feasible(self, tol: float = 1e-9):
        if np.any(self.plan < -tol) or self.marginal_error() > tol:
            raise InfeasiblePlanError(
                f"Plan marginals off by {self.marginal_error():.3e} (tolerance {tol})"
            )

    def recomputed_cost(self) -> float:
        return float(np.sum(self.plan * cost_matrix(self.source, self.target)))

    def entries(self):
        """(i, j, mass) for the nonzero entries, row-major"""
        i, j = np.nonzero(self.plan)
        return i, j, self.plan[i, j]


def _entropic(a: DiscreteMeasure, b: DiscreteMeasure, C: np.ndarray) -> Tuple[float, np.ndarray, float]:
    """Debiased Sinkhorn estimate S = OT_e(a,b) - (OT_e(a,a) + OT_e(b,b)) / 2"""
    reg = settings.ENTROPIC_REG * float(np.median(C))

    def linear_cost(x: DiscreteMeasure, y: DiscreteMeasure, M: np.ndarray) -> Tuple[float, np.ndarray]:
        G = ot.sinkhorn(x.masses, y.masses, M, reg, method="sinkhorn_log", numItermax=10000)
        return float(np.sum(G * M)), G

    cross, plan = linear_cost(a, b, C)
    self_a, _ = linear_cost(a, a, cost_matrix(a, a))
    self_b, _ = linear_cost(b, b, cost_matrix(b, b))
    return max(cross - 0.5 * (self_a + self_b), 0.0), plan, reg


def mk2_squared(a: DiscreteMeasure, b: DiscreteMeasure) -> Tuple[float, TransportPlan]:
    """Optimal quadratic transport cost (with the 1/2) and the plan"""
    C = cost_matrix(a, b)
    limit = settings.EXACT_TRANSPORT_MAX_SUPPORT
    if a.size <= limit and b.size <= limit:
        G, log = ot.emd(a.masses, b.masses, C, numItermax=settings.EMD_MAX_ITER, log=True)
        if log.get("warning"):
            logger.warning(f"Network simplex: {log['warning']}")
        cost = float(np.sum(G * C))
        return cost, TransportPlan(a, b, G, cost)

    cost, G, reg = _entropic(a, b, C)
    logger.warning(
        f"Supports {a.size}x{b.size} exceed {limit}; entropic fallback with reg={reg:.3e}"
    )
    return cost, TransportPlan(a, b, G, cost, exact=False, regularization=reg)


# ─────────────────────────────────────────────────────────────────────
# Kantorovich duality
# ─────────────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class DualCertificate:
    """Potentials with u_i + v_j <= Gamma_ij, their value and the primal gap"""
    u: np.ndarray
    v: np.ndarray
    primal: float
    dual: float
    max_violation: float
    repaired: bool

    @property
    def gap(self) -> float:
        return self.primal - self.dual

    @property
    def feasible(self) -> bool:
        return self.max_violation <= settings.DUAL_FEASIBILITY_TOL

    def certified(self) -> bool:
        return self.feasible and abs(self.gap) <= settings.DUALITY_GAP_TOL * (1.0 + abs(self.primal))


def _support_potentials(C: np.ndarray, support: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """u_i + v_j = C_ij along a spanning forest of the support graph.

    Nodes 0..m-1 are rows, m..m+n-1 columns. Returns (u, v, component labels).
    """
    m, n = C.shape
    i, j = np.nonzero(support)
    graph = coo_matrix(
        (np.ones(2 * i.size), (np.concatenate([i, j + m]), np.concatenate([j + m, i]))),
        shape=(m + n, m + n),
    ).tocsr()
    n_comp, labels = connected_components(graph, directed=False)
    pot = np.full(m + n, np.nan)
    for c in range(n_comp):
        root = int(np.flatnonzero(labels == c)[0])
        order, pred = breadth_first_order(graph, root, directed=False, return_predecessors=True)
        pot[root] = 0.0
        for node in order[1:]:
            parent = pred[node]
            if node >= m:
                pot[node] = C[parent, node - m] - pot[parent]
            else:
                pot[node] = C[node, parent - m] - pot[parent]
    return pot[:m], pot[m:], labels


def _shift_components(C, u, v, labels, m) -> Tuple[np.ndarray, np.ndarray]:
    """Shift each support component by s_c (rows +s_c, columns -s_c) so all pairs are feasible.

    The constraints s_c - s_d <= min over rows of c, columns of d of the
    reduced cost are difference constraints, solved as shortest paths.
    """
    row_lab, col_lab = labels[:m], labels[m:]
    n_comp = labels.max() + 1
    if n_comp == 1:
        return u, v
    reduced = C - u[:, None] - v[None, :]
    weights = np.full((n_comp, n_comp), np.inf)
    for c in range(n_comp):
        rows = row_lab == c
        if not rows.any():
            continue
        for d in range(n_comp):
            cols = col_lab == d
            if c != d and cols.any():
                # edge d -> c: s_c <= s_d + w
                weights[d, c] = min(weights[d, c], reduced[np.ix_(rows, cols)].min())
    graph = csgraph_from_dense(weights, null_value=np.inf)
    dist = shortest_path(graph, method="BF", directed=True, indices=0)
    dist = np.where(np.isfinite(dist), dist, 0.0)
    return u + dist[row_lab], v - dist[col_lab]


def dual_certificate(a: DiscreteMeasure, b: DiscreteMeasure, plan: TransportPlan) -> DualCertificate:
    plan.check_feasible()
    C = cost_matrix(a, b)
    support = plan.plan > 1e-14 * max(plan.plan.max(), 1e-300)
    u, v, labels = _support_potentials(C, support)
    repaired = False
    try:
        u, v = _shift_components(C, u, v, labels, C.shape[0])
    except NegativeCycleError:
        repaired = True
    if repaired or np.max(u[:, None] + v[None, :] - C) > settings.DUAL_FEASIBILITY_TOL:
        # double c-transform: feasible by construction
        v = np.min(C - u[:, None], axis=0)
        u = np.min(C - v[None, :], axis=1)
        repaired = True
        logger.warning("Support potentials infeasible; repaired by c-transform")
    violation = float(max(np.max(u[:, None] + v[None, :] - C), 0.0))
    dual = float(a.masses @ u + b.masses @ v)
    return DualCertificate(u=u, v=v, primal=plan.cost, dual=dual, max_violation=violation, repaired=repaired)


# ─────────────────────────────────────────────────────────────────────
# Product measures
# ─────────────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class ProductMeasure:
    """Explicit product of one-body measures"""
    factors: Tuple[DiscreteMeasure, ...]

    @property
    def n_factors(self) -> int:
        return len(self.factors)

    def materialize(self) -> DiscreteMeasure:
        """Joint measure with points ordered (z_1, z_2, ...)"""
        points, masses = self.factors[0].points, self.factors[0].masses
        for f in self.factors[1:]:
            points = np.concatenate(
                [np.repeat(points, f.size, axis=0), np.tile(f.points, (points.shape[0], 1))], axis=1
            )
            masses = np.outer(masses, f.masses).ravel()
        return DiscreteMeasure(points=points, masses=masses)


def tensor_mk2_bound(
    a: Union[ProductMeasure, DiscreteMeasure],
    b: Union[ProductMeasure, DiscreteMeasure],
) -> float:
    """Sum of factor-wise costs; equals the joint cost for product couplings"""
    fa = a.factors if isinstance(a, ProductMeasure) else (a,)
    fb = b.factors if isinstance(b, ProductMeasure) else (b,)
    if len(fa) != len(fb):
        raise IncompatibleInputsError(f"Products have {len(fa)} and {len(fb)} factors")
    if len(fa) == 1 and (fa[0].dim != 2 or fb[0].dim != 2):
        raise NonProductMeasureError("Joint many-body measures must be given as explicit products")
    return float(sum(mk2_squared(x, y)[0] for x, y in zip(fa, fb)))
