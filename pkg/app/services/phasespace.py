"""
Classical Phase Space

Phase-space grids and densities, interaction potentials, the mean-field
characteristic flow and the particle propagators for the Vlasov and N-body
Liouville equations.

Densities carry two representations:
1. Cell masses on a PhaseGrid (always present).
2. An optional weighted particle cloud. Propagators move particles and
   redeposit them on the grid with a clipped Gaussian kernel of one cell
   bandwidth, so the grid mass is conserved exactly.

All value types are frozen snapshots; propagators return new objects.
"""

import itertools
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Tuple

import numpy as np

from app.core.config import settings
from app.core.exceptions import (
    BoundaryViolationError,
    DensityNotNormalizedError,
    IncompatibleInputsError,
    InvalidGridError,
    MarginalRangeError,
    PathRangeError,
    PotentialHypothesisError,
    StepSizeError,
)

logger = logging.getLogger(__name__)

# Fourth-order symmetric composition of Verlet steps
_CBRT2 = 2.0 ** (1.0 / 3.0)
YOSHIDA4_WEIGHTS = (
    1.0 / (2.0 - _CBRT2),
    -_CBRT2 / (2.0 - _CBRT2),
    1.0 / (2.0 - _CBRT2),
)

INTEGRATORS = ("verlet", "yoshida4")

# Rows per block when summing pair forces, keeps the pair matrix small
_FIELD_BLOCK = 2048


# ─────────────────────────────────────────────────────────────────────
# Grid
# ─────────────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class PhaseGrid:
    """Uniform cell grid on [x_min, x_max) x [xi_min, xi_max), d = 1"""
    x_min: float
    x_max: float
    n_x: int
    xi_min: float
    xi_max: float
    n_xi: int
    d: int = 1

    def __post_init__(self):
        if self.d != 1:
            raise InvalidGridError(f"Only d=1 phase grids are supported, got d={self.d}")
        if not self.x_max > self.x_min or not self.xi_max > self.xi_min:
            raise InvalidGridError(
                f"Empty box: x=[{self.x_min}, {self.x_max}], xi=[{self.xi_min}, {self.xi_max}]"
            )
        if self.n_x < 2 or self.n_xi < 2:
            raise InvalidGridError(f"Need at least 2 cells per axis, got {self.n_x}x{self.n_xi}")

    @property
    def h_x(self) -> float:
        return (self.x_max - self.x_min) / self.n_x

    @property
    def h_xi(self) -> float:
        return (self.xi_max - self.xi_min) / self.n_xi

    @property
    def cell_volume(self) -> float:
        return self.h_x * self.h_xi

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.n_x, self.n_xi)

    @property
    def x_centers(self) -> np.ndarray:
        return self.x_min + (np.arange(self.n_x) + 0.5) * self.h_x

    @property
    def xi_centers(self) -> np.ndarray:
        return self.xi_min + (np.arange(self.n_xi) + 0.5) * self.h_xi

    def centers(self) -> np.ndarray:
        """Cell centers as an (n_x * n_xi, 2) array, x-major order"""
        xx, pp = np.meshgrid(self.x_centers, self.xi_centers, indexing="ij")
        return np.column_stack([xx.ravel(), pp.ravel()])

    def locate(self, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Cell indices (i, j) of phase points, clipped into the grid"""
        points = np.atleast_2d(points)
        i = np.floor((points[:, 0] - self.x_min) / self.h_x).astype(int)
        j = np.floor((points[:, 1] - self.xi_min) / self.h_xi).astype(int)
        return np.clip(i, 0, self.n_x - 1), np.clip(j, 0, self.n_xi - 1)

    @classmethod
    def covering(cls, points: np.ndarray, pad: float, n_x: int, n_xi: int) -> "PhaseGrid":
        """Smallest grid containing all points with `pad` of room on every side"""
        points = np.atleast_2d(points)
        lo = points.min(axis=0) - pad
        hi = points.max(axis=0) + pad
        return cls(float(lo[0]), float(hi[0]), n_x, float(lo[1]), float(hi[1]), n_xi)


# ─────────────────────────────────────────────────────────────────────
# Densities
# ─────────────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class ParticleCloud:
    """Weighted phase-space particles (x, xi, w)"""
    x: np.ndarray
    xi: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        if not (self.x.shape == self.xi.shape == self.w.shape) or self.x.ndim != 1:
            raise IncompatibleInputsError("Particle arrays must be 1-D and of equal length")
        if np.any(self.w < 0):
            raise DensityNotNormalizedError("Particle weights must be nonnegative")

    @property
    def size(self) -> int:
        return self.x.size

    @property
    def total_mass(self) -> float:
        return float(self.w.sum())

    @property
    def points(self) -> np.ndarray:
        return np.column_stack([self.x, self.xi])

    def moved(self, x: np.ndarray, xi: np.ndarray) -> "ParticleCloud":
        return ParticleCloud(x=x, xi=xi, w=self.w)


def _deposit_axis(u: np.ndarray, n: int) -> Tuple[np.ndarray, np.ndarray]:
    """Clipped unit-bandwidth Gaussian stencil along one axis.

    `u` is the continuous cell coordinate (cell k has center k). Returns
    (indices, kernel) of shape (P, 7), kernel rows normalised over in-range cells.
    """
    offsets = np.arange(-3, 4)
    base = np.rint(u).astype(int)
    idx = base[:, None] + offsets[None, :]
    kern = np.exp(-0.5 * (idx - u[:, None]) ** 2)
    inside = (idx >= 0) & (idx < n)
    kern = np.where(inside, kern, 0.0)
    norm = kern.sum(axis=1, keepdims=True)
    # particles entirely outside the box keep their mass in the nearest cell
    lost = norm[:, 0] == 0.0
    if np.any(lost):
        kern[lost, 3] = 1.0
        norm[lost] = 1.0
        idx[lost, 3] = np.clip(base[lost], 0, n - 1)
    return np.clip(idx, 0, n - 1), kern / norm


def deposit(grid: PhaseGrid, cloud: ParticleCloud) -> np.ndarray:
    """Cell masses from particles; total mass is conserved exactly"""
    ux = (cloud.x - grid.x_min) / grid.h_x - 0.5
    up = (cloud.xi - grid.xi_min) / grid.h_xi - 0.5
    ix, kx = _deposit_axis(ux, grid.n_x)
    ip, kp = _deposit_axis(up, grid.n_xi)
    flat = (ix[:, :, None] * grid.n_xi + ip[:, None, :]).reshape(cloud.size, -1)
    mass = (cloud.w[:, None, None] * kx[:, :, None] * kp[:, None, :]).reshape(cloud.size, -1)
    weights = np.zeros(grid.n_x * grid.n_xi)
    np.add.at(weights, flat.ravel(), mass.ravel())
    return weights.reshape(grid.shape)


@dataclass(frozen=True)
class PhaseDensity:
    """Probability density on (x, xi) phase space"""
    grid: PhaseGrid
    weights: np.ndarray
    particles: Optional[ParticleCloud] = None

    def __post_init__(self):
        if self.weights.shape != self.grid.shape:
            raise IncompatibleInputsError(
                f"Weights shape {self.weights.shape} does not match grid {self.grid.shape}"
            )
        if np.any(self.weights < 0):
            raise DensityNotNormalizedError("Cell masses must be nonnegative")

    @property
    def total_mass(self) -> float:
        return float(self.weights.sum())

    def is_normalized(self, tol: Optional[float] = None) -> bool:
        tol = settings.MASS_TOL if tol is None else tol
        if abs(self.total_mass - 1.0) > tol:
            return False
        return self.particles is None or abs(self.particles.total_mass - 1.0) <= tol

    def require_normalized(self):
        if not self.is_normalized():
            raise DensityNotNormalizedError(
                f"Density has mass {self.total_mass!r}, expected 1 within {settings.MASS_TOL}"
            )

    def atoms(self) -> Tuple[np.ndarray, np.ndarray]:
        """(points, masses) of the measure, particles preferred over occupied cells"""
        if self.particles is not None:
            keep = self.particles.w > 0
            return self.particles.points[keep], self.particles.w[keep]
        masses = self.weights.ravel()
        keep = masses > 0
        return self.grid.centers()[keep], masses[keep]

    def spatial_atoms(self) -> Tuple[np.ndarray, np.ndarray]:
        """(positions, masses) of the spatial marginal rho_p"""
        if self.particles is not None:
            return self.particles.x, self.particles.w
        return self.grid.x_centers, self.weights.sum(axis=1)

    def spatial_marginal(self) -> np.ndarray:
        """Cell masses of rho_p on the x axis of the grid"""
        return self.weights.sum(axis=1)

    def with_particles(self, cloud: ParticleCloud) -> "PhaseDensity":
        return PhaseDensity(grid=self.grid, weights=deposit(self.grid, cloud), particles=cloud)

    def representation_gap(self) -> dict:
        """Mass and moment differences between the particle and grid representations"""
        if self.particles is None:
            return {}
        pts, w = self.particles.points, self.particles.w
        cells = self.grid.centers()
        cw = self.weights.ravel()
        gap = {"mass": abs(w.sum() - cw.sum())}
        for axis, name in ((0, "x"), (1, "xi")):
            gap[f"mean_{name}"] = abs(pts[:, axis] @ w - cells[:, axis] @ cw)
            gap[f"second_{name}"] = abs((pts[:, axis] ** 2) @ w - (cells[:, axis] ** 2) @ cw)
        return gap

    # ── constructors ─────────────────────────────────────────────────

    @classmethod
    def from_particles(cls, grid: PhaseGrid, cloud: ParticleCloud) -> "PhaseDensity":
        return cls(grid=grid, weights=deposit(grid, cloud), particles=cloud)

    @classmethod
    def from_weights(cls, grid: PhaseGrid, weights: np.ndarray) -> "PhaseDensity":
        weights = np.clip(np.asarray(weights, dtype=float), 0.0, None)
        total = weights.sum()
        if total <= 0:
            raise DensityNotNormalizedError("Cannot normalise an empty density")
        return cls(grid=grid, weights=weights / total)

    @classmethod
    def point_mass(cls, grid: PhaseGrid, z: Sequence[float]) -> "PhaseDensity":
        cloud = ParticleCloud(x=np.array([float(z[0])]), xi=np.array([float(z[1])]), w=np.ones(1))
        return cls.from_particles(grid, cloud)

    @classmethod
    def from_atoms(cls, grid: PhaseGrid, points: np.ndarray, masses: np.ndarray) -> "PhaseDensity":
        points = np.atleast_2d(points)
        cloud = ParticleCloud(x=points[:, 0].copy(), xi=points[:, 1].copy(), w=np.asarray(masses, float))
        return cls.from_particles(grid, cloud)

    @classmethod
    def gaussian_grid(
        cls,
        grid: PhaseGrid,
        center: Sequence[float],
        sigma: Sequence[float],
    ) -> "PhaseDensity":
        """Gaussian sampled at cell centers, no particle representation"""
        xx, pp = np.meshgrid(grid.x_centers, grid.xi_centers, indexing="ij")
        dens = np.exp(
            -0.5 * ((xx - center[0]) / sigma[0]) ** 2 - 0.5 * ((pp - center[1]) / sigma[1]) ** 2
        )
        return cls.from_weights(grid, dens)

    @classmethod
    def sample_gaussian(
        cls,
        grid: PhaseGrid,
        center: Sequence[float],
        sigma: Sequence[float],
        n_particles: int,
        rng: np.random.Generator,
    ) -> "PhaseDensity":
        """Empirical Gaussian: n_particles equal-weight samples"""
        x = rng.normal(center[0], sigma[0], n_particles)
        xi = rng.normal(center[1], sigma[1], n_particles)
        cloud = ParticleCloud(x=x, xi=xi, w=np.full(n_particles, 1.0 / n_particles))
        return cls.from_particles(grid, cloud)


def check_boundary(
    density: PhaseDensity,
    margin_cells: Optional[int] = None,
    tol: Optional[float] = None,
) -> float:
    """Mass within `margin_cells` of the spatial box edges; raises above tol"""
    margin_cells = settings.BOUNDARY_MARGIN_CELLS if margin_cells is None else margin_cells
    tol = settings.BOUNDARY_MASS_TOL if tol is None else tol
    grid = density.grid
    margin = margin_cells * grid.h_x
    x, w = density.spatial_atoms()
    near = (x < grid.x_min + margin) | (x > grid.x_max - margin)
    mass = float(w[near].sum())
    if mass > tol:
        raise BoundaryViolationError(
            f"{mass:.3e} of the mass lies within {margin_cells} cells of the box edge"
        )
    return mass


# ─────────────────────────────────────────────────────────────────────
# Potentials
# ─────────────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class Potential:
    """Even, bounded C^{1,1} pair potential with its declared constants"""
    tag: str
    value: Callable[[np.ndarray], np.ndarray]
    gradient: Callable[[np.ndarray], np.ndarray]
    sup_V: float
    sup_gradV: float
    lipschitz_gradV: float
    params: dict = field(default_factory=dict)

    def __call__(self, x):
        return self.value(np.asarray(x, dtype=float))

    def grad(self, x):
        return self.gradient(np.asarray(x, dtype=float))

    def check_hypotheses(self, rng: np.random.Generator, n_samples: int = 2000, span: float = 10.0):
        """Sampled evenness, sup bounds and Lipschitz bound of the gradient"""
        x = rng.uniform(-span, span, n_samples)
        y = rng.uniform(-span, span, n_samples)
        slack = 1e-12
        if np.max(np.abs(self(x) - self(-x))) > slack:
            raise PotentialHypothesisError(f"Potential '{self.tag}' is not even")
        if np.max(np.abs(self(x))) > self.sup_V + slack:
            raise PotentialHypothesisError(f"sup_V={self.sup_V} does not dominate samples of '{self.tag}'")
        if np.max(np.abs(self.grad(x))) > self.sup_gradV + slack:
            raise PotentialHypothesisError(
                f"sup_gradV={self.sup_gradV} does not dominate samples of '{self.tag}'"
            )
        lhs = np.abs(self.grad(x) - self.grad(y))
        if np.any(lhs > self.lipschitz_gradV * np.abs(x - y) + slack):
            raise PotentialHypothesisError(f"Lip(grad V)={self.lipschitz_gradV} violated for '{self.tag}'")
        return True


def cosine_potential(amplitude: float = 1.0, wavenumber: float = 1.0) -> Potential:
    a, k = float(amplitude), float(wavenumber)
    return Potential(
        tag="cosine",
        value=lambda x: a * np.cos(k * x),
        gradient=lambda x: -a * k * np.sin(k * x),
        sup_V=abs(a),
        sup_gradV=abs(a) * k,
        lipschitz_gradV=abs(a) * k * k,
        params={"amplitude": a, "wavenumber": k},
    )


def gaussian_bump_potential(amplitude: float = 1.0, width: float = 1.0) -> Potential:
    a, s = float(amplitude), float(width)
    return Potential(
        tag="gaussian-bump",
        value=lambda x: a * np.exp(-0.5 * (x / s) ** 2),
        gradient=lambda x: -a * x / s ** 2 * np.exp(-0.5 * (x / s) ** 2),
        sup_V=abs(a),
        sup_gradV=abs(a) / s * np.exp(-0.5),
        lipschitz_gradV=abs(a) / s ** 2,
        params={"amplitude": a, "width": s},
    )


def zero_potential() -> Potential:
    return Potential(
        tag="zero",
        value=lambda x: np.zeros_like(x, dtype=float),
        gradient=lambda x: np.zeros_like(x, dtype=float),
        sup_V=0.0,
        sup_gradV=0.0,
        lipschitz_gradV=0.0,
    )


POTENTIALS = {
    "cosine": cosine_potential,
    "gaussian-bump": gaussian_bump_potential,
    "zero": zero_potential,
}


def make_potential(tag: str, **params) -> Potential:
    try:
        factory = POTENTIALS[tag]
    except KeyError:
        raise PotentialHypothesisError(f"Unknown potential '{tag}', expected one of {sorted(POTENTIALS)}")
    return factory(**params)


def lambda_constant(V: Potential) -> float:
    """1 + max(1, 4 L^2), the Hartree/Vlasov and semiclassical Gronwall rate"""
    return 1.0 + max(1.0, 4.0 * V.lipschitz_gradV ** 2)


def gamma_constant(V: Potential) -> float:
    """2 + max(4 L^2, 1), the mean-field N-body Gronwall rate"""
    return 2.0 + max(4.0 * V.lipschitz_gradV ** 2, 1.0)


def check_step(dt: float, V: Potential):
    if dt <= 0:
        raise StepSizeError(f"dt must be positive, got {dt}")
    if dt * max(1.0, V.lipschitz_gradV) > settings.MAX_STEP_PRODUCT * (1 + 1e-12):
        raise StepSizeError(
            f"dt*max(1,L) = {dt * max(1.0, V.lipschitz_gradV):.4g} exceeds {settings.MAX_STEP_PRODUCT}"
        )


# ─────────────────────────────────────────────────────────────────────
# Mean field
# ─────────────────────────────────────────────────────────────────────


def _particle_field(x_eval: np.ndarray, x_src: np.ndarray, w_src: np.ndarray, V: Potential) -> np.ndarray:
    """(grad V * rho)(x) for rho = sum_b w_b delta_{x_b}"""
    x_eval = np.atleast_1d(np.asarray(x_eval, dtype=float))
    out = np.empty(x_eval.shape, dtype=float)
    flat_in, flat_out = x_eval.ravel(), out.reshape(-1)
    for start in range(0, flat_in.size, _FIELD_BLOCK):
        block = flat_in[start:start + _FIELD_BLOCK]
        flat_out[start:start + _FIELD_BLOCK] = V.grad(block[:, None] - x_src[None, :]) @ w_src
    return out


def mean_field_force(p: PhaseDensity, V: Potential, x) -> np.ndarray:
    """(grad V * rho_p)(x); the acceleration of a test particle is minus this"""
    p.require_normalized()
    src_x, src_w = p.spatial_atoms()
    force = _particle_field(x, src_x, src_w, V)
    return force if np.ndim(x) else float(force[0])


def vlasov_energy(p: PhaseDensity, V: Potential) -> float:
    """Kinetic plus mean-field interaction energy of the particle representation"""
    cloud = _require_particles(p)
    kinetic = 0.5 * float(cloud.w @ cloud.xi ** 2)
    potential = 0.0
    for start in range(0, cloud.size, _FIELD_BLOCK):
        block = cloud.x[start:start + _FIELD_BLOCK]
        pair = V(block[:, None] - cloud.x[None, :]) @ cloud.w
        potential += float(cloud.w[start:start + _FIELD_BLOCK] @ pair)
    return kinetic + 0.5 * potential


def _require_particles(p: PhaseDensity) -> ParticleCloud:
    if p.particles is None:
        raise IncompatibleInputsError("This operation needs the particle representation")
    return p.particles


def _verlet_cloud(x, xi, w, V: Potential, dt: float, force0=None):
    """One velocity-Verlet step; the field is frozen at each half kick"""
    f0 = _particle_field(x, x, w, V) if force0 is None else force0
    xi_half = xi - 0.5 * dt * f0
    x_new = x + dt * xi_half
    f1 = _particle_field(x_new, x_new, w, V)
    return x_new, xi_half - 0.5 * dt * f1, f1


def vlasov_step(p: PhaseDensity, V: Potential, dt: float, integrator: str = "verlet") -> PhaseDensity:
    """Advance every particle one step under the self-consistent mean field"""
    if dt <= 0:
        raise StepSizeError(f"dt must be positive, got {dt}")
    cloud = _require_particles(p)
    x, xi = cloud.x, cloud.xi
    if integrator == "verlet":
        x, xi, _ = _verlet_cloud(x, xi, cloud.w, V, dt)
    elif integrator == "yoshida4":
        for weight in YOSHIDA4_WEIGHTS:
            x, xi, _ = _verlet_cloud(x, xi, cloud.w, V, weight * dt)
    else:
        raise IncompatibleInputsError(f"Unknown integrator '{integrator}', expected one of {INTEGRATORS}")
    return p.with_particles(cloud.moved(x, xi))


def second_moment(p: PhaseDensity, representation: str = "auto") -> float:
    """m_2 = sum 1/2 (|x|^2 + |xi|^2) over the measure"""
    if representation == "grid" or (representation == "auto" and p.particles is None):
        pts, w = p.grid.centers(), p.weights.ravel()
    else:
        pts, w = _require_particles(p).points, p.particles.w
    return float(0.5 * (w @ (pts ** 2).sum(axis=1)))


def moment_envelope(m2_initial: float, V: Potential, t) -> np.ndarray:
    """e^t (m_2(0) + ||V||_inf), the a priori bound on the second moment"""
    return np.exp(np.asarray(t, dtype=float)) * (m2_initial + V.sup_V)


# ─────────────────────────────────────────────────────────────────────
# Trajectories and the characteristic flow
# ─────────────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class DensityPath:
    """Spatial densities rho_f(t) stored as particle positions at each time node"""
    times: np.ndarray
    positions: np.ndarray  # (T, P)
    weights: np.ndarray  # (P,)

    def covers(self, t: float) -> bool:
        slack = 1e-12 * max(1.0, abs(self.times[-1]))
        return self.times[0] - slack <= t <= self.times[-1] + slack

    def field(self, tau: float, x: np.ndarray, V: Potential) -> np.ndarray:
        """Frozen mean field at time tau, linear in time between stored nodes"""
        if not self.covers(tau):
            raise PathRangeError(
                f"t={tau} outside stored path [{self.times[0]}, {self.times[-1]}]"
            )
        k = int(np.searchsorted(self.times, tau))
        slack = 1e-12 * max(1.0, abs(tau))
        if k < self.times.size and abs(self.times[k] - tau) <= slack:
            return _particle_field(x, self.positions[k], self.weights, V)
        if k > 0 and abs(self.times[k - 1] - tau) <= slack:
            return _particle_field(x, self.positions[k - 1], self.weights, V)
        k = min(max(k, 1), self.times.size - 1)
        t0, t1 = self.times[k - 1], self.times[k]
        theta = (tau - t0) / (t1 - t0)
        e0 = _particle_field(x, self.positions[k - 1], self.weights, V)
        e1 = _particle_field(x, self.positions[k], self.weights, V)
        return (1.0 - theta) * e0 + theta * e1


@dataclass(frozen=True)
class VlasovTrajectory:
    """Stored Vlasov solution: densities at sample times plus the full density path"""
    times: np.ndarray
    densities: Tuple[PhaseDensity, ...]
    path: DensityPath
    energies: np.ndarray
    second_moments: np.ndarray

    def at(self, t: float) -> PhaseDensity:
        k = int(np.argmin(np.abs(self.times - t)))
        return self.densities[k]


def propagate_vlasov(
    p: PhaseDensity,
    V: Potential,
    dt: float,
    t_final: float,
    sample_times: Optional[Sequence[float]] = None,
    integrator: str = "verlet",
    enforce_boundary: bool = True,
) -> VlasovTrajectory:
    """Run vlasov_step to t_final, recording the path at every step.

    Sample times are snapped to the step grid; densities are stored there.
    """
    check_step(dt, V)
    cloud = _require_particles(p)
    n_steps = int(round(t_final / dt))
    step_times = np.arange(n_steps + 1) * dt
    if sample_times is None:
        sample_idx = np.arange(n_steps + 1)
    else:
        sample_idx = np.unique(np.clip(np.rint(np.asarray(sample_times) / dt).astype(int), 0, n_steps))

    positions = np.empty((n_steps + 1, cloud.size))
    positions[0] = cloud.x
    densities, energies, moments = [], [], []
    current = p
    wanted = set(sample_idx.tolist())
    for step in range(n_steps + 1):
        if step > 0:
            current = vlasov_step(current, V, dt, integrator=integrator)
            positions[step] = current.particles.x
        if step in wanted:
            if enforce_boundary:
                check_boundary(current)
            densities.append(current)
            energies.append(vlasov_energy(current, V))
            moments.append(second_moment(current))
    logger.info(
        f"Vlasov run: {cloud.size} particles, {n_steps} steps of dt={dt}, "
        f"energy drift {abs(energies[-1] - energies[0]):.3e}"
    )
    return VlasovTrajectory(
        times=step_times[sample_idx],
        densities=tuple(densities),
        path=DensityPath(times=step_times, positions=positions, weights=cloud.w),
        energies=np.array(energies),
        second_moments=np.array(moments),
    )


def characteristic_flow(z0, s: float, t: float, rho_path: DensityPath, V: Potential) -> np.ndarray:
    """Z(t, s, z0) for the field (xi, -grad V * rho_f(tau, x)).

    Verlet substeps run between consecutive stored nodes so a particle of the
    stored run is reproduced exactly; the scheme is exactly time-reversible.
    """
    for tau in (s, t):
        if not rho_path.covers(tau):
            raise PathRangeError(
                f"t={tau} outside stored path [{rho_path.times[0]}, {rho_path.times[-1]}]"
            )
    z = np.array(z0, dtype=float)
    single = z.ndim == 1
    z = np.atleast_2d(z)
    x, xi = z[:, 0].copy(), z[:, 1].copy()
    if t == s:
        return z[0] if single else z

    lo, hi = min(s, t), max(s, t)
    slack = 1e-12 * max(1.0, abs(hi))
    inner = rho_path.times[(rho_path.times > lo + slack) & (rho_path.times < hi - slack)]
    nodes = np.concatenate([[s], inner if t > s else inner[::-1], [t]])
    for a, b in zip(nodes[:-1], nodes[1:]):
        h = b - a
        xi = xi - 0.5 * h * rho_path.field(a, x, V)
        x = x + h * xi
        xi = xi - 0.5 * h * rho_path.field(b, x, V)
    out = np.column_stack([x, xi])
    return out[0] if single else out


# ─────────────────────────────────────────────────────────────────────
# N-body Liouville ensembles
# ─────────────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class ClassicalEnsembleN:
    """Weighted samples of the N-body phase space, symmetric under relabeling"""
    positions: np.ndarray  # (S, N)
    momenta: np.ndarray  # (S, N)
    weights: np.ndarray  # (S,)

    @property
    def n_bodies(self) -> int:
        return self.positions.shape[1]

    @property
    def n_samples(self) -> int:
        return self.positions.shape[0]

    @property
    def points(self) -> np.ndarray:
        """(S, 2N) rows ordered (x_1, xi_1, ..., x_N, xi_N)"""
        out = np.empty((self.n_samples, 2 * self.n_bodies))
        out[:, 0::2] = self.positions
        out[:, 1::2] = self.momenta
        return out

    @classmethod
    def build(
        cls,
        positions: np.ndarray,
        momenta: np.ndarray,
        weights: np.ndarray,
        symmetrize: bool = True,
    ) -> "ClassicalEnsembleN":
        positions = np.atleast_2d(np.asarray(positions, dtype=float))
        momenta = np.atleast_2d(np.asarray(momenta, dtype=float))
        weights = np.asarray(weights, dtype=float)
        if abs(weights.sum() - 1.0) > settings.MASS_TOL:
            raise DensityNotNormalizedError(f"Ensemble weights sum to {weights.sum()!r}")
        if symmetrize and positions.shape[1] > 1:
            perms = list(itertools.permutations(range(positions.shape[1])))
            positions = np.concatenate([positions[:, list(s)] for s in perms])
            momenta = np.concatenate([momenta[:, list(s)] for s in perms])
            weights = np.concatenate([weights / len(perms)] * len(perms))
        return cls._merged(positions, momenta, weights)

    @classmethod
    def _merged(cls, positions, momenta, weights) -> "ClassicalEnsembleN":
        n = positions.shape[1]
        rows = np.concatenate([positions, momenta], axis=1)
        keys, inverse = np.unique(rows, axis=0, return_inverse=True)
        merged = np.zeros(keys.shape[0])
        np.add.at(merged, inverse.ravel(), weights)
        return cls(positions=keys[:, :n], momenta=keys[:, n:], weights=merged)

    @classmethod
    def product(cls, p: PhaseDensity, n_bodies: int) -> "ClassicalEnsembleN":
        """Atoms of p^{⊗N}"""
        pts, w = p.atoms()
        idx = np.array(list(itertools.product(range(w.size), repeat=n_bodies)))
        return cls(
            positions=pts[idx, 0],
            momenta=pts[idx, 1],
            weights=np.prod(w[idx], axis=1),
        )

    def permuted(self, sigma: Sequence[int]) -> "ClassicalEnsembleN":
        sigma = list(sigma)
        return ClassicalEnsembleN(self.positions[:, sigma], self.momenta[:, sigma], self.weights)

    def hamiltonian(self, V: Potential) -> np.ndarray:
        """H_N per sample: sum 1/2 |xi_j|^2 + 1/(2N) sum_{j,k} V(x_j - x_k)"""
        n = self.n_bodies
        diff = self.positions[:, :, None] - self.positions[:, None, :]
        return 0.5 * (self.momenta ** 2).sum(axis=1) + V(diff).sum(axis=(1, 2)) / (2 * n)

    def as_phase_density(self, grid: PhaseGrid) -> PhaseDensity:
        """One-body ensembles as a PhaseDensity on `grid`"""
        if self.n_bodies != 1:
            raise MarginalRangeError("Only one-body ensembles map to a PhaseDensity")
        cloud = ParticleCloud(x=self.positions[:, 0].copy(), xi=self.momenta[:, 0].copy(), w=self.weights)
        return PhaseDensity.from_particles(grid, cloud)


def _liouville_force(positions: np.ndarray, V: Potential) -> np.ndarray:
    n = positions.shape[1]
    diff = positions[:, :, None] - positions[:, None, :]
    return V.grad(diff).sum(axis=2) / n


def liouville_step(e: ClassicalEnsembleN, V: Potential, dt: float, integrator: str = "verlet") -> ClassicalEnsembleN:
    """Advance every sample of the N-body system with the 1/N pair force"""
    if dt <= 0:
        raise StepSizeError(f"dt must be positive, got {dt}")
    if integrator not in INTEGRATORS:
        raise IncompatibleInputsError(f"Unknown integrator '{integrator}', expected one of {INTEGRATORS}")
    x, xi = e.positions, e.momenta
    substeps = (1.0,) if integrator == "verlet" else YOSHIDA4_WEIGHTS
    for weight in substeps:
        h = weight * dt
        xi = xi - 0.5 * h * _liouville_force(x, V)
        x = x + h * xi
        xi = xi - 0.5 * h * _liouville_force(x, V)
    return ClassicalEnsembleN(positions=x, momenta=xi, weights=e.weights)


def marginal_classical(e: ClassicalEnsembleN, n: int) -> ClassicalEnsembleN:
    """Integrate out bodies n+1..N"""
    if not 1 <= n <= e.n_bodies:
        raise MarginalRangeError(f"Marginal order {n} outside 1..{e.n_bodies}")
    if n == e.n_bodies:
        return e
    return ClassicalEnsembleN._merged(e.positions[:, :n], e.momenta[:, :n], e.weights)
