"""
Quantum Propagation

Symmetric (Strang) operator splitting for
1. The Hartree equation  i hbar dR/dt = [-hbar^2/2 Laplacian + V * rho[R], R].
2. The N-body Schrödinger equation with the mean-field pair potential
   (1/2N) sum_{j,k} V(x_j - x_k).

Hartree steps: half potential kick from rho_n, exact kinetic step in Fourier
space, half potential kick from the post-kinetic density (which equals
rho_{n+1}, since kicks do not change rho). Every step is a unitary
conjugation, so trace and purity are preserved to rounding.

The potentials used by each step are stored, so the same unitary M(t) can be
applied later to arbitrary vectors (the frozen-path propagator used to move
coupling payloads).
"""

import logging
from dataclasses import dataclass
from typing import Any, Callable, Optional, Sequence, Tuple

import numpy as np

from app.core.config import settings
from app.core.exceptions import (
    IncompatibleInputsError,
    MarginalRangeError,
    MemoryBudgetError,
    PathRangeError,
)
from app.services.hilbert import (
    DensityOperator,
    DensityOperatorN,
    SpaceGrid,
    WaveFunction,
    apply_momentum,
)
from app.services.phasespace import Potential, check_step

logger = logging.getLogger(__name__)


# ─────────────────────────────────────────────────────────────────────
# Hartree
# ─────────────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class HartreeState:
    R: DensityOperator
    t: float
    V: Potential


def rho_of(R: DensityOperator) -> np.ndarray:
    """Spatial density r(x_i, x_i); sums to 1 against the grid measure h"""
    return R.rho()


def mean_field_potential(rho: np.ndarray, grid: SpaceGrid, V: Potential) -> np.ndarray:
    """(V * rho)(x_i) = sum_j V(x_i - x_j) rho_j h"""
    x = grid.points
    return V(x[:, None] - x[None, :]) @ rho * grid.h


def _kinetic_phase(grid: SpaceGrid, hbar: float, dt: float) -> np.ndarray:
    return np.exp(-0.5j * dt * hbar * grid.wavenumbers ** 2)


def _kinetic(vectors: np.ndarray, phase: np.ndarray) -> np.ndarray:
    return np.fft.ifft(phase[:, None] * np.fft.fft(vectors, axis=0), axis=0)


def _kick(phi: np.ndarray, hbar: float, dt: float) -> np.ndarray:
    return np.exp(-0.5j * dt / hbar * phi)


def _conjugate(R: DensityOperator, step) -> DensityOperator:
    """U R U* for a unitary given as a map on column blocks"""
    if R.is_mixture:
        return DensityOperator.from_mixture(R.grid, R.hbar, R.mix_weights, step(R.mix_vectors))
    half = step(R.matrix)
    return DensityOperator.from_matrix(R.grid, R.hbar, step(half.conj().T))


def _with_rank(R: DensityOperator) -> DensityOperator:
    """Mixtures above HARTREE_RANK_SWITCH columns are propagated as dense matrices"""
    if R.is_mixture and R.rank_bound > settings.HARTREE_RANK_SWITCH and R.dim <= settings.DENSITY_MATRIX_MAX_MODES:
        return DensityOperator.from_matrix(R.grid, R.hbar, R.matrix)
    return R


def _hartree_substeps(s: HartreeState, dt: float) -> Tuple[HartreeState, np.ndarray]:
    R, grid, hbar = _with_rank(s.R), s.R.grid, s.R.hbar
    kinetic = _kinetic_phase(grid, hbar, dt)
    phi_a = mean_field_potential(rho_of(R), grid, s.V)
    kick_a = _kick(phi_a, hbar, dt)
    mid = _conjugate(R, lambda m: _kinetic(kick_a[:, None] * m, kinetic))
    phi_b = mean_field_potential(rho_of(mid), grid, s.V)
    kick_b = _kick(phi_b, hbar, dt)
    out = _conjugate(mid, lambda m: kick_b[:, None] * m)
    return HartreeState(R=out, t=s.t + dt, V=s.V), np.stack([phi_a, phi_b])


def hartree_step(s: HartreeState, dt: float) -> HartreeState:
    check_step(dt, s.V)
    return _hartree_substeps(s, dt)[0]


def hartree_energy(R: DensityOperator, V: Potential) -> float:
    """tr(P^2 R)/2 + 1/2 sum_ij V(x_i - x_j) rho_i rho_j h^2"""
    grid = R.grid
    if R.is_mixture:
        pv = apply_momentum(R.mix_vectors, grid, R.hbar)
        kinetic = 0.5 * float(R.mix_weights @ np.sum(np.abs(pv) ** 2, axis=0))
    else:
        pr = apply_momentum(apply_momentum(R.matrix, grid, R.hbar), grid, R.hbar)
        kinetic = 0.5 * float(np.real(np.trace(pr)))
    rho = rho_of(R)
    return kinetic + 0.5 * float(rho @ mean_field_potential(rho, grid, V)) * grid.h


@dataclass(frozen=True)
class HartreeTrajectory:
    """Sampled Hartree states plus the per-step potentials that define M(t)"""
    dt: float
    times: np.ndarray
    states: Tuple[DensityOperator, ...]
    step_potentials: np.ndarray  # (n_steps, 2, n_x)
    traces: np.ndarray
    purities: np.ndarray
    energies: np.ndarray

    @property
    def n_steps(self) -> int:
        return self.step_potentials.shape[0]

    def at(self, t: float) -> DensityOperator:
        k = int(np.argmin(np.abs(self.times - t)))
        return self.states[k]


def propagate_hartree(
    R0: DensityOperator,
    V: Potential,
    dt: float,
    t_final: float,
    sample_times: Optional[Sequence[float]] = None,
) -> HartreeTrajectory:
    """Run hartree_step to t_final, snapping sample times to the step grid"""
    check_step(dt, V)
    n_steps = int(round(t_final / dt))
    if sample_times is None:
        sample_idx = np.arange(n_steps + 1)
    else:
        sample_idx = np.unique(np.clip(np.rint(np.asarray(sample_times) / dt).astype(int), 0, n_steps))
    wanted = set(sample_idx.tolist())

    state = HartreeState(R=R0, t=0.0, V=V)
    potentials = np.empty((n_steps, 2, R0.grid.n_x))
    states, traces, purities, energies = [], [], [], []
    for step in range(n_steps + 1):
        if step > 0:
            state, potentials[step - 1] = _hartree_substeps(state, dt)
        if step in wanted:
            states.append(state.R)
            traces.append(state.R.trace)
            purities.append(state.R.purity)
            energies.append(hartree_energy(state.R, V))
    logger.info(
        f"Hartree run: hbar={R0.hbar}, {n_steps} steps of dt={dt}, "
        f"trace drift {abs(traces[-1] - traces[0]):.3e}, purity drift {abs(purities[-1] - purities[0]):.3e}"
    )
    return HartreeTrajectory(
        dt=dt,
        times=sample_idx * dt,
        states=tuple(states),
        step_potentials=potentials,
        traces=np.array(traces),
        purities=np.array(purities),
        energies=np.array(energies),
    )


def apply_frozen_path(
    vectors: np.ndarray,
    traj: HartreeTrajectory,
    grid: SpaceGrid,
    hbar: float,
    t: float,
    t_start: float = 0.0,
) -> np.ndarray:
    """M(t) M(t_start)* @ vectors, replaying the stored Hartree steps from t_start to t"""
    n0 = int(round(t_start / traj.dt))
    n = int(round(t / traj.dt))
    for tau, k in ((t_start, n0), (t, n)):
        if k < 0 or k > traj.n_steps or abs(k * traj.dt - tau) > 1e-9 * max(1.0, tau):
            raise PathRangeError(f"t={tau} is not a stored step of the Hartree path")
    if n < n0:
        raise PathRangeError(f"Backward replay from t={t_start} to t={t} is not supported")
    kinetic = _kinetic_phase(grid, hbar, traj.dt)
    out = np.asarray(vectors, dtype=complex)
    for k in range(n0, n):
        out = _kick(traj.step_potentials[k, 1], hbar, traj.dt)[:, None] * _kinetic(
            _kick(traj.step_potentials[k, 0], hbar, traj.dt)[:, None] * out, kinetic
        )
    return out


# ─────────────────────────────────────────────────────────────────────
# N-body Schrödinger
# ─────────────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class NBodyState:
    """Mixture of N-body wave functions, amplitudes shape (r, n_x, ..., n_x).

    A pure state has r = 1. Vectors are stored as grid samples.
    """
    grid: SpaceGrid
    hbar: float
    weights: np.ndarray
    amplitudes: np.ndarray
    t: float
    V: Potential

    def __post_init__(self):
        if self.amplitudes.shape[0] != self.weights.size:
            raise IncompatibleInputsError("One weight per mixture component is required")
        if self.amplitudes.size > settings.NBODY_MAX_AMPLITUDES:
            raise MemoryBudgetError(
                f"{self.amplitudes.size} amplitudes exceed NBODY_MAX_AMPLITUDES={settings.NBODY_MAX_AMPLITUDES}"
            )

    @property
    def n_bodies(self) -> int:
        return self.amplitudes.ndim - 1

    @property
    def psi(self) -> WaveFunction:
        if self.weights.size != 1:
            raise IncompatibleInputsError("State is a mixture, not a single wave function")
        return WaveFunction(grid=self.grid, amplitudes=self.amplitudes[0], hbar=self.hbar)

    def norms(self) -> np.ndarray:
        axes = tuple(range(1, self.amplitudes.ndim))
        return np.sum(np.abs(self.amplitudes) ** 2, axis=axes) * self.grid.h ** self.n_bodies

    def position_density(self) -> np.ndarray:
        """sum_r w_r |psi_r|^2 on the tensor grid"""
        return np.tensordot(self.weights, np.abs(self.amplitudes) ** 2, axes=1)

    def vectors(self) -> np.ndarray:
        """(n_x^N, r) orthonormal coordinates"""
        r = self.weights.size
        return (self.amplitudes.reshape(r, -1) * np.sqrt(self.grid.h ** self.n_bodies)).T

    @classmethod
    def pure(cls, psi: WaveFunction, V: Potential, t: float = 0.0) -> "NBodyState":
        return cls(psi.grid, psi.hbar, np.ones(1), psi.amplitudes[None], t, V)

    @classmethod
    def product_mixture(
        cls,
        grid: SpaceGrid,
        hbar: float,
        weights: np.ndarray,
        factor_columns: Sequence[np.ndarray],
        V: Potential,
    ) -> "NBodyState":
        """sum_r w_r |phi_r1 ⊗ ... ⊗ phi_rN><...|, factor_columns[j] shape (n_x, r)"""
        r = weights.size
        amps = factor_columns[0].T
        for cols in factor_columns[1:]:
            amps = amps[..., None] * cols.T.reshape((r,) + (1,) * (amps.ndim - 1) + (grid.n_x,))
        amps = amps / np.sqrt(grid.h ** len(factor_columns))
        return cls(grid, hbar, np.asarray(weights, float), amps, 0.0, V)


class NBodyPropagator:
    """Cached Strang step exp(-i dt W/2hbar) exp(-i dt T/hbar) exp(-i dt W/2hbar)"""

    def __init__(self, grid: SpaceGrid, hbar: float, n_bodies: int, V: Potential, dt: float):
        check_step(dt, V)
        if grid.n_x ** n_bodies > settings.NBODY_MAX_AMPLITUDES:
            raise MemoryBudgetError(f"{grid.n_x}^{n_bodies} amplitudes exceed the N-body budget")
        self.grid, self.hbar, self.n_bodies, self.V, self.dt = grid, hbar, n_bodies, V, dt
        self.pair_potential = pair_potential(grid, n_bodies, V)
        self._kick = np.exp(-0.5j * dt / hbar * self.pair_potential)
        k2 = sum(
            np.reshape(grid.wavenumbers ** 2, [-1 if a == j else 1 for a in range(n_bodies)])
            for j in range(n_bodies)
        )
        self._kinetic = np.exp(-0.5j * dt * hbar * k2)
        self._axes = tuple(range(1, n_bodies + 1))

    def __call__(self, amplitudes: np.ndarray) -> np.ndarray:
        """Advance a batch of wave functions, batch axis first"""
        psi = np.fft.fftn(amplitudes * self._kick, axes=self._axes)
        psi = np.fft.ifftn(psi * self._kinetic, axes=self._axes)
        return psi * self._kick


def pair_potential(grid: SpaceGrid, n_bodies: int, V: Potential) -> np.ndarray:
    """(1/2N) sum_{j,k} V(x_j - x_k) on the tensor grid, self terms included"""
    x = grid.points
    total = np.zeros((grid.n_x,) * n_bodies)
    for j in range(n_bodies):
        for k in range(n_bodies):
            if j == k:
                total += V(np.zeros(1))[0]
                continue
            shape_j = [-1 if a == j else 1 for a in range(n_bodies)]
            shape_k = [-1 if a == k else 1 for a in range(n_bodies)]
            total = total + V(x.reshape(shape_j) - x.reshape(shape_k))
    return total / (2 * n_bodies)


def nbody_step(s: NBodyState, dt: float) -> NBodyState:
    prop = NBodyPropagator(s.grid, s.hbar, s.n_bodies, s.V, dt)
    return NBodyState(s.grid, s.hbar, s.weights, prop(s.amplitudes), s.t + dt, s.V)


def nbody_energy(s: NBodyState) -> float:
    """<H_N> = sum_r w_r (sum_k <P_k^2>/2 + <W>)"""
    n, N = s.grid.n_x, s.n_bodies
    axes = tuple(range(1, N + 1))
    k2 = sum(
        np.reshape(s.grid.wavenumbers ** 2, [-1 if a == j else 1 for a in range(N)]) for j in range(N)
    )
    spectrum = np.abs(np.fft.fftn(s.amplitudes, axes=axes)) ** 2 / n ** N
    kinetic = 0.5 * s.hbar ** 2 * np.sum(spectrum * k2, axis=axes)
    potential = np.sum(np.abs(s.amplitudes) ** 2 * pair_potential(s.grid, N, s.V), axis=axes)
    return float(s.weights @ ((kinetic + potential) * s.grid.h ** N))


@dataclass(frozen=True)
class NBodyTrajectory:
    """Sampled N-body run: full states, or only what an observer kept of them"""
    dt: float
    times: np.ndarray
    states: Tuple[NBodyState, ...]
    norms: np.ndarray
    energies: np.ndarray
    observations: Tuple[Any, ...] = ()

    def at(self, t: float) -> NBodyState:
        return self.states[int(np.argmin(np.abs(self.times - t)))]


def propagate_nbody(
    s0: NBodyState,
    dt: float,
    t_final: float,
    sample_times: Optional[Sequence[float]] = None,
    observe: Optional[Callable[[NBodyState], Any]] = None,
) -> NBodyTrajectory:
    """Strang-split N-body run sampled at `sample_times` (every step by default).

    Without `observe` every sampled state is kept, and all of them together
    must fit NBODY_MAX_AMPLITUDES. With `observe` only its return value is
    kept per sample and `states` stays empty.
    """
    prop = NBodyPropagator(s0.grid, s0.hbar, s0.n_bodies, s0.V, dt)
    n_steps = int(round(t_final / dt))
    if sample_times is None:
        sample_idx = np.arange(n_steps + 1)
    else:
        sample_idx = np.unique(np.clip(np.rint(np.asarray(sample_times) / dt).astype(int), 0, n_steps))
    if observe is None and sample_idx.size * s0.amplitudes.size > settings.NBODY_MAX_AMPLITUDES:
        raise MemoryBudgetError(
            f"{sample_idx.size} samples of {s0.amplitudes.size} amplitudes exceed "
            f"NBODY_MAX_AMPLITUDES={settings.NBODY_MAX_AMPLITUDES}; pass an observer"
        )
    wanted = set(sample_idx.tolist())
    amps = s0.amplitudes
    states, observations, norms, energies = [], [], [], []
    for step in range(n_steps + 1):
        if step > 0:
            amps = prop(amps)
        if step in wanted:
            state = NBodyState(s0.grid, s0.hbar, s0.weights, amps, step * dt, s0.V)
            if observe is None:
                states.append(state)
            else:
                observations.append(observe(state))
            norms.append(float(s0.weights @ state.norms()))
            energies.append(nbody_energy(state))
    logger.info(
        f"N-body run: N={s0.n_bodies}, {s0.weights.size} components, {n_steps} steps of dt={dt}, "
        f"energy drift {abs(energies[-1] - energies[0]):.3e}"
    )
    return NBodyTrajectory(
        dt, sample_idx * dt, tuple(states), np.array(norms), np.array(energies), tuple(observations)
    )


def marginal_operator(s: NBodyState, n: int) -> DensityOperator:
    """n-body marginal of sum_r w_r |psi_r><psi_r| by contraction over bodies n+1..N"""
    N = s.n_bodies
    if not 1 <= n <= N:
        raise MarginalRangeError(f"Marginal order {n} outside 1..{N}")
    a = s.grid.n_x ** n
    if a > settings.DENSITY_MATRIX_MAX_MODES:
        raise MemoryBudgetError(f"{a} modes exceed DENSITY_MATRIX_MAX_MODES")
    vecs = s.vectors()  # (n_x^N, r)
    blocks = vecs.T.reshape(s.weights.size, a, -1)
    reduced = np.einsum("r,rib,rjb->ij", s.weights, blocks, blocks.conj())
    cls = DensityOperatorN if n > 1 else DensityOperator
    return cls.from_matrix(s.grid, s.hbar, reduced, n_bodies=n)
