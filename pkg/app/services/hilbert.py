"""
Quantum Side

Truncated Hilbert spaces on periodic spatial grids and everything built on
them:
1. Wave functions and density operators (single and N-body).
2. Coherent states and Töplitz (anti-Wick) quantization.
3. Wigner and Husimi transforms, the Töplitz/Husimi trace pairing.
4. Partial traces and particle permutations.

Conventions
-----------
Grid amplitudes psi_i are samples of the wave function; the orthonormal
coordinates of the same vector are sqrt(h^N) * psi. Operator matrices are
always stored in orthonormal coordinates, so R_ij = r(x_i, x_j) * h for a
one-body kernel r.

Momentum is -i*hbar*d/dx realised spectrally with centred FFT wavenumbers.

toeplitz_quantize(mu) = sum_k mu_k |z_k><z_k| for a probability measure mu,
which is OP^T((2*pi*hbar) mu): the (2*pi*hbar) factor is carried by the
weights at the call site, so the result has unit trace.
"""

import itertools
import logging
from dataclasses import dataclass
from functools import cached_property
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from app.core.config import settings
from app.core.exceptions import (
    BoundaryViolationError,
    DensityNotNormalizedError,
    IncompatibleInputsError,
    InvalidGridError,
    MarginalRangeError,
    MemoryBudgetError,
)
from app.services.phasespace import PhaseDensity, PhaseGrid

logger = logging.getLogger(__name__)

# A raw phase-space measure: (points (M, 2), masses (M,)), masses need not sum to 1
RawMeasure = Tuple[np.ndarray, np.ndarray]


@dataclass(frozen=True)
class SpaceGrid:
    """Periodic spatial grid x_i = x_min + i*h, i < n_x"""
    x_min: float
    x_max: float
    n_x: int
    periodic: bool = True
    d: int = 1

    def __post_init__(self):
        if self.d != 1:
            raise InvalidGridError(f"Only d=1 space grids are supported, got d={self.d}")
        if self.n_x < 2 or self.n_x & (self.n_x - 1):
            raise InvalidGridError(f"n_x must be a power of two, got {self.n_x}")
        if not self.x_max > self.x_min:
            raise InvalidGridError(f"Empty box [{self.x_min}, {self.x_max}]")

    @property
    def h(self) -> float:
        return (self.x_max - self.x_min) / self.n_x

    @property
    def points(self) -> np.ndarray:
        return self.x_min + np.arange(self.n_x) * self.h

    @property
    def wavenumbers(self) -> np.ndarray:
        return 2.0 * np.pi * np.fft.fftfreq(self.n_x, d=self.h)

    def p_max(self, hbar: float) -> float:
        """Largest representable momentum, hbar * pi / h"""
        return hbar * np.pi / self.h

    def phase_grid(self, hbar: float, n_xi: Optional[int] = None, xi_span: Optional[float] = None) -> PhaseGrid:
        """Phase grid whose x-cells are centred on the space grid points"""
        n_xi = self.n_x if n_xi is None else n_xi
        span = self.p_max(hbar) if xi_span is None else xi_span
        return PhaseGrid(
            self.x_min - 0.5 * self.h, self.x_max - 0.5 * self.h, self.n_x,
            -span, span, n_xi,
        )

    def wigner_grid(self, hbar: float) -> PhaseGrid:
        """Grid on which the discrete Wigner transform is exact: xi in [-p_max/2, p_max/2)"""
        dxi = self.p_max(hbar) / self.n_x
        lo = -0.5 * self.p_max(hbar) - 0.5 * dxi
        return PhaseGrid(
            self.x_min - 0.5 * self.h, self.x_max - 0.5 * self.h, self.n_x,
            lo, lo + self.n_x * dxi, self.n_x,
        )


def _check_margin(grid: SpaceGrid, hbar: float, points: np.ndarray):
    """Coherent packets must sit COHERENT_MARGIN_SIGMAS * sqrt(hbar) inside the box"""
    margin = settings.COHERENT_MARGIN_SIGMAS * np.sqrt(hbar)
    x, xi = points[:, 0], points[:, 1]
    bad_x = (x < grid.x_min + margin) | (x > grid.x_max - grid.h - margin)
    bad_xi = np.abs(xi) > grid.p_max(hbar) - margin
    if np.any(bad_x) or np.any(bad_xi):
        k = int(np.argmax(bad_x | bad_xi))
        raise BoundaryViolationError(
            f"Coherent state at z=({x[k]:.4g}, {xi[k]:.4g}) is within {margin:.3g} of the "
            f"grid boundary (x in [{grid.x_min}, {grid.x_max}), |xi| < {grid.p_max(hbar):.4g})"
        )


# ─────────────────────────────────────────────────────────────────────
# States
# ─────────────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class WaveFunction:
    """Grid samples of an N-body wave function, amplitudes shape (n_x,)*N"""
    grid: SpaceGrid
    amplitudes: np.ndarray
    hbar: float

    def __post_init__(self):
        if any(s != self.grid.n_x for s in self.amplitudes.shape):
            raise IncompatibleInputsError(
                f"Amplitudes shape {self.amplitudes.shape} does not match n_x={self.grid.n_x}"
            )
        if abs(self.norm_squared - 1.0) > settings.TRACE_TOL:
            raise DensityNotNormalizedError(f"Wave function has norm^2 {self.norm_squared!r}")

    @property
    def n_bodies(self) -> int:
        return self.amplitudes.ndim

    @property
    def norm_squared(self) -> float:
        return float(np.sum(np.abs(self.amplitudes) ** 2) * self.grid.h ** self.amplitudes.ndim)

    @property
    def vector(self) -> np.ndarray:
        """Orthonormal coordinates, flattened"""
        return (np.sqrt(self.grid.h ** self.n_bodies) * self.amplitudes).ravel()

    @classmethod
    def from_vector(cls, grid: SpaceGrid, vector: np.ndarray, hbar: float, n_bodies: int = 1) -> "WaveFunction":
        amps = np.asarray(vector).reshape((grid.n_x,) * n_bodies) / np.sqrt(grid.h ** n_bodies)
        return cls(grid=grid, amplitudes=amps, hbar=hbar)

    def projector(self) -> "DensityOperator":
        v = self.vector
        cls = DensityOperator if self.n_bodies == 1 else DensityOperatorN
        return cls.from_mixture(self.grid, self.hbar, np.ones(1), v[:, None], n_bodies=self.n_bodies)


@dataclass(frozen=True)
class DensityOperator:
    """Density operator in orthonormal grid coordinates.

    Stored either densely or as a finite mixture sum_r w_r |v_r><v_r| with
    unit-norm columns; the dense matrix of a mixture is built on demand.
    """
    grid: SpaceGrid
    hbar: float
    dense: Optional[np.ndarray] = None
    mix_weights: Optional[np.ndarray] = None
    mix_vectors: Optional[np.ndarray] = None
    n_bodies: int = 1

    def __post_init__(self):
        if self.dense is None and self.mix_vectors is None:
            raise IncompatibleInputsError("DensityOperator needs a matrix or a mixture")
        if self.hbar <= 0:
            raise IncompatibleInputsError(f"hbar must be positive, got {self.hbar}")
        if self.dim > settings.DENSITY_MATRIX_MAX_MODES and self.dense is not None:
            raise MemoryBudgetError(f"{self.dim} modes exceed DENSITY_MATRIX_MAX_MODES")
        if self.dense is not None:
            scale = max(1.0, float(np.abs(self.dense).max()))
            if np.abs(self.dense - self.dense.conj().T).max() > settings.HERMITIAN_TOL * scale * self.dim:
                raise DensityNotNormalizedError("Density matrix is not Hermitian")
        else:
            if np.any(self.mix_weights < 0):
                raise DensityNotNormalizedError("Mixture weights must be nonnegative")
            norms = np.sum(np.abs(self.mix_vectors) ** 2, axis=0)
            if np.abs(norms - 1.0).max(initial=0.0) > settings.TRACE_TOL:
                raise DensityNotNormalizedError("Mixture vectors must have unit norm")
        if abs(self.trace - 1.0) > settings.TRACE_TOL:
            raise DensityNotNormalizedError(f"Density operator has trace {self.trace!r}")

    @property
    def dim(self) -> int:
        return self.grid.n_x ** self.n_bodies

    @property
    def is_mixture(self) -> bool:
        return self.mix_vectors is not None

    @property
    def rank_bound(self) -> int:
        return self.mix_vectors.shape[1] if self.is_mixture else self.dim

    @cached_property
    def matrix(self) -> np.ndarray:
        if self.dense is not None:
            return self.dense
        if self.dim > settings.DENSITY_MATRIX_MAX_MODES:
            raise MemoryBudgetError(f"{self.dim} modes exceed DENSITY_MATRIX_MAX_MODES")
        v = self.mix_vectors
        return (v * self.mix_weights) @ v.conj().T

    @property
    def trace(self) -> float:
        if self.dense is not None:
            return float(np.trace(self.dense).real)
        return float(self.mix_weights.sum())

    @property
    def purity(self) -> float:
        if self.is_mixture:
            gram = self.mix_vectors.conj().T @ self.mix_vectors
            w = self.mix_weights
            return float(np.real(w @ (np.abs(gram) ** 2) @ w))
        return float(np.real(np.sum(self.matrix * self.matrix.T)))

    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.matrix)

    def check_valid(self) -> float:
        """Raise unless PSD within PSD_TOL; returns the smallest eigenvalue"""
        low = float(self.eigenvalues()[0])
        if low < -settings.PSD_TOL:
            raise DensityNotNormalizedError(f"Density operator has eigenvalue {low:.3e}")
        return low

    def rho(self) -> np.ndarray:
        """Spatial density r(x_i, x_i) for one-body operators"""
        if self.n_bodies != 1:
            raise MarginalRangeError("rho is defined for one-body operators")
        if self.is_mixture:
            diag = (np.abs(self.mix_vectors) ** 2) @ self.mix_weights
        else:
            diag = np.real(np.diag(self.matrix))
        return diag / self.grid.h

    def apply(self, vectors: np.ndarray) -> np.ndarray:
        """R @ vectors without materialising a mixture"""
        if self.is_mixture:
            v = self.mix_vectors
            return (v * self.mix_weights) @ (v.conj().T @ vectors)
        return self.matrix @ vectors

    @classmethod
    def from_matrix(cls, grid: SpaceGrid, hbar: float, matrix: np.ndarray, n_bodies: int = 1):
        matrix = 0.5 * (matrix + matrix.conj().T)
        return cls(grid=grid, hbar=hbar, dense=matrix, n_bodies=n_bodies)

    @classmethod
    def from_mixture(cls, grid: SpaceGrid, hbar: float, weights, vectors, n_bodies: int = 1):
        return cls(
            grid=grid,
            hbar=hbar,
            mix_weights=np.asarray(weights, dtype=float),
            mix_vectors=np.asarray(vectors, dtype=complex),
            n_bodies=n_bodies,
        )


@dataclass(frozen=True)
class DensityOperatorN(DensityOperator):
    """Density operator on the N-fold tensor grid"""

    def tensor(self) -> np.ndarray:
        n = self.grid.n_x
        return self.matrix.reshape((n,) * (2 * self.n_bodies))

    def symmetry_defect(self, sigmas: Optional[Sequence[Sequence[int]]] = None) -> float:
        sigmas = sigmas or list(itertools.permutations(range(self.n_bodies)))
        return max(float(np.abs(permute(self, s).matrix - self.matrix).max()) for s in sigmas)


def product_state(factors: Sequence[DensityOperator]) -> DensityOperatorN:
    """rho_1 ⊗ ... ⊗ rho_N"""
    grid, hbar = factors[0].grid, factors[0].hbar
    if any(f.grid != grid or f.hbar != hbar for f in factors):
        raise IncompatibleInputsError("Product factors must share grid and hbar")
    dim = grid.n_x ** len(factors)
    if dim > settings.DENSITY_MATRIX_MAX_MODES:
        raise MemoryBudgetError(f"{dim} modes exceed DENSITY_MATRIX_MAX_MODES")
    out = np.ones((1, 1), dtype=complex)
    for f in factors:
        out = np.kron(out, f.matrix)
    return DensityOperatorN.from_matrix(grid, hbar, out, n_bodies=len(factors))


# ─────────────────────────────────────────────────────────────────────
# Coherent states and operators
# ─────────────────────────────────────────────────────────────────────


def coherent_columns(points: np.ndarray, hbar: float, grid: SpaceGrid, normalize: bool = False) -> np.ndarray:
    """(n_x, M) orthonormal coordinates of |z_k, hbar> for z_k = points[k].

    No margin check; packets near the box edges are truncated, and rescaled
    to unit norm only when `normalize` is set.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    y = grid.points[:, None]
    x, xi = points[None, :, 0], points[None, :, 1]
    cols = (np.pi * hbar) ** -0.25 * np.exp(-((y - x) ** 2) / (2 * hbar) + 1j * xi * (y - x) / hbar)
    cols *= np.sqrt(grid.h)
    if normalize:
        cols /= np.linalg.norm(cols, axis=0, keepdims=True)
    return cols


def coherent_state(z: Sequence[float], hbar: float, grid: SpaceGrid) -> WaveFunction:
    """|z, hbar>: Gaussian of width sqrt(hbar) centred at x with mean momentum xi"""
    point = np.array([[float(z[0]), float(z[1])]])
    _check_margin(grid, hbar, point)
    col = coherent_columns(point, hbar, grid, normalize=True)[:, 0]
    return WaveFunction.from_vector(grid, col, hbar)


def position_operator(grid: SpaceGrid) -> np.ndarray:
    return np.diag(grid.points).astype(complex)


def momentum_operator(grid: SpaceGrid, hbar: float, power: int = 1) -> np.ndarray:
    """(-i hbar d/dx)^power as a dense Hermitian matrix"""
    n = grid.n_x
    fourier = np.fft.fft(np.eye(n), axis=0, norm="ortho")
    symbol = (hbar * grid.wavenumbers) ** power
    return fourier.conj().T @ (symbol[:, None] * fourier)


def apply_momentum(vectors: np.ndarray, grid: SpaceGrid, hbar: float, power: int = 1, axis: int = 0) -> np.ndarray:
    """(-i hbar d/dx)^power along one axis of a vector or tensor, spectrally"""
    shape = [1] * vectors.ndim
    shape[axis] = grid.n_x
    symbol = ((hbar * grid.wavenumbers) ** power).reshape(shape)
    return np.fft.ifft(symbol * np.fft.fft(vectors, axis=axis), axis=axis)


def expectation(R: DensityOperator, A: np.ndarray) -> float:
    """tr(R A) for Hermitian A"""
    if R.is_mixture:
        v = R.mix_vectors
        return float(np.real(np.sum(R.mix_weights * np.sum(v.conj() * (A @ v), axis=0))))
    return float(np.real(np.sum(R.matrix * A.T)))


def toeplitz_quantize(mu: PhaseDensity, hbar: float, grid: SpaceGrid) -> DensityOperator:
    """sum_k mu_k |z_k><z_k| over the atoms of mu (= OP^T((2 pi hbar) mu))"""
    mu.require_normalized()
    points, masses = mu.atoms()
    keep = masses >= settings.TOEPLITZ_SKIP_MASS
    points, masses = points[keep], masses[keep]
    _check_margin(grid, hbar, points)
    cols = coherent_columns(points, hbar, grid, normalize=True)
    return DensityOperator.from_mixture(grid, hbar, masses / masses.sum(), cols)


def toeplitz_operator(symbol: np.ndarray, phase_grid: PhaseGrid, hbar: float, grid: SpaceGrid) -> np.ndarray:
    """OP^T(phi) = (2 pi hbar)^-1 sum_k phi(z_k) |z_k><z_k| cellvol, phi on cell centres"""
    cols = coherent_columns(phase_grid.centers(), hbar, grid)
    weights = np.asarray(symbol, dtype=float).ravel() * phase_grid.cell_volume / (2 * np.pi * hbar)
    return (cols * weights) @ cols.conj().T


def resolution_of_identity(phase_grid: PhaseGrid, hbar: float, grid: SpaceGrid) -> np.ndarray:
    """OP^T(1), which approximates the identity on interior low-momentum states"""
    return toeplitz_operator(np.ones(phase_grid.shape), phase_grid, hbar, grid)


def identity_deviation(
    phase_grid: PhaseGrid,
    hbar: float,
    grid: SpaceGrid,
    test_points: np.ndarray,
) -> float:
    """max ||(OP^T(1) - I) psi|| over coherent test states at `test_points`"""
    ident = resolution_of_identity(phase_grid, hbar, grid)
    tests = coherent_columns(test_points, hbar, grid, normalize=True)
    return float(np.linalg.norm(ident @ tests - tests, axis=0).max())


def quadratic_symbol_errors(
    phase_grid: PhaseGrid,
    hbar: float,
    grid: SpaceGrid,
    test_point: Sequence[float],
) -> dict:
    """Relative errors of OP^T(phi) = phi + (hbar/4) phi'' for phi in {x, x^2, xi, xi^2}.

    Both sides are evaluated on a coherent test state.
    """
    psi = coherent_state(test_point, hbar, grid).vector
    centers = phase_grid.centers()
    X = position_operator(grid)
    P = momentum_operator(grid, hbar)
    cases = {
        "x": (centers[:, 0], X, 0.0),
        "x2": (centers[:, 0] ** 2, X @ X, 2.0),
        "xi": (centers[:, 1], P, 0.0),
        "xi2": (centers[:, 1] ** 2, P @ P, 2.0),
    }
    errors = {}
    for name, (symbol, op, laplacian) in cases.items():
        lhs = np.real(psi.conj() @ toeplitz_operator(symbol, phase_grid, hbar, grid) @ psi)
        rhs = np.real(psi.conj() @ op @ psi) + 0.25 * hbar * laplacian
        errors[name] = float(abs(lhs - rhs) / max(abs(rhs), 1e-300))
    return errors


# ─────────────────────────────────────────────────────────────────────
# Phase-space transforms
# ─────────────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class WignerFunction:
    """Signed phase-space function sampled at the cell centres of `grid`"""
    grid: PhaseGrid
    values: np.ndarray

    @property
    def total(self) -> float:
        return float(self.values.sum() * self.grid.cell_volume)

    @property
    def minimum(self) -> float:
        return float(self.values.min())


def wigner(R: DensityOperator) -> WignerFunction:
    """W(x_i, xi_j) = (pi hbar)^-1 sum_m exp(-2i xi_j m h / hbar) R[i+m, i-m].

    Exact discrete analogue: its phase-space integral equals tr(R).
    """
    if R.n_bodies != 1:
        raise MarginalRangeError("wigner is defined for one-body operators")
    n = R.grid.n_x
    mat = R.matrix
    i = np.arange(n)[:, None]
    m = np.arange(n)[None, :]
    pairs = mat[(i + m) % n, (i - m) % n]
    values = np.fft.fftshift(np.fft.fft(pairs, axis=1), axes=1).real / (np.pi * R.hbar)
    return WignerFunction(grid=R.grid.wigner_grid(R.hbar), values=values)


@dataclass(frozen=True)
class HusimiAudit:
    raw_mass: float
    mass_defect: float
    min_value: float


def husimi_values(R: DensityOperator, points: np.ndarray) -> np.ndarray:
    """(2 pi hbar)^-1 <z|R|z> at each phase point (coherent matrix-element route)"""
    cols = coherent_columns(points, R.hbar, R.grid)
    if R.is_mixture:
        overlaps = R.mix_vectors.conj().T @ cols
        vals = R.mix_weights @ (np.abs(overlaps) ** 2)
    else:
        vals = np.real(np.sum(cols.conj() * (R.matrix @ cols), axis=0))
    return vals / (2 * np.pi * R.hbar)


def husimi_with_audit(R: DensityOperator, phase_grid: Optional[PhaseGrid] = None) -> Tuple[PhaseDensity, HusimiAudit]:
    phase_grid = phase_grid or R.grid.phase_grid(R.hbar)
    vals = husimi_values(R, phase_grid.centers()).reshape(phase_grid.shape)
    masses = vals * phase_grid.cell_volume
    raw = float(masses.sum())
    audit = HusimiAudit(raw_mass=raw, mass_defect=abs(raw - R.trace), min_value=float(vals.min()))
    if audit.min_value < -settings.PSD_TOL:
        raise DensityNotNormalizedError(f"Husimi value {audit.min_value:.3e} below zero")
    if audit.mass_defect > settings.HUSIMI_MASS_TOL:
        logger.warning(
            f"Husimi mass defect {audit.mass_defect:.3e} on phase grid "
            f"{phase_grid.n_x}x{phase_grid.n_xi}; renormalising"
        )
    return PhaseDensity.from_weights(phase_grid, masses), audit


def husimi(R: DensityOperator, phase_grid: Optional[PhaseGrid] = None) -> PhaseDensity:
    """Husimi transform as a probability density on `phase_grid`"""
    return husimi_with_audit(R, phase_grid)[0]


def husimi_smoothed(R: DensityOperator) -> WignerFunction:
    """exp(hbar Laplacian / 4) applied to the Wigner function, by FFT on its grid"""
    w = wigner(R)
    g = w.grid
    kx = 2 * np.pi * np.fft.fftfreq(g.n_x, d=g.h_x)
    kp = 2 * np.pi * np.fft.fftfreq(g.n_xi, d=g.h_xi)
    damp = np.exp(-0.25 * R.hbar * (kx[:, None] ** 2 + kp[None, :] ** 2))
    values = np.real(np.fft.ifft2(damp * np.fft.fft2(w.values)))
    return WignerFunction(grid=g, values=values)


def husimi_route_gap(R: DensityOperator) -> float:
    """L1 distance between the smoothing and matrix-element Husimi routes"""
    smooth = husimi_smoothed(R)
    direct = husimi_values(R, smooth.grid.centers()).reshape(smooth.grid.shape)
    return float(np.abs(direct - smooth.values).sum() * smooth.grid.cell_volume)


def uniform_measure(phase_grid: PhaseGrid) -> RawMeasure:
    """Lebesgue measure restricted to the grid: unit density, masses = cell volume"""
    return phase_grid.centers(), np.full(phase_grid.n_x * phase_grid.n_xi, phase_grid.cell_volume)


@dataclass(frozen=True)
class PairingAudit:
    """Both sides of tr(OP^T(mu) R) = integral of the Husimi function against mu"""
    lhs: float
    rhs: float
    discrepancy: float

    @property
    def value(self) -> float:
        return self.rhs

    def normalized(self, hbar: float) -> float:
        """(2 pi hbar) * value, the pairing of OP^T((2 pi hbar) mu) with R"""
        return 2 * np.pi * hbar * self.value


def trace_pairing(mu: Union[PhaseDensity, RawMeasure], R: DensityOperator) -> PairingAudit:
    if isinstance(mu, PhaseDensity):
        points, masses = mu.atoms()
    else:
        points, masses = mu
    if R.n_bodies != 1:
        raise IncompatibleInputsError("trace_pairing takes a one-body operator")
    cols = coherent_columns(points, R.hbar, R.grid)
    # left side: materialise OP^T(mu) and take the trace against R
    op = (cols * (masses / (2 * np.pi * R.hbar))) @ cols.conj().T
    lhs = float(np.real(np.sum(op * R.matrix.T)))
    rhs = float(masses @ husimi_values(R, points))
    return PairingAudit(lhs=lhs, rhs=rhs, discrepancy=abs(lhs - rhs))


def husimi_nbody(R: DensityOperator, phase_grid: PhaseGrid) -> Tuple[np.ndarray, np.ndarray]:
    """Husimi measure of an n-body operator on the n-fold product of `phase_grid`.

    Returns (points (M^n, 2n) ordered (x_1, xi_1, ...), masses), renormalised.
    """
    n_b, n = R.n_bodies, R.grid.n_x
    centers = phase_grid.centers()
    cols = coherent_columns(centers, R.hbar, R.grid)
    m = centers.shape[0]
    if m ** n_b * n > settings.NBODY_MAX_AMPLITUDES:
        raise MemoryBudgetError(f"Husimi on {m}^{n_b} product cells exceeds NBODY_MAX_AMPLITUDES")
    if n_b == 1:
        vals = husimi_values(R, centers)
    else:
        # contract one ket and one bra axis per body
        t = R.matrix.reshape((n,) * (2 * n_b))
        for body in range(n_b):
            t = np.tensordot(t, cols.conj(), axes=([0], [0]))  # ket axis
            t = np.tensordot(t, cols, axes=([n_b - 1 - body], [0]))  # matching bra axis
            t = np.diagonal(t, axis1=-2, axis2=-1)
        vals = np.real(t).ravel() / (2 * np.pi * R.hbar) ** n_b
    masses = np.clip(vals, 0.0, None) * phase_grid.cell_volume ** n_b
    defect = abs(masses.sum() - 1.0)
    if defect > settings.HUSIMI_MASS_TOL:
        logger.warning(f"{n_b}-body Husimi mass defect {defect:.3e}; renormalising")
    idx = np.array(list(itertools.product(range(m), repeat=n_b)))
    points = centers[idx].reshape(idx.shape[0], 2 * n_b)
    return points, masses / masses.sum()


# ─────────────────────────────────────────────────────────────────────
# N-body structure
# ─────────────────────────────────────────────────────────────────────


def partial_trace(R: DensityOperator, n: int) -> DensityOperatorN:
    """Trace out bodies n+1..N"""
    N = R.n_bodies
    if not 1 <= n <= N:
        raise MarginalRangeError(f"Marginal order {n} outside 1..{N}")
    cls = DensityOperatorN if n > 1 else DensityOperator
    if n == N:
        return cls.from_matrix(R.grid, R.hbar, R.matrix, n_bodies=N)
    a, b = R.grid.n_x ** n, R.grid.n_x ** (N - n)
    reduced = np.einsum("ibjb->ij", R.matrix.reshape(a, b, a, b))
    return cls.from_matrix(R.grid, R.hbar, reduced, n_bodies=n)


def _check_permutation(sigma: Sequence[int], n_bodies: int) -> List[int]:
    sigma = [int(s) for s in sigma]
    if sorted(sigma) != list(range(n_bodies)):
        raise IncompatibleInputsError(f"{sigma} is not a permutation of 0..{n_bodies - 1}")
    return sigma


def permute(R: DensityOperator, sigma: Sequence[int]) -> DensityOperatorN:
    """U_sigma R U_sigma*, with (U_sigma psi)(x_1..x_N) = psi(x_sigma(1)..x_sigma(N))"""
    N = R.n_bodies
    axes = list(np.argsort(_check_permutation(sigma, N)))
    n = R.grid.n_x
    t = R.matrix.reshape((n,) * (2 * N)).transpose(axes + [N + a for a in axes])
    cls = DensityOperatorN if N > 1 else DensityOperator
    return cls.from_matrix(R.grid, R.hbar, t.reshape(R.dim, R.dim), n_bodies=N)


def permute_amplitudes(amplitudes: np.ndarray, sigma: Sequence[int]) -> np.ndarray:
    """U_sigma on a tensor of N-body amplitudes (or a batch, body axes first)"""
    N = len(sigma)
    axes = list(np.argsort(_check_permutation(sigma, N)))
    return np.transpose(amplitudes, axes + list(range(N, amplitudes.ndim)))


def symmetrize(R: DensityOperator) -> DensityOperatorN:
    """Average of U_sigma R U_sigma* over all permutations"""
    perms = list(itertools.permutations(range(R.n_bodies)))
    total = sum(permute(R, s).matrix for s in perms) / len(perms)
    return DensityOperatorN.from_matrix(R.grid, R.hbar, total, n_bodies=R.n_bodies)
