"""
Experiment Harness

run(config):
1. Resolve <output root>/<kind>-<hash12>/ and write the canonical config.
2. Apply the config's tolerance overrides to the settings for the run.
3. Dispatch on the experiment kind; each kind yields BoundReports (time
   series) and/or CheckReports (static audits).
4. A failed bound report is rerun once at dt/2 on a 1.5x finer transport
   grid and labelled "confirmed" or "discretization artifact".
5. Optionally rerun at dt/2 and record the relative change (refinement study).
6. Write CSV/.dat/JSON artifacts and manifest.json with SHA-256 checksums.

sweep(config, axis, values) runs independent configs and fits log-log and
linear slopes of each run's primary value. report(manifests) renders the
pass/fail table.
"""

import logging
import time
from contextlib import contextmanager
from dataclasses import dataclass
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from app.core.config import settings
from app.core.exceptions import ConfigError, LabError
from app.core.serialization import (
    read_report,
    sha256_file,
    write_bound_report,
    write_check_report,
    write_checkpoint_manifest,
    write_intervals,
    write_operator,
    write_particles,
    write_phase_density,
)
from app.schemas.experiment import ExperimentConfig, ExperimentKind, ReportSummary, RunManifest
from app.schemas.report import BoundReport, CheckReport
from app.services.couplingflow import (
    nccs_check,
    random_nccs_trials,
    verify_dobrushin,
    verify_thv,
    verify_tnsv,
    verify_tsl,
)
from app.services.hilbert import (
    DensityOperator,
    SpaceGrid,
    coherent_columns,
    coherent_state,
    husimi_route_gap,
    husimi_values,
    husimi_with_audit,
    identity_deviation,
    quadratic_symbol_errors,
    toeplitz_quantize,
    trace_pairing,
)
from app.services.phasespace import (
    ClassicalEnsembleN,
    PhaseDensity,
    PhaseGrid,
    Potential,
    lambda_constant,
    liouville_step,
    moment_envelope,
    propagate_vlasov,
)
from app.services.qcdist import (
    cost_field,
    ehbar_exact_tiny,
    ehbar_lower,
    ehbar_upper,
    toeplitz_interval,
)
from app.services.qdynamics import NBodyState, propagate_hartree, propagate_nbody

logger = logging.getLogger(__name__)

Report = Union[BoundReport, CheckReport]

PRESET_DIR = Path(__file__).resolve().parent.parent / "presets"

# Kinds whose results depend on dt and can be refined
TIME_KINDS = {
    ExperimentKind.THV, ExperimentKind.TNSV, ExperimentKind.TSL, ExperimentKind.DOBRUSHIN,
    ExperimentKind.CLASSICAL_HEALTH, ExperimentKind.QUANTUM_HEALTH,
}

PRIMARY_METRIC = {
    "TOEPLITZ-CALCULUS": "interior_deviation",
    "HUSIMI": "max_route_gap",
    "COST-FLOOR": "mean_ground_energy",
    "SANDWICH": "max_lower_gap",
    "TOEPLITZ-INTERVAL": "max_violation",
    "CLASSICAL-HEALTH": "vlasov_energy_drift_rate",
    "QUANTUM-HEALTH": "self_convergence_error",
    "NCCS": "violations",
    "HBAR-SCALING": "slope_low",
    "HBAR-UNIFORMITY": "max_ratio",
    "REFINEMENT-STUDY": "relative_change",
}


def primary_value(report: Report) -> float:
    if isinstance(report, BoundReport):
        return float(report.lhs[-1])
    name = PRIMARY_METRIC.get(report.tag)
    if name is None or name not in report.metrics:
        name = sorted(report.metrics)[0]
    return float(report.metrics[name])


@contextmanager
def settings_overrides(overrides: Dict[str, float]):
    """Temporarily replace Settings fields named in the config's [tolerances]"""
    saved = {}
    try:
        for key, value in overrides.items():
            if not hasattr(settings, key):
                raise ConfigError(f"Unknown tolerance override '{key}'")
            saved[key] = getattr(settings, key)
            setattr(settings, key, type(saved[key])(value))
        yield
    finally:
        for key, value in saved.items():
            setattr(settings, key, value)


# ─────────────────────────────────────────────────────────────────────
# Inputs built from a config
# ─────────────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class LabSetup:
    config: ExperimentConfig
    V: Potential

    @classmethod
    def from_config(cls, config: ExperimentConfig) -> "LabSetup":
        return cls(config=config, V=config.potential.build())

    @property
    def report_tol(self) -> float:
        return self.config.tolerance("REPORT_TOL", settings.REPORT_TOL)

    def rng(self, offset: int = 0) -> np.random.Generator:
        return np.random.default_rng(self.config.run.seed + offset)

    def space_grid(self) -> SpaceGrid:
        g = self.config.grid
        return SpaceGrid(x_min=g.x_min, x_max=g.x_max, n_x=g.n_x)

    def phase_grid(self) -> PhaseGrid:
        """Deposition grid for classical densities"""
        g = self.config.grid
        return PhaseGrid(g.x_min, g.x_max, g.n_xi, -g.xi_max, g.xi_max, g.n_xi)

    def initial_density(self, n_particles: Optional[int] = None) -> PhaseDensity:
        init = self.config.initial
        return PhaseDensity.sample_gaussian(
            self.phase_grid(), init.center, init.sigma, n_particles or init.n_particles, self.rng(),
        )

    def partner_density(self) -> PhaseDensity:
        init = self.config.initial
        return PhaseDensity.sample_gaussian(
            self.phase_grid(), init.partner_center, init.partner_sigma, init.n_particles, self.rng(1),
        )

    def symbol(self, f_in: PhaseDensity) -> Optional[PhaseDensity]:
        mode = self.config.initial.symbol
        if mode == "none":
            return None
        if mode == "matched":
            return f_in
        pts, w = f_in.atoms()
        return PhaseDensity.from_atoms(f_in.grid, pts + np.asarray(self.config.initial.symbol_shift), w)

    def initial_operator(self, hbar: float, symbol: Optional[PhaseDensity]) -> DensityOperator:
        """Töplitz quantization of the symbol, or a coherent state at the centre"""
        grid = self.space_grid()
        if symbol is not None:
            return toeplitz_quantize(symbol, hbar, grid)
        return coherent_state(self.config.initial.center, hbar, grid).projector()


def _sample_index(times: Sequence[float], t: float) -> int:
    return int(np.argmin(np.abs(np.asarray(times) - min(t, times[-1]))))


def _interior_box(grid: SpaceGrid, hbar: float) -> Tuple[float, float, float]:
    """(x_lo, x_hi, xi_hi) where coherent states clear the boundary margin"""
    margin = settings.COHERENT_MARGIN_SIGMAS * np.sqrt(hbar)
    x_lo = grid.x_min + margin + grid.h
    x_hi = grid.x_max - 2 * grid.h - margin
    xi_hi = grid.p_max(hbar) - margin - 1e-9
    if x_hi <= x_lo or xi_hi <= 0:
        raise ConfigError(f"Box too small for coherent states at hbar={hbar}")
    return x_lo, x_hi, xi_hi


def _random_coherent_mixture(
    rng: np.random.Generator,
    grid: SpaceGrid,
    hbar: float,
    n_atoms: int,
    x_span: float,
    xi_span: float,
) -> Tuple[np.ndarray, np.ndarray, DensityOperator]:
    x_lo, x_hi, xi_hi = _interior_box(grid, hbar)
    center = 0.5 * (x_lo + x_hi)
    x_half = min(x_span, 0.5 * (x_hi - x_lo))
    xi_half = min(xi_span, xi_hi)
    points = np.column_stack([
        rng.uniform(center - x_half, center + x_half, n_atoms),
        rng.uniform(-xi_half, xi_half, n_atoms),
    ])
    weights = rng.dirichlet(np.ones(n_atoms))
    cols = coherent_columns(points, hbar, grid, normalize=True)
    return points, weights, DensityOperator.from_mixture(grid, hbar, weights, cols)


# ─────────────────────────────────────────────────────────────────────
# Kind runners: (setup, output dir or None) -> reports
# ─────────────────────────────────────────────────────────────────────


def _hbar_scaling(reports: List[BoundReport], t_eval: float = 1.0) -> CheckReport:
    """log-log slope of LHS(t_eval) against hbar"""
    hbars = np.array([r.hbar for r in reports])
    lhs = np.array([r.lhs[_sample_index(r.times, t_eval)] for r in reports])
    slope = float(np.polyfit(np.log(hbars), np.log(lhs), 1)[0])
    return CheckReport(
        tag="HBAR-SCALING",
        metrics={"slope_low": slope, "slope_high": slope},
        thresholds={"slope_low": 0.7, "slope_high": 1.3},
        lower_bounded=["slope_low"],
        notes=[f"LHS at t={t_eval} for hbar in {hbars.tolist()}"],
    )


def _run_thv(setup: LabSetup, out_dir: Optional[Path]) -> List[Report]:
    cfg = setup.config
    f_in = setup.initial_density()
    symbol = setup.symbol(f_in)
    if out_dir is not None:
        write_phase_density(out_dir / "f_in.csv", f_in)
        write_particles(out_dir / "f_in_particles.csv", f_in.particles)
    reports: List[Report] = []
    for hbar in cfg.physics.hbar:
        R_in = setup.initial_operator(hbar, symbol)
        reports.append(verify_thv(
            f_in, R_in, setup.V, cfg.time.t_final, cfg.time.samples, cfg.time.dt,
            symbol=symbol, report_tol=setup.report_tol, transport_refine=cfg.run.transport_refine,
        ))
    if len(reports) >= 3:
        reports.append(_hbar_scaling(reports))
    return reports


def _run_tnsv(setup: LabSetup, out_dir: Optional[Path]) -> List[Report]:
    cfg = setup.config
    if cfg.initial.symbol == "none":
        raise ConfigError("T-NSV needs Töplitz initial data (symbol = matched or shifted)")
    f_in = setup.initial_density()
    symbol = setup.symbol(f_in) if cfg.initial.symbol == "shifted" else None
    return [
        verify_tnsv(
            f_in, cfg.physics.n_bodies, cfg.physics.n_marginal, setup.V, cfg.time.t_final,
            cfg.time.samples, cfg.time.dt, hbar, setup.space_grid(), symbol=symbol,
            report_tol=setup.report_tol, transport_refine=cfg.run.transport_refine,
        )
        for hbar in cfg.physics.hbar
    ]


def _run_tsl(setup: LabSetup, out_dir: Optional[Path]) -> List[Report]:
    cfg = setup.config
    if cfg.initial.symbol == "none":
        raise ConfigError("T-SL needs Töplitz initial data (symbol = matched or shifted)")
    f_in = setup.initial_density()
    symbol = setup.symbol(f_in) if cfg.initial.symbol == "shifted" else None
    reports: List[Report] = [
        verify_tsl(
            f_in, cfg.physics.n_bodies, cfg.physics.n_marginal, setup.V, cfg.time.t_final,
            cfg.time.samples, cfg.time.dt, hbar, setup.space_grid(), symbol=symbol,
            integrator=cfg.time.integrator, report_tol=setup.report_tol,
            transport_refine=cfg.run.transport_refine,
        )
        for hbar in cfg.physics.hbar
    ]
    if len(reports) > 1 and cfg.initial.symbol == "matched":
        lam = lambda_constant(setup.V)
        ratio = max(max(np.asarray(r.lhs) / r.hbar) for r in reports)
        limit = 0.5 * (1 + np.exp(lam * cfg.time.t_final)) * (1 + setup.report_tol)
        reports.append(CheckReport(
            tag="HBAR-UNIFORMITY",
            metrics={"max_ratio": float(ratio)},
            thresholds={"max_ratio": float(limit)},
            notes=["max over hbar and t of LHS / hbar against (1 + e^{Lambda T}) / 2"],
        ))
    return reports


def _run_dobrushin(setup: LabSetup, out_dir: Optional[Path]) -> List[Report]:
    cfg = setup.config
    return [verify_dobrushin(
        setup.initial_density(), setup.partner_density(), setup.V, cfg.time.t_final,
        cfg.time.samples, cfg.time.dt, integrator=cfg.time.integrator, report_tol=setup.report_tol,
    )]


def _run_toeplitz_calculus(setup: LabSetup, out_dir: Optional[Path]) -> List[Report]:
    cfg = setup.config
    grid = setup.space_grid()
    reports: List[Report] = []
    for hbar in cfg.physics.hbar:
        phase_grid = grid.phase_grid(hbar)
        x_lo, x_hi, xi_hi = _interior_box(grid, hbar)
        mid, quarter = 0.5 * (x_lo + x_hi), 0.25 * (x_hi - x_lo)
        xi_test = min(1.0, 0.5 * xi_hi)
        tests = np.array([
            (x, xi) for x in np.linspace(mid - quarter, mid + quarter, 5) for xi in (-xi_test, 0.0, xi_test)
        ])
        deviation = identity_deviation(phase_grid, hbar, grid, tests)
        quadratic = quadratic_symbol_errors(phase_grid, hbar, grid, (mid + 0.3, 0.2))

        rng = setup.rng()
        pairing = 0.0
        for _ in range(cfg.run.trials):
            mu_pts, mu_w, _ = _random_coherent_mixture(rng, grid, hbar, 3, quarter, xi_test)
            _, _, R = _random_coherent_mixture(rng, grid, hbar, 4, quarter, xi_test)
            pairing = max(pairing, trace_pairing((mu_pts, mu_w), R).discrepancy)

        reports.append(CheckReport(
            tag="TOEPLITZ-CALCULUS",
            hbar=hbar,
            metrics={
                "interior_deviation": deviation,
                "quadratic_max_rel_error": max(quadratic.values()),
                "pairing_max_discrepancy": pairing,
                **{f"quadratic_{name}": value for name, value in quadratic.items()},
            },
            thresholds={
                "interior_deviation": 1e-3,
                "quadratic_max_rel_error": 1e-4,
                "pairing_max_discrepancy": 1e-6,
            },
        ))
    return reports


def _random_superposition_state(rng: np.random.Generator, grid: SpaceGrid, hbar: float) -> DensityOperator:
    """Mixture of two normalised superpositions of three coherent states"""
    x_lo, x_hi, xi_hi = _interior_box(grid, hbar)
    xi_cap = min(1.0, 0.5 * xi_hi)
    vectors = []
    for _ in range(2):
        points = np.column_stack([
            rng.uniform(x_lo, x_hi, 3), rng.uniform(-xi_cap, xi_cap, 3),
        ])
        coeffs = rng.normal(size=3) + 1j * rng.normal(size=3)
        v = coherent_columns(points, hbar, grid, normalize=True) @ coeffs
        vectors.append(v / np.linalg.norm(v))
    weights = rng.dirichlet(np.ones(2))
    return DensityOperator.from_mixture(grid, hbar, weights, np.column_stack(vectors))


def _run_husimi(setup: LabSetup, out_dir: Optional[Path]) -> List[Report]:
    cfg = setup.config
    grid = setup.space_grid()
    reports: List[Report] = []
    for hbar in cfg.physics.hbar:
        rng = setup.rng()
        low, defect, gap = np.inf, 0.0, 0.0
        for _ in range(cfg.run.trials):
            R = _random_superposition_state(rng, grid, hbar)
            _, audit = husimi_with_audit(R, grid.phase_grid(hbar))
            low = min(low, audit.min_value)
            defect = max(defect, audit.mass_defect)
            gap = max(gap, husimi_route_gap(R))
        reports.append(CheckReport(
            tag="HUSIMI",
            hbar=hbar,
            metrics={"min_value": float(low), "max_mass_defect": defect, "max_route_gap": gap},
            thresholds={"min_value": -1e-10, "max_mass_defect": 1e-8, "max_route_gap": 1e-6},
            lower_bounded=["min_value"],
        ))
    return reports


def _run_cost_floor(setup: LabSetup, out_dir: Optional[Path]) -> List[Report]:
    cfg = setup.config
    grid = setup.space_grid()
    reports: List[Report] = []
    for hbar in cfg.physics.hbar:
        x_lo, x_hi, xi_hi = _interior_box(grid, hbar)
        mid = 0.5 * (x_lo + x_hi)
        xi_test = min(1.0, 0.5 * xi_hi)
        nodes = np.array([(mid + dx, xi) for dx in (-1.0, 0.0, 1.0) for xi in (-xi_test, 0.0, xi_test)])
        energies = cost_field(grid, hbar, nodes).ground_energies()
        rel = np.abs(energies - 0.5 * hbar) / (0.5 * hbar)
        reports.append(CheckReport(
            tag="COST-FLOOR",
            hbar=hbar,
            metrics={
                "max_relative_floor_error": float(rel.max()),
                "mean_ground_energy": float(energies.mean()),
                "min_ground_energy": float(energies.min()),
            },
            thresholds={"max_relative_floor_error": 0.02},
        ))
    return reports


def _tiny_cell_grid() -> PhaseGrid:
    return PhaseGrid(-1.5, 1.5, 6, -1.5, 1.5, 6)


def _tiny_instance(rng: np.random.Generator, grid: SpaceGrid, hbar: float):
    """Coherent mixture R (rank <= 4) and a classical density near its Husimi function on 36 cells"""
    n_atoms = int(rng.integers(1, 5))
    mu_pts, mu_w, R = _random_coherent_mixture(rng, grid, hbar, n_atoms, 1.0, 0.5)
    cells = _tiny_cell_grid()
    hus = husimi_values(R, cells.centers()).reshape(cells.shape)
    p = PhaseDensity.from_weights(cells, hus * (1 + 0.3 * rng.uniform(-1, 1, cells.shape)))
    mu = PhaseDensity.from_atoms(cells, mu_pts, mu_w)
    return p, mu, R


def _run_sandwich(setup: LabSetup, out_dir: Optional[Path]) -> List[Report]:
    cfg = setup.config
    grid = setup.space_grid()
    hbar = cfg.physics.hbar[0]
    rng = setup.rng()
    order_violations, floor_gap, lower_gap, upper_gap = 0, np.inf, 0.0, 0.0
    rows = []
    for k in range(cfg.run.trials):
        p, mu, R = _tiny_instance(rng, grid, hbar)
        lower = ehbar_lower(p, R).value
        exact = ehbar_exact_tiny(p, R, symbol=mu)
        upper = ehbar_upper(p, R, symbol=mu).value
        ok = lower <= exact.value * (1 + 1e-6) and exact.value <= upper * (1 + 1e-6)
        order_violations += not ok
        floor_gap = min(floor_gap, lower - 0.5 * hbar)
        lower_gap = max(lower_gap, (exact.value - lower) / exact.value)
        upper_gap = max(upper_gap, (upper - exact.value) / exact.value)
        rows.append((float(k), lower, upper, exact.value if exact.converged else np.nan, "|".join(exact.flags) or "ok"))

    # fully constrained: a single classical atom
    z = (0.2, -0.1)
    _, _, R = _random_coherent_mixture(rng, grid, hbar, 3, 1.0, 0.5)
    single = ehbar_exact_tiny(PhaseDensity.point_mass(_tiny_cell_grid(), z), R)
    direct = float(np.real(np.trace(cost_field(grid, hbar, np.array([z])).matrix(0) @ R.matrix)))
    if out_dir is not None:
        write_intervals(out_dir / "sandwich_intervals.csv", rows)
    return [CheckReport(
        tag="SANDWICH",
        hbar=hbar,
        metrics={
            "order_violations": float(order_violations),
            "floor_gap": float(floor_gap),
            "max_lower_gap": lower_gap,
            "max_upper_gap": upper_gap,
            "single_atom_error": abs(single.value - direct),
        },
        thresholds={
            "order_violations": 0.0,
            "floor_gap": -1e-12,
            "max_lower_gap": 0.10,
            "max_upper_gap": 0.10,
            "single_atom_error": 1e-8,
        },
        lower_bounded=["floor_gap"],
    )]


def _run_toeplitz_interval(setup: LabSetup, out_dir: Optional[Path]) -> List[Report]:
    cfg = setup.config
    grid = setup.space_grid()
    hbar = cfg.physics.hbar[0]
    rng = setup.rng()
    violation, unconverged, rows = 0.0, 0, []
    for k in range(cfg.run.trials):
        p, mu, _ = _tiny_instance(rng, grid, hbar)
        R = toeplitz_quantize(mu, hbar, grid)
        lower, upper = toeplitz_interval(p, mu, hbar, grid)
        exact = ehbar_exact_tiny(p, R, symbol=mu)
        if not exact.converged:
            unconverged += 1
        scale = max(1.0, abs(exact.value))
        violation = max(violation, lower - exact.value, exact.value - upper) / scale if exact.converged else violation
        rows.append((float(k), lower, upper, exact.value if exact.converged else np.nan, "|".join(exact.flags) or "ok"))
    if out_dir is not None:
        write_intervals(out_dir / "toeplitz_intervals.csv", rows)
    return [CheckReport(
        tag="TOEPLITZ-INTERVAL",
        hbar=hbar,
        metrics={"max_violation": float(max(violation, 0.0)), "unconverged": float(unconverged)},
        thresholds={"max_violation": 1e-6, "unconverged": 0.0},
    )]


def _relative_drift_rate(series: np.ndarray, t_final: float) -> float:
    series = np.asarray(series, dtype=float)
    scale = max(abs(series[0]), 1e-300)
    return float(np.abs(series - series[0]).max() / scale / max(t_final, 1e-300))


def _run_classical_health(setup: LabSetup, out_dir: Optional[Path]) -> List[Report]:
    cfg = setup.config
    f_in = setup.initial_density()
    traj = propagate_vlasov(f_in, setup.V, cfg.time.dt, cfg.time.t_final, None, integrator=cfg.time.integrator)
    envelope = moment_envelope(traj.second_moments[0], setup.V, traj.times)
    metrics = {"vlasov_energy_drift_rate": _relative_drift_rate(traj.energies, cfg.time.t_final)}
    thresholds = {"vlasov_energy_drift_rate": 1e-6}
    checks = {"moment_bound": bool(np.all(traj.second_moments <= envelope * (1 + 1e-12)))}

    N = cfg.physics.n_bodies
    if N >= 2:
        small = setup.initial_density(n_particles=16 if N == 2 else 5)
        ensemble = ClassicalEnsembleN.product(small, N)
        energies = [float(ensemble.weights @ ensemble.hamiltonian(setup.V))]
        for _ in range(int(round(cfg.time.t_final / cfg.time.dt))):
            ensemble = liouville_step(ensemble, setup.V, cfg.time.dt, integrator=cfg.time.integrator)
        energies.append(float(ensemble.weights @ ensemble.hamiltonian(setup.V)))
        metrics["liouville_energy_drift_rate"] = _relative_drift_rate(np.array(energies), cfg.time.t_final)
        thresholds["liouville_energy_drift_rate"] = 1e-6

    if out_dir is not None:
        write_phase_density(out_dir / "f_final.csv", traj.densities[-1])
        write_particles(out_dir / "f_final_particles.csv", traj.densities[-1].particles)
    return [CheckReport(tag="CLASSICAL-HEALTH", metrics=metrics, thresholds=thresholds, checks=checks)]


def _run_quantum_health(setup: LabSetup, out_dir: Optional[Path]) -> List[Report]:
    cfg = setup.config
    grid = setup.space_grid()
    dt, T = cfg.time.dt, cfg.time.t_final
    reports: List[Report] = []
    for hbar in cfg.physics.hbar:
        R0 = coherent_state(cfg.initial.center, hbar, grid).projector()
        traj = propagate_hartree(R0, setup.V, dt, T)
        metrics = {
            "trace_drift_rate": float(np.abs(traj.traces - 1.0).max() / max(T, 1e-300)),
            "purity_drift": float(np.abs(traj.purities - traj.purities[0]).max()),
            "energy_drift_rate": _relative_drift_rate(traj.energies, T),
        }
        thresholds = {"trace_drift_rate": 1e-10, "purity_drift": 1e-8}

        # dt self-convergence on a short window
        t_conv = min(T, 0.5)
        finals = [
            propagate_hartree(R0, setup.V, step, t_conv, [t_conv]).states[-1].matrix
            for step in (dt, dt / 2, dt / 4)
        ]
        e1 = float(np.linalg.norm(finals[0] - finals[1]))
        e2 = float(np.linalg.norm(finals[1] - finals[2]))
        order = float(np.log2(e1 / e2)) if e2 > 0 else float("nan")
        metrics.update({"self_convergence_error": e1, "order_low": order, "order_high": order})
        thresholds.update({"order_low": 1.7, "order_high": 2.3})

        N = cfg.physics.n_bodies
        if N >= 2:
            col = coherent_columns(np.array([cfg.initial.center]), hbar, grid, normalize=True)
            state = NBodyState.product_mixture(grid, hbar, np.ones(1), [col] * N, setup.V)
            ntraj = propagate_nbody(state, dt, T, [0.0, T])
            metrics["nbody_norm_drift_rate"] = float(np.abs(ntraj.norms - 1.0).max() / max(T, 1e-300))
            thresholds["nbody_norm_drift_rate"] = 1e-10

        every = cfg.run.checkpoint_every
        if out_dir is not None and every > 0:
            rows = []
            for k in range(0, traj.times.size, every):
                write_operator(out_dir / f"checkpoint_h{hbar:g}_{k:05d}.op", traj.states[k])
                rows.append((traj.times[k], traj.traces[k], traj.purities[k], traj.energies[k]))
            write_checkpoint_manifest(out_dir / f"checkpoints_h{hbar:g}.csv", rows)

        reports.append(CheckReport(
            tag="QUANTUM-HEALTH", hbar=hbar, metrics=metrics, thresholds=thresholds,
            lower_bounded=["order_low"],
        ))
    return reports


def _run_nccs(setup: LabSetup, out_dir: Optional[Path]) -> List[Report]:
    rng = setup.rng()
    violations, worst = random_nccs_trials(rng, setup.config.run.trials)
    A = rng.normal(size=(4, 4))
    A = A + A.T
    sx = np.array([[0, 1], [1, 0]], dtype=complex)
    sy = np.array([[0, -1j], [1j, 0]])
    return [CheckReport(
        tag="NCCS",
        metrics={"violations": float(violations), "worst_relative_gap": worst},
        thresholds={"violations": 0.0, "worst_relative_gap": -1e-10},
        lower_bounded=["worst_relative_gap"],
        checks={
            "equal_operators": nccs_check(np.eye(4) / 4, A, A),
            "anticommuting_pair": nccs_check(np.eye(2) / 2, sx, sy),
        },
    )]


KIND_RUNNERS: Dict[ExperimentKind, Callable[[LabSetup, Optional[Path]], List[Report]]] = {
    ExperimentKind.THV: _run_thv,
    ExperimentKind.TNSV: _run_tnsv,
    ExperimentKind.TSL: _run_tsl,
    ExperimentKind.DOBRUSHIN: _run_dobrushin,
    ExperimentKind.TOEPLITZ_CALCULUS: _run_toeplitz_calculus,
    ExperimentKind.HUSIMI: _run_husimi,
    ExperimentKind.COST_FLOOR: _run_cost_floor,
    ExperimentKind.SANDWICH: _run_sandwich,
    ExperimentKind.TOEPLITZ_INTERVAL: _run_toeplitz_interval,
    ExperimentKind.CLASSICAL_HEALTH: _run_classical_health,
    ExperimentKind.QUANTUM_HEALTH: _run_quantum_health,
    ExperimentKind.NCCS: _run_nccs,
}


def execute(config: ExperimentConfig, out_dir: Optional[Path] = None) -> List[Report]:
    """Run one experiment kind under the config's tolerance overrides"""
    with settings_overrides(config.tolerances):
        setup = LabSetup.from_config(config)
        return KIND_RUNNERS[config.experiment.kind](setup, out_dir)


# ─────────────────────────────────────────────────────────────────────
# Refinement
# ─────────────────────────────────────────────────────────────────────


def refined_config(config: ExperimentConfig, transport: bool = True) -> ExperimentConfig:
    """dt halved; transport grid 1.5x finer when `transport`"""
    out = config.with_overrides("time", dt=config.time.dt / 2)
    if transport:
        out = out.with_overrides("run", transport_refine=config.run.transport_refine * 1.5)
    return out


def _match(report: Report, candidates: Sequence[Report]) -> Optional[Report]:
    for other in candidates:
        if other.tag == report.tag and other.hbar == report.hbar:
            return other
    return None


def apply_refinement_rerun(config: ExperimentConfig, reports: List[Report]) -> List[Report]:
    """Label failed bound reports by rerunning once on the refined discretisation"""
    failed = [r for r in reports if isinstance(r, BoundReport) and not r.passed]
    if not failed or config.experiment.kind not in TIME_KINDS or not config.run.refinement_rerun:
        return reports
    logger.info(f"{len(failed)} bound report(s) failed; rerunning at dt={config.time.dt / 2}")
    try:
        rerun = execute(refined_config(config))
    except LabError as e:
        logger.error(f"Refinement rerun failed: {e}")
        rerun = []
    out = []
    for r in reports:
        if isinstance(r, BoundReport) and not r.passed:
            other = _match(r, rerun)
            verdict = "discretization artifact" if other is not None and other.passed else "confirmed"
            r = r.model_copy(update={"refinement_verdict": verdict})
            logger.warning(f"{r.tag} hbar={r.hbar}: failure {verdict}")
        out.append(r)
    return out


def refinement_study(config: ExperimentConfig, reports: List[Report]) -> List[CheckReport]:
    """Relative change of every bound report's LHS when dt is halved"""
    rerun = execute(refined_config(config, transport=False))
    out = []
    for r in reports:
        if not isinstance(r, BoundReport):
            continue
        other = _match(r, rerun)
        if other is None or len(other.lhs) != len(r.lhs):
            continue
        base = np.asarray(r.lhs)
        change = float(np.abs(np.asarray(other.lhs) - base).max() / max(np.abs(base).max(), 1e-300))
        out.append(CheckReport(
            tag="REFINEMENT-STUDY",
            hbar=r.hbar,
            metrics={"relative_change": change},
            thresholds={"relative_change": 0.01},
            notes=[f"{r.tag} LHS at dt={config.time.dt} against dt={config.time.dt / 2}"],
        ))
    return out


# ─────────────────────────────────────────────────────────────────────
# run / sweep / report
# ─────────────────────────────────────────────────────────────────────


def output_root(config: ExperimentConfig) -> Path:
    return Path(config.run.output_dir or settings.LAB_OUTPUT_ROOT)


def run_directory(config: ExperimentConfig) -> Path:
    return output_root(config) / f"{config.experiment.kind.value}-{config.short_hash}"


def _versions() -> Dict[str, str]:
    out = {"lab": settings.PROJECT_VERSION}
    for package in ("numpy", "scipy", "POT", "pydantic"):
        try:
            out[package] = metadata.version(package)
        except metadata.PackageNotFoundError:
            out[package] = "unknown"
    return out


def _report_stem(index: int, report: Report) -> str:
    stem = f"{index:02d}_{report.tag.lower()}"
    if report.hbar is not None:
        stem += f"_h{report.hbar:g}"
    return stem


def _emit(out_dir: Path, reports: List[Report]) -> List[ReportSummary]:
    summaries = []
    for index, report in enumerate(reports):
        stem = _report_stem(index, report)
        if isinstance(report, BoundReport):
            write_bound_report(out_dir / stem, report)
        else:
            write_check_report(out_dir / stem, report)
        summaries.append(ReportSummary(
            tag=report.tag,
            hbar=report.hbar,
            worst_margin=report.worst_margin,
            passed=report.passed,
            refinement_verdict=report.refinement_verdict,
            primary_value=primary_value(report),
            file_stem=stem,
        ))
        logger.info(report.summary_line())
    return summaries


def _write_manifest(manifest: RunManifest, out_dir: Path) -> RunManifest:
    files = {
        path.name: sha256_file(path)
        for path in sorted(out_dir.iterdir())
        if path.is_file() and path.name != "manifest.json"
    }
    manifest = manifest.model_copy(update={"files": files})
    (out_dir / "manifest.json").write_text(manifest.model_dump_json(indent=2))
    return manifest


def run(config: ExperimentConfig) -> RunManifest:
    """Execute one experiment end to end; failures are recorded, never raised"""
    out_dir = run_directory(config)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.ini").write_text(config.canonical_text())
    started = time.monotonic()
    manifest = RunManifest(
        config_hash=config.config_hash,
        name=config.experiment.name,
        kind=config.experiment.kind,
        output_dir=str(out_dir),
        versions=_versions(),
        started_at=datetime.now(timezone.utc).isoformat(),
    )
    logger.info(f"Run {config.experiment.name} ({config.experiment.kind.value}) -> {out_dir}")

    stage = "execute"
    try:
        reports = execute(config, out_dir)
        stage = "refinement"
        reports = apply_refinement_rerun(config, reports)
        if config.run.refinement_study and config.experiment.kind in TIME_KINDS:
            reports = reports + refinement_study(config, reports)
        stage = "emit"
        summaries = _emit(out_dir, reports)
        manifest = manifest.model_copy(update={
            "reports": summaries,
            "passed": bool(summaries) and all(s.passed for s in summaries),
        })
    except Exception as e:
        logger.error(f"Run {config.experiment.name} failed during {stage}: {e}")
        manifest = manifest.model_copy(update={"failure_stage": stage, "error": str(e), "passed": False})

    manifest = manifest.model_copy(update={"wall_clock_seconds": time.monotonic() - started})
    manifest = _write_manifest(manifest, out_dir)
    logger.info(f"Run {config.experiment.name} finished: {'PASS' if manifest.passed else 'FAIL'}")
    return manifest


SWEEP_AXES = {
    "hbar": ("physics", lambda v: {"hbar": [float(v)]}),
    "dt": ("time", lambda v: {"dt": float(v)}),
    "n_x": ("grid", lambda v: {"n_x": int(v)}),
}


@dataclass(frozen=True)
class SweepResult:
    axis: str
    values: Tuple[float, ...]
    primary: Tuple[float, ...]
    manifests: Tuple[RunManifest, ...]
    loglog_slope: float
    linear_slope: float
    monotone_decreasing: bool
    csv_path: Path


def sweep(config: ExperimentConfig, axis: str, values: Sequence[float]) -> SweepResult:
    """Independent runs along one axis plus a convergence CSV with fitted slopes"""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"Unknown sweep axis '{axis}', expected one of {sorted(SWEEP_AXES)}")
    if not values or not all(np.isfinite(values)):
        raise ConfigError("Sweep values must be a non-empty list of finite numbers")
    section, update = SWEEP_AXES[axis]
    manifests, primary = [], []
    for value in values:
        manifest = run(config.with_overrides(section, **update(value)))
        manifests.append(manifest)
        primary.append(manifest.reports[0].primary_value if manifest.reports else float("nan"))

    x, y = np.asarray(values, dtype=float), np.asarray(primary, dtype=float)
    ok = np.isfinite(y)
    positive = ok & (x > 0) & (y > 0)
    loglog = float(np.polyfit(np.log(x[positive]), np.log(y[positive]), 1)[0]) if positive.sum() >= 2 else float("nan")
    linear = float(np.polyfit(x[ok], y[ok], 1)[0]) if ok.sum() >= 2 else float("nan")
    order = np.argsort(x)
    monotone = bool(np.all(np.diff(y[order]) <= 0))

    sweep_dir = output_root(config) / f"sweep-{axis}-{config.short_hash}"
    sweep_dir.mkdir(parents=True, exist_ok=True)
    csv_path = sweep_dir / "convergence.csv"
    lines = [
        f"# axis={axis} loglog_slope={loglog:.12e} linear_slope={linear:.12e} monotone_decreasing={int(monotone)}",
        "axis_value,value,config_hash,passed",
    ]
    for value, result, manifest in zip(values, primary, manifests):
        lines.append(f"{float(value):.12e},{result:.12e},{manifest.config_hash[:12]},{int(manifest.passed)}")
    csv_path.write_text("\n".join(lines) + "\n")
    logger.info(f"Sweep over {axis}: log-log slope {loglog:.4f}, linear slope {linear:.4f}")
    return SweepResult(axis, tuple(float(v) for v in values), tuple(primary), tuple(manifests), loglog, linear, monotone, csv_path)


def load_manifests(directory: Union[str, Path]) -> List[RunManifest]:
    directory = Path(directory)
    paths = sorted(directory.glob("manifest.json")) + sorted(directory.glob("*/manifest.json"))
    return [RunManifest.model_validate_json(p.read_text()) for p in paths]


def load_reports(manifest: RunManifest) -> List[Report]:
    out_dir = Path(manifest.output_dir)
    return [read_report(out_dir / f"{s.file_stem}.json") for s in manifest.reports]


def report(manifests: Sequence[RunManifest], out_dir: Optional[Union[str, Path]] = None) -> str:
    """Plain-text summary ordered by report tag; also written as summary.txt/summary.csv"""
    rows = []
    for m in manifests:
        if m.failure_stage is not None:
            rows.append((m.kind.value.upper(), m.name, m.config_hash[:12], None, float("nan"), False, f"error in {m.failure_stage}"))
        for s in m.reports:
            rows.append((s.tag, m.name, m.config_hash[:12], s.hbar, s.worst_margin, s.passed, s.refinement_verdict))
    rows.sort(key=lambda r: (r[0], r[1], r[3] if r[3] is not None else -1.0))

    failed = [r for r in rows if not r[5]]
    lines = ["ALL PASS" if rows and not failed else f"FAILURES: {len(failed)} of {len(rows)}", ""]
    lines.append(f"{'tag':<20} {'name':<28} {'config':<12} {'hbar':>8} {'worst margin':>14}  result")
    for tag, name, chash, hbar, margin, passed, verdict in rows:
        hb = f"{hbar:g}" if hbar is not None else "-"
        result = "PASS" if passed else "FAIL"
        if not passed and verdict:
            result += f" ({verdict})"
        lines.append(f"{tag:<20} {name:<28} {chash:<12} {hb:>8} {margin:>14.6e}  {result}")
    text = "\n".join(lines) + "\n"

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "summary.txt").write_text(text)
        csv = ["tag,name,config_hash,hbar,worst_margin,pass,refinement_verdict"]
        for tag, name, chash, hbar, margin, passed, verdict in rows:
            hb = "" if hbar is None else f"{hbar:.12e}"
            csv.append(f"{tag},{name},{chash},{hb},{margin:.12e},{int(passed)},{verdict or ''}")
        (out_dir / "summary.csv").write_text("\n".join(csv) + "\n")
    return text


# ─────────────────────────────────────────────────────────────────────
# Presets
# ─────────────────────────────────────────────────────────────────────


def list_presets(preset_dir: Path = PRESET_DIR) -> Dict[str, Path]:
    return {path.stem: path for path in sorted(preset_dir.glob("*.ini"))}


def load_preset(name: str, preset_dir: Path = PRESET_DIR) -> ExperimentConfig:
    presets = list_presets(preset_dir)
    if name not in presets:
        raise ConfigError(f"Unknown preset '{name}', expected one of {sorted(presets)}")
    return ExperimentConfig.load(presets[name])
