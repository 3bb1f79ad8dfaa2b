"""
Artifact Serialization

Plain-text and binary formats for everything a run writes to disk:

    phase density   # phase-density d=1 nx=.. nxi=.. xmin=.. xmax=.. ximin=.. ximax=..
                    i,j,weight rows
    particles       x,xi,w rows
    operator        <name>.op: fixed header (magic, d, n_x, n_bodies, flags,
                    hbar, x_min, x_max) then row-major complex64 entries;
                    <name>.op.eig.csv: sorted eigenvalues
    plan            i,j,mass rows of the nonzero entries
    bound report    t,lhs,rhs,margin,pass (+ .dat twin with every series)
    check report    metric,value,threshold,pass
    interval        t,lower,upper,exact_or_nan,flags
    checkpoints     t,trace,purity,energy

All floats are written with "%.12e" so reruns produce byte-identical files.
"""

import hashlib
import logging
from pathlib import Path
from typing import Iterable, List, Sequence, Tuple, Union

import numpy as np

from app.core.exceptions import ConfigError
from app.schemas.report import BoundReport, CheckReport
from app.services.hilbert import DensityOperator, SpaceGrid
from app.services.phasespace import ParticleCloud, PhaseDensity, PhaseGrid
from app.services.transport import TransportPlan

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
FLOAT_FMT = "%.12e"

OPERATOR_MAGIC = b"QCLABOP1"
OPERATOR_HEADER = np.dtype([
    ("magic", "S8"),
    ("d", "<i4"),
    ("n_x", "<i4"),
    ("n_bodies", "<i4"),
    ("flags", "<u4"),
    ("hbar", "<f8"),
    ("x_min", "<f8"),
    ("x_max", "<f8"),
])
FLAG_PERIODIC = 1


def sha256_file(path: PathLike) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_rows(path: PathLike, header: str, columns: Sequence[np.ndarray], fmt: Sequence[str], delimiter: str = ","):
    data = np.column_stack([np.asarray(c) for c in columns]) if columns else np.empty((0, 0))
    np.savetxt(path, data, fmt=list(fmt), delimiter=delimiter, header=header, comments="")


# ── phase densities ──────────────────────────────────────────────────


def write_phase_density(path: PathLike, p: PhaseDensity) -> Path:
    g = p.grid
    header = (
        f"# phase-density d={g.d} nx={g.n_x} nxi={g.n_xi} xmin={g.x_min!r} xmax={g.x_max!r} "
        f"ximin={g.xi_min!r} ximax={g.xi_max!r}\ni,j,weight"
    )
    i, j = np.nonzero(p.weights)
    _write_rows(path, header, [i, j, p.weights[i, j]], ["%d", "%d", FLOAT_FMT])
    return Path(path)


def read_phase_density(path: PathLike) -> PhaseDensity:
    with open(path) as fh:
        first = fh.readline().strip()
    if not first.startswith("# phase-density"):
        raise ConfigError(f"{path} is not a phase-density file")
    fields = dict(item.split("=", 1) for item in first.split()[2:])
    grid = PhaseGrid(
        x_min=float(fields["xmin"]), x_max=float(fields["xmax"]), n_x=int(fields["nx"]),
        xi_min=float(fields["ximin"]), xi_max=float(fields["ximax"]), n_xi=int(fields["nxi"]),
        d=int(fields["d"]),
    )
    rows = np.atleast_2d(np.loadtxt(path, delimiter=",", skiprows=2, ndmin=2))
    weights = np.zeros(grid.shape)
    if rows.size:
        weights[rows[:, 0].astype(int), rows[:, 1].astype(int)] = rows[:, 2]
    return PhaseDensity(grid=grid, weights=weights)


def write_particles(path: PathLike, cloud: ParticleCloud) -> Path:
    _write_rows(path, "x,xi,w", [cloud.x, cloud.xi, cloud.w], [FLOAT_FMT] * 3)
    return Path(path)


def read_particles(path: PathLike) -> ParticleCloud:
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return ParticleCloud(x=rows[:, 0].copy(), xi=rows[:, 1].copy(), w=rows[:, 2].copy())


# ── operators ────────────────────────────────────────────────────────


def write_operator(path: PathLike, R: DensityOperator) -> Tuple[Path, Path]:
    """Binary container plus the eigenvalue audit CSV next to it"""
    path = Path(path)
    header = np.zeros(1, dtype=OPERATOR_HEADER)
    header["magic"] = OPERATOR_MAGIC
    header["d"] = R.grid.d
    header["n_x"] = R.grid.n_x
    header["n_bodies"] = R.n_bodies
    header["flags"] = FLAG_PERIODIC if R.grid.periodic else 0
    header["hbar"] = R.hbar
    header["x_min"] = R.grid.x_min
    header["x_max"] = R.grid.x_max
    with open(path, "wb") as fh:
        header.tofile(fh)
        np.ascontiguousarray(R.matrix, dtype="<c8").tofile(fh)
    eig_path = path.with_name(path.name + ".eig.csv")
    _write_rows(eig_path, "eigenvalue", [R.eigenvalues()], [FLOAT_FMT])
    return path, eig_path


def read_operator(path: PathLike) -> DensityOperator:
    """Inverse of write_operator; the single-precision payload is re-symmetrised and renormalised"""
    with open(path, "rb") as fh:
        header = np.fromfile(fh, dtype=OPERATOR_HEADER, count=1)
        payload = np.fromfile(fh, dtype="<c8")
    if header.size != 1 or header["magic"][0] != OPERATOR_MAGIC:
        raise ConfigError(f"{path} is not an operator container")
    grid = SpaceGrid(
        x_min=float(header["x_min"][0]), x_max=float(header["x_max"][0]), n_x=int(header["n_x"][0]),
        periodic=bool(header["flags"][0] & FLAG_PERIODIC), d=int(header["d"][0]),
    )
    n_bodies = int(header["n_bodies"][0])
    dim = grid.n_x ** n_bodies
    if payload.size != dim * dim:
        raise ConfigError(f"{path}: expected {dim * dim} entries, found {payload.size}")
    M = payload.astype(complex).reshape(dim, dim)
    M = 0.5 * (M + M.conj().T)
    M /= np.real(np.trace(M))
    return DensityOperator.from_matrix(grid, float(header["hbar"][0]), M, n_bodies=n_bodies)


# ── plans, intervals, checkpoints ────────────────────────────────────


def write_plan(path: PathLike, plan: TransportPlan) -> Path:
    i, j, mass = plan.entries()
    _write_rows(path, "i,j,mass", [i, j, mass], ["%d", "%d", FLOAT_FMT])
    return Path(path)


def write_intervals(path: PathLike, rows: Iterable[Tuple[float, float, float, float, str]]) -> Path:
    """t,lower,upper,exact_or_nan,flags"""
    lines = ["t,lower,upper,exact_or_nan,flags"]
    for t, lower, upper, exact, flags in rows:
        values = ",".join(FLOAT_FMT % v for v in (t, lower, upper, exact))
        lines.append(f"{values},{flags}")
    Path(path).write_text("\n".join(lines) + "\n")
    return Path(path)


def write_checkpoint_manifest(path: PathLike, rows: Iterable[Tuple[float, float, float, float]]) -> Path:
    rows = np.array(list(rows), dtype=float).reshape(-1, 4)
    _write_rows(path, "t,trace,purity,energy", list(rows.T), [FLOAT_FMT] * 4)
    return Path(path)


# ── reports ──────────────────────────────────────────────────────────


def write_bound_report(stem: PathLike, report: BoundReport) -> List[Path]:
    """<stem>.csv, <stem>.dat and <stem>.json"""
    stem = Path(stem)
    t = np.asarray(report.times)
    margins = np.asarray(report.margins)
    passes = np.asarray(report.sample_passes, dtype=int)
    base = [t, np.asarray(report.lhs), np.asarray(report.rhs), margins, passes]

    csv_path = stem.with_suffix(".csv")
    _write_rows(csv_path, "t,lhs,rhs,margin,pass", base, [FLOAT_FMT] * 4 + ["%d"])

    names = sorted(name for name, values in report.series.items() if len(values) == t.size)
    dat_path = stem.with_suffix(".dat")
    _write_rows(
        dat_path,
        "# " + " ".join(["t", "lhs", "rhs", "margin", "pass"] + names),
        base + [np.asarray(report.series[name]) for name in names],
        [FLOAT_FMT] * 4 + ["%d"] + [FLOAT_FMT] * len(names),
        delimiter=" ",
    )
    json_path = stem.with_suffix(".json")
    json_path.write_text(report.model_dump_json(indent=2))
    return [csv_path, dat_path, json_path]


def write_check_report(stem: PathLike, report: CheckReport) -> List[Path]:
    """<stem>.csv (metric,value,threshold,pass) and <stem>.json"""
    stem = Path(stem)
    passes = report.metric_passes()
    lines = ["metric,value,threshold,pass"]
    for name in sorted(report.metrics):
        limit = report.thresholds.get(name, float("nan"))
        ok = int(passes.get(name, True))
        lines.append(f"{name},{FLOAT_FMT % report.metrics[name]},{FLOAT_FMT % limit},{ok}")
    for name in sorted(report.checks):
        lines.append(f"{name},nan,nan,{int(report.checks[name])}")
    csv_path = stem.with_suffix(".csv")
    csv_path.write_text("\n".join(lines) + "\n")
    json_path = stem.with_suffix(".json")
    json_path.write_text(report.model_dump_json(indent=2))
    return [csv_path, json_path]


def read_report(path: PathLike) -> Union[BoundReport, CheckReport]:
    text = Path(path).read_text()
    if '"lhs"' in text:
        return BoundReport.model_validate_json(text)
    return CheckReport.model_validate_json(text)
