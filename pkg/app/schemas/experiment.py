import configparser
import hashlib
from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Union

from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from app.core.exceptions import ConfigError
from app.services.phasespace import POTENTIALS, Potential, make_potential


class ExperimentKind(str, Enum):
    """Experiment kinds the harness can run"""
    THV = "thv"
    TNSV = "tnsv"
    TSL = "tsl"
    DOBRUSHIN = "dobrushin"
    TOEPLITZ_CALCULUS = "toeplitz-calculus"
    HUSIMI = "husimi"
    COST_FLOOR = "cost-floor"
    SANDWICH = "sandwich"
    TOEPLITZ_INTERVAL = "toeplitz-interval"
    CLASSICAL_HEALTH = "classical-health"
    QUANTUM_HEALTH = "quantum-health"
    NCCS = "nccs"


def _split_list(v):
    """'0.5, 0.25' -> ['0.5', '0.25']"""
    if isinstance(v, str):
        return [item.strip() for item in v.split(",") if item.strip()]
    if isinstance(v, (int, float)):
        return [v]
    return v


class ExperimentSpec(BaseModel):
    kind: ExperimentKind
    name: str = Field(..., min_length=1, max_length=100)
    description: Optional[str] = None


class PhysicsSpec(BaseModel):
    hbar: List[float] = Field(default_factory=lambda: [0.25])
    n_bodies: int = Field(1, ge=1, le=3)
    n_marginal: int = Field(1, ge=1, le=3)

    @field_validator("hbar", mode="before")
    @classmethod
    def split_hbar(cls, v):
        return _split_list(v)

    @field_validator("hbar")
    @classmethod
    def positive_hbar(cls, v):
        if not v or any(h <= 0 for h in v):
            raise ValueError("hbar values must be positive")
        return v

    @model_validator(mode="after")
    def marginal_within_bodies(self):
        if self.n_marginal > self.n_bodies:
            raise ValueError(f"n_marginal={self.n_marginal} exceeds n_bodies={self.n_bodies}")
        return self


class PotentialSpec(BaseModel):
    tag: str = "cosine"
    amplitude: Optional[float] = None
    wavenumber: Optional[float] = None
    width: Optional[float] = None

    @field_validator("tag")
    @classmethod
    def known_tag(cls, v):
        if v not in POTENTIALS:
            raise ValueError(f"unknown potential '{v}', expected one of {sorted(POTENTIALS)}")
        return v

    def build(self) -> Potential:
        params = {
            key: value for key, value in (
                ("amplitude", self.amplitude), ("wavenumber", self.wavenumber), ("width", self.width),
            ) if value is not None
        }
        return make_potential(self.tag, **params)


class InitialDataSpec(BaseModel):
    """Gaussian initial data; the Töplitz symbol is matched, shifted or absent"""
    center: List[float] = Field(default_factory=lambda: [0.0, 0.0])
    sigma: List[float] = Field(default_factory=lambda: [0.5, 0.5])
    n_particles: int = Field(256, ge=1)
    symbol: str = Field("matched", pattern="^(matched|shifted|none)$")
    symbol_shift: List[float] = Field(default_factory=lambda: [0.0, 0.0])
    partner_center: List[float] = Field(default_factory=lambda: [1.0, 0.0])
    partner_sigma: List[float] = Field(default_factory=lambda: [0.5, 0.5])

    @field_validator("center", "sigma", "symbol_shift", "partner_center", "partner_sigma", mode="before")
    @classmethod
    def split_pairs(cls, v):
        return _split_list(v)

    @field_validator("center", "sigma", "symbol_shift", "partner_center", "partner_sigma")
    @classmethod
    def phase_pair(cls, v):
        if len(v) != 2:
            raise ValueError("expected an (x, xi) pair")
        return v


class GridSpec(BaseModel):
    n_x: int = Field(128, ge=2)
    x_min: float = -6.283185307179586
    x_max: float = 6.283185307179586
    n_xi: int = Field(64, ge=2)
    xi_max: float = 6.0

    @model_validator(mode="after")
    def ordered_box(self):
        if self.x_max <= self.x_min:
            raise ValueError("x_max must exceed x_min")
        return self


class TimeSpec(BaseModel):
    t_final: float = Field(2.0, ge=0)
    samples: int = Field(21, ge=1)
    dt: float = Field(0.01, gt=0)
    integrator: str = Field("verlet", pattern="^(verlet|yoshida4)$")


class RunSpec(BaseModel):
    seed: int = 1234
    trials: int = Field(20, ge=1)
    refinement_study: bool = False
    refinement_rerun: bool = True
    transport_refine: float = Field(1.0, gt=0)
    checkpoint_every: int = Field(0, ge=0)
    output_dir: Optional[str] = None


SECTIONS = ("experiment", "physics", "potential", "initial", "grid", "time", "run", "tolerances")


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ", ".join(_format_value(v) for v in value)
    return str(value)


class ExperimentConfig(BaseModel):
    """One experiment: parsed from INI text, identified by the hash of its canonical form"""
    experiment: ExperimentSpec
    physics: PhysicsSpec = Field(default_factory=PhysicsSpec)
    potential: PotentialSpec = Field(default_factory=PotentialSpec)
    initial: InitialDataSpec = Field(default_factory=InitialDataSpec)
    grid: GridSpec = Field(default_factory=GridSpec)
    time: TimeSpec = Field(default_factory=TimeSpec)
    run: RunSpec = Field(default_factory=RunSpec)
    tolerances: Dict[str, float] = Field(default_factory=dict)

    @field_validator("tolerances")
    @classmethod
    def uppercase_keys(cls, v):
        return {key.upper(): value for key, value in v.items()}

    # ── parsing ──────────────────────────────────────────────────────

    @classmethod
    def from_ini(cls, text: str) -> "ExperimentConfig":
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as e:
            raise ConfigError(f"Malformed config: {e}")
        unknown = set(parser.sections()) - set(SECTIONS)
        if unknown:
            raise ConfigError(f"Unknown config sections: {sorted(unknown)}")
        data = {section: dict(parser.items(section)) for section in parser.sections()}
        try:
            return cls.model_validate(data)
        except ValidationError as e:
            raise ConfigError(f"Invalid config: {e}")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "ExperimentConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"Config file {path} not found")
        return cls.from_ini(path.read_text())

    # ── identity ─────────────────────────────────────────────────────

    def canonical_text(self) -> str:
        """Sections and keys sorted, values normalised; None values omitted"""
        dumped = self.model_dump()
        lines = []
        for section in sorted(SECTIONS):
            values = dumped[section]
            items = sorted((k, v) for k, v in values.items() if v is not None)
            lines.append(f"[{section}]")
            lines.extend(f"{key} = {_format_value(value)}" for key, value in items)
            lines.append("")
        return "\n".join(lines)

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()

    @property
    def short_hash(self) -> str:
        return self.config_hash[:12]

    def with_overrides(self, section: str, **values) -> "ExperimentConfig":
        """Copy with some fields of one section replaced, revalidated"""
        data = self.model_dump()
        data[section] = {**data[section], **values}
        try:
            return ExperimentConfig.model_validate(data)
        except ValidationError as e:
            raise ConfigError(f"Invalid override of [{section}]: {e}")

    def tolerance(self, name: str, default: float) -> float:
        return self.tolerances.get(name.upper(), default)


class ReportSummary(BaseModel):
    tag: str
    hbar: Optional[float] = None
    worst_margin: float
    passed: bool
    primary_value: Optional[float] = None
    refinement_verdict: Optional[str] = None
    file_stem: str


class RunManifest(BaseModel):
    """Everything a run emitted, with checksums"""
    config_hash: str
    name: str
    kind: ExperimentKind
    output_dir: str
    versions: Dict[str, str] = Field(default_factory=dict)
    started_at: str
    wall_clock_seconds: float = 0.0
    files: Dict[str, str] = Field(default_factory=dict)
    reports: List[ReportSummary] = Field(default_factory=list)
    passed: bool = False
    failure_stage: Optional[str] = None
    error: Optional[str] = None

    @property
    def worst_margin(self) -> Optional[float]:
        if not self.reports:
            return None
        return min(r.worst_margin for r in self.reports)


class RunRequest(BaseModel):
    """Enqueue a shipped preset, optionally overriding hbar"""
    preset: str = Field(..., min_length=1)
    hbar: Optional[List[float]] = None


class RunRecordResponse(BaseModel):
    """Registry row"""
    id: int
    config_hash: str
    preset: Optional[str] = None
    kind: str
    status: str
    output_dir: Optional[str] = None
    failure_stage: Optional[str] = None
    worst_margin: Optional[float] = None
    created_at: Optional[datetime] = None
    finished_at: Optional[datetime] = None

    @field_validator("status", mode="before")
    @classmethod
    def status_value(cls, v):
        return v.value if isinstance(v, Enum) else v

    class Config:
        from_attributes = True


class PresetResponse(BaseModel):
    name: str
    kind: str
    description: Optional[str] = None
    config_hash: str
