from pydantic import BaseModel, Field
from typing import Dict, List, Optional


class BoundReport(BaseModel):
    """Time series of both sides of a Gronwall-type inequality"""
    tag: str = Field(..., description="T-HV | T-NSV | T-SL | DOBRUSHIN")
    hbar: Optional[float] = None
    n_bodies: int = 1
    n_marginal: int = 1
    constants: Dict[str, float] = Field(default_factory=dict)
    report_tol: float
    times: List[float]
    lhs: List[float]
    rhs: List[float]
    series: Dict[str, List[float]] = Field(default_factory=dict)
    checks: Dict[str, bool] = Field(default_factory=dict)
    notes: List[str] = Field(default_factory=list)
    config_hash: Optional[str] = None
    refinement_verdict: Optional[str] = None

    @property
    def margins(self) -> List[float]:
        """rhs * (1 + report_tol) - lhs, positive when the sample passes"""
        return [r * (1 + self.report_tol) - l for l, r in zip(self.lhs, self.rhs)]

    @property
    def sample_passes(self) -> List[bool]:
        return [m >= 0 for m in self.margins]

    @property
    def worst_margin(self) -> float:
        return min(self.margins) if self.margins else 0.0

    @property
    def passed(self) -> bool:
        return all(self.sample_passes) and all(self.checks.values())

    def summary_line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        failed = [name for name, ok in self.checks.items() if not ok]
        extra = f" failed checks: {', '.join(failed)}" if failed else ""
        return (
            f"{self.tag} hbar={self.hbar} N={self.n_bodies} n={self.n_marginal} "
            f"worst margin {self.worst_margin:.6e} {status}{extra}"
        )


class CheckReport(BaseModel):
    """Static audit: named metrics against thresholds"""
    tag: str
    hbar: Optional[float] = None
    metrics: Dict[str, float]
    thresholds: Dict[str, float]
    # metrics listed here must be >= their threshold instead of <=
    lower_bounded: List[str] = Field(default_factory=list)
    checks: Dict[str, bool] = Field(default_factory=dict)
    notes: List[str] = Field(default_factory=list)
    config_hash: Optional[str] = None
    refinement_verdict: Optional[str] = None

    def metric_passes(self) -> Dict[str, bool]:
        out = {}
        for name, limit in self.thresholds.items():
            value = self.metrics.get(name)
            if value is None:
                out[name] = False
            elif name in self.lower_bounded:
                out[name] = value >= limit
            else:
                out[name] = value <= limit
        return out

    @property
    def passed(self) -> bool:
        return all(self.metric_passes().values()) and all(self.checks.values())

    @property
    def worst_margin(self) -> float:
        margins = []
        for name, limit in self.thresholds.items():
            value = self.metrics.get(name, float("inf"))
            margins.append(value - limit if name in self.lower_bounded else limit - value)
        return min(margins) if margins else 0.0

    def summary_line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        failed = [n for n, ok in {**self.metric_passes(), **self.checks}.items() if not ok]
        extra = f" failed: {', '.join(failed)}" if failed else ""
        hb = f" hbar={self.hbar}" if self.hbar is not None else ""
        return f"{self.tag}{hb} worst margin {self.worst_margin:.6e} {status}{extra}"
