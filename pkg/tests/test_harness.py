from pathlib import Path

import pytest

from app.core.config import settings
from app.core.exceptions import ConfigError
from app.core.serialization import sha256_file
from app.schemas.report import BoundReport, CheckReport
from app.services import harness


def _config(preset, output_root, **run):
    return harness.load_preset(preset).with_overrides("run", output_dir=str(output_root), **run)


def _bound(passed: bool, hbar: float = 0.25) -> BoundReport:
    return BoundReport(
        tag="T-HV", hbar=hbar, report_tol=0.05,
        times=[0.0, 1.0], lhs=[0.1, 0.2 if passed else 0.9], rhs=[0.2, 0.3],
    )


def test_nccs_run_writes_artifacts(output_root):
    config = _config("nccs", output_root, trials=20)
    manifest = harness.run(config)
    out_dir = Path(manifest.output_dir)
    assert out_dir == output_root / f"nccs-{config.short_hash}"
    assert manifest.passed
    assert manifest.failure_stage is None
    assert {"config.ini", "00_nccs.csv", "00_nccs.json"} <= set(manifest.files)
    for name, digest in manifest.files.items():
        assert sha256_file(out_dir / name) == digest
    assert (out_dir / "manifest.json").is_file()


def test_rerun_is_byte_identical(output_root):
    config = _config("nccs", output_root, trials=10)
    first = harness.run(config).files
    second = harness.run(config).files
    assert first == second


def test_cost_floor_run(output_root):
    config = _config("cost-floor", output_root).with_overrides("physics", hbar=[0.5])
    manifest = harness.run(config)
    assert manifest.passed
    [summary] = manifest.reports
    assert summary.tag == "COST-FLOOR"
    assert summary.file_stem == "00_cost-floor_h0.5"
    assert summary.primary_value == pytest.approx(0.25, rel=0.02)
    [report] = harness.load_reports(manifest)
    assert isinstance(report, CheckReport)


def test_execute_failure_is_recorded(output_root):
    config = _config("tnsv-n2", output_root).with_overrides("initial", symbol="none")
    manifest = harness.run(config)
    assert not manifest.passed
    assert manifest.failure_stage == "execute"
    assert "Töplitz" in manifest.error
    assert "config.ini" in manifest.files


def test_report_banner(output_root, tmp_path):
    good = harness.run(_config("nccs", output_root, trials=10))
    text = harness.report([good], tmp_path / "summary")
    assert text.startswith("ALL PASS")
    assert (tmp_path / "summary" / "summary.csv").read_text().startswith("tag,name,config_hash")

    bad = harness.run(_config("tnsv-n2", output_root).with_overrides("initial", symbol="none"))
    text = harness.report([good, bad])
    assert text.startswith("FAILURES: 1 of 2")
    assert "error in execute" in text


def test_load_manifests(output_root):
    harness.run(_config("nccs", output_root, trials=10))
    manifests = harness.load_manifests(output_root)
    assert [m.name for m in manifests] == ["nccs"]


def test_refinement_labels_artifacts(monkeypatch):
    config = harness.load_preset("thv-free")
    monkeypatch.setattr(harness, "execute", lambda cfg, out_dir=None: [_bound(True)])
    [labelled] = harness.apply_refinement_rerun(config, [_bound(False)])
    assert labelled.refinement_verdict == "discretization artifact"

    monkeypatch.setattr(harness, "execute", lambda cfg, out_dir=None: [_bound(False)])
    [labelled] = harness.apply_refinement_rerun(config, [_bound(False)])
    assert labelled.refinement_verdict == "confirmed"

    # no rerun counterpart at this hbar
    monkeypatch.setattr(harness, "execute", lambda cfg, out_dir=None: [_bound(True, hbar=0.5)])
    [labelled] = harness.apply_refinement_rerun(config, [_bound(False)])
    assert labelled.refinement_verdict == "confirmed"


def test_refinement_skipped_when_disabled(monkeypatch):
    def boom(cfg, out_dir=None):
        raise AssertionError("no rerun expected")

    monkeypatch.setattr(harness, "execute", boom)
    off = harness.load_preset("thv-free").with_overrides("run", refinement_rerun=False)
    assert harness.apply_refinement_rerun(off, [_bound(False)])[0].refinement_verdict is None
    static = harness.load_preset("cost-floor")
    assert harness.apply_refinement_rerun(static, [_bound(False)])[0].refinement_verdict is None


def test_refined_config():
    config = harness.load_preset("thv-free")
    refined = harness.refined_config(config)
    assert refined.time.dt == pytest.approx(config.time.dt / 2)
    assert refined.run.transport_refine == pytest.approx(1.5)
    assert harness.refined_config(config, transport=False).run.transport_refine == 1.0


def test_settings_overrides_restore():
    before = settings.REPORT_TOL
    with harness.settings_overrides({"REPORT_TOL": 0.5}):
        assert settings.REPORT_TOL == 0.5
    assert settings.REPORT_TOL == before

    with pytest.raises(ConfigError):
        with harness.settings_overrides({"REPORT_TOL": 0.5, "NOT_A_SETTING": 1.0}):
            pass
    assert settings.REPORT_TOL == before


def test_primary_value():
    assert harness.primary_value(_bound(True)) == 0.2
    check = CheckReport(tag="NCCS", metrics={"violations": 0.0, "worst_relative_gap": 0.1}, thresholds={})
    assert harness.primary_value(check) == 0.0


def test_hbar_sweep_on_cost_floor(output_root):
    result = harness.sweep(_config("cost-floor", output_root), "hbar", [0.5, 0.25])
    assert result.primary == pytest.approx((0.25, 0.125), rel=0.02)
    assert result.loglog_slope == pytest.approx(1.0, abs=0.05)
    assert not result.monotone_decreasing
    lines = result.csv_path.read_text().splitlines()
    assert lines[0].startswith("# axis=hbar")
    assert lines[1] == "axis_value,value,config_hash,passed"
    assert len(lines) == 4


def test_sweep_rejects_unknown_axis(output_root):
    with pytest.raises(ConfigError):
        harness.sweep(_config("cost-floor", output_root), "temperature", [1.0])
