import pytest

from app.core.config import Settings
from app.core.exceptions import ConfigError
from app.schemas.experiment import ExperimentConfig, ExperimentKind
from app.services.harness import list_presets, load_preset

MINIMAL = """
[experiment]
kind = thv
name = minimal

[physics]
hbar = 0.5, 0.25
"""


@pytest.mark.parametrize("name", sorted(list_presets()))
def test_shipped_presets_parse(name):
    config = load_preset(name)
    assert config.experiment.name == name
    assert len(config.short_hash) == 12


def test_defaults_and_lists():
    config = ExperimentConfig.from_ini(MINIMAL)
    assert config.experiment.kind is ExperimentKind.THV
    assert config.physics.hbar == [0.5, 0.25]
    assert config.potential.tag == "cosine"
    assert config.time.integrator == "verlet"


def test_hash_ignores_layout():
    shuffled = """
[physics]
hbar =   0.5,0.25

[experiment]
name = minimal
kind = thv
"""
    assert ExperimentConfig.from_ini(shuffled).config_hash == ExperimentConfig.from_ini(MINIMAL).config_hash


def test_canonical_text_round_trips():
    config = load_preset("thv-matched")
    again = ExperimentConfig.from_ini(config.canonical_text())
    assert again.config_hash == config.config_hash


def test_overrides_change_the_hash():
    config = ExperimentConfig.from_ini(MINIMAL)
    halved = config.with_overrides("time", dt=0.005)
    assert halved.time.dt == 0.005
    assert halved.config_hash != config.config_hash
    with pytest.raises(ConfigError):
        config.with_overrides("time", integrator="euler")


def test_tolerance_keys_are_uppercased():
    config = ExperimentConfig.from_ini(MINIMAL + "\n[tolerances]\nreport_tol = 0.1\n")
    assert config.tolerances == {"REPORT_TOL": 0.1}
    assert config.tolerance("report_tol", 0.05) == 0.1
    assert config.tolerance("TRACE_TOL", 1e-10) == 1e-10


@pytest.mark.parametrize(
    "extra",
    [
        "[bogus]\nkey = 1\n",
        "[physics]\nn_bodies = 2\nn_marginal = 3\n",
        "[initial]\nsymbol = sideways\n",
        "[grid]\nx_min = 1.0\nx_max = -1.0\n",
        "[potential]\ntag = coulomb\n",
        "[time]\nintegrator = rk4\n",
    ],
)
def test_invalid_configs_rejected(extra):
    base = "[experiment]\nkind = tnsv\nname = bad\n\n"
    with pytest.raises(ConfigError):
        ExperimentConfig.from_ini(base + extra)


def test_non_positive_hbar_rejected():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_ini("[experiment]\nkind = thv\nname = x\n[physics]\nhbar = 0.5, -0.1\n")


def test_malformed_text_rejected():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_ini("no section header\n")


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        ExperimentConfig.load(tmp_path / "nope.ini")


def test_unknown_preset():
    with pytest.raises(ConfigError):
        load_preset("does-not-exist")


def test_settings_read_dotenv_and_environment(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    (tmp_path / ".env").write_text("REPORT_TOL=0.1\nSDP_MAX_ITER=500\n")
    monkeypatch.delenv("REPORT_TOL", raising=False)
    monkeypatch.setenv("SDP_MAX_ITER", "750")
    loaded = Settings()
    assert loaded.REPORT_TOL == pytest.approx(0.1)
    # the environment wins over .env
    assert loaded.SDP_MAX_ITER == 750
    assert Settings.model_config["env_file"] == ".env"
