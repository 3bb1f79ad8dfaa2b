from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    PROJECT_NAME: str = "Semiclassical Coupling Lab"
    PROJECT_VERSION: str = "1.0.0"
    LOG_LEVEL: str = "INFO"

    # Output root for run directories (one subdirectory per config hash)
    LAB_OUTPUT_ROOT: str = "./lab_runs"

    # Run registry
    DATABASE_URL: str = "sqlite:///./lab_registry.db"

    # Work queue
    MAX_PARALLEL_RUNS: int = 1
    RUN_QUEUE_POLL_SECONDS: int = 30

    # Transport
    EXACT_TRANSPORT_MAX_SUPPORT: int = 2048
    EMD_MAX_ITER: int = 10_000_000
    ENTROPIC_REG: float = 1e-2  # relative to the median cost entry
    SUPPORT_CUTOFF: float = 1e-12
    DROPPED_MASS_TOL: float = 1e-9
    DUAL_FEASIBILITY_TOL: float = 1e-9
    DUALITY_GAP_TOL: float = 1e-8

    # Densities and operators
    MASS_TOL: float = 1e-9
    TRACE_TOL: float = 1e-10
    HERMITIAN_TOL: float = 1e-12
    PSD_TOL: float = 1e-10
    HUSIMI_MASS_TOL: float = 1e-8
    TOEPLITZ_SKIP_MASS: float = 1e-14
    COHERENT_MARGIN_SIGMAS: float = 5.0
    BOUNDARY_MARGIN_CELLS: int = 3
    BOUNDARY_MASS_TOL: float = 1e-8
    DENSITY_MATRIX_MAX_MODES: int = 4096
    NBODY_MAX_AMPLITUDES: int = 2 ** 23

    # Propagation
    HARTREE_RANK_SWITCH: int = 64
    MAX_STEP_PRODUCT: float = 0.01  # dt * max(1, L)

    # Couplings and bounds
    REPORT_TOL: float = 0.05
    COUPLING_DRIFT_TOL: float = 5e-6
    COUPLING_TRACE_TOL: float = 1e-8
    COUPLING_SUM_TOL: float = 1e-7
    SDP_TOL: float = 1e-6
    SDP_STALL_TOL: float = 1e-5
    SDP_MAX_ITER: int = 20000
    SDP_RANGE_CUTOFF: float = 1e-12

    model_config = SettingsConfigDict(env_file=".env", extra="allow")


settings = Settings()
