import os
import tempfile

# Registry and run outputs go to a scratch directory before any app import
_SCRATCH = tempfile.mkdtemp(prefix="qclab-tests-")
os.environ.setdefault("DATABASE_URL", f"sqlite:///{_SCRATCH}/registry.db")
os.environ.setdefault("LAB_OUTPUT_ROOT", os.path.join(_SCRATCH, "runs"))

import numpy as np
import pytest

from app.services.hilbert import SpaceGrid
from app.services.phasespace import PhaseGrid, cosine_potential, zero_potential


@pytest.fixture
def rng():
    return np.random.default_rng(20240617)


@pytest.fixture
def cosine():
    return cosine_potential()


@pytest.fixture
def free():
    return zero_potential()


@pytest.fixture
def space_grid():
    """[-2pi, 2pi) with 128 points, p_max = 32 hbar"""
    return SpaceGrid(-2 * np.pi, 2 * np.pi, 128)


@pytest.fixture
def small_space_grid():
    return SpaceGrid(-2 * np.pi, 2 * np.pi, 64)


@pytest.fixture
def tiny_space_grid():
    """Dense two-body operators only; too coarse for coherent states"""
    return SpaceGrid(-4.0, 4.0, 16)


@pytest.fixture
def phase_grid():
    return PhaseGrid(-2 * np.pi, 2 * np.pi, 64, -6.0, 6.0, 64)


@pytest.fixture
def output_root(tmp_path):
    return tmp_path / "runs"


@pytest.fixture
def db():
    """Empty run registry on the scratch SQLite database"""
    from app.db.session import Base, SessionLocal, engine
    from app.models.run import RunRecord

    Base.metadata.create_all(bind=engine)
    session = SessionLocal()
    session.query(RunRecord).delete()
    session.commit()
    try:
        yield session
    finally:
        session.close()
