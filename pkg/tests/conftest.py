import os

# keep the registry of the process under test in memory
os.environ.setdefault("DATABASE_URL", "sqlite://")

import numpy as np
import pytest
from fastapi.testclient import TestClient
from sqlalchemy import create_engine
from sqlalchemy.orm import sessionmaker
from sqlalchemy.pool import StaticPool

from database.database import Base, get_db
from engine import RngStream
from models.network_models import DropoutVariant
from services.gradcheck_service import tiny_network


@pytest.fixture
def rng():
    return RngStream(0)


@pytest.fixture
def tiny_bernoulli():
    return tiny_network(DropoutVariant.CONTEXTUAL_BERNOULLI)


@pytest.fixture
def tiny_gaussian():
    return tiny_network(DropoutVariant.CONTEXTUAL_GAUSSIAN, widths=(3, 4, 2), t=0.5)


@pytest.fixture
def batch():
    x = np.array([[0.5, -1.0], [1.5, 0.25], [-0.3, 0.8], [0.0, 2.0]])
    y = np.array([1, 0, 1, 0])
    return x, y


@pytest.fixture
def session_factory():
    engine = create_engine("sqlite://", connect_args={"check_same_thread": False}, poolclass=StaticPool)
    Base.metadata.create_all(bind=engine)
    return sessionmaker(autocommit=False, autoflush=False, bind=engine)


@pytest.fixture
def client(session_factory):
    from main import app

    def override_get_db():
        db = session_factory()
        try:
            yield db
        finally:
            db.close()

    app.dependency_overrides[get_db] = override_get_db
    with TestClient(app) as test_client:
        yield test_client
    app.dependency_overrides.clear()


@pytest.fixture
def mnist_dir():
    directory = os.environ.get("MNIST_DIR")
    if not directory:
        pytest.skip("MNIST_DIR not set")
    return directory
