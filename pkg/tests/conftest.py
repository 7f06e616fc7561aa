"""Pytest configuration and shared fixtures."""
import random
import shutil
import tempfile
from pathlib import Path

import pytest

import dscs1
import dscs2
from crypto_core import get_profile
from storage_service import StorageClient, StorageService


@pytest.fixture
def temp_dir():
    """Create a temporary directory for tests."""
    tmpdir = Path(tempfile.mkdtemp(prefix="test-dscs-"))
    yield tmpdir
    shutil.rmtree(tmpdir, ignore_errors=True)


@pytest.fixture
def rng():
    """Seeded generator so failures reproduce."""
    return random.Random(20240917)


@pytest.fixture
def make_data():
    """Factory for pseudo-random file contents."""
    def factory(rng, size):
        return bytes(rng.getrandbits(8) for _ in range(size))
    return factory


@pytest.fixture(scope="session")
def test_profile():
    return get_profile("test")


@pytest.fixture(scope="session")
def dscs1_keys(test_profile):
    """Serialized DSCS I client state with n=4; safe-prime search runs once per session."""
    return dscs1.keygen(test_profile, 1, 4, random.Random(7)).to_bytes()


@pytest.fixture
def dscs1_state(dscs1_keys):
    """Fresh copy of the session's DSCS I client state."""
    return dscs1.ClientStateI.from_bytes(dscs1_keys)


@pytest.fixture(scope="session")
def dscs2_keys(test_profile):
    """Serialized DSCS II client state with n=2."""
    return dscs2.keygen2(test_profile, 0, 2, random.Random(11)).to_bytes()


@pytest.fixture
def dscs2_state(dscs2_keys):
    return dscs2.ClientStateII.from_bytes(dscs2_keys)


@pytest.fixture
def service():
    """In-memory storage service."""
    svc = StorageService()
    yield svc
    svc.close()


@pytest.fixture
def client(service):
    """Client wired straight to ``service.dispatch``."""
    return StorageClient(service.dispatch)
