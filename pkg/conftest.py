# conftest.py
"""Pytest configuration for cartlab tests."""

import sys
from pathlib import Path

import pytest

# Add project root to Python path so tests can import the cartlab package
project_root = Path(__file__).parent
sys.path.insert(0, str(project_root))

DATA_DIR = project_root / "data"


@pytest.fixture(scope="session")
def data_dir() -> Path:
    return DATA_DIR


@pytest.fixture(scope="session")
def world():
    """The bundled six-store world."""
    from cartlab.worldsim import load_world

    return load_world(DATA_DIR / "world.json")
