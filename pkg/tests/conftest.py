from pathlib import Path

import pytest

from app.services.system import load_system, parse_system

SYSTEMS_DIR = Path(__file__).parent.parent / "systems"


@pytest.fixture
def systems_dir() -> Path:
    return SYSTEMS_DIR


@pytest.fixture
def load():
    def _load(name: str):
        return load_system(SYSTEMS_DIR / f"{name}.sys")

    return _load


@pytest.fixture
def stable_1d():
    return parse_system("states x1; inputs ; x1' = -x1; region x1 in [-1, 1];", "stable")
