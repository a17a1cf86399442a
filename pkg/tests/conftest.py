from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))  # for the oracles module

from objsearch.scene import generate_synthetic, save_scene


@pytest.fixture(scope="session")
def scene_5x5():
    """Seeded 5x5 scene with 4 objects, shared across the suite."""
    return generate_synthetic(7, (5, 5), 4, 32)


@pytest.fixture(scope="session")
def scene_single_object():
    """Seeded 5x5 scene with one object (the convergence fixture)."""
    return generate_synthetic(7, (5, 5), 1, 32)


@pytest.fixture(scope="session")
def scene_file_5x5(scene_5x5, tmp_path_factory):
    path = tmp_path_factory.mktemp("scenes") / "scene_5x5.json"
    save_scene(scene_5x5, path)
    return path
