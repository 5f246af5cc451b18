from __future__ import annotations

import os
from pathlib import Path

import numpy as np
import pytest

from vmblimit.collision_kernel import KernelModel, build_linearized
from vmblimit.phase_grid import PairDistribution, SpatialGrid, VelocityGrid

# operator matrices are content-hashed, so a shared cache is safe across runs
CACHE_DIR = Path(os.environ.get("VMBLIMIT_TEST_CACHE", Path(__file__).resolve().parent.parent / ".cache" / "operators"))


@pytest.fixture(scope="session")
def cache_dir() -> str:
    CACHE_DIR.mkdir(parents=True, exist_ok=True)
    return str(CACHE_DIR)


@pytest.fixture(scope="session")
def vg8() -> VelocityGrid:
    return VelocityGrid(6.0, 8)


@pytest.fixture(scope="session")
def sg8() -> SpatialGrid:
    return SpatialGrid(1, (2.0 * np.pi,), (8,))


@pytest.fixture(scope="session")
def op8(vg8, cache_dir):
    return build_linearized(vg8, KernelModel(), cache_dir=cache_dir)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_pair(rng, sg: SpatialGrid, vg: VelocityGrid, scale: float = 1.0) -> PairDistribution:
    shape = sg.shape + vg.shape
    return PairDistribution(scale * rng.standard_normal(shape), scale * rng.standard_normal(shape), sg, vg)


def broadcast_pair(plus_v, minus_v, sg: SpatialGrid, vg: VelocityGrid, profile=None) -> PairDistribution:
    """Pair with velocity profiles times an optional spatial profile."""
    prof = np.ones(sg.shape) if profile is None else np.asarray(profile, dtype=float)
    ex = prof.reshape(sg.shape + (1, 1, 1))
    return PairDistribution(ex * plus_v, ex * minus_v, sg, vg)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
