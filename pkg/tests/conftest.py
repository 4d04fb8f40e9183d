"""Shared fixtures: kernel specs, small grids and their assembled operators.

Operator matrices go to a per-session cache directory unless the caller
already points SPECTRAL_BOLTZMANN_CACHE somewhere.
"""

import os
import shutil
import tempfile
from pathlib import Path

import pytest

from spectral_boltzmann.collision import CACHE_ENV, KernelSpec, assemble_all
from spectral_boltzmann.velocity import MacroProjector, VelocityGrid

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"
ACCEPTANCE_LINES: list[str] = []
_OWN_CACHE: list[str] = []


def pytest_configure(config):
    if not os.environ.get(CACHE_ENV):
        root = tempfile.mkdtemp(prefix="sb-operator-cache-")
        _OWN_CACHE.append(root)
        os.environ[CACHE_ENV] = root


def pytest_unconfigure(config):
    for root in _OWN_CACHE:
        shutil.rmtree(root, ignore_errors=True)
        os.environ.pop(CACHE_ENV, None)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def hard_spec():
    return KernelSpec(gamma=1.0, s=0.5, theta_min=0.2)


@pytest.fixture(scope="session")
def soft_spec():
    # gamma + 2s = -0.5
    return KernelSpec(gamma=-1.5, s=0.5, theta_min=0.2)


@pytest.fixture(scope="session")
def grid6():
    return VelocityGrid(4.0, 6)


@pytest.fixture(scope="session")
def grid8():
    return VelocityGrid(4.0, 8)


@pytest.fixture(scope="session")
def ops6(hard_spec, grid6):
    return assemble_all(hard_spec, grid6)


@pytest.fixture(scope="session")
def ops8(hard_spec, grid8):
    return assemble_all(hard_spec, grid8)


@pytest.fixture(scope="session")
def soft_ops6(soft_spec, grid6):
    return assemble_all(soft_spec, grid6)


@pytest.fixture(scope="session")
def proj6(grid6):
    return MacroProjector(grid6)


@pytest.fixture(scope="session")
def proj8(grid8):
    return MacroProjector(grid8)
