"""Shared fixtures and helpers for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from detfunc.spectral import SpectralField, SpectralGrid, coords_to_coeffs


def random_coeffs(grid: SpectralGrid, rng: np.random.Generator, size: int | None = None,
                  band_only: bool = False) -> np.ndarray:
    """Coefficients of random real fields (standard normal coordinates)."""
    n = 1 if size is None else size
    x = rng.standard_normal((n, grid.n_coords))
    if band_only:
        keep = np.max(np.abs(grid.half_modes), axis=1) <= grid.dealias_cutoff
        x *= np.repeat(keep, 2)
    c = coords_to_coeffs(x, grid)
    return c[0] if size is None else c


def random_field(grid: SpectralGrid, rng: np.random.Generator, band_only: bool = False) -> SpectralField:
    return SpectralField(grid, random_coeffs(grid, rng, band_only=band_only))


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240601)


@pytest.fixture(scope="session")
def grid8() -> SpectralGrid:
    return SpectralGrid(8)


_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


@pytest.fixture
def acceptance_log(request):
    """Record one PASS/FAIL line per acceptance criterion and assert it."""
    lines = request.config.stash[_ACCEPTANCE]

    def record(number: int, title: str, ok: bool, detail: str) -> None:
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
        lines.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
