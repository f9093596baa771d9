from __future__ import annotations

import pytest

from mqs_hmm.mesh import SmcGeometry, build_cell_mesh, build_macro_mesh, build_reference_mesh

# (criterion number, title, passed, detail) appended by the acceptance tests
ACCEPTANCE_LINES: list[tuple[int, str, bool, str]] = []


@pytest.fixture(scope="session")
def desk_geometry() -> SmcGeometry:
    return SmcGeometry()


@pytest.fixture(scope="session")
def small_geometry() -> SmcGeometry:
    """Four grains per side (a 2x2 quarter) for fast unit tests."""
    return SmcGeometry(L=400e-6, n_grains_side=4)


@pytest.fixture(scope="session")
def small_meshes(small_geometry):
    return (build_macro_mesh(small_geometry, 2), build_cell_mesh(small_geometry, 2),
            build_reference_mesh(small_geometry, 1))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n, title, ok, detail in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}: {title} ({detail})")
