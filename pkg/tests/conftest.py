import numpy as np
import pytest

from rplnav.world import EnvironmentSpec, OccupancyGrid, Trajectory


def line(pid, start_frame, p0, p1, n):
    pts = np.linspace(p0, p1, n)
    return Trajectory(pid, start_frame, pts)


@pytest.fixture
def open_scene():
    """Free 20 m x 10 m map: one walker heading +x, one crossing pedestrian."""
    grid = OccupancyGrid.free(20, 10, 0.1)
    trajs = {
        1: line(1, 0, (2.0, 5.0), (12.0, 5.0), 101),
        2: line(2, 5, (15.0, 8.0), (15.0, 2.0), 61),
    }
    return EnvironmentSpec("open", trajs, grid, [1])


_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance(capsys):
    """Report one criterion: print a PASS/FAIL line, keep it for the summary, assert."""

    def check(number: int, ok: bool, detail: str) -> None:
        line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'} - {detail}"
        _ACCEPTANCE_LINES.append(line)
        with capsys.disabled():
            print(f"\n{line}")
        assert ok, line

    return check


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
