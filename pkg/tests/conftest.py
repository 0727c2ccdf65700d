import pytest

from chanstab.fields import Grid
from chanstab.geometry import ChannelConfig
from chanstab.oseen import OseenOperator


@pytest.fixture(scope="session")
def small_cfg():
    return ChannelConfig(nx=24, ny=24)


@pytest.fixture(scope="session")
def small_grid(small_cfg):
    return Grid.from_config(small_cfg)


@pytest.fixture(scope="session")
def small_op(small_cfg):
    return OseenOperator(small_cfg)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line per acceptance criterion, then assert it."""

    def record(number: int, title: str, passed: bool, detail: str = ""):
        ACCEPTANCE_LINES.append(f"[{'PASS' if passed else 'FAIL'}] criterion {number:2d}: {title}  {detail}".rstrip())
        print(ACCEPTANCE_LINES[-1])
        assert passed, ACCEPTANCE_LINES[-1]

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
