import numpy as np
import pytest

from cogtcp.channel import DurationDistribution, assemble_generator, make_phase_type


def exp_generator(lam0: float, lam1: float):
    """Two-state channel: OFF periods ~ exp(lam0), ON periods ~ exp(lam1)."""
    return assemble_generator(make_phase_type(DurationDistribution.exponential(lam1)),
                              make_phase_type(DurationDistribution.exponential(lam0)))


def generator_from_means(on_mean: float, off_mean: float, shape: int = 1):
    on = DurationDistribution.erlang(shape, shape / on_mean)
    off = DurationDistribution.erlang(shape, shape / off_mean)
    return assemble_generator(make_phase_type(on), make_phase_type(off))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} -- {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
