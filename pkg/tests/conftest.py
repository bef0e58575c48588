import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_pose(rng, max_angle=np.pi * 0.95, scale=1.0):
    from ppnesf.geometry import se3_exp

    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return se3_exp(np.concatenate([axis * rng.uniform(0, max_angle), rng.normal(size=3) * scale]))


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report_criterion():
    """Record one pass/fail line for the acceptance summary and print it."""

    def record(name: str, passed: bool, detail: str):
        line = f"[{'PASS' if passed else 'FAIL'}] {name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
