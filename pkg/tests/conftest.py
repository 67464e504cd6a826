import numpy as np
import pytest
import torch

from partflow_lab.edit_engine import EDIT_TYPES, build_dataset

torch.set_num_threads(1)

UNIFORM = {t: 1.0 / len(EDIT_TYPES) for t in EDIT_TYPES}


@pytest.fixture(scope="session")
def small_pairs():
    pairs, manifest = build_dataset(60, UNIFORM, seed=0)
    return pairs


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_configure(config):
    config.acceptance_lines = []


@pytest.fixture
def criterion(request):
    """Record one acceptance line; the summary hook prints them all at the end."""
    def record(number: int, name: str, ok: bool, detail: str = "") -> None:
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else "")
        request.config.acceptance_lines.append((number, line))
        print(line)
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
