import numpy as np
import pytest
import torch

from duet import DuetConfig, DuetModel


def small_config(**kw) -> DuetConfig:
    base = dict(T=8, F=4, N=3, M=4, k=2, d=5, d0=6, kernel=3)
    base.update(kw)
    return DuetConfig(**base)


def double_model(config: DuetConfig) -> DuetModel:
    return DuetModel(config).double()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def write_csv(tmp_path):
    def _write(text: str, name: str = "data.csv"):
        p = tmp_path / name
        p.write_text(text, encoding="utf-8")
        return p
    return _write


def t64(x) -> torch.Tensor:
    return torch.as_tensor(np.asarray(x), dtype=torch.float64)


# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
