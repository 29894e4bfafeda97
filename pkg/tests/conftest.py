import numpy as np
import pytest

from resetox.fixture import reference
from resetox.model import ModelConfig, init_params

GATES: list[str] = []


def record_gate(number: int, ok: bool, detail: str) -> None:
    GATES.append(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if GATES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(GATES, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def ref():
    return reference()


@pytest.fixture(scope="session")
def tiny_cfg():
    return ModelConfig(vocab_size=24, d_model=16, n_heads=2, n_layers_enc=1, n_layers_dec=2, d_ff=32, max_len=100)


@pytest.fixture(scope="session")
def tiny_params(tiny_cfg):
    p = init_params(tiny_cfg, seed=3)
    # larger output weights give peaked, input-dependent distributions
    p.arrays["out.w"] *= 6.0
    return p


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
