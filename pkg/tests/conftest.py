import numpy as np
import pytest

from npu_prefill.model import ModelConfig, build_model, inject_outliers

# (criterion, passed, detail) rows filled in by test_acceptance.py
ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")


@pytest.fixture(scope="session")
def tiny_cfg():
    return ModelConfig(layers=2, hidden=32, heads=4, ffn_mult=2, vocab=64, chunk_len=8, seed=3)


@pytest.fixture(scope="session")
def tiny_model(tiny_cfg):
    return build_model(tiny_cfg)


@pytest.fixture(scope="session")
def spiky_model(tiny_cfg):
    model, _ = inject_outliers(build_model(tiny_cfg), [5, 11], token_fraction=0.25, magnitude=40.0, seed=3)
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
