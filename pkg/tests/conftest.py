import numpy as np
import pytest

from mixlora import MixLoraConfig, init_adapter


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_adapter(**kw):
    base = dict(d_in=4, d_out=3, num_factors=4, rank=2, seed=7)
    base.update(kw)
    return init_adapter(MixLoraConfig(**base))


def randomize(adapter, seed=0):
    gen = np.random.default_rng(seed)
    for name, value in adapter.params().items():
        adapter.set_param(name, gen.standard_normal(value.shape))
    return adapter


# criterion id -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def record(criterion, passed, detail):
    ACCEPTANCE[criterion] = (bool(passed), detail)
    print(f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}")
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[criterion]
        terminalreporter.write_line(f"criterion {criterion:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
