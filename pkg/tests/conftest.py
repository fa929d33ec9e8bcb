import numpy as np
import pytest

from tfla import Dims, Rng, make_inputs


def random_problem(T=32, L=8, d_qk=8, d_hv=12, heads=2, batch=1, seed=0, gate_scale=1.0, f_pre=2.0, i_pre=0.0):
    dims = Dims(T=T, L=L, d_qk=d_qk, d_hv=d_hv, n_head=heads, n_batch=batch)
    return dims, make_inputs(dims, Rng(seed), gate_scale=gate_scale, f_pre=f_pre, i_pre=i_pre)


def random_dh(inputs, seed=1):
    return np.random.default_rng(seed).standard_normal(inputs.v.shape)


@pytest.fixture
def problem():
    return random_problem()


# criterion -> (passed, detail), filled by test_acceptance
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


@pytest.fixture
def acceptance_log():
    return ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE, key=lambda s: (int(s.rstrip("abc")), s)):
        passed, detail = ACCEPTANCE[name]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  criterion {name}: {detail}")
