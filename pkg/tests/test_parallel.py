import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tfla import Dims, Rng, exponent_monitor, make_inputs, normalizer_variant_forward, parallel_forward, run_recurrent
from tfla.core import ParameterError
from tfla.parallel import VALID_NORMALIZERS, check_normalizer, parallel_intermediates

from conftest import random_problem


@pytest.mark.parametrize("variant", ["exp", "sig"])
def test_parallel_equals_recurrent(variant):
    dims, x = random_problem(T=48)
    assert np.max(np.abs(parallel_forward(x, dims, variant) - run_recurrent(x, dims, variant).h_tilde)) < 1e-12


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), gate_scale=st.floats(0, 8), i_pre=st.floats(-15, 15), f_pre=st.floats(-6, 12))
def test_parallel_equals_recurrent_random_gates(seed, gate_scale, i_pre, f_pre):
    dims = Dims(T=16, d_qk=4, d_hv=3)
    x = make_inputs(dims, Rng(seed), gate_scale=gate_scale, i_pre=i_pre, f_pre=f_pre)
    for variant in ("exp", "sig"):
        with exponent_monitor() as stats:
            p = parallel_forward(x, dims, variant)
        r = run_recurrent(x, dims, variant).h_tilde
        assert np.allclose(p, r, rtol=1e-9, atol=1e-10)
        assert stats.violations == 0


def test_intermediates():
    dims, x = random_problem(T=8)
    pi = parallel_intermediates(x, dims, "exp")
    assert pi.D_tilde.shape == (1, 2, 8, 8)
    assert np.all(pi.n_denom >= np.exp(-pi.m) * (1 - 1e-12))
    assert np.all(np.exp(pi.D_tilde[..., 0, 1:]) == 0)


def test_normalizer_default_is_parallel_forward():
    dims, x = random_problem(T=16)
    assert np.allclose(normalizer_variant_forward(x, dims, "exp", "default"), parallel_forward(x, dims, "exp"))
    assert np.allclose(normalizer_variant_forward(x, dims, "sig", "ones"), parallel_forward(x, dims, "sig"))


@pytest.mark.parametrize("variant", ["exp", "sig"])
def test_all_valid_normalizers_run(variant):
    dims, x = random_problem(T=8)
    for n in VALID_NORMALIZERS[check_normalizer(variant, "ones")[0]]:
        assert np.all(np.isfinite(normalizer_variant_forward(x, dims, variant, n)))


def test_invalid_normalizer_combination():
    with pytest.raises(ParameterError):
        check_normalizer("exp", "raw_sum")
    with pytest.raises(ParameterError):
        check_normalizer("sig", "default")
    with pytest.raises(ParameterError):
        check_normalizer("sig", "nope")
