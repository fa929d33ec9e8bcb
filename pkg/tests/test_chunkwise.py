import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tfla import Dims, MemoryState, Rng, chunkwise_forward, exponent_monitor, make_inputs, parallel_forward, run_recurrent
from tfla.core import GeometryError

from conftest import random_problem


@pytest.mark.parametrize("variant", ["exp", "sig"])
def test_single_chunk_equals_parallel(variant):
    dims, x = random_problem(T=32, L=32)
    assert np.max(np.abs(chunkwise_forward(x, dims, variant)[0] - parallel_forward(x, dims, variant))) < 1e-12


@pytest.mark.parametrize("variant", ["exp", "sig"])
def test_unit_chunk_equals_recurrent(variant):
    dims, x = random_problem(T=32, L=1)
    assert np.max(np.abs(chunkwise_forward(x, dims, variant)[0] - run_recurrent(x, dims, variant).h_tilde)) < 1e-12


@pytest.mark.parametrize("variant", ["exp", "sig"])
def test_chunk_size_invariance(variant):
    dims, x = random_problem(T=128, d_qk=16, d_hv=16)
    outs = [chunkwise_forward(x, dims.with_chunk(L), variant)[0] for L in (8, 16, 32, 64)]
    for o in outs[1:]:
        assert np.max(np.abs(o - outs[0])) < 1e-10


def test_states_and_stats():
    dims, x = random_problem(T=32, L=8)
    h, states, stats = chunkwise_forward(x, dims, "exp")
    assert states.C.shape == (1, 2, 5, 8, 12)
    assert np.all(states.C[:, :, 0] == 0) and np.all(states.m[:, :, 0] == 0)
    assert stats.m_combine.shape == (1, 2, 4, 8)
    assert np.all(stats.h_denom >= np.exp(-stats.m_combine) * (1 - 1e-12))
    # boundary states agree with the step recurrence
    tr = run_recurrent(x, dims, "exp", keep_states=True)
    for k in range(1, 5):
        s = tr.states[8 * k - 1]
        scale = np.exp(s.m - states.m[:, :, k])
        assert np.allclose(states.C[:, :, k] * 1.0, s.C * scale[..., None, None])


def test_sig_states_have_no_normalizer():
    dims, x = random_problem(T=16, L=4)
    _, states, stats = chunkwise_forward(x, dims, "sig")
    assert np.all(states.n == 0) and np.all(states.m == 0)
    assert np.all(stats.h_denom == 1)


def test_initial_state_continuation():
    dims, x = random_problem(T=32, L=8)
    half = Dims(T=16, L=8, d_qk=8, d_hv=12, n_head=2)
    first = x.replace(**{n: getattr(x, n)[:, :, :16] for n in ("q", "k", "v", "i_pre", "f_pre")})
    second = x.replace(**{n: getattr(x, n)[:, :, 16:] for n in ("q", "k", "v", "i_pre", "f_pre")})
    full = chunkwise_forward(x, dims, "exp")[0]
    _, st1, _ = chunkwise_forward(first, half, "exp")
    init = MemoryState(C=st1.C[:, :, -1], n=st1.n[:, :, -1], m=st1.m[:, :, -1])
    assert np.allclose(chunkwise_forward(second, half, "exp", initial_state=init)[0], full[:, :, 16:], atol=1e-12)


def test_indivisible_geometry():
    dims, x = random_problem(T=32, L=8)
    with pytest.raises(GeometryError, match="T not divisible by L"):
        chunkwise_forward(x, Dims(T=32, L=5, d_qk=8, d_hv=12, n_head=2), "exp")


def test_wider_state_dtype():
    dims, x = random_problem(T=32, L=8)
    x32 = x.astype(np.float32)
    h, states, _ = chunkwise_forward(x32, dims, "exp", state_dtype=np.float64)
    assert states.C.dtype == np.float64
    assert np.max(np.abs(h - chunkwise_forward(x, dims, "exp")[0])) < 1e-4


@settings(max_examples=20, deadline=None)
@given(
    seed=st.integers(0, 10_000),
    L=st.sampled_from([1, 2, 4, 8, 16]),
    i_pre=st.floats(-20, 20),
    f_pre=st.floats(-8, 12),
    gate_scale=st.floats(0, 10),
)
def test_chunkwise_matches_recurrent_and_is_stabilized(seed, L, i_pre, f_pre, gate_scale):
    dims = Dims(T=16, L=L, d_qk=4, d_hv=3)
    x = make_inputs(dims, Rng(seed), i_pre=i_pre, f_pre=f_pre, gate_scale=gate_scale)
    for variant in ("exp", "sig"):
        with exponent_monitor() as stats:
            h = chunkwise_forward(x, dims, variant)[0]
        assert stats.violations == 0
        assert np.allclose(h, run_recurrent(x, dims, variant).h_tilde, rtol=1e-9, atol=1e-10)
