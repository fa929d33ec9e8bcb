import numpy as np
import pytest

from tfla import (
    BlockConfig,
    Dims,
    Rng,
    chunkwise_backward,
    chunkwise_forward,
    exponent_monitor,
    make_inputs,
    tfla_backward,
    tfla_backward_dK,
    tfla_backward_dQ,
    tfla_backward_dV,
    tfla_forward,
)
from tfla.core import GeometryError
from tfla.tiled import TileTrace, kv_block_count, needs_mask

from conftest import random_dh, random_problem

CONFIGS = [(8, 4, 8, 16), (16, 2, 4, 8), (4, 4, 16, 32), (8, 8, 2, 4), (16, 16, 16, 32)]


def _problem():
    return random_problem(T=64, L=16, d_qk=16, d_hv=32)


class TestBlockConfig:
    def test_requires_hq_at_least_kv(self):
        with pytest.raises(GeometryError):
            BlockConfig(4, 8, 4, 4)

    def test_requires_kv_divides_hq(self):
        with pytest.raises(GeometryError):
            BlockConfig(6, 4, 4, 4)

    def test_must_divide_dims(self):
        with pytest.raises(GeometryError):
            BlockConfig(8, 4, 5, 4).check(Dims(T=32, L=16, d_qk=16, d_hv=16))

    def test_default_and_single(self):
        dims = Dims(T=32, L=16, d_qk=16, d_hv=8)
        assert BlockConfig.default(dims).as_tuple() == (8, 4, 8, 4)
        assert BlockConfig.single(dims).as_tuple() == (16, 16, 16, 8)


@pytest.mark.parametrize("variant", ["exp", "sig"])
def test_single_block_equals_chunkwise(variant):
    dims, x = _problem()
    ref = chunkwise_forward(x, dims, variant)[0]
    assert np.max(np.abs(tfla_forward(x, dims, BlockConfig.single(dims), variant)[0] - ref)) < 1e-13


@pytest.mark.parametrize("variant", ["exp", "sig"])
@pytest.mark.parametrize("blocks", CONFIGS)
def test_forward_block_invariance(variant, blocks):
    dims, x = _problem()
    ref = chunkwise_forward(x, dims, variant)[0]
    with exponent_monitor() as stats:
        out = tfla_forward(x, dims, BlockConfig(*blocks), variant)[0]
    assert np.max(np.abs(out - ref)) < 1e-10
    assert stats.violations == 0


@pytest.mark.parametrize("variant", ["exp", "sig"])
@pytest.mark.parametrize("blocks", CONFIGS)
def test_backward_block_invariance(variant, blocks):
    dims, x = _problem()
    dH = random_dh(x)
    h, states, stats = chunkwise_forward(x, dims, variant)
    ref = chunkwise_backward(x, dims, variant, dH, (states, stats)).as_dict()
    bc = BlockConfig(*blocks)
    _, t_states, t_stats = tfla_forward(x, dims, bc, variant)
    with exponent_monitor() as mon:
        got = tfla_backward(x, dims, bc, variant, dH, (t_states, t_stats)).as_dict()
    assert mon.violations == 0
    for name in ref:
        assert np.max(np.abs(got[name] - ref[name])) < 1e-10, name


@pytest.mark.parametrize("variant", ["exp", "sig"])
def test_individual_kernels_single_block(variant):
    dims, x = _problem()
    dH = random_dh(x)
    saved = chunkwise_forward(x, dims, variant)[1:]
    ref = chunkwise_backward(x, dims, variant, dH, saved)
    bc = BlockConfig.single(dims)
    assert np.max(np.abs(tfla_backward_dQ(x, dims, bc, variant, dH, saved).dq - ref.dq)) < 1e-12
    assert np.max(np.abs(tfla_backward_dK(x, dims, bc, variant, dH, saved).dk - ref.dk)) < 1e-12
    assert np.max(np.abs(tfla_backward_dV(x, dims, bc, variant, dH, saved) - ref.dv)) < 1e-12


def test_kernels_zero_gradient():
    dims, x = _problem()
    saved = chunkwise_forward(x, dims, "exp")[1:]
    bc = BlockConfig(8, 4, 8, 16)
    dH = np.zeros(x.v.shape)
    assert np.all(tfla_backward_dQ(x, dims, bc, "exp", dH, saved).dq == 0)
    assert np.all(tfla_backward_dK(x, dims, bc, "exp", dH, saved).dk == 0)
    assert np.all(tfla_backward_dV(x, dims, bc, "exp", dH, saved) == 0)


def test_schedule_order_invariance():
    dims, x = _problem()
    bc = BlockConfig(8, 4, 8, 16)
    dH = random_dh(x)
    a, sa, ta = tfla_forward(x, dims, bc, "exp")
    b, sb, tb = tfla_forward(x, dims, bc, "exp", schedule_seed=123)
    # no shared accumulators across programs: bitwise equal
    assert np.array_equal(a, b)
    ga = tfla_backward(x, dims, bc, "exp", dH, (sa, ta)).as_dict()
    gb = tfla_backward(x, dims, bc, "exp", dH, (sb, tb), schedule_seed=7).as_dict()
    for name in ga:
        assert np.array_equal(ga[name], gb[name])


def test_rescaling_with_rising_block_maxima():
    # ascending input gates make every later key block raise the running max
    dims = Dims(T=16, L=16, d_qk=4, d_hv=4)
    x = make_inputs(dims, Rng(0), f_pre=8.0)
    x = x.replace(i_pre=np.linspace(-10, 10, 16)[None, None])
    ref = chunkwise_forward(x, dims, "exp")[0]
    with exponent_monitor() as stats:
        out = tfla_forward(x, dims, BlockConfig(16, 2, 4, 4), "exp")[0]
    assert np.max(np.abs(out - ref)) < 1e-12
    assert stats.violations == 0


def test_mask_only_on_straddling_blocks():
    dims, x = _problem()
    bc = BlockConfig(8, 2, 16, 32)
    trace = TileTrace()
    tfla_forward(x, dims, bc, "exp", trace=trace)
    for k, i_q, i_kv, masked in trace.visits:
        rows = range(i_q * 8, (i_q + 1) * 8)
        cols = range(i_kv * 2, (i_kv + 1) * 2)
        fully_below = min(rows) >= max(cols)
        assert masked != fully_below
        # fully-above blocks are never visited
        assert max(rows) >= min(cols)
    assert len(trace.visits) == 4 * sum(kv_block_count(i, bc) for i in range(2))


def test_kv_loop_bound():
    bc = BlockConfig(8, 4, 1, 1)
    assert [kv_block_count(i, bc) for i in range(3)] == [2, 4, 6]
    assert needs_mask(1, 2, bc) and not needs_mask(1, 1, bc)
