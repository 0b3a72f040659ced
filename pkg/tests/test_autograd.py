"""Tensor engine tests: forward semantics and gradient oracles."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dewarp import autograd as ag
from dewarp.errors import ContractError, DimensionError

from oracles import REL_TOL, distinct_tensor, fd_check, max_rel_error, rand_tensor

SEEDS = [0, 1, 2, 3, 4]


def conv(x, w, b, stride=1, padding=0):
    return ag.conv2d(x, ag.ConvParams(w, b, stride=stride, padding=padding))


class TestConv2d:
    def test_box_sum(self):
        x = ag.Tensor(np.ones((1, 1, 3, 3), dtype=np.float32))
        w = ag.Tensor(np.ones((1, 1, 3, 3), dtype=np.float32))
        b = ag.Tensor(np.zeros(1, dtype=np.float32))
        y = conv(x, w, b, padding=1).data[0, 0]
        assert y[1, 1] == 9.0
        assert y[0, 0] == y[0, 2] == y[2, 0] == y[2, 2] == 4.0

    def test_identity_1x1(self):
        rng = np.random.default_rng(0)
        x = ag.Tensor(rng.uniform(-1, 1, (2, 1, 5, 7)).astype(np.float32))
        w = ag.Tensor(np.ones((1, 1, 1, 1), dtype=np.float32))
        b = ag.Tensor(np.zeros(1, dtype=np.float32))
        y = conv(x, w, b)
        assert np.array_equal(y.data, x.data)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradients(self, seed):
        rng = np.random.default_rng(seed)
        x = rand_tensor(rng, (2, 3, 8, 8))
        w = rand_tensor(rng, (4, 3, 3, 3), scale=0.5)
        b = rand_tensor(rng, (4,))
        fd_check(lambda: ag.reduce_sum(ag.square(conv(x, w, b, padding=1))), [x, w, b])

    def test_stride_2(self):
        rng = np.random.default_rng(7)
        x = rand_tensor(rng, (1, 2, 7, 7))
        w = rand_tensor(rng, (3, 2, 3, 3))
        b = rand_tensor(rng, (3,))
        y = conv(x, w, b, stride=2, padding=1)
        assert y.shape == (1, 3, 4, 4)
        # 6+2-3 = 5 is not divisible by stride 2: exact division required
        xbad = rand_tensor(rng, (1, 2, 6, 7))
        with pytest.raises(DimensionError):
            conv(xbad, w, b, stride=2, padding=1)

    def test_channel_mismatch_names_axis(self):
        rng = np.random.default_rng(1)
        x = rand_tensor(rng, (1, 2, 4, 4))
        w = rand_tensor(rng, (3, 5, 3, 3))
        b = rand_tensor(rng, (3,))
        with pytest.raises(DimensionError, match="channel axis"):
            conv(x, w, b, padding=1)

    def test_kernel_restriction(self):
        rng = np.random.default_rng(1)
        with pytest.raises(ContractError):
            ag.ConvParams(rand_tensor(rng, (1, 1, 5, 5)), rand_tensor(rng, (1,)))


class TestMaxPool:
    def test_single_window(self):
        x = ag.Tensor(np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32).reshape(1, 1, 2, 2))
        assert ag.maxpool2(x).item() == 4.0

    def test_constant(self):
        x = ag.Tensor(np.full((1, 2, 4, 6), 0.7, dtype=np.float32))
        y = ag.maxpool2(x)
        assert y.shape == (1, 2, 2, 3)
        assert np.all(y.data == np.float32(0.7))

    def test_odd_extent_rejected(self):
        x = ag.Tensor(np.zeros((1, 1, 3, 4), dtype=np.float32))
        with pytest.raises(DimensionError):
            ag.maxpool2(x)

    def test_tie_break_first_row_major(self):
        x = ag.Tensor(np.zeros((1, 1, 2, 2), dtype=np.float32), requires_grad=True)
        with ag.Tape() as tape:
            loss = ag.reduce_sum(ag.maxpool2(x))
        ag.backward(tape, loss)
        expect = np.zeros((1, 1, 2, 2), dtype=np.float32)
        expect[0, 0, 0, 0] = 1.0
        assert np.array_equal(x.grad, expect)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradients(self, seed):
        rng = np.random.default_rng(seed)
        x = distinct_tensor(rng, (2, 2, 4, 4))
        fd_check(lambda: ag.reduce_sum(ag.square(ag.maxpool2(x))), [x])


class TestUpsample:
    def test_two_sample_axis(self):
        # 1-D analog [0, 1] -> [0, 1/3, 2/3, 1] along each axis
        x = ag.Tensor(np.array([0.0, 1.0], dtype=np.float64).reshape(1, 1, 1, 2).repeat(2, axis=2))
        y = ag.upsample_bilinear2(x)
        assert np.allclose(y.data[0, 0, 0], [0.0, 1 / 3, 2 / 3, 1.0])

    def test_constant(self):
        x = ag.Tensor(np.full((1, 3, 4, 5), 0.25, dtype=np.float32))
        y = ag.upsample_bilinear2(x)
        assert y.shape == (1, 3, 8, 10)
        assert np.allclose(y.data, 0.25)

    def test_corners_align(self):
        rng = np.random.default_rng(0)
        x = rand_tensor(rng, (1, 1, 3, 5), requires_grad=False)
        y = ag.upsample_bilinear2(x).data[0, 0]
        assert np.isclose(y[0, 0], x.data[0, 0, 0, 0])
        assert np.isclose(y[-1, -1], x.data[0, 0, -1, -1])

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradients(self, seed):
        rng = np.random.default_rng(seed)
        x = rand_tensor(rng, (1, 2, 3, 4))
        fd_check(lambda: ag.reduce_sum(ag.square(ag.upsample_bilinear2(x))), [x])


class TestConcatSplit:
    def test_published_concat_shape(self):
        parts = [ag.Tensor(np.zeros((1, c, 256, 256), dtype=np.float32)) for c in (32, 16, 16)]
        assert ag.concat_channels(parts).shape == (1, 64, 256, 256)

    def test_published_split_shape(self):
        x = ag.Tensor(np.zeros((1, 1024, 8, 8), dtype=np.float32))
        a, b = ag.split_channels(x, [512, 512])
        assert a.shape == (1, 512, 8, 8) and b.shape == (1, 512, 8, 8)

    @given(
        n=st.integers(1, 2),
        sizes=st.lists(st.integers(1, 5), min_size=1, max_size=4),
        seed=st.integers(0, 2**32 - 1),
    )
    @settings(max_examples=25, deadline=None)
    def test_split_concat_roundtrip(self, n, sizes, seed):
        rng = np.random.default_rng(seed)
        x = ag.Tensor(rng.standard_normal((n, sum(sizes), 3, 4)).astype(np.float32))
        parts = ag.split_channels(x, sizes)
        back = ag.concat_channels(parts)
        assert np.array_equal(back.data, x.data)
        again = ag.split_channels(back, sizes)
        for p, q in zip(parts, again):
            assert np.array_equal(p.data, q.data)

    def test_mismatched_parts_rejected(self):
        a = ag.Tensor(np.zeros((1, 2, 4, 4), dtype=np.float32))
        b = ag.Tensor(np.zeros((1, 2, 4, 5), dtype=np.float32))
        with pytest.raises(DimensionError):
            ag.concat_channels([a, b])
        with pytest.raises(DimensionError):
            ag.split_channels(a, [1, 2])

    def test_gradients_scatter(self):
        rng = np.random.default_rng(11)
        x = rand_tensor(rng, (1, 5, 2, 2))
        y = rand_tensor(rng, (1, 3, 2, 2))

        def loss():
            a, b = ag.split_channels(x, [2, 3])
            return ag.reduce_sum(ag.square(ag.concat_channels([b, a, y])))

        fd_check(loss, [x, y])


class TestPointwise:
    def test_fixed_points(self):
        z = ag.Tensor(np.array([0.0], dtype=np.float32))
        assert ag.tanh(z).data[0] == 0.0
        assert ag.sigmoid(z).data[0] == 0.5
        assert ag.relu(ag.Tensor(np.array([-1.0], dtype=np.float32))).data[0] == 0.0

    def test_ranges(self):
        rng = np.random.default_rng(0)
        # saturating inputs: outputs never escape the closed bounds
        x = ag.Tensor((rng.standard_normal(1000) * 50).astype(np.float32))
        t = ag.tanh(x).data
        s = ag.sigmoid(x).data
        assert np.all(t >= -1.0) and np.all(t <= 1.0)
        assert np.all(s >= 0.0) and np.all(s <= 1.0)
        # within float32 resolution (|x| <= 5) the bounds are strict
        x = ag.Tensor((rng.uniform(-5, 5, 1000)).astype(np.float32))
        t = ag.tanh(x).data
        s = ag.sigmoid(x).data
        assert np.all(t > -1.0) and np.all(t < 1.0)
        assert np.all(s > 0.0) and np.all(s < 1.0)

    def test_unknown_kind(self):
        with pytest.raises(ContractError):
            ag.pointwise(ag.Tensor(np.zeros(1, dtype=np.float32)), "softplus")

    @pytest.mark.parametrize("kind", ["relu", "sigmoid", "tanh"])
    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradients(self, kind, seed):
        rng = np.random.default_rng(seed)
        x = rand_tensor(rng, (3, 7))
        # keep relu probes away from its kink
        x.data[np.abs(x.data) < 0.05] += 0.1
        fd_check(lambda: ag.reduce_sum(ag.square(ag.pointwise(x, kind))), [x])


class TestBatchNorm:
    def test_standardized_input_passthrough(self):
        rng = np.random.default_rng(0)
        raw = rng.standard_normal((8, 3, 6, 6))
        raw = raw - raw.mean(axis=(0, 2, 3), keepdims=True)
        raw = raw / raw.std(axis=(0, 2, 3), keepdims=True)
        x = ag.Tensor(raw.astype(np.float64))
        state = ag.BatchNormState(3, dtype=np.float64)
        y = ag.batchnorm(x, state, training=True)
        assert np.max(np.abs(y.data - x.data)) < 1e-4

    def test_constant_channel_gives_shift(self):
        x = ag.Tensor(np.full((2, 2, 4, 4), 3.0, dtype=np.float32))
        state = ag.BatchNormState(2)
        state.shift.data[:] = np.array([0.5, -0.25], dtype=np.float32)
        y = ag.batchnorm(x, state, training=True)
        assert np.allclose(y.data[:, 0], 0.5) and np.allclose(y.data[:, 1], -0.25)

    def test_running_stats_used_in_eval(self):
        rng = np.random.default_rng(5)
        state = ag.BatchNormState(2, dtype=np.float64)
        x = ag.Tensor(rng.standard_normal((4, 2, 5, 5)) * 2 + 1)
        ag.batchnorm(x, state, training=True)
        rm, rv = state.running_mean.copy(), state.running_var.copy()
        y = ag.batchnorm(x, state, training=False)
        expect = (x.data - rm.reshape(1, 2, 1, 1)) / np.sqrt(rv.reshape(1, 2, 1, 1) + state.eps)
        assert np.allclose(y.data, expect)
        assert np.array_equal(state.running_mean, rm)  # eval must not update

    def test_channel_mismatch(self):
        x = ag.Tensor(np.zeros((1, 3, 4, 4), dtype=np.float32))
        with pytest.raises(DimensionError):
            ag.batchnorm(x, ag.BatchNormState(4), training=True)

    @pytest.mark.parametrize("seed", SEEDS)
    def test_gradients_training_mode(self, seed):
        rng = np.random.default_rng(seed)
        x = rand_tensor(rng, (3, 2, 4, 4))
        state = ag.BatchNormState(2, dtype=np.float64)
        state.scale.data[:] = rng.uniform(0.5, 1.5, 2)
        state.shift.data[:] = rng.uniform(-0.5, 0.5, 2)
        fd_check(
            lambda: ag.reduce_sum(ag.square(ag.batchnorm(x, state, training=True))),
            [x, state.scale, state.shift],
        )


class TestBackward:
    def test_sum_gives_ones(self):
        x = ag.Tensor(np.arange(6, dtype=np.float32).reshape(2, 3), requires_grad=True)
        with ag.Tape() as tape:
            loss = ag.reduce_sum(x)
        ag.backward(tape, loss)
        assert np.array_equal(x.grad, np.ones((2, 3), dtype=np.float32))

    def test_sum_square_gives_2x(self):
        x = ag.Tensor(np.arange(6, dtype=np.float32).reshape(2, 3), requires_grad=True)
        with ag.Tape() as tape:
            loss = ag.reduce_sum(ag.mul(x, x))
        ag.backward(tape, loss)
        assert np.allclose(x.grad, 2 * x.data)

    def test_reuse_accumulates(self):
        rng = np.random.default_rng(3)
        base = rng.standard_normal((4, 4)).astype(np.float64)

        x = ag.Tensor(base.copy(), requires_grad=True)
        with ag.Tape() as tape:
            loss = ag.add(ag.reduce_sum(ag.square(x)), ag.reduce_sum(ag.mul_scalar(x, 3.0)))
        ag.backward(tape, loss)
        combined = x.grad.copy()

        assert np.allclose(combined, 2 * base + 3.0)

    def test_non_scalar_loss_rejected(self):
        x = ag.Tensor(np.zeros((2, 2), dtype=np.float32), requires_grad=True)
        with ag.Tape() as tape:
            y = ag.square(x)
        with pytest.raises(ContractError):
            ag.backward(tape, y)

    def test_off_tape_loss_rejected(self):
        x = ag.Tensor(np.zeros(3, dtype=np.float32), requires_grad=True)
        with ag.Tape() as tape:
            ag.reduce_sum(x)
        stray = ag.reduce_sum(x)  # built outside the tape
        with pytest.raises(ContractError):
            ag.backward(tape, stray)


class TestFiniteness:
    @given(seed=st.integers(0, 2**32 - 1))
    @settings(max_examples=20, deadline=None)
    def test_ops_finite_on_finite_inputs(self, seed):
        rng = np.random.default_rng(seed)
        x = ag.Tensor(rng.standard_normal((2, 4, 4, 4)).astype(np.float32) * 10)
        w = ag.Tensor(rng.standard_normal((3, 4, 3, 3)).astype(np.float32))
        b = ag.Tensor(rng.standard_normal(3).astype(np.float32))
        outs = [
            conv(x, w, b, padding=1).data,
            ag.maxpool2(x).data,
            ag.upsample_bilinear2(x).data,
            ag.tanh(x).data,
            ag.sigmoid(x).data,
            ag.relu(x).data,
            ag.batchnorm(x, ag.BatchNormState(4), training=True).data,
            ag.reduce_mean(x).data,
        ]
        for o in outs:
            assert np.all(np.isfinite(o))


class TestBroadcastMul:
    def test_channel_broadcast_grads(self):
        rng = np.random.default_rng(9)
        a = rand_tensor(rng, (2, 4, 3, 3))
        gate = rand_tensor(rng, (2, 1, 3, 3))
        fd_check(lambda: ag.reduce_sum(ag.square(ag.mul(a, gate))), [a, gate])

    def test_illegal_broadcast(self):
        a = ag.Tensor(np.zeros((2, 4, 3, 3), dtype=np.float32))
        b = ag.Tensor(np.zeros((2, 2, 3, 3), dtype=np.float32))
        with pytest.raises(DimensionError):
            ag.mul(a, b)


def test_rel_error_helper_guard():
    # the guarded denominator forgives sub-1e-7 absolute noise near zero
    assert max_rel_error(np.array([0.0]), np.array([5e-8])) < REL_TOL
    assert max_rel_error(np.array([1.0]), np.array([1.01])) > REL_TOL
