"""Reverse-mode gradients: tape replay semantics, the backward examples,
and central-finite-difference checks for every differentiable op."""

import numpy as np
import pytest

from cpdnet.tensor import (Tensor, Tape, ShapeError, add, backward, concat_channels,
                           conv2d, grad_check, maximum, maxpool2, mul, pad_replicate,
                           reduce_sum, relu, scale, sigmoid, upsample_bilinear)
from cpdnet.layers import minmax_normalize
from cpdnet.training import bce_with_logits


def t64(arr, grad=True):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=grad)


def weighted_sum(x: Tensor, proj: np.ndarray) -> Tensor:
    """Scalar readout that weights every element differently, so positional
    gradient errors cannot cancel."""
    return reduce_sum(mul(x, Tensor(proj.astype(x.data.dtype))))


class TestBackwardBasics:
    def test_sum_gives_ones(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 4, 4)).astype(np.float32), requires_grad=True)
        with Tape() as tape:
            loss = reduce_sum(x)
        backward(loss, tape)
        np.testing.assert_array_equal(x.grad, np.ones_like(x.data))

    def test_quadratic_gives_x(self, rng):
        x = Tensor(rng.normal(size=(1, 2, 3, 3)).astype(np.float32), requires_grad=True)
        with Tape() as tape:
            loss = scale(reduce_sum(mul(x, x)), 0.5)
        backward(loss, tape)
        np.testing.assert_allclose(x.grad, x.data, rtol=1e-6)

    def test_non_scalar_loss_rejected(self, rng):
        x = Tensor(rng.normal(size=(1, 1, 2, 2)).astype(np.float32), requires_grad=True)
        with Tape() as tape:
            y = relu(x)
        with pytest.raises(ShapeError):
            backward(y, tape)

    def test_reuse_accumulates(self, rng):
        x = Tensor(rng.normal(size=(1, 1, 2, 2)).astype(np.float32), requires_grad=True)
        with Tape() as tape:
            loss = reduce_sum(add(x, x))
        backward(loss, tape)
        np.testing.assert_array_equal(x.grad, np.full_like(x.data, 2.0))

    def test_disconnected_branch_gets_no_grad(self, rng):
        x = Tensor(rng.normal(size=(1, 1, 2, 2)).astype(np.float32), requires_grad=True)
        y = Tensor(rng.normal(size=(1, 1, 2, 2)).astype(np.float32), requires_grad=True)
        with Tape() as tape:
            _unused = relu(y)
            loss = reduce_sum(x)
        backward(loss, tape)
        assert x.grad is not None
        assert y.grad is None

    def test_composite_graph_matches_finite_differences(self, rng):
        x = t64(rng.normal(size=(1, 2, 4, 4)))
        w = t64(rng.normal(size=(2, 2, 3, 3)))
        b = t64(rng.normal(size=2))
        mask = Tensor((rng.random((1, 2, 4, 4)) > 0.5).astype(np.float64))

        def fn(xv, wv, bv):
            out = conv2d(xv, wv, bv, padding=(1, 1, 1, 1))
            return bce_with_logits(sigmoid(relu(out)), Tensor(mask.data))

        report = grad_check(fn, [x, w, b], eps=1e-6, tol=1e-7)
        assert report.passed, str(report)


class TestGradCheckHarness:
    def test_linear_function_near_machine_precision(self, rng):
        x = t64(rng.normal(size=(1, 1, 3, 3)))
        report = grad_check(lambda v: reduce_sum(v), [x], eps=1e-4, tol=1e-6)
        assert report.max_rel_error < 1e-9

    def test_conv_bias_program(self, rng):
        x = t64(rng.normal(size=(1, 2, 4, 4)))
        w = t64(rng.normal(size=(3, 2, 3, 3)))
        b = t64(rng.normal(size=3))
        proj = rng.normal(size=(1, 3, 4, 4))

        def fn(xv, wv, bv):
            return weighted_sum(conv2d(xv, wv, bv, padding=(1, 1, 1, 1)), proj)

        report = grad_check(fn, [x, w, b], eps=1e-4, tol=1e-4)
        assert report.passed, str(report)
        assert report.max_rel_error < 1e-4

    def test_rejects_float32_inputs(self):
        x = Tensor(np.zeros((1, 1, 2, 2), np.float32), requires_grad=True)
        with pytest.raises(TypeError):
            grad_check(lambda v: reduce_sum(v), [x])

    def test_rejects_non_scalar_fn(self, rng):
        x = t64(rng.normal(size=(1, 1, 2, 2)))
        with pytest.raises(ShapeError):
            grad_check(lambda v: relu(v), [x])


def _fd_case(rng, name):
    """Build (fn, inputs) pairs for each differentiable op, with inputs kept
    away from kinks so central differences are valid."""
    proj = rng.normal(size=(1, 2, 4, 4))
    if name == "conv2d":
        x = t64(rng.normal(size=(1, 3, 4, 4)))
        w = t64(rng.normal(size=(2, 3, 3, 3)))
        b = t64(rng.normal(size=2))
        return lambda xv, wv, bv: weighted_sum(
            conv2d(xv, wv, bv, padding=(1, 1, 1, 1)), proj), [x, w, b]
    if name == "conv2d_dilated_strided":
        x = t64(rng.normal(size=(1, 2, 7, 7)))
        w = t64(rng.normal(size=(2, 2, 3, 3)))
        p2 = rng.normal(size=(1, 2, 3, 3))
        return lambda xv, wv: weighted_sum(
            conv2d(xv, wv, stride=2, padding=(1, 1, 1, 1), dilation=2), p2), [x, w]
    if name == "upsample":
        x = t64(rng.normal(size=(1, 2, 2, 2)))
        p2 = rng.normal(size=(1, 2, 6, 6))
        return lambda xv: weighted_sum(upsample_bilinear(xv, 3), p2), [x]
    if name == "add":
        a, b = t64(rng.normal(size=(1, 2, 4, 4))), t64(rng.normal(size=(1, 2, 4, 4)))
        return lambda av, bv: weighted_sum(add(av, bv), proj), [a, b]
    if name == "mul_broadcast":
        a = t64(rng.normal(size=(1, 2, 4, 4)))
        b = t64(rng.normal(size=(1, 1, 4, 4)))
        return lambda av, bv: weighted_sum(mul(av, bv), proj), [a, b]
    if name == "max":
        a = t64(rng.normal(size=(1, 2, 4, 4)))
        b = t64(a.data + rng.choice([-1.0, 1.0], size=a.shape) * rng.uniform(0.1, 1.0, a.shape))
        return lambda av, bv: weighted_sum(maximum(av, bv), proj), [a, b]
    if name == "concat":
        a, b = t64(rng.normal(size=(1, 1, 4, 4))), t64(rng.normal(size=(1, 1, 4, 4)))
        return lambda av, bv: weighted_sum(concat_channels([av, bv]), proj), [a, b]
    if name == "relu":
        vals = rng.uniform(0.2, 1.0, (1, 2, 4, 4)) * rng.choice([-1.0, 1.0], (1, 2, 4, 4))
        return lambda xv: weighted_sum(relu(xv), proj), [t64(vals)]
    if name == "sigmoid":
        return lambda xv: weighted_sum(sigmoid(xv), proj), [t64(rng.normal(size=(1, 2, 4, 4)))]
    if name == "maxpool":
        # distinct window values with a comfortable margin
        base = rng.permutation(64).astype(np.float64).reshape(1, 1, 8, 8) * 0.1
        p2 = rng.normal(size=(1, 1, 4, 4))
        return lambda xv: weighted_sum(maxpool2(xv), p2), [t64(base)]
    if name == "pad_replicate":
        x = t64(rng.normal(size=(1, 2, 3, 3)))
        p2 = rng.normal(size=(1, 2, 7, 6))
        return lambda xv: weighted_sum(pad_replicate(xv, (2, 2, 1, 2)), p2), [x]
    if name == "minmax_normalize":
        x = t64(rng.normal(size=(1, 1, 4, 4)))
        p2 = rng.normal(size=(1, 1, 4, 4))
        return lambda xv: weighted_sum(minmax_normalize(xv), p2), [x]
    if name == "bce":
        x = t64(rng.normal(size=(1, 1, 4, 4)))
        mask = (rng.random((1, 1, 4, 4)) > 0.5).astype(np.float64)
        return lambda xv: bce_with_logits(xv, Tensor(mask)), [x]
    if name == "scale_sum":
        x = t64(rng.normal(size=(1, 2, 3, 3)))
        return lambda xv: scale(reduce_sum(xv), -1.7), [x]
    raise AssertionError(name)


FD_OPS = ["conv2d", "conv2d_dilated_strided", "upsample", "add", "mul_broadcast",
          "max", "concat", "relu", "sigmoid", "maxpool", "pad_replicate",
          "minmax_normalize", "bce", "scale_sum"]


class TestEveryOpPassesFiniteDifferences:
    @pytest.mark.parametrize("name", FD_OPS)
    def test_op(self, name):
        rng = np.random.default_rng(hash(name) % (2 ** 31))
        fn, inputs = _fd_case(rng, name)
        report = grad_check(fn, inputs, eps=1e-5, tol=1e-4)
        assert report.passed, f"{name}: {report}"


class TestMinmaxNormalizeGradient:
    def test_degenerate_map_gets_zero_grad(self):
        x = Tensor(np.full((1, 1, 3, 3), 0.4, np.float32), requires_grad=True)
        with Tape() as tape:
            loss = reduce_sum(minmax_normalize(x))
        assert np.all(loss.data == 0.0)
        backward(loss, tape)
        np.testing.assert_array_equal(x.grad, np.zeros_like(x.data))

    def test_gradient_conserves_shift_invariance(self, rng):
        """Adding a constant to the map leaves the output unchanged, so the
        gradient components must sum to zero per sample."""
        x = Tensor(rng.normal(size=(2, 1, 4, 4)).astype(np.float64), requires_grad=True)
        proj = rng.normal(size=(2, 1, 4, 4))
        with Tape() as tape:
            loss = weighted_sum(minmax_normalize(x), proj)
        backward(loss, tape)
        sums = x.grad.reshape(2, -1).sum(axis=1)
        np.testing.assert_allclose(sums, 0.0, atol=1e-12)
