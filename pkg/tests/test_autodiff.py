import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import avtse.autodiff as ad
from avtse.autodiff import (AdamState, NumericsError, ShapeError, Tape, Tensor,
                            adam_step, apply_primitive, backward, conv_output_length,
                            gradcheck, gradcheck_primitives)


def t(x, grad=False):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=grad)


class TestForwardBasics:
    def test_conv1d_identity_kernel(self):
        x = Tensor(np.arange(8, dtype=np.float32).reshape(1, 8, 1))
        w = Tensor(np.ones((1, 1, 1), dtype=np.float32))
        y = ad.conv1d(x, w, stride=1, pad=0)
        assert np.array_equal(y.data, x.data)

    @pytest.mark.parametrize("c", [0.0, 1.5, -3.0])
    def test_softmax_symmetry(self, c):
        y = ad.softmax_over_axis(Tensor(np.array([[c, c]])), axis=1)
        assert np.allclose(y.data, [[0.5, 0.5]])

    def test_global_layer_norm_constant_input(self):
        x = Tensor(np.full((1, 5, 3), 2.7, dtype=np.float32))
        y = ad.global_layer_norm(x, Tensor(np.ones(3)), Tensor(np.zeros(3)))
        assert np.allclose(y.data, 0.0)

    def test_conv1d_shape_error_names_op_and_dims(self):
        x = Tensor(np.zeros((1, 4, 3)))
        w = Tensor(np.zeros((2, 5, 3)))  # channel mismatch
        with pytest.raises(ShapeError, match="conv1d"):
            ad.conv1d(x, w)

    def test_l2_norm_zero_vector_uses_epsilon_floor(self):
        y = ad.l2_norm_over_axis(Tensor(np.zeros((1, 1, 4))), axis=2)
        assert np.all(np.isfinite(y.data))
        assert y.data.max() <= 1.5e-8

    def test_apply_primitive_dispatch_and_unknown_kind(self):
        x = Tensor(np.ones((1, 2, 2)))
        y = apply_primitive("relu", [x])
        assert np.array_equal(y.data, x.data)
        with pytest.raises(ad.AutodiffError, match="unknown primitive"):
            apply_primitive("not_an_op", [x])


class TestConvGeometry:
    @pytest.mark.parametrize("kernel", [1, 3, 5, 7, 16, 20])
    @pytest.mark.parametrize("stride", [1, 2, 8, 10])
    @pytest.mark.parametrize("dilation", [1, 2, 4, 8])
    def test_length_formula_sweep(self, kernel, stride, dilation):
        for t_in in range(1, 65):
            for pad in (0, 2):
                span = dilation * (kernel - 1) + 1
                if t_in + 2 * pad < span:
                    with pytest.raises(ShapeError):
                        ad.conv1d(Tensor(np.zeros((1, t_in, 1))),
                                  Tensor(np.zeros((1, 1, kernel))),
                                  stride=stride, pad=pad, dilation=dilation)
                    continue
                expected = (t_in + 2 * pad - dilation * (kernel - 1) - 1) // stride + 1
                assert conv_output_length(t_in, kernel, stride, pad, dilation) == expected
                y = ad.conv1d(Tensor(np.zeros((1, t_in, 1))),
                              Tensor(np.zeros((1, 1, kernel))),
                              stride=stride, pad=pad, dilation=dilation)
                assert y.shape == (1, expected, 1)


class TestBackward:
    def test_quadratic_derivative(self):
        p = t([3.0], grad=True)
        with Tape() as tape:
            loss = ad.mean_over_axis(ad.elem_mul(p, p), axis=0)
        tape.backward(loss)
        assert np.allclose(p.grad, [6.0])

    def test_sigmoid_grad_at_zero(self):
        x = t([0.0], grad=True)
        with Tape() as tape:
            loss = ad.mean_over_axis(ad.sigmoid(x), axis=0)
        tape.backward(loss)
        assert np.allclose(x.grad, [0.25])

    def test_backward_rejects_non_scalar_loss(self):
        x = t([1.0, 2.0], grad=True)
        with Tape() as tape:
            y = ad.elem_mul(x, x)
        with pytest.raises(ad.AutodiffError, match="scalar"):
            tape.backward(y)

    def test_backward_requires_tape(self):
        x = t([1.0], grad=True)
        y = ad.elem_mul(x, x)  # no tape active
        with pytest.raises(ad.AutodiffError, match="tape"):
            backward(ad.mean_over_axis(y, axis=0))

    def test_gradient_accumulation_is_sum_of_single_uses(self):
        # loss = sum(a*a + 4a) uses `a` three times; its gradient must equal
        # the exact sum of the three single-slot gradients (dyadic values and
        # power-of-two scaling keep every float op exact).
        val = np.array([1.5, -2.0, 0.5])

        def single_use_grad(slot):
            a = t(val, grad=True)
            c = t(val, grad=False)
            operands = [c, c, c]
            operands[slot] = a
            with Tape() as tape:
                loss = ad.sum_over_axis(
                    ad.elem_add(ad.elem_mul(operands[0], operands[1]),
                                ad.scale(operands[2], 4.0)), axis=0)
            tape.backward(loss)
            return a.grad.copy()

        a = t(val, grad=True)
        with Tape() as tape:
            loss = ad.sum_over_axis(ad.elem_add(ad.elem_mul(a, a), ad.scale(a, 4.0)), axis=0)
        tape.backward(loss)
        expected = single_use_grad(0) + single_use_grad(1) + single_use_grad(2)
        assert np.array_equal(a.grad, expected)

    def test_randomized_composite_graph_matches_plain_central_differences(self):
        # Independent oracle: raw central differences at h=1e-3, no reuse of
        # the gradcheck facility. Smooth ops only.
        rng = np.random.default_rng(42)
        x = Tensor(rng.normal(size=(2, 10, 3)))
        params = {
            "w_conv": t(rng.normal(size=(4, 3, 3)) * 0.5, grad=True),
            "w_lin": t(rng.normal(size=(5, 4)) * 0.5, grad=True),
            "b_lin": t(rng.normal(size=5) * 0.1, grad=True),
        }

        def fn():
            h = ad.tanh(ad.conv1d(x, params["w_conv"], stride=1, pad=1))
            h = ad.linear(h, params["w_lin"], params["b_lin"])
            h = ad.softmax_over_axis(h, axis=2)
            return ad.mean_over_axis(ad.elem_mul(h, h), axis=(0, 1, 2))

        for p in params.values():
            p.zero_grad()
        with Tape() as tape:
            loss = fn()
        tape.backward(loss)

        h_step = 1e-3
        for name, p in params.items():
            flat = p.data.reshape(-1)
            g = p.grad.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h_step
                f_plus = fn().item()
                flat[i] = orig - h_step
                f_minus = fn().item()
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2 * h_step)
                assert abs(g[i] - numeric) / (abs(g[i]) + 1e-8) < 1e-4, name


class TestGradcheckFacility:
    def test_single_linear_layer_below_1e6(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(size=(3, 4)))
        params = {"w": t(rng.normal(size=(2, 4)), grad=True), "b": t(rng.normal(size=2), grad=True)}

        def fn():
            y = ad.linear(x, params["w"], params["b"])
            return ad.mean_over_axis(ad.elem_mul(y, y), axis=(0, 1))

        report = gradcheck(fn, params, max_entries=64)
        assert report.max_rel_error < 1e-6

    def test_softmax_mse_composite_below_1e5(self):
        rng = np.random.default_rng(1)
        x = t(rng.normal(size=(2, 6)), grad=True)
        target = rng.normal(size=(2, 6))

        def fn():
            y = ad.softmax_over_axis(x, axis=1)
            d = ad.elem_sub(y, Tensor(target))
            return ad.mean_over_axis(ad.elem_mul(d, d), axis=(0, 1))

        report = gradcheck(fn, {"x": x}, max_entries=12)
        assert report.max_rel_error < 1e-5

    def test_gradcheck_requires_float64(self):
        x = Tensor(np.ones(3, dtype=np.float32), requires_grad=True)
        with pytest.raises(ad.AutodiffError, match="float64"):
            gradcheck(lambda: ad.mean_over_axis(x, axis=0), {"x": x})

    def test_gradcheck_detects_corrupted_backward_rule(self):
        # Sensitivity check: a deliberately wrong pullback must be caught.
        def broken_square(x):
            y_data = x.data * x.data

            def bwd(g, needs):
                return (g * x.data,)  # missing factor 2

            return ad._finish("broken_square", (x,), y_data, bwd)

        x = t([1.3, -0.7], grad=True)

        def fn():
            return ad.mean_over_axis(broken_square(x), axis=0)

        report = gradcheck(fn, {"x": x})
        assert not report.passed

    def test_non_finite_forward_raises_with_op_provenance(self):
        ad.set_debug_checks(True)
        try:
            with pytest.raises(NumericsError, match="log"):
                ad.log(Tensor(np.array([0.0, -1.0])))
        finally:
            ad.set_debug_checks(False)


class TestPrimitiveSweep:
    def test_all_primitives_match_finite_differences(self):
        # Short sweep here; the acceptance suite runs the full 20 cases.
        results = gradcheck_primitives(n_cases=4, seed=7)
        bad = {k: v for k, v in results.items() if v >= 1e-4}
        assert not bad, bad


class TestSoftmaxProperties:
    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(min_value=-30, max_value=30), min_size=2, max_size=8))
    def test_softmax_rows_on_simplex(self, values):
        y = ad.softmax_over_axis(Tensor(np.array([values])), axis=1)
        assert np.all(y.data >= 0)
        assert abs(y.data.sum() - 1.0) < 1e-6


class TestAdam:
    def test_first_step_is_signed_learning_rate(self):
        p = ad.Parameter("p", Tensor(np.array([1.0, -2.0, 3.0], dtype=np.float32)))
        params = {"p": p}
        state = AdamState.for_params(params)
        g = np.array([0.5, -1.0, 2.0], dtype=np.float32)
        adam_step(params, {"p": g}, state, lr=0.1, eps=1e-12)
        update = p.data - np.array([1.0, -2.0, 3.0], dtype=np.float32)
        assert np.allclose(update, -0.1 * np.sign(g), atol=1e-6)
        assert state.step == 1

    def test_zero_gradient_from_fresh_state_leaves_params_unchanged(self):
        p = ad.Parameter("p", Tensor(np.array([1.0, 2.0], dtype=np.float32)))
        params = {"p": p}
        state = AdamState.for_params(params)
        adam_step(params, {"p": np.zeros(2, dtype=np.float32)}, state, lr=0.1)
        assert np.array_equal(p.data, np.array([1.0, 2.0], dtype=np.float32))

    def test_hundred_steps_on_square_reaches_near_zero(self):
        p = ad.Parameter("x", Tensor(np.array([1.0], dtype=np.float64)))
        params = {"x": p}
        state = AdamState.for_params(params)
        for _ in range(100):
            adam_step(params, {"x": 2.0 * p.data}, state, lr=0.1)
        assert abs(p.data[0]) < 0.05

    def test_shape_mismatch_rejected(self):
        p = ad.Parameter("p", Tensor(np.zeros(3, dtype=np.float32)))
        params = {"p": p}
        state = AdamState.for_params(params)
        with pytest.raises(ShapeError):
            adam_step(params, {"p": np.zeros(4, dtype=np.float32)}, state, lr=0.1)


class TestDeterminism:
    def test_forward_backward_bit_reproducible(self):
        def run():
            rng = np.random.default_rng(3)
            x = Tensor(rng.normal(size=(2, 12, 3)).astype(np.float32))
            w = Tensor(rng.normal(size=(4, 3, 3)).astype(np.float32), requires_grad=True)
            with Tape() as tape:
                y = ad.conv1d(x, w, stride=1, pad=1)
                loss = ad.mean_over_axis(ad.elem_mul(y, y), axis=(0, 1, 2))
            tape.backward(loss)
            return loss.item(), w.grad.copy()

        l1, g1 = run()
        l2, g2 = run()
        assert l1 == l2
        assert np.array_equal(g1, g2)


class TestUpsampleRepeat:
    def test_repeat_arithmetic(self):
        x = Tensor(np.arange(6, dtype=np.float32).reshape(1, 3, 2))
        y = ad.upsample_repeat(x, 7)
        assert y.shape == (1, 7, 2)
        # ceil(7/3)=3 repeats then trim: frames 0,0,0,1,1,1,2
        expected = x.data[:, [0, 0, 0, 1, 1, 1, 2], :]
        assert np.array_equal(y.data, expected)

    def test_truncates_when_longer(self):
        x = Tensor(np.arange(10, dtype=np.float32).reshape(1, 5, 2))
        y = ad.upsample_repeat(x, 3)
        assert np.array_equal(y.data, x.data[:, :3, :])
