"""Finite-difference oracles for the reverse-mode core.

Every supported op is checked against central differences with eps=1e-5
and required to stay under 1e-5 relative error, plus exact-value cases
for the stop-gradient min-max normalizer.
"""

import numpy as np
import pytest

from icforge import autodiff as ad
from icforge.errors import ContractError, DimensionError, NumericError

EPS = 1e-5
TOL = 1e-5


@pytest.fixture
def rng():
    return np.random.default_rng(7)


def leaf(rng, *shape):
    return ad.Tensor(rng.standard_normal(shape), requires_grad=True)


class TestOpGradients:
    def test_matmul(self, rng):
        a = leaf(rng, 3, 4)
        b = rng.standard_normal((4, 2))
        err = ad.grad_check(lambda t: ad.sum_all(ad.matmul(t, ad.Tensor(b))), a, EPS)
        assert err < TOL

    def test_add_same_shape(self, rng):
        a = leaf(rng, 3, 4)
        b = rng.standard_normal((3, 4))
        err = ad.grad_check(lambda t: ad.meansq(ad.add(t, ad.Tensor(b))), a, EPS)
        assert err < TOL

    def test_add_row_vector_over_matrix(self, rng):
        a = leaf(rng, 4)
        m = rng.standard_normal((3, 4))
        err = ad.grad_check(lambda t: ad.meansq(ad.add(ad.Tensor(m), t)), a, EPS)
        assert err < TOL

    def test_add_scalar(self, rng):
        a = leaf(rng, 1)
        m = rng.standard_normal((3, 4))
        err = ad.grad_check(lambda t: ad.meansq(ad.add(ad.Tensor(m), t)), a, EPS)
        assert err < TOL

    def test_sub(self, rng):
        a = leaf(rng, 3, 4)
        b = rng.standard_normal((3, 4))
        err = ad.grad_check(lambda t: ad.meansq(ad.sub(ad.Tensor(b), t)), a, EPS)
        assert err < TOL

    def test_mul_elementwise(self, rng):
        a = leaf(rng, 3, 4)
        b = rng.standard_normal((3, 4))
        err = ad.grad_check(lambda t: ad.meansq(ad.mul(t, ad.Tensor(b))), a, EPS)
        assert err < TOL

    def test_mul_row_vector(self, rng):
        a = leaf(rng, 4)
        m = rng.standard_normal((3, 4))
        err = ad.grad_check(lambda t: ad.meansq(ad.mul(ad.Tensor(m), t)), a, EPS)
        assert err < TOL

    def test_scale(self, rng):
        a = leaf(rng, 5)
        err = ad.grad_check(lambda t: ad.meansq(ad.scale(t, -2.5)), a, EPS)
        assert err < TOL

    def test_transpose_reshape(self, rng):
        a = leaf(rng, 3, 4)

        def fn(t):
            return ad.meansq(ad.reshape(ad.transpose(t), (2, 6)))

        assert ad.grad_check(fn, a, EPS) < TOL

    def test_concat_and_slice(self, rng):
        a = leaf(rng, 3, 4)
        b = rng.standard_normal((2, 4))

        def fn(t):
            joined = ad.concat([t, ad.Tensor(b)], axis=0)
            return ad.meansq(ad.slice_along(joined, 0, 1, 4))

        assert ad.grad_check(fn, a, EPS) < TOL

    def test_concat_axis1(self, rng):
        a = leaf(rng, 2, 3)
        b = rng.standard_normal((2, 2))

        def fn(t):
            joined = ad.concat([t, ad.Tensor(b)], axis=1)
            return ad.meansq(ad.slice_along(joined, 1, 2, 5))

        assert ad.grad_check(fn, a, EPS) < TOL

    def test_gather_rows(self, rng):
        table = leaf(rng, 6, 3)
        ids = [0, 2, 2, 5]
        err = ad.grad_check(lambda t: ad.meansq(ad.gather_rows(t, ids)), table, EPS)
        assert err < TOL

    def test_reductions(self, rng):
        a = leaf(rng, 3, 4)
        assert ad.grad_check(lambda t: ad.sum_all(t), a, EPS) < TOL
        assert ad.grad_check(lambda t: ad.mean_all(t), a, EPS) < TOL
        assert ad.grad_check(lambda t: ad.meansq(t), a, EPS) < TOL

    def test_softmax_rows(self, rng):
        a = leaf(rng, 3, 5)
        w = rng.standard_normal((3, 5))

        def fn(t):
            return ad.sum_all(ad.mul(ad.softmax_rows(t), ad.Tensor(w)))

        assert ad.grad_check(fn, a, EPS) < TOL

    def test_softmax_masked(self, rng):
        a = leaf(rng, 3, 5)
        allowed = np.array([True, False, True, True, False])
        w = rng.standard_normal((3, 5))

        def fn(t):
            return ad.sum_all(ad.mul(ad.softmax_rows(t, allowed), ad.Tensor(w)))

        assert ad.grad_check(fn, a, EPS) < TOL

    def test_gelu(self, rng):
        a = leaf(rng, 4, 4)
        assert ad.grad_check(lambda t: ad.meansq(ad.gelu(t)), a, EPS) < TOL

    def test_layer_norm_inputs(self, rng):
        x = leaf(rng, 3, 6)
        gamma = ad.Tensor(rng.standard_normal(6))
        beta = ad.Tensor(rng.standard_normal(6))

        def fn(t):
            return ad.meansq(ad.layer_norm(t, gamma, beta))

        assert ad.grad_check(fn, x, EPS) < TOL

    def test_layer_norm_affine(self, rng):
        x = ad.Tensor(rng.standard_normal((3, 6)))
        gamma = leaf(rng, 6)
        beta_arr = rng.standard_normal(6)

        def fn(t):
            return ad.meansq(ad.layer_norm(x, t, ad.Tensor(beta_arr)))

        assert ad.grad_check(fn, gamma, EPS) < TOL

    def test_linear(self, rng):
        w = leaf(rng, 4, 3)
        x = rng.standard_normal((5, 4))
        b = rng.standard_normal(3)

        def fn(t):
            return ad.meansq(ad.linear(ad.Tensor(x), t, ad.Tensor(b)))

        assert ad.grad_check(fn, w, EPS) < TOL

    def test_minmax_excluding_extremes(self, rng):
        a = leaf(rng, 3, 4)
        flat = a.data.reshape(-1)
        skip = {int(flat.argmin()), int(flat.argmax())}
        w = rng.standard_normal((3, 4))

        def fn(t):
            return ad.sum_all(ad.mul(ad.minmax_normalize(t), ad.Tensor(w)))

        assert ad.grad_check(fn, a, EPS, exclude=skip) < TOL

    def test_composed_graph_of_all_ops(self, rng):
        a = leaf(rng, 4, 6)
        w1 = rng.standard_normal((6, 6))
        b1 = rng.standard_normal(6)
        gamma = rng.standard_normal(6)
        beta = rng.standard_normal(6)
        extra = rng.standard_normal((2, 6))

        def pre_norm(t):
            h = ad.linear(t, ad.Tensor(w1), ad.Tensor(b1))
            h = ad.gelu(h)
            h = ad.layer_norm(h, ad.Tensor(gamma), ad.Tensor(beta))
            h = ad.concat([h, ad.Tensor(extra)], axis=0)
            h = ad.slice_along(h, 0, 0, 5)
            att = ad.softmax_rows(ad.matmul(h, ad.transpose(h)))
            return ad.matmul(att, h)

        # freeze the normalizer bounds at the base point so the FD sweep
        # agrees with the stop-gradient min and max
        probe = pre_norm(a)
        frozen = (float(probe.data.min()), float(probe.data.max()))

        def fn(t):
            normed = ad.minmax_normalize(pre_norm(t), bounds=frozen)
            back = ad.reshape(normed, (30,))
            return ad.meansq(ad.sub(ad.scale(back, 1.5), ad.Tensor(np.ones(30))))

        assert ad.grad_check(fn, a, EPS) < TOL


class TestMinMaxValues:
    def test_simple_ramp(self):
        out = ad.minmax_normalize(ad.Tensor([2.0, 4.0, 6.0]))
        assert np.array_equal(out.data, np.array([0.0, 0.5, 1.0]))

    def test_negative_floor(self):
        out = ad.minmax_normalize(ad.Tensor([-1.0, 0.0, 3.0]))
        assert np.array_equal(out.data, np.array([0.0, 0.25, 1.0]))

    def test_constant_input_is_zeros_with_zero_grad(self):
        x = ad.Tensor(np.full((2, 3), 5.0), requires_grad=True)
        with ad.Tape() as tape:
            out = ad.sum_all(ad.minmax_normalize(x))
        assert np.array_equal(out.data, np.array(0.0))
        ad.backward(tape, out)
        assert np.array_equal(x.grad, np.zeros((2, 3)))

    def test_shift_invariance(self, rng):
        x = rng.standard_normal((4, 4))
        a = ad.minmax_normalize(ad.Tensor(x)).data
        b = ad.minmax_normalize(ad.Tensor(x + 123.456)).data
        assert np.abs(a - b).max() < 1e-9

    def test_output_range(self, rng):
        for _ in range(20):
            x = rng.standard_normal((5, 7)) * rng.uniform(0.1, 100)
            out = ad.minmax_normalize(ad.Tensor(x)).data
            assert out.min() >= 0.0 and out.max() <= 1.0


class TestTapeMechanics:
    def test_backward_accumulates(self, rng):
        x = leaf(rng, 3)
        with ad.Tape() as tape:
            y = ad.meansq(x)
        ad.backward(tape, y)
        first = x.grad.copy()
        ad.backward(tape, y)
        assert np.allclose(x.grad, 2.0 * first)

    def test_non_scalar_root_rejected(self, rng):
        x = leaf(rng, 3)
        with ad.Tape() as tape:
            y = ad.scale(x, 2.0)
        with pytest.raises(ContractError):
            ad.backward(tape, y)

    def test_no_tape_records_nothing(self, rng):
        x = leaf(rng, 3)
        y = ad.meansq(x)
        assert y.requires_grad
        tape = ad.Tape()
        assert tape.nodes == []

    def test_rejected_broadcast(self, rng):
        a = ad.Tensor(rng.standard_normal((3, 4)))
        b = ad.Tensor(rng.standard_normal((4, 3)))
        with pytest.raises(DimensionError):
            ad.add(a, b)
        with pytest.raises(DimensionError):
            ad.mul(a, ad.Tensor(rng.standard_normal(3)))

    def test_matmul_shape_errors(self, rng):
        a = ad.Tensor(rng.standard_normal((3, 4)))
        with pytest.raises(DimensionError):
            ad.matmul(a, ad.Tensor(rng.standard_normal((3, 4))))
        with pytest.raises(DimensionError):
            ad.matmul(a, ad.Tensor(rng.standard_normal(4)))

    def test_grad_check_flags_non_finite(self):
        x = ad.Tensor([1.0], requires_grad=True)

        def fn(t):
            return ad.Tensor(np.array(np.inf))

        with pytest.raises(NumericError):
            ad.grad_check(fn, x, EPS)

    def test_gradients_bit_identical_across_reruns(self, rng):
        x_data = rng.standard_normal((4, 4))
        grads = []
        for _ in range(2):
            x = ad.Tensor(x_data, requires_grad=True)
            with ad.Tape() as tape:
                y = ad.meansq(ad.gelu(ad.matmul(x, ad.transpose(x))))
            ad.backward(tape, y)
            grads.append(x.grad.copy())
        assert np.array_equal(grads[0], grads[1])
