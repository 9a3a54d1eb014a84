import numpy as np
import pytest

import bridgemri.tensor as T
from bridgemri.errors import NumericsError, ShapeError
from bridgemri.rng import RngState
from bridgemri.tensor import Tensor, backward, gradient_check

TOL = 1e-4


def randn(rng, *shape):
    return rng.standard_normal(shape)


def fd_loss(out: Tensor, weights: Tensor) -> Tensor:
    """Scalar objective that is nonlinear in every output element."""
    return T.mean_reduce(T.square(T.multiply(out, weights)))


def const(rng, shape):
    return Tensor(rng.standard_normal(shape), dtype=np.float64)


# Each case returns (f, params) with f rebuilding the graph from params,
# so the finite-difference probe in gradient_check sees fresh forwards.
def case_add(rng):
    x = Tensor(randn(rng, 2, 3), requires_grad=True)
    y = Tensor(randn(rng, 3), requires_grad=True)
    c = const(rng, (2, 3))
    return lambda p: fd_loss(T.add(p[0], p[1]), c), [x, y]


def case_subtract(rng):
    x = Tensor(randn(rng, 2, 3), requires_grad=True)
    y = Tensor(randn(rng, 2, 1), requires_grad=True)
    c = const(rng, (2, 3))
    return lambda p: fd_loss(T.subtract(p[0], p[1]), c), [x, y]


def case_multiply(rng):
    x = Tensor(randn(rng, 2, 3), requires_grad=True)
    y = Tensor(randn(rng, 3), requires_grad=True)
    c = const(rng, (2, 3))
    return lambda p: fd_loss(T.multiply(p[0], p[1]), c), [x, y]


def case_scale(rng):
    x = Tensor(randn(rng, 2, 3), requires_grad=True)
    c = const(rng, (2, 3))
    return lambda p: fd_loss(T.scale(p[0], -1.7), c), [x]


def case_shift(rng):
    x = Tensor(randn(rng, 2, 3), requires_grad=True)
    c = const(rng, (2, 3))
    return lambda p: fd_loss(T.shift(p[0], 0.9), c), [x]


def case_matmul(rng):
    a = Tensor(randn(rng, 3, 4), requires_grad=True)
    b = Tensor(randn(rng, 4, 2), requires_grad=True)
    c = const(rng, (3, 2))
    return lambda p: fd_loss(T.matmul(p[0], p[1]), c), [a, b]


def case_reshape(rng):
    x = Tensor(randn(rng, 2, 6), requires_grad=True)
    c = const(rng, (3, 4))
    return lambda p: fd_loss(T.reshape(p[0], (3, 4)), c), [x]


def case_conv2d(rng):
    x = Tensor(randn(rng, 2, 2, 4, 4), requires_grad=True)
    w = Tensor(randn(rng, 3, 2, 3, 3), requires_grad=True)
    c = const(rng, (2, 3, 4, 4))
    return lambda p: fd_loss(T.conv2d(p[0], p[1]), c), [x, w]


def case_avg_pool2(rng):
    x = Tensor(randn(rng, 1, 2, 4, 4), requires_grad=True)
    c = const(rng, (1, 2, 2, 2))
    return lambda p: fd_loss(T.avg_pool2(p[0]), c), [x]


def case_upsample_nearest2(rng):
    x = Tensor(randn(rng, 1, 2, 3, 3), requires_grad=True)
    c = const(rng, (1, 2, 6, 6))
    return lambda p: fd_loss(T.upsample_nearest2(p[0]), c), [x]


def case_concat_channels(rng):
    x = Tensor(randn(rng, 1, 2, 3, 3), requires_grad=True)
    y = Tensor(randn(rng, 1, 1, 3, 3), requires_grad=True)
    c = const(rng, (1, 3, 3, 3))
    return lambda p: fd_loss(T.concat_channels([p[0], p[1]]), c), [x, y]


def case_silu(rng):
    x = Tensor(randn(rng, 2, 3), requires_grad=True)
    c = const(rng, (2, 3))
    return lambda p: fd_loss(T.silu(p[0]), c), [x]


def case_group_norm(rng):
    x = Tensor(randn(rng, 2, 4, 3, 3), requires_grad=True)
    gamma = Tensor(1.0 + 0.2 * randn(rng, 4, 1, 1), requires_grad=True)
    beta = Tensor(0.1 * randn(rng, 4, 1, 1), requires_grad=True)
    c = const(rng, (2, 4, 3, 3))
    return lambda p: fd_loss(T.group_norm(p[0], p[1], p[2], groups=4), c), [x, gamma, beta]


def case_mean_reduce(rng):
    x = Tensor(randn(rng, 3, 4), requires_grad=True)
    c = const(rng, (3, 4))
    return lambda p: T.square(T.mean_reduce(T.multiply(p[0], c))), [x]


def case_absolute(rng):
    # keep entries away from the |.| kink so central differences are valid
    raw = randn(rng, 2, 3)
    x = Tensor(np.sign(raw) * (np.abs(raw) + 0.3), requires_grad=True)
    c = const(rng, (2, 3))
    return lambda p: fd_loss(T.absolute(p[0]), c), [x]


def case_square(rng):
    x = Tensor(randn(rng, 2, 3), requires_grad=True)
    c = const(rng, (2, 3))
    return lambda p: fd_loss(T.square(p[0]), c), [x]


CASES = {
    "add": case_add,
    "subtract": case_subtract,
    "multiply": case_multiply,
    "scale": case_scale,
    "shift": case_shift,
    "matmul": case_matmul,
    "reshape": case_reshape,
    "conv2d": case_conv2d,
    "avg_pool2": case_avg_pool2,
    "upsample_nearest2": case_upsample_nearest2,
    "concat_channels": case_concat_channels,
    "silu": case_silu,
    "group_norm": case_group_norm,
    "mean_reduce": case_mean_reduce,
    "absolute": case_absolute,
    "square": case_square,
}


class TestPrimitiveGradients:
    def test_every_registered_primitive_has_a_case(self):
        assert set(CASES) == set(T.PRIMITIVES)

    @pytest.mark.parametrize("name", sorted(CASES))
    def test_gradient_matches_finite_differences(self, name):
        f, params = CASES[name](np.random.default_rng(1234))
        assert all(p.dtype == np.float64 for p in params)
        assert gradient_check(f, params, eps=1e-5) <= TOL


class TestForwardExamples:
    def test_add_vectors(self):
        out = T.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0]))
        assert np.allclose(out.data, [4.0, 6.0])

    def test_mean_reduce_example(self):
        out = T.mean_reduce(Tensor([2.0, 4.0, 6.0]))
        assert out.shape == ()
        assert out.item() == pytest.approx(4.0)

    def test_conv2d_identity_kernel_preserves_image(self):
        rng = np.random.default_rng(0)
        img = Tensor(rng.standard_normal((1, 1, 6, 6)), dtype=np.float64)
        k = np.zeros((1, 1, 3, 3))
        k[0, 0, 1, 1] = 1.0
        out = T.conv2d(img, Tensor(k, dtype=np.float64))
        assert np.allclose(out.data, img.data, atol=1e-12)

    def test_conv2d_matches_direct_summation(self):
        # brute-force zero-padded cross-correlation as an independent oracle
        rng = np.random.default_rng(5)
        x = rng.standard_normal((2, 3, 5, 4))
        w = rng.standard_normal((4, 3, 3, 3))
        out = T.conv2d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64)).data
        ref = np.zeros((2, 4, 5, 4))
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        for b in range(2):
            for o in range(4):
                for i in range(5):
                    for j in range(4):
                        ref[b, o, i, j] = np.sum(xp[b, :, i:i + 3, j:j + 3] * w[o])
        assert np.allclose(out, ref, atol=1e-10)

    def test_avg_pool2_values(self):
        x = Tensor(np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4))
        out = T.avg_pool2(x)
        assert np.allclose(out.data, [[[[2.5, 4.5], [10.5, 12.5]]]])

    def test_upsample_then_pool_is_identity(self):
        rng = np.random.default_rng(2)
        x = Tensor(rng.standard_normal((1, 3, 4, 4)), dtype=np.float64)
        assert np.allclose(T.avg_pool2(T.upsample_nearest2(x)).data, x.data)

    def test_group_norm_zero_mean_unit_var(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.standard_normal((2, 8, 4, 4)), dtype=np.float64)
        ones = Tensor(np.ones((8, 1, 1)), dtype=np.float64)
        zeros = Tensor(np.zeros((8, 1, 1)), dtype=np.float64)
        out = T.group_norm(x, ones, zeros, groups=4).data
        grouped = out.reshape(2, 4, -1)
        assert np.allclose(grouped.mean(axis=-1), 0.0, atol=1e-10)
        assert np.allclose(grouped.var(axis=-1), 1.0, atol=1e-4)

    def test_silu_at_zero_and_large(self):
        out = T.silu(Tensor(np.array([0.0, 100.0]), dtype=np.float64))
        assert out.data[0] == pytest.approx(0.0)
        assert out.data[1] == pytest.approx(100.0)

    def test_clamp01_forward(self):
        out = T.clamp01_ste(Tensor(np.array([-0.5, 0.25, 1.3]), dtype=np.float64))
        assert np.allclose(out.data, [0.0, 0.25, 1.0])

    def test_dispatch_by_name(self):
        out = T.forward_primitive("add", [Tensor([1.0]), Tensor([2.0])])
        assert np.allclose(out.data, [3.0])
        with pytest.raises(KeyError):
            T.forward_primitive("fused_everything", [])


class TestBackwardSemantics:
    def test_sum_of_squares_gradient(self):
        x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
        loss = T.scale(T.mean_reduce(T.square(x)), 3.0)
        grads = backward(loss)
        assert np.allclose(grads[x].data, [2.0, 4.0, 6.0])

    def test_sum_gradient_is_ones(self):
        x = Tensor(np.arange(6, dtype=np.float64).reshape(2, 3), requires_grad=True)
        loss = T.scale(T.mean_reduce(x), 6.0)
        backward(loss)
        assert np.allclose(x.grad, np.ones((2, 3)))

    def test_diamond_reuse_accumulates(self):
        x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
        a = T.scale(x, 2.0)
        b = T.scale(x, 3.0)
        loss = T.scale(T.mean_reduce(T.multiply(a, b)), 2.0)  # sum of 6 x^2
        grads = backward(loss)
        assert np.allclose(grads[x].data, 12.0 * x.data)

    def test_unreachable_leaf_gets_zero(self):
        x = Tensor(np.array([1.0]), requires_grad=True)
        orphan = Tensor(np.array([5.0, 5.0]), requires_grad=True)
        loss = T.mean_reduce(T.square(x))
        grads = backward(loss, leaves=[x, orphan])
        assert np.allclose(grads[orphan].data, [0.0, 0.0])
        assert orphan.grad.shape == (2,)

    def test_constant_inputs_not_tracked(self):
        x = Tensor(np.array([1.0, 2.0]))
        out = T.square(x)
        assert not out.requires_grad
        assert out._parents == ()

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        with pytest.raises(ShapeError):
            backward(T.square(x))

    def test_backward_linearity(self):
        rng = np.random.default_rng(8)
        xd = rng.standard_normal(5)
        x = Tensor(xd, requires_grad=True)
        l1 = T.mean_reduce(T.square(x))
        l2 = T.mean_reduce(T.silu(x))
        combined = T.add(T.scale(l1, 2.0), T.scale(l2, -3.0))
        g_combined = backward(combined)[x].data.copy()

        x1 = Tensor(xd, requires_grad=True)
        g1 = backward(T.mean_reduce(T.square(x1)))[x1].data
        x2 = Tensor(xd, requires_grad=True)
        g2 = backward(T.mean_reduce(T.silu(x2)))[x2].data
        assert np.allclose(g_combined, 2.0 * g1 - 3.0 * g2, atol=1e-12)

    def test_clamp_straight_through_gradient(self):
        x = Tensor(np.array([-0.5, 0.5, 1.5]), requires_grad=True)
        loss = T.mean_reduce(T.clamp01_ste(x))
        backward(loss)
        assert np.allclose(x.grad, np.full(3, 1.0 / 3.0))

    def test_broadcast_gradient_reduces_to_leaf_shape(self):
        x = Tensor(np.ones((2, 3)), requires_grad=True)
        bias = Tensor(np.zeros(3), requires_grad=True)
        loss = T.mean_reduce(T.add(x, bias))
        grads = backward(loss)
        assert grads[bias].shape == (3,)
        assert np.allclose(grads[bias].data, np.full(3, 2.0 / 6.0))

    def test_backward_does_not_mutate_forward_data(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        y = T.square(x)
        before = y.data.copy()
        backward(T.mean_reduce(y))
        assert np.array_equal(y.data, before)


class TestGradientCheckContract:
    def test_exact_quadratic_tiny_error(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True, dtype=np.float64)
        err = gradient_check(lambda p: T.scale(T.mean_reduce(T.square(p[0])), 2.0), [x])
        assert err <= 1e-8

    def test_constant_objective_tiny_error(self):
        x = Tensor(np.array([1.0, 2.0]), requires_grad=True, dtype=np.float64)
        c = Tensor(np.array(3.0), dtype=np.float64)
        err = gradient_check(lambda p: T.add(T.scale(T.mean_reduce(p[0]), 0.0), c), [x])
        assert err <= 1e-8

    def test_non_finite_objective_rejected(self):
        x = Tensor(np.array([1000.0]), requires_grad=True, dtype=np.float64)
        with pytest.raises(NumericsError):
            gradient_check(lambda p: T.mean_reduce(
                T.multiply(p[0], Tensor(np.array([np.inf]), dtype=np.float64))), [x])


class TestValidation:
    def test_matmul_inner_dim_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError) as e:
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
        assert "(2, 3)" in str(e.value) and "(4, 2)" in str(e.value)

    def test_conv_even_kernel_rejected(self):
        with pytest.raises(ShapeError):
            T.conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 2, 2))))

    def test_conv_channel_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            T.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))

    def test_pool_odd_extent_rejected(self):
        with pytest.raises(ShapeError):
            T.avg_pool2(Tensor(np.ones((1, 1, 3, 4))))

    def test_group_norm_indivisible_channels_rejected(self):
        with pytest.raises(ShapeError):
            T.group_norm(Tensor(np.ones((1, 6, 2, 2))),
                         Tensor(np.ones((6, 1, 1))), Tensor(np.zeros((6, 1, 1))), groups=4)

    def test_mixed_dtypes_rejected(self):
        with pytest.raises(ShapeError):
            T.add(Tensor(np.ones(2), dtype=np.float32), Tensor(np.ones(2), dtype=np.float64))

    def test_broadcast_mismatch_names_both_shapes(self):
        with pytest.raises(ShapeError) as e:
            T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))
        assert "(2, 3)" in str(e.value) and "(4,)" in str(e.value)


class TestSeededNormalTensor:
    def test_returns_tensor_and_advances_counter(self):
        state = RngState(seed=21)
        out = T.seeded_standard_normal(state, (3, 3))
        assert isinstance(out, Tensor)
        assert out.shape == (3, 3)
        assert state.counter == 1

    def test_moments_at_1e5(self):
        out = T.seeded_standard_normal(RngState(seed=77), (100000,))
        assert -0.02 <= float(out.data.mean()) <= 0.02
        assert 0.97 <= float(out.data.var()) <= 1.03
