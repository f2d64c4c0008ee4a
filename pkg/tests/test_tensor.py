"""Autodiff core: forward values, backward vs finite differences, contracts."""

import numpy as np
import pytest

from advclr import tensor as T
from advclr.tensor import NumericError, ShapeError, Tape, constant


def leaf(arr, tape=None):
    tape = tape or Tape()
    return tape, tape.leaf(np.asarray(arr, dtype=np.float64), requires_grad=True)


class TestForward:
    def test_relu_values(self):
        out = T.relu(constant([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])

    def test_matmul_identity(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(3, 3))
        out = T.matmul(constant(np.eye(3)), constant(a))
        np.testing.assert_allclose(out.data, a, rtol=0, atol=0)

    def test_conv2d_all_ones(self):
        # 3x3 window of ones summed over one channel -> 9 everywhere
        x = constant(np.ones((1, 1, 4, 4)))
        w = constant(np.ones((1, 1, 3, 3)))
        out = T.conv2d(x, w, stride=1, pad=0)
        assert out.data.shape == (1, 1, 2, 2)
        np.testing.assert_allclose(out.data, 9.0)

    def test_conv2d_shape_error_names_op_and_dims(self):
        x = constant(np.ones((1, 4, 8, 8)))
        w = constant(np.ones((2, 3, 3, 3)))
        with pytest.raises(ShapeError, match=r"conv2d.*4 != .*3"):
            T.conv2d(x, w)

    def test_matmul_shape_error(self):
        with pytest.raises(ShapeError, match="matmul"):
            T.matmul(constant(np.ones((2, 3))), constant(np.ones((4, 2))))

    def test_add_shape_error(self):
        with pytest.raises(ShapeError, match="add"):
            T.add(constant(np.ones(2)), constant(np.ones(3)))

    def test_mixed_dtype_rejected(self):
        with pytest.raises(ShapeError, match="dtype"):
            T.add(constant(np.ones(2, dtype=np.float32)),
                  constant(np.ones(2, dtype=np.float64)))

    def test_constants_do_not_record(self):
        out = (constant([1.0, 2.0]) * 3.0).sum()
        assert out.tape is None and out.item() == 9.0

    def test_forward_determinism_bitwise(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(2, 3, 8, 8)).astype(np.float32)
        w = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
        a = T.conv2d(constant(x), constant(w), stride=2, pad=1).data
        b = T.conv2d(constant(x), constant(w), stride=2, pad=1).data
        assert np.array_equal(a, b)

    def test_l2_normalize_unit_rows(self):
        rng = np.random.default_rng(1)
        out = T.l2_normalize(constant(rng.normal(size=(5, 7))))
        np.testing.assert_allclose(np.linalg.norm(out.data, axis=1), 1.0, atol=1e-6)

    def test_l2_normalize_zero_row_error(self):
        with pytest.raises(ValueError, match="zero"):
            T.l2_normalize(constant(np.zeros((1, 4))))

    def test_max_pool2_odd_dims_error(self):
        with pytest.raises(ShapeError, match="max_pool2"):
            T.max_pool2(constant(np.ones((1, 1, 3, 4))))


class TestBackward:
    def test_square_derivative(self):
        tape, x = leaf([3.0])
        grads = tape.backward((x * x).sum())
        np.testing.assert_allclose(grads[x.handle], [6.0])

    def test_relu_subgradient(self):
        tape, x = leaf([2.0, -1.0])
        grads = tape.backward(T.relu(x).sum())
        np.testing.assert_array_equal(grads[x.handle], [1.0, 0.0])

    def test_non_scalar_loss_rejected(self):
        tape, x = leaf([1.0, 2.0])
        with pytest.raises(ShapeError, match="scalar"):
            tape.backward(x * 2.0)

    def test_unreachable_leaf_gets_zeros(self):
        tape = Tape()
        x = tape.leaf([1.0, 2.0], requires_grad=True)
        y = tape.leaf([3.0], requires_grad=True)
        grads = tape.backward((x * x).sum())
        np.testing.assert_array_equal(grads[y.handle], [0.0])

    def test_two_layer_net_grads_match_finite_differences(self):
        # independent oracle: central differences over all weights at once
        rng = np.random.default_rng(7)
        x = rng.normal(size=(4, 5))
        w1 = rng.normal(size=(5, 6))
        w2 = rng.normal(size=(6, 2))
        theta0 = np.concatenate([w1.reshape(-1), w2.reshape(-1)])

        def net(theta):
            a = T.reshape(T.slice_rows(theta, 0, 30), (5, 6))
            b = T.reshape(T.slice_rows(theta, 30, 42), (6, 2))
            h = T.relu(T.matmul(constant(x), a))
            return T.mul(T.matmul(h, b), T.matmul(h, b)).sum()

        assert T.grad_check(net, theta0) <= 1e-4

    def test_mixing_tapes_rejected(self):
        t1, x1 = leaf([1.0])
        t2, x2 = leaf([2.0])
        with pytest.raises(ValueError, match="tapes"):
            T.add(x1, x2)


class TestGradCheck:
    def test_sum_of_squares(self):
        err = T.grad_check(lambda t: (t * t).sum(), np.array([1.0, 2.0, 3.0]))
        assert err <= 1e-8

    def test_constant_function(self):
        err = T.grad_check(lambda t: (t * 0.0).sum(), np.array([1.0, -4.0]))
        assert err == 0.0

    def test_three_layer_conv_net(self):
        rng = np.random.default_rng(11)
        w1 = constant(rng.normal(size=(4, 3, 3, 3)) * 0.5)
        w2 = constant(rng.normal(size=(6, 4, 3, 3)) * 0.5)
        w3 = constant(rng.normal(size=(6, 2)) * 0.5)
        x0 = rng.uniform(0.2, 0.8, size=(2, 3, 8, 8))

        def net(t):
            h = T.relu(T.conv2d(t, w1, stride=2, pad=1))
            h = T.relu(T.conv2d(h, w2, stride=2, pad=1))
            h = T.global_avg_pool(h)
            return T.matmul(h, w3).sum()

        assert T.grad_check(net, x0) <= 1e-4

    def test_non_finite_value_rejected(self):
        bad = constant([np.inf])
        with pytest.raises(NumericError):
            T.grad_check(lambda t: (t * bad).sum(), np.array([1.0]))


def _away_from_kinks(rng, shape):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < 5e-3, np.sign(x) * 5e-3 + x, x)


# every recorded op's backward is checked against central differences
OP_CASES = [
    ("add", lambda t, c: T.add(t, c[0]), [(3, 4), (3, 4)]),
    ("add_scalar", lambda t, c: T.add(t, 1.5), [(3, 4)]),
    ("sub", lambda t, c: T.sub(c[0], t), [(2, 5), (2, 5)]),
    ("mul", lambda t, c: T.mul(t, c[0]), [(4, 3), (4, 3)]),
    ("mul_scalar", lambda t, c: T.mul(t, -2.5), [(4, 3)]),
    ("neg", lambda t, c: T.neg(t), [(6,)]),
    ("matmul", lambda t, c: T.matmul(t, c[0]), [(3, 4), (4, 2)]),
    ("transpose", lambda t, c: T.matmul(T.transpose(t), c[0]), [(3, 4), (3, 2)]),
    ("relu", lambda t, c: T.relu(t), [(4, 4)]),
    ("leaky_relu", lambda t, c: T.leaky_relu(t, 0.2), [(4, 4)]),
    ("rsqrt", lambda t, c: T.rsqrt(T.add(T.mul(t, t), 0.5)), [(3, 3)]),
    ("sum_all", lambda t, c: T.tsum(t), [(2, 3, 4)]),
    ("sum_axis", lambda t, c: T.tsum(t, axis=(0, 2)), [(2, 3, 4)]),
    ("mean_keepdims", lambda t, c: T.tmean(t, axis=1, keepdims=True), [(3, 5)]),
    ("concat", lambda t, c: T.concat([t, c[0]], axis=1), [(2, 3), (2, 2)]),
    ("reshape", lambda t, c: T.reshape(t, (6, 2)), [(3, 4)]),
    ("slice_rows", lambda t, c: T.slice_rows(t, 1, 3), [(4, 3)]),
    ("conv_s1p1", lambda t, c: T.conv2d(t, c[0], 1, 1), [(2, 3, 6, 6), (4, 3, 3, 3)]),
    ("conv_s2p0", lambda t, c: T.conv2d(t, c[0], 2, 0), [(2, 2, 7, 7), (3, 2, 3, 3)]),
    ("conv_weights", lambda t, c: T.conv2d(c[0], t, 2, 1), [(2, 2, 3, 3), (1, 2, 6, 6)]),
    ("max_pool2", lambda t, c: T.max_pool2(t), [(2, 3, 4, 4)]),
    ("global_avg_pool", lambda t, c: T.global_avg_pool(t), [(2, 3, 4, 4)]),
    ("batch_affine_4d", lambda t, c: T.batch_affine(t, c[0], c[1]),
     [(2, 3, 4, 4), (3,), (3,)]),
    ("batch_affine_scale", lambda t, c: T.batch_affine(c[0], t, c[1]),
     [(3,), (2, 3, 4, 4), (3,)]),
    ("batch_affine_2d", lambda t, c: T.batch_affine(t, c[0], c[1]),
     [(5, 4), (4,), (4,)]),
    ("bias_add", lambda t, c: T.bias_add(c[0], t), [(4,), (3, 4)]),
    ("log_softmax", lambda t, c: T.log_softmax(t), [(4, 6)]),
    ("l2_normalize", lambda t, c: T.l2_normalize(T.add(t, 2.0)), [(3, 5)]),
    ("rowmax", lambda t, c: T.rowmax(t), [(4, 6)]),
]


@pytest.mark.parametrize("name,build,shapes", OP_CASES, ids=[c[0] for c in OP_CASES])
@pytest.mark.parametrize("seed", [0, 1])
def test_op_backward_matches_finite_differences(name, build, shapes, seed):
    rng = np.random.default_rng(seed)
    point = _away_from_kinks(rng, shapes[0])
    if name in ("max_pool2", "rowmax"):
        # break ties so the argmax is stable under the probe step
        point += np.linspace(0.0, 0.37 * point.size, point.size).reshape(point.shape)
    consts = [constant(_away_from_kinks(rng, s)) for s in shapes[1:]]
    weight = constant(rng.normal(size=()))  # non-uniform upstream gradient

    def fn(t):
        out = build(t, consts)
        return T.mul(T.mul(out, out).sum(), weight)

    assert T.grad_check(fn, point) <= 1e-4, name
