import numpy as np
import pytest

from scatterflow import grad as gd
from scatterflow.grad import Tensor

TRIALS = 10


def numeric_grad(fn, args, h=1e-6):
    """Central differences of the scalar sum(fn(*args) * probe) w.r.t. every argument."""
    out = []
    for i, a in enumerate(args):
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            plus = [x.copy() for x in args]
            minus = [x.copy() for x in args]
            plus[i][idx] += h
            minus[i][idx] -= h
            g[idx] = (fn(*plus) - fn(*minus)) / (2 * h)
        out.append(g)
    return out


def check(op, *shapes, rng, make=None, tol=1e-6):
    """Compare taped gradients of sum(op(...) * probe) with finite differences."""
    for _ in range(TRIALS):
        args = [make(rng, s) if make else rng.normal(size=s) for s in shapes]
        probe = rng.normal(size=np.shape(op(*[Tensor(a) for a in args]).data))

        def scalar(*arrs):
            return float(np.sum(op(*[Tensor(a) for a in arrs]).data * probe))

        def taped(*ts):
            return gd.sum(gd.mul(op(*ts), Tensor(probe)))

        _, grads = gd.value_and_grad(taped, *args)
        for g, fd in zip(grads, numeric_grad(scalar, args)):
            scale = max(np.max(np.abs(fd)), 1e-12)
            assert np.max(np.abs(g - fd)) <= tol * scale


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def positive(rng, shape):
    return rng.uniform(0.5, 2.0, size=shape)


def well_conditioned(rng, shape):
    return np.eye(shape[0]) * 3 + rng.normal(size=shape) if shape[0] == shape[1] else rng.normal(size=shape)


@pytest.mark.parametrize("op", [gd.add, gd.sub, gd.mul])
def test_binary_elementwise(op, rng):
    check(op, (4, 4), (4, 4), rng=rng)
    check(op, (4, 4), (4,), rng=rng)  # broadcasting


def test_div(rng):
    check(gd.div, (4, 4), (4, 4), rng=rng, make=positive)


@pytest.mark.parametrize("op", [gd.neg, gd.square, gd.exp, gd.tanh])
def test_unary(op, rng):
    check(op, (4, 4), rng=rng)


def test_log(rng):
    check(gd.log, (4, 4), rng=rng, make=positive)


def test_leaky_relu_and_relu(rng):
    # keep inputs away from the kink
    def away(rng, s):
        x = rng.normal(size=s)
        return np.where(np.abs(x) < 0.05, 0.5, x)

    check(lambda a: gd.leaky_relu(a, 0.2), (4, 4), rng=rng, make=away)
    check(gd.relu, (4, 4), rng=rng, make=away)


def test_scale_shift(rng):
    check(lambda a: gd.scale_shift(a, 1.7, -0.3), (4, 4), rng=rng)


def test_channel_affine(rng):
    check(gd.channel_affine, (2, 3, 4, 4), (3,), (3,), rng=rng)


@pytest.mark.parametrize("axis, keep", [(None, False), (0, False), (1, True)])
def test_reductions(axis, keep, rng):
    check(lambda a: gd.sum(a, axis=axis, keepdims=keep), (4, 4), rng=rng)
    check(lambda a: gd.mean(a, axis=axis, keepdims=keep), (4, 4), rng=rng)


def test_shape_ops(rng):
    check(lambda a: gd.reshape(a, (2, 8)), (4, 4), rng=rng)
    check(lambda a: gd.transpose(a, (1, 0, 2)), (2, 4, 4), rng=rng)
    check(lambda a: a[:, 1:3], (4, 4), rng=rng)
    check(lambda a: gd.getitem(a, np.array([0, 2, 2])), (4, 4), rng=rng)  # repeated fancy index
    check(lambda a, b: gd.concat([a, b], axis=1), (4, 2), (4, 3), rng=rng)


def test_matmul_family(rng):
    check(gd.matmul, (4, 4), (4, 3), rng=rng)
    check(gd.channel_matmul, (2, 3, 4, 4), (5, 3), rng=rng)


def test_matrix_functions(rng):
    check(gd.inv, (4, 4), rng=rng, make=well_conditioned)
    check(gd.logabsdet, (4, 4), rng=rng, make=well_conditioned)
    check(gd.pinv, (4, 2), rng=rng)
    check(gd.half_logdet_gram, (4, 2), rng=rng)


def test_conv2d(rng):
    check(lambda a, w, b: gd.conv2d(a, w, b), (2, 2, 4, 4), (3, 2, 3, 3), (3,), rng=rng)
    check(lambda a, w: gd.conv2d(a, w), (1, 3, 4, 4), (2, 3, 3, 3), rng=rng)


def test_conv2d_matches_direct_correlation(rng):
    x = rng.normal(size=(1, 1, 5, 5))
    w = rng.normal(size=(1, 1, 3, 3))
    out = gd.conv2d(Tensor(x), Tensor(w)).data[0, 0]
    pad = np.pad(x[0, 0], 1)
    ref = np.array([[np.sum(pad[i:i + 3, j:j + 3] * w[0, 0]) for j in range(5)] for i in range(5)])
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_user_primitive(rng):
    cube = gd.primitive("cube", lambda x: (x**3, lambda g: (3 * g * x**2,)))
    check(cube, (4, 4), rng=rng)


def test_composite_expression(rng):
    def f(a, b):
        return gd.tanh(gd.add(gd.matmul(a, b), gd.exp(gd.scale_shift(a, 0.1))[:, :3]))

    check(f, (4, 4), (4, 3), rng=rng)


def test_backward_requires_scalar_root():
    x = Tensor(np.ones(3), requires_grad=True)
    with gd.Tape() as tape:
        y = gd.square(x)
    with pytest.raises(ValueError, match="scalar"):
        gd.backward(tape, y)


def test_unreached_leaf_gets_zero_gradient():
    a = Tensor(np.ones(3), requires_grad=True)
    b = Tensor(np.ones(2), requires_grad=True)
    with gd.Tape() as tape:
        y = gd.sum(gd.square(a))
    ga, gb = gd.backward(tape, y, [a, b])
    np.testing.assert_array_equal(ga, 2 * np.ones(3))
    np.testing.assert_array_equal(gb, np.zeros(2))


def test_gradients_accumulate_on_leaves():
    a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    for _ in range(2):
        with gd.Tape() as tape:
            y = gd.sum(gd.mul(a, a))
        gd.backward(tape, y)
    np.testing.assert_array_equal(a.grad, 2 * 2 * a.data)


def test_no_grad_records_nothing():
    a = Tensor(np.ones(2), requires_grad=True)
    with gd.Tape() as tape:
        with gd.no_grad():
            gd.square(a)
    assert tape.nodes == []


def test_shared_subexpression_sums_paths():
    a = Tensor(np.array(3.0), requires_grad=True)
    with gd.Tape() as tape:
        b = gd.square(a)
        y = gd.add(b, b)
    (g,) = gd.backward(tape, y, [a])
    assert g == pytest.approx(12.0)


def test_broadcast_mismatch_is_reported():
    with pytest.raises(ValueError, match="incompatible"):
        gd.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))


def test_adam_step_matches_reference():
    p, g = np.array([1.0, -2.0]), np.array([0.5, -0.1])
    (new,), state = gd.adam_step([p], [g], None, lr=0.1)
    # first bias-corrected step moves every coordinate by lr * sign(g)
    np.testing.assert_allclose(new, p - 0.1 * np.sign(g), rtol=1e-6)
    assert state["step"] == 1


def test_adam_minimizes_a_quadratic():
    x = Tensor(np.array([3.0, -4.0]), requires_grad=True)
    opt = gd.Adam([x], lr=0.1)
    for _ in range(500):
        with gd.Tape() as tape:
            loss = gd.sum(gd.square(x))
        opt.step(gd.backward(tape, loss, [x]))
    assert np.max(np.abs(x.data)) < 1e-3
