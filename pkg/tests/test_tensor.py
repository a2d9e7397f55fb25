import numpy as np
import pytest

from nncompress import tensor as T
from nncompress.tensor import Tensor, ShapeError

from helpers import check_grad, numeric_grad


def test_add_elementwise():
    out = T.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0]))
    np.testing.assert_array_equal(out.data, [4.0, 6.0])


def test_add_shape_mismatch_named():
    with pytest.raises(ShapeError, match="add"):
        T.add(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))


def test_matmul_ones():
    out = T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))
    np.testing.assert_array_equal(out.data, np.full((2, 2), 3.0))


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError, match="matmul"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_conv2d_hand_oracle():
    # sliding a 2x2 all-ones kernel over a 3x3 all-ones image: every window sums to 4
    x = Tensor(np.ones((1, 1, 3, 3)))
    w = Tensor(np.ones((1, 1, 2, 2)))
    out = T.conv2d(x, w, stride=1, padding=0)
    assert out.shape == (1, 1, 2, 2)
    np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 4.0))


def test_conv2d_matches_explicit_loops():
    rng = np.random.default_rng(0)
    x = rng.uniform(-2, 2, (2, 3, 6, 5))
    w = rng.uniform(-2, 2, (4, 3, 3, 3))
    b = rng.uniform(-1, 1, 4)
    out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1).data

    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    oh = (xp.shape[2] - 3) // 2 + 1
    ow = (xp.shape[3] - 3) // 2 + 1
    ref = np.zeros((2, 4, oh, ow))
    for n in range(2):
        for o in range(4):
            for i in range(oh):
                for j in range(ow):
                    patch = xp[n, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3]
                    ref[n, o, i, j] = np.sum(patch * w[o]) + b[o]
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_conv2d_channel_mismatch():
    with pytest.raises(ShapeError, match="conv2d"):
        T.conv2d(Tensor(np.ones((1, 3, 4, 4))), Tensor(np.ones((2, 4, 3, 3))))


def test_backward_square_sum():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = T.tsum(T.mul(x, x))
    loss.backward()
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_backward_detached_loss_zero_grads():
    x = Tensor([1.0, 2.0], requires_grad=True)
    loss = T.tsum(T.mul(x, x)).detach()
    T.backward(loss)
    np.testing.assert_array_equal(x.grad, [0.0, 0.0])


def test_backward_rejects_nonscalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ShapeError, match="scalar"):
        T.backward(T.mul(x, x))


def test_grad_accumulates_across_calls():
    x = Tensor([1.0, 2.0], requires_grad=True)
    for _ in range(2):
        T.tsum(T.mul(x, x)).backward()
    np.testing.assert_array_equal(x.grad, [4.0, 8.0])
    x.zero_grad()
    np.testing.assert_array_equal(x.grad, [0.0, 0.0])


@pytest.mark.parametrize(
    "name,build",
    [
        ("add", lambda x: T.tsum(T.add(x, Tensor(np.full(x.shape, 0.3))))),
        ("sub", lambda x: T.tsum(T.sub(Tensor(np.full(x.shape, 0.3)), x))),
        ("mul", lambda x: T.tsum(T.mul(x, x))),
        ("div", lambda x: T.tsum(T.div(Tensor(np.full(x.shape, 1.7)), T.add(x, 3.0)))),
        ("exp", lambda x: T.tsum(T.texp(x))),
        ("log", lambda x: T.tsum(T.tlog(T.add(x, 3.0)))),
        ("sqrt", lambda x: T.tsum(T.tsqrt(T.add(x, 3.0)))),
        ("sigmoid", lambda x: T.tsum(T.sigmoid(x))),
        ("abs", lambda x: T.tsum(T.tabs(T.add(x, 0.05)))),
        ("relu", lambda x: T.tsum(T.relu(T.add(x, 0.05)))),
        ("mean", lambda x: T.tmean(T.mul(x, x))),
        ("reshape", lambda x: T.tsum(T.mul(T.reshape(x, (x.size,)), T.reshape(x, (x.size,))))),
        ("transpose", lambda x: T.tsum(T.mul(T.transpose(x), T.transpose(x)))),
        ("maximum", lambda x: T.tsum(T.maximum(x, Tensor(np.full(x.shape, 0.21))))),
        ("minimum", lambda x: T.tsum(T.minimum(x, Tensor(np.full(x.shape, 0.21))))),
    ],
)
def test_elementwise_grads_match_finite_differences(name, build):
    rng = np.random.default_rng(7)
    x0 = rng.uniform(-2, 2, (3, 4))
    check_grad(build, x0)


def test_matmul_grad_matches_fd():
    rng = np.random.default_rng(8)
    a0 = rng.uniform(-2, 2, (3, 4))
    b = Tensor(rng.uniform(-2, 2, (4, 2)))
    check_grad(lambda x: T.tsum(T.mul(T.matmul(x, b), T.matmul(x, b))), a0)


def test_broadcast_grad_matches_fd():
    rng = np.random.default_rng(9)
    x0 = rng.uniform(-2, 2, (1, 3, 1))
    check_grad(lambda x: T.tsum(T.mul(T.broadcast_to(x, (2, 3, 4)), Tensor(np.arange(24.0).reshape(2, 3, 4)))), x0)


def test_conv2d_grads_match_fd():
    rng = np.random.default_rng(10)
    x0 = rng.uniform(-2, 2, (2, 2, 5, 5))
    w0 = rng.uniform(-2, 2, (3, 2, 3, 3))
    b0 = rng.uniform(-1, 1, 3)
    w = Tensor(w0)
    b = Tensor(b0)
    check_grad(lambda x: T.tsum(T.mul(T.conv2d(x, w, b, stride=2, padding=1), T.conv2d(x, w, b, stride=2, padding=1))), x0)
    x = Tensor(x0)
    check_grad(lambda wt: T.tsum(T.mul(T.conv2d(x, wt, b, stride=2, padding=1), T.conv2d(x, wt, b, stride=2, padding=1))), w0)
    check_grad(lambda bt: T.tsum(T.mul(T.conv2d(x, w, bt, stride=2, padding=1), T.conv2d(x, w, bt, stride=2, padding=1))), b0)


def test_maxpool_grad_matches_fd():
    rng = np.random.default_rng(11)
    # distinct entries keep argmax stable under the FD perturbation
    x0 = rng.permutation(64).astype(np.float64).reshape(1, 1, 8, 8) / 8.0
    check_grad(lambda x: T.tsum(T.mul(T.maxpool2d(x, 2), T.maxpool2d(x, 2))), x0)


def test_linear_grads_match_fd():
    rng = np.random.default_rng(12)
    x0 = rng.uniform(-2, 2, (4, 3))
    w = Tensor(rng.uniform(-2, 2, (2, 3)))
    b = Tensor(rng.uniform(-1, 1, 2))
    check_grad(lambda x: T.tsum(T.mul(T.linear(x, w, b), T.linear(x, w, b))), x0)


def test_ste_indicator_forward_and_backward():
    x = Tensor([0.3, 0.7], requires_grad=True)
    out = T.ste_apply(x, lambda v: (v > 0.5).astype(float))
    np.testing.assert_array_equal(out.data, [0.0, 1.0])
    T.tsum(out).backward()
    np.testing.assert_array_equal(x.grad, [1.0, 1.0])


def test_ste_round_disagrees_with_finite_differences():
    # the STE is a surrogate: rounding has zero derivative almost everywhere,
    # so the straight-through gradient (all ones) must NOT match FD (all zeros)
    x0 = np.array([0.3, 1.2, -0.7])
    x = Tensor(x0, requires_grad=True)
    T.tsum(T.round_ste(x)).backward()
    np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])
    fd = numeric_grad(lambda a: float(np.sum(np.round(a))), x0.copy())
    assert np.max(np.abs(x.grad - fd)) > 0.9


def test_ste_identity_exact_for_any_map():
    rng = np.random.default_rng(13)
    x = Tensor(rng.uniform(-2, 2, (5, 5)), requires_grad=True)
    upstream = Tensor(rng.uniform(-2, 2, (5, 5)))
    out = T.ste_apply(x, np.sign)
    T.tsum(T.mul(out, upstream)).backward()
    np.testing.assert_array_equal(x.grad, upstream.data)


def test_round_ste_uses_bankers_rounding():
    x = Tensor([0.5, 1.5, 2.5, -0.5, -1.5])
    np.testing.assert_array_equal(T.round_ste(x).data, [0.0, 2.0, 2.0, -0.0, -2.0])


def test_tape_determinism_bit_identical():
    def run():
        rng = np.random.default_rng(42)
        x = Tensor(rng.uniform(-2, 2, (4, 4)), requires_grad=True)
        w = Tensor(rng.uniform(-2, 2, (4, 4)), requires_grad=True)
        y = T.relu(T.matmul(x, w))
        loss = T.tsum(T.mul(y, y))
        loss.backward()
        return x.grad.tobytes(), w.grad.tobytes()

    assert run() == run()


def test_double_backward_quadratic():
    # f = x1^2 * x2 -> d2f/dx1dx2 path exercised through grad-of-grad
    x = Tensor([2.0, 3.0], requires_grad=True)
    x1 = T.mul(x, Tensor([1.0, 0.0]))
    f = T.tsum(T.mul(T.mul(x, x), Tensor([3.0, 0.0]))) + T.tsum(T.mul(x, Tensor([0.0, 5.0])))
    (g,) = T.grad(f, [x], create_graph=True)
    np.testing.assert_allclose(g.data, [12.0, 5.0])
    v = Tensor([1.0, 1.0])
    (hv,) = T.grad(T.tsum(T.mul(g, v)), [x])
    np.testing.assert_allclose(hv.data, [6.0, 0.0])
    assert x1 is not None


def test_no_grad_blocks_taping():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with T.no_grad():
        y = T.mul(x, x)
    assert not y.requires_grad
    assert y._parents == ()


def test_grad_does_not_touch_buffers():
    x = Tensor([1.0, 2.0], requires_grad=True)
    (g,) = T.grad(T.tsum(T.mul(x, x)), [x])
    np.testing.assert_array_equal(g.data, [2.0, 4.0])
    assert x._grad is None
