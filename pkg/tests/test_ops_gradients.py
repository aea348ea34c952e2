import numpy as np
import numpy.testing as npt
import pytest

from gatedfusion.autodiff import (
    ShapeError,
    Tape,
    Tensor,
    add,
    concatenate,
    conv1d,
    exp,
    forward,
    matmul,
    maxpool1d,
    mean_reduce,
    multiply,
    narrow,
    negate,
    relu,
    reshape,
    sigmoid,
    softmax,
    softmax_cross_entropy,
    square,
    sum_reduce,
)
from conftest import check_gradient

LN2 = 0.6931471805599453


def test_matmul_identity():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((3, 3))
    npt.assert_array_equal(matmul(np.eye(3), a).data, a)


def test_sigmoid_and_softmax_symmetry():
    npt.assert_allclose(sigmoid(np.array(0.0)).data, 0.5)
    npt.assert_allclose(softmax(np.full(4, 2.7)).data, np.full(4, 0.25))


def test_softmax_rows_sum_to_one_for_extreme_inputs(rng):
    for _ in range(100):
        x = rng.standard_normal((3, 6)) * rng.choice([1e-3, 1.0, 3.0])
        s = softmax(x, axis=1).data
        assert np.all(s > 0) and np.all(s < 1)
        npt.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)
    # Once logit gaps exceed float64's exp range the loser saturates to 0
    # and the winner to 1, but the result stays finite and normalized.
    s = softmax(np.array([[0.0, -900.0, 900.0]]), axis=1).data
    assert np.isfinite(s).all()
    npt.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)


def test_conv1d_identity_kernel(rng):
    x = rng.standard_normal((2, 1, 9))
    kernel = np.ones((1, 1, 1))
    npt.assert_array_equal(conv1d(x, kernel).data, x)


def test_conv1d_matches_direct_summation(rng):
    # Cross-correlation oracle written out loop by loop.
    B, C_in, L, C_out, K, stride, groups = 2, 4, 11, 6, 3, 2, 2
    x = rng.standard_normal((B, C_in, L))
    w = rng.standard_normal((C_out, C_in // groups, K))
    got = conv1d(x, w, stride=stride, groups=groups).data
    L_out = (L - K) // stride + 1
    want = np.zeros((B, C_out, L_out))
    cg, og = C_in // groups, C_out // groups
    for b in range(B):
        for o in range(C_out):
            g = o // og
            for l in range(L_out):
                for c in range(cg):
                    for k in range(K):
                        want[b, o, l] += x[b, g * cg + c, l * stride + k] * w[o, c, k]
    npt.assert_allclose(got, want, atol=1e-12)


def test_maxpool_first_index_tie_break():
    x = np.array([[[1.0, 1.0, 0.5, 2.0, 2.0, 2.0]]])
    with Tape() as tape:
        xt = tape.watch(x)
        pooled = maxpool1d(xt, width=3, stride=3)
        loss = sum_reduce(pooled)
        grads = tape.gradients(loss)
    npt.assert_array_equal(pooled.data, [[[1.0, 2.0]]])
    npt.assert_array_equal(grads[xt.node], [[[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]]])


def test_maxpool_overlapping_windows_gradient():
    x = np.array([[[0.0, 3.0, 1.0, 2.0]]])
    with Tape() as tape:
        xt = tape.watch(x)
        loss = sum_reduce(maxpool1d(xt, width=2, stride=1))
        grads = tape.gradients(loss)
    # Windows (0,3),(3,1),(1,2): position 1 wins twice, position 3 once.
    npt.assert_array_equal(grads[xt.node], [[[0.0, 2.0, 0.0, 1.0]]])


def test_cross_entropy_closed_form_uniform_logits():
    losses = softmax_cross_entropy(np.zeros((1, 2)), np.array([0]))
    npt.assert_allclose(losses.data, [LN2], atol=1e-12)


def test_cross_entropy_matches_log_softmax(rng):
    logits = rng.standard_normal((8, 5)) * 10
    labels = rng.integers(0, 5, size=8)
    got = softmax_cross_entropy(logits, labels).data
    shifted = logits - logits.max(axis=1, keepdims=True)
    want = np.log(np.exp(shifted).sum(axis=1)) - shifted[np.arange(8), labels]
    npt.assert_allclose(got, want, atol=1e-12)


def test_cross_entropy_stable_for_huge_logits():
    logits = np.array([[1000.0, 0.0], [-1000.0, 1000.0]])
    losses = softmax_cross_entropy(logits, np.array([0, 0])).data
    assert np.isfinite(losses).all()
    npt.assert_allclose(losses, [0.0, 2000.0], atol=1e-9)


def test_shape_errors_name_the_op():
    with pytest.raises(ShapeError, match="matmul"):
        matmul(np.ones((2, 3)), np.ones((4, 2)))
    with pytest.raises(ShapeError, match="conv1d"):
        conv1d(np.ones((1, 3, 8)), np.ones((4, 2, 3)))
    with pytest.raises(ShapeError, match="narrow"):
        narrow(Tensor(np.ones(4)), 0, 2, 5)
    with pytest.raises(ShapeError, match="softmax_cross_entropy"):
        softmax_cross_entropy(np.zeros((2, 3)), np.array([0, 3]))


def test_forward_dispatch_by_name():
    out = forward("add", [Tensor([1.0]), Tensor([2.0])])
    npt.assert_array_equal(out.data, [3.0])
    with pytest.raises(KeyError, match="unknown primitive"):
        forward("fma", [])


# Finite-difference sweep: every primitive, 100 random inputs each.

def _fd_cases():
    r = np.random.default_rng(7)
    c34 = r.standard_normal((3, 4))
    c514 = r.standard_normal((5, 1, 4))
    c234 = r.standard_normal((2, 3, 4))
    c6 = r.standard_normal(6)
    c43 = r.standard_normal((4, 3))
    c32 = r.standard_normal((3, 2))
    c23 = r.standard_normal((2, 3))
    yield "add", lambda x: sum_reduce(square(add(x, c34))), (3, 4)
    yield "add-broadcast", lambda x: sum_reduce(square(add(x, c514))), (1, 4)
    yield "multiply", lambda x: sum_reduce(multiply(x, c34)), (3, 4)
    yield "multiply-broadcast", lambda x: sum_reduce(square(multiply(x, c234))), (3, 1)
    yield "negate", lambda x: sum_reduce(multiply(negate(x), c6)), (6,)
    yield "square", lambda x: sum_reduce(square(x)), (2, 5)
    yield "exp", lambda x: sum_reduce(exp(x)), (3, 3)
    yield "relu", lambda x: sum_reduce(square(relu(x))), (4, 4)
    yield "sigmoid", lambda x: sum_reduce(square(sigmoid(x))), (3, 5)
    yield "softmax", lambda x: sum_reduce(square(softmax(x, axis=1))), (3, 5)
    yield "softmax-axis0", lambda x: sum_reduce(square(softmax(x, axis=0))), (4, 2)
    yield "matmul-lhs", lambda x: sum_reduce(square(matmul(x, c43))), (2, 4)
    yield "matmul-rhs", lambda x: sum_reduce(square(matmul(c32, x))), (2, 4)
    yield "reshape", lambda x: sum_reduce(square(reshape(x, (6, 2)))), (3, 4)
    yield "narrow", lambda x: sum_reduce(square(narrow(x, 1, 1, 2))), (3, 4)
    yield "concatenate", lambda x: sum_reduce(
        square(concatenate([x, c23], axis=0))
    ), (2, 3)
    yield "sum-all", lambda x: sum_reduce(square(sum_reduce(x))), (3, 4)
    yield "sum-axis", lambda x: sum_reduce(square(sum_reduce(x, axis=0))), (3, 4)
    yield "mean-all", lambda x: square(mean_reduce(x)), (3, 4)
    yield "mean-axis", lambda x: sum_reduce(square(mean_reduce(x, axis=1))), (3, 4)


@pytest.mark.parametrize("name,build,shape", list(_fd_cases()),
                         ids=lambda v: v if isinstance(v, str) else "")
def test_finite_difference_elementwise(name, build, shape):
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    for _ in range(100):
        check_gradient(build, rng.standard_normal(shape), tol=1e-4)


def test_finite_difference_conv1d():
    rng = np.random.default_rng(11)
    for i in range(100):
        stride = int(rng.integers(1, 3))
        groups = int(rng.choice([1, 2]))
        B, cg, og, K = 2, 2, 2, 3
        C_in, C_out, L = cg * groups, og * groups, 8
        w = rng.standard_normal((C_out, cg, K))
        x = rng.standard_normal((B, C_in, L))
        check_gradient(
            lambda v: sum_reduce(square(conv1d(v, w, stride=stride, groups=groups))), x
        )
        check_gradient(
            lambda v: sum_reduce(square(conv1d(Tensor(x), v, stride=stride, groups=groups))), w
        )


def test_finite_difference_maxpool():
    rng = np.random.default_rng(13)
    done = 0
    while done < 100:
        x = rng.standard_normal((2, 3, 10))
        # Skip draws with near-ties inside a window; max is not smooth there.
        wins = np.sort(np.lib.stride_tricks.sliding_window_view(x, 2, axis=2)[:, :, ::2], axis=3)
        if (wins[..., 1] - wins[..., 0]).min() < 1e-3:
            continue
        check_gradient(lambda v: sum_reduce(square(maxpool1d(v, width=2))), x)
        done += 1


def test_finite_difference_cross_entropy():
    rng = np.random.default_rng(17)
    for _ in range(100):
        labels = rng.integers(0, 4, size=5)
        check_gradient(
            lambda v: mean_reduce(softmax_cross_entropy(v, labels)),
            rng.standard_normal((5, 4)) * 3,
        )


def test_finite_difference_two_layer_perceptron():
    # 20 trainable values packed in one vector, split inside the graph.
    rng = np.random.default_rng(19)
    x = rng.standard_normal((5, 3))
    labels = rng.integers(0, 2, size=5)

    def build(theta):
        w1 = reshape(narrow(theta, 0, 0, 12), (3, 4))
        w2 = reshape(narrow(theta, 0, 12, 8), (4, 2))
        hidden = relu(matmul(Tensor(x), w1))
        return mean_reduce(softmax_cross_entropy(matmul(hidden, w2), labels))

    for _ in range(20):
        check_gradient(build, rng.standard_normal(20), tol=1e-4)


def test_forward_backward_bit_determinism(rng):
    x = rng.standard_normal((4, 2, 12))
    w = rng.standard_normal((4, 2, 3))
    labels = rng.integers(0, 3, size=4)
    dense = rng.standard_normal((20, 3))

    def run():
        with Tape() as tape:
            xt, wt, dt = tape.watch(x), tape.watch(w), tape.watch(dense)
            h = maxpool1d(relu(conv1d(xt, wt)), width=2)
            logits = matmul(reshape(h, (4, 20)), dt)
            loss = mean_reduce(softmax_cross_entropy(logits, labels))
            g = tape.gradients(loss)
            return loss.data.copy(), g[xt.node].copy(), g[wt.node].copy(), g[dt.node].copy()

    first, second = run(), run()
    for a, b in zip(first, second):
        assert np.array_equal(a, b)
