import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tmdnet import autodiff as ad
from tmdnet.autodiff import Tape, Tensor, backward, finite_diff_check
from tmdnet.errors import NumericError, ShapeError, ValidationError


def grads_of(fn, *arrays):
    xs = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = fn(*xs)
    return backward(tape, loss, xs)


def test_relu_subgradient_at_zero():
    (g,) = grads_of(lambda x: ad.reduce_sum(ad.relu(x)), [-1.0, 0.0, 2.0])
    np.testing.assert_array_equal(g, [0.0, 0.0, 1.0])


def test_reduce_mean_gradient():
    (g,) = grads_of(lambda x: ad.reduce_mean(x), np.arange(4.0))
    np.testing.assert_array_equal(g, [0.25] * 4)


def test_matmul_matches_finite_differences():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(3, 2))
    err = finite_diff_check(lambda a, b: ad.reduce_sum(ad.mul(ad.matmul(a, b), ad.matmul(a, b))), [a, b])
    assert err < 1e-6


def test_sum_gives_ones():
    (g,) = grads_of(lambda x: ad.reduce_sum(x), np.ones((2, 3)))
    np.testing.assert_array_equal(g, np.ones((2, 3)))


def test_constant_loss_gives_zero_gradient():
    x = Tensor(np.ones(3), requires_grad=True)
    c = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        loss = ad.reduce_sum(c)
    gx, gc = backward(tape, loss, [x, c])
    np.testing.assert_array_equal(gx, np.zeros(3))
    np.testing.assert_array_equal(gc, np.ones(3))


def test_fan_out_accumulates():
    (g,) = grads_of(lambda x: ad.reduce_sum(ad.add(x, x)), np.arange(3.0))
    np.testing.assert_array_equal(g, [2.0, 2.0, 2.0])


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = ad.mul(x, 2.0)
    with pytest.raises(ValidationError):
        backward(tape, y)


def test_reduce_max_routes_to_first_maximum():
    (g,) = grads_of(lambda x: ad.reduce_max(x, axis=0), [1.0, 3.0, 3.0, 0.0])
    np.testing.assert_array_equal(g, [0, 1, 0, 0])


def test_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4,\)"):
        ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones(4)))


def test_log_domain_error():
    with pytest.raises(NumericError):
        ad.log(Tensor(np.array([1.0, 0.0])))


def test_pow_domain_error():
    with pytest.raises(NumericError):
        ad.pow(Tensor(np.array([-1.0])), 0.5)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_in_forward_is_an_error():
    with pytest.raises(NumericError):
        ad.mul(Tensor(np.array([np.inf])), 0.0)


def test_no_tape_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    y = ad.mul(x, x)
    assert not y.requires_grad


def test_tape_is_topological():
    x = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        ad.reduce_sum(ad.exp(ad.mul(x, 2.0)))
    seen = {id(x)}
    for node in tape.nodes:
        assert all(id(i) in seen or not i.requires_grad for i in node.inputs)
        seen.add(id(node.output))


class TestConv1d:
    def test_identity_tap(self):
        x = Tensor(np.arange(1.0, 6.0).reshape(1, 1, 5))
        w = Tensor(np.array([0.0, 1.0, 0.0]).reshape(1, 1, 3))
        out = ad.conv1d(x, w, Tensor(np.zeros(1)), padding="valid")
        np.testing.assert_array_equal(out.data.ravel(), [2, 3, 4])

    def test_zero_kernel(self):
        x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 9)))
        out = ad.conv1d(x, Tensor(np.zeros((4, 3, 3))), Tensor(np.zeros(4)), padding="same")
        assert out.shape == (2, 4, 9)
        assert not out.data.any()

    def test_same_identity_is_bit_exact(self):
        x = np.random.default_rng(1).normal(size=(3, 4, 17))
        w = np.zeros((4, 4, 5))
        w[np.arange(4), np.arange(4), 2] = 1.0
        out = ad.conv1d(Tensor(x), Tensor(w), Tensor(np.zeros(4)), padding="same")
        np.testing.assert_array_equal(out.data, x)

    def test_gradients(self):
        rng = np.random.default_rng(2)
        x, w, b = rng.normal(size=(2, 2, 16)), rng.normal(size=(3, 2, 5)), rng.normal(size=3)
        probe = rng.normal(size=(2, 3, 12))
        err = finite_diff_check(lambda x, w, b: ad.reduce_sum(ad.mul(ad.conv1d(x, w, b), probe)), [x, w, b])
        assert err < 1e-6

    @pytest.mark.parametrize("stride,padding", [(2, "valid"), (3, "same"), (1, "same"), (2, 1)])
    def test_output_length_and_gradients(self, stride, padding):
        rng = np.random.default_rng(3)
        x, w, b = rng.normal(size=(2, 2, 11)), rng.normal(size=(2, 2, 4)), rng.normal(size=2)
        out = ad.conv1d(Tensor(x), Tensor(w), Tensor(b), stride, padding)
        assert out.shape[2] == ad.conv_output_length(11, 4, stride, padding)
        err = finite_diff_check(lambda x, w, b: ad.reduce_sum(ad.exp(ad.mul(
            ad.conv1d(x, w, b, stride, padding), 0.1))), [x, w, b])
        assert err < 1e-6

    def test_channel_mismatch(self):
        with pytest.raises(ShapeError):
            ad.conv1d(Tensor(np.ones((1, 2, 8))), Tensor(np.ones((1, 3, 3))))


def test_backward_is_deterministic():
    rng = np.random.default_rng(4)
    x, w = rng.normal(size=(2, 3, 20)), rng.normal(size=(3, 3, 5))

    def run():
        return grads_of(lambda x, w: ad.reduce_sum(ad.relu(ad.conv1d(x, w, padding="same"))), x, w)

    a, b = run(), run()
    for ga, gb in zip(a, b):
        np.testing.assert_array_equal(ga, gb)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_gradient_of_sum_is_sum_of_gradients(seed):
    x = np.random.default_rng(seed).normal(size=(3, 4))
    f = lambda t: ad.reduce_sum(ad.exp(ad.mul(t, 0.3)))
    g = lambda t: ad.reduce_sum(ad.mul(ad.matmul(t, ad.reshape(t, (4, 3))), 0.5))
    (gf,) = grads_of(f, x)
    (gg,) = grads_of(g, x)
    (gs,) = grads_of(lambda t: ad.add(f(t), g(t)), x)
    np.testing.assert_allclose(gs, gf + gg, rtol=1e-12, atol=1e-12)


def test_sum_of_squares_check():
    x = np.random.default_rng(5).normal(size=7)
    assert finite_diff_check(lambda t: ad.reduce_sum(ad.mul(t, t)), [x]) < 1e-7


def test_constant_function_check():
    x = np.random.default_rng(6).normal(size=3)
    assert finite_diff_check(lambda t: ad.reduce_sum(Tensor(np.ones(2))), [x]) == 0.0


def test_slice_concat_reshape_gradients():
    x = np.random.default_rng(7).normal(size=(3, 4))
    err = finite_diff_check(
        lambda t: ad.reduce_sum(ad.exp(ad.concat([ad.slice_(t, (slice(0, 2),)),
                                                  ad.reshape(ad.slice_(t, (2,)), (1, 4))], 0))), [x])
    assert err < 1e-7


def test_max_pool_drops_tail():
    x = Tensor(np.arange(10.0).reshape(1, 1, 10))
    np.testing.assert_array_equal(ad.max_pool1d(x, 4).data.ravel(), [3.0, 7.0])
