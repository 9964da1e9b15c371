import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semstack import diffcore as dc
from semstack.diffcore import NonFiniteError, Tensor
from semstack.rng import Rng


def t64(a, grad=True):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def naive_conv(x, w, b, p):
    """Loop-based cross-correlation used as an independent oracle."""
    c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (p, p), (p, p)))
    ho, wo = h + 2 * p - k + 1, wd + 2 * p - k + 1
    out = np.zeros((o, ho, wo))
    for oc in range(o):
        for i in range(ho):
            for j in range(wo):
                out[oc, i, j] = np.sum(xp[:, i:i + k, j:j + k] * w[oc]) + b[oc]
    return out


# -- conv2d --------------------------------------------------------------------

def test_conv_identity_kernel():
    x = np.random.default_rng(0).normal(size=(1, 3, 3))
    out = dc.conv2d(t64(x), t64(np.ones((1, 1, 1, 1))), t64(np.zeros(1)))
    np.testing.assert_array_equal(out.data, x)


def test_conv_constant_input_all_ones_kernel():
    c = 0.7
    out = dc.conv2d(t64(np.full((1, 5, 5), c)), t64(np.ones((1, 1, 3, 3))), t64(np.zeros(1)), padding=1)
    np.testing.assert_allclose(out.data[0, 1:-1, 1:-1], 9 * c, rtol=0, atol=1e-12)
    # corners see 4 cells, edges 6
    assert out.data[0, 0, 0] == pytest.approx(4 * c)
    assert out.data[0, 0, 2] == pytest.approx(6 * c)


def test_conv_zero_kernel():
    x = np.random.default_rng(1).normal(size=(2, 4, 4))
    out = dc.conv2d(t64(x), t64(np.zeros((3, 2, 3, 3))), t64(np.zeros(3)), padding=1)
    assert out.shape == (3, 4, 4)
    assert not out.data.any()


@pytest.mark.parametrize("k,p", [(1, 0), (3, 1), (3, 0), (5, 2)])
def test_conv_matches_loop_oracle(k, p):
    g = np.random.default_rng(k * 10 + p)
    x, w, b = g.normal(size=(3, 6, 7)), g.normal(size=(2, 3, k, k)), g.normal(size=2)
    out = dc.conv2d(t64(x), t64(w), t64(b), padding=p)
    np.testing.assert_allclose(out.data, naive_conv(x, w, b, p), atol=1e-12)


def test_conv_batched_equals_per_sample():
    g = np.random.default_rng(2)
    x, w, b = g.normal(size=(3, 2, 5, 5)), g.normal(size=(4, 2, 3, 3)), g.normal(size=4)
    batched = dc.conv2d(t64(x), t64(w), t64(b), padding=1).data
    for i in range(3):
        np.testing.assert_allclose(batched[i], dc.conv2d(t64(x[i]), t64(w), t64(b), padding=1).data, atol=1e-12)


def test_conv_shape_errors():
    with pytest.raises(ValueError):
        dc.conv2d(t64(np.zeros((2, 4, 4))), t64(np.zeros((1, 3, 3, 3))), t64(np.zeros(1)))
    with pytest.raises(ValueError):
        dc.conv2d(t64(np.zeros((3, 4, 4))), t64(np.zeros((1, 3, 3, 3))), t64(np.zeros(2)))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_conv_non_finite_output_raises():
    x = np.full((1, 3, 3), 1e308)
    with pytest.raises(NonFiniteError):
        dc.conv2d(t64(x), t64(np.full((1, 1, 3, 3), 10.0)), t64(np.zeros(1)), padding=1)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(-3, 3), st.floats(-3, 3))
def test_conv_linear_in_input(seed, alpha, beta):
    g = np.random.default_rng(seed)
    x, y, w = g.normal(size=(2, 5, 5)), g.normal(size=(2, 5, 5)), g.normal(size=(3, 2, 3, 3))
    zero = t64(np.zeros(3))
    lhs = dc.conv2d(t64(alpha * x + beta * y), t64(w), zero, padding=1).data
    rhs = alpha * dc.conv2d(t64(x), t64(w), zero, padding=1).data + beta * dc.conv2d(t64(y), t64(w), zero, padding=1).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-5)


# -- structural ops ---------------------------------------------------------------

def test_relu_values():
    np.testing.assert_array_equal(dc.relu(t64([-1.0, 0.0, 2.0])).data, [0, 0, 2])


def test_upsample_single_cell():
    out = dc.upsample_nearest2x(t64(np.full((1, 1, 1), 3.5)))
    assert out.shape == (1, 2, 2)
    assert (out.data == 3.5).all()


def test_maxpool_value_and_gradient_route():
    x = t64([[[1.0, 2.0], [3.0, 4.0]]])
    out = dc.maxpool2x(x)
    assert out.data.item() == 4.0
    dc.backward(out.sum())
    np.testing.assert_array_equal(x.grad, [[[0, 0], [0, 1]]])


def test_maxpool_tie_goes_to_first_row_major():
    x = t64([[[5.0, 5.0], [5.0, 5.0]]])
    dc.backward(dc.maxpool2x(x).sum())
    np.testing.assert_array_equal(x.grad, [[[1, 0], [0, 0]]])


def test_maxpool_odd_dims_rejected():
    with pytest.raises(ValueError):
        dc.maxpool2x(t64(np.zeros((1, 3, 4))))


def test_concat_channels():
    a, b = t64(np.zeros((2, 3, 3))), t64(np.ones((1, 3, 3)))
    out = dc.concat_channels(a, b)
    assert out.shape == (3, 3, 3)
    dc.backward((out * t64(np.arange(27.0).reshape(3, 3, 3), grad=False)).sum())
    np.testing.assert_array_equal(b.grad, np.arange(18.0, 27.0).reshape(1, 3, 3))


# -- cross-entropy --------------------------------------------------------------

def test_cross_entropy_uniform_logits():
    loss = dc.softmax_cross_entropy(t64(np.zeros((4, 3, 3))), np.zeros((3, 3), dtype=int))
    assert loss.item() == pytest.approx(np.log(4.0), abs=1e-12)


def test_cross_entropy_saturated():
    logits = np.zeros((4, 2, 2))
    logits[2] = 50.0
    assert dc.softmax_cross_entropy(t64(logits), np.full((2, 2), 2)).item() < 1e-9


def test_cross_entropy_gradient_sums_to_zero_per_pixel():
    g = np.random.default_rng(3)
    logits = t64(g.normal(size=(5, 4, 4)) * 3)
    dc.backward(dc.softmax_cross_entropy(logits, g.integers(0, 5, size=(4, 4))))
    np.testing.assert_allclose(logits.grad.sum(axis=0), 0.0, atol=1e-6)


def test_cross_entropy_rejects_bad_class():
    with pytest.raises(ValueError):
        dc.softmax_cross_entropy(t64(np.zeros((3, 2, 2))), np.full((2, 2), 3))


# -- cosine distance ----------------------------------------------------------------

def test_cosine_identical_opposite_orthogonal():
    a = t64([1.0, -2.0, 0.5])
    assert dc.cosine_distance(a, a).item() == pytest.approx(0.0, abs=1e-12)
    assert dc.cosine_distance(a, t64(-a.data)).item() == pytest.approx(2.0, abs=1e-12)
    assert dc.cosine_distance(t64([1.0, 0.0]), t64([0.0, 1.0])).item() == pytest.approx(1.0)


def test_cosine_zero_vector_is_finite():
    assert dc.cosine_distance(t64([0.0, 0.0]), t64([1.0, 2.0])).item() == pytest.approx(1.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100))
def test_cosine_symmetric_and_scale_invariant(seed, lam):
    g = np.random.default_rng(seed)
    a, b = g.normal(size=6), g.normal(size=6)
    d_ab = dc.cosine_distance(t64(a), t64(b)).item()
    assert d_ab == pytest.approx(dc.cosine_distance(t64(b), t64(a)).item(), abs=1e-6)
    assert d_ab == pytest.approx(dc.cosine_distance(t64(lam * a), t64(b)).item(), abs=1e-6)
    assert 0.0 <= d_ab <= 2.0


# -- backward / grad_check --------------------------------------------------------------

def test_linear_gradient_exact():
    w = t64(np.array(1.7))
    dc.backward(w * 3.0)
    assert w.grad == 3.0


def test_backward_rejects_non_scalar():
    with pytest.raises(ValueError):
        dc.backward(t64(np.ones(3)) * 2.0)


def test_grad_check_detects_wrong_gradient():
    w = t64(np.array([0.5, -1.0]))

    def bad_square(x: Tensor) -> Tensor:
        # forward x^2, backward claims 3x
        def bw(g):
            dc._accum(x, g * 3 * x.data)
        return dc._result(x.data ** 2, (x,), bw, "bad_square")

    assert dc.grad_check(lambda: bad_square(w).sum(), [w]) > 0.1
    assert dc.grad_check(lambda: (w * w).sum(), [w]) < 1e-8


def test_grad_check_requires_float64():
    w = Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
    with pytest.raises(TypeError):
        dc.grad_check(lambda: w.sum(), [w])


def _away_from_kink(g, shape, h=1e-5):
    x = g.normal(size=shape)
    return np.where(np.abs(x) < 10 * h, 20 * h, x)


OPS = {
    "conv2d": lambda g: (lambda x, w, b: dc.conv2d(x, w, b, padding=1),
                         [g.normal(size=(2, 5, 5)), g.normal(size=(3, 2, 3, 3)), g.normal(size=3)]),
    "conv2d_batched_1x1": lambda g: (lambda x, w, b: dc.conv2d(x, w, b),
                                     [g.normal(size=(2, 3, 4, 4)), g.normal(size=(2, 3, 1, 1)), g.normal(size=2)]),
    "relu": lambda g: (dc.relu, [_away_from_kink(g, (3, 4, 4))]),
    "maxpool2x": lambda g: (dc.maxpool2x, [g.normal(size=(2, 4, 6))]),
    "upsample": lambda g: (dc.upsample_nearest2x, [g.normal(size=(2, 3, 3))]),
    "concat": lambda g: (dc.concat_channels, [g.normal(size=(2, 3, 3)), g.normal(size=(1, 3, 3))]),
    "softmax": lambda g: (lambda x: dc.softmax(x, axis=-3), [g.normal(size=(3, 2, 2))]),
    "cross_entropy": lambda g: (lambda y: (lambda x: dc.softmax_cross_entropy(x, y), [g.normal(size=(4, 3, 3))]))(
        g.integers(0, 4, size=(3, 3))),
    "cosine_vec": lambda g: (dc.cosine_distance, [g.normal(size=5), g.normal(size=5)]),
    "cosine_map": lambda g: (lambda a, b: dc.cosine_distance(a, b, axis=-3),
                             [g.normal(size=(4, 3, 3)), g.normal(size=(4, 3, 3))]),
    "arith": lambda g: (lambda a, b: (a * b + a / (b * b + 1.0) - b).mean(axis=0),
                        [g.normal(size=(3, 2)), g.normal(size=(1, 2))]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_central_differences(name):
    """Every differentiable op, 20 random instances, 64-bit."""
    worst = 0.0
    for i in range(20):
        g = np.random.default_rng(1000 * i + len(name))
        fn, arrays = OPS[name](g)
        inputs = [t64(a) for a in arrays]
        weights = None

        def f():
            nonlocal weights
            out = fn(*inputs)
            if weights is None:
                weights = np.random.default_rng(i).normal(size=out.shape)
            return (out * t64(weights, grad=False)).sum()

        worst = max(worst, dc.grad_check(f, inputs))
    assert worst < 1e-4


def test_no_grad_builds_no_graph():
    w = t64(np.ones(3))
    with dc.no_grad():
        out = (w * 2.0).sum()
    assert not out.requires_grad


def test_rng_determinism_and_independence():
    a = Rng(7, 3).generator().normal(size=5)
    b = Rng(7, 3).generator().normal(size=5)
    c = Rng(7, 4).generator().normal(size=5)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    assert Rng(7).child(1, 2) == Rng(7).child(1, 2)
    assert Rng(7).child(1, 2) != Rng(7).child(2, 1)
