import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from dcnse import _accel
from dcnse import tensor as tn
from dcnse.tensor import Tensor

from _util import away_from_zero, gradcheck, leaf, weighted_sum


# ---------------------------------------------------------------------------
# elementwise

def test_add_example():
    assert np.array_equal(tn.elementwise("add", Tensor([1, 2]), Tensor([3, 4])).data, [4, 6])


def test_mul_by_zero_scalar():
    out = tn.elementwise("mul", Tensor(np.arange(6.0).reshape(2, 3)), 0.0)
    assert out.shape == (2, 3)
    assert np.all(out.data == 0.0)


def test_abs_value_and_grad():
    x = leaf([-2.0, 3.0])
    out = tn.elementwise("abs", x)
    assert np.array_equal(out.data, [2.0, 3.0])
    tn.backward(tn.tsum(out))
    assert np.array_equal(x.grad, [-1.0, 1.0])
    # central differences, h=1e-6 at smooth points
    h = 1e-6
    num = [(abs(v + h) - abs(v - h)) / (2 * h) for v in (-2.0, 3.0)]
    assert np.allclose(x.grad, num, rtol=1e-9)


def test_abs_subgradient_at_zero():
    x = leaf([0.0])
    tn.backward(tn.tsum(tn.elementwise("abs", x)))
    assert x.grad[0] == 0.0


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(2,\).*\(3,\)"):
        tn.elementwise("add", Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))


def test_unknown_op():
    with pytest.raises(ValueError):
        tn.elementwise("div", Tensor([1.0]), Tensor([1.0]))


def test_operator_sugar():
    a, b = Tensor([1.0, 2.0]), Tensor([3.0, 5.0])
    assert np.array_equal((a + b).data, [4, 7])
    assert np.array_equal((a - b).data, [-2, -3])
    assert np.array_equal((a * b).data, [3, 10])
    assert np.array_equal((2.0 - a).data, [1, 0])
    assert np.array_equal((-a).data, [-1, -2])


@pytest.mark.parametrize("kind", ["add", "sub", "mul"])
def test_binary_gradcheck(kind):
    rng = np.random.default_rng(1)
    for shape in [(3,), (2, 4), (2, 3, 2)]:
        a, b = leaf(rng.standard_normal(shape)), leaf(rng.standard_normal(shape))
        w = rng.standard_normal(shape)
        assert gradcheck(lambda: weighted_sum(tn.elementwise(kind, a, b), w), [a, b]) < 1e-6


def test_scalar_operand_gradient_is_summed():
    a, c = leaf([1.0, 2.0, 3.0]), leaf(2.0)
    tn.backward(tn.tsum(tn.elementwise("mul", a, c)))
    assert c.grad == pytest.approx(6.0)
    assert np.allclose(a.grad, 2.0)


# ---------------------------------------------------------------------------
# matmul

def test_matmul_identity():
    b = np.random.default_rng(0).standard_normal((2, 3))
    assert np.array_equal(tn.matmul(Tensor(np.eye(2)), Tensor(b)).data, b)


def test_matmul_example_against_loop():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    b = np.array([[1.0], [1.0]])
    loop = [[sum(a[i, k] * b[k, j] for k in range(2)) for j in range(1)] for i in range(2)]
    assert np.array_equal(tn.matmul(Tensor(a), Tensor(b)).data, loop)
    assert np.array_equal(loop, [[3.0], [7.0]])


def test_matmul_gradcheck():
    rng = np.random.default_rng(2)
    a, b = leaf(rng.standard_normal((5, 4))), leaf(rng.standard_normal((4, 3)))
    w = rng.standard_normal((5, 3))
    assert gradcheck(lambda: weighted_sum(tn.matmul(a, b), w), [a, b]) < 1e-6


def test_matmul_mismatch():
    with pytest.raises(ValueError):
        tn.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


# ---------------------------------------------------------------------------
# softmax and mask

def test_softmax_uniform_row():
    p = tn.softmax_rows(Tensor([[0.0, 0.0, 0.0]])).data
    assert np.allclose(p, 1 / 3, atol=1e-15)


def test_softmax_neg_inf_entry():
    p = tn.softmax_rows(Tensor([[0.7, -np.inf]])).data
    assert p[0, 0] == 1.0 and p[0, 1] == 0.0


def test_softmax_matches_direct_formula():
    row = np.array([1.0, 2.0, 3.0])
    direct = np.exp(row) / np.exp(row).sum()
    assert np.allclose(tn.softmax_rows(Tensor(row[None])).data[0], direct, rtol=0, atol=1e-12)


def test_softmax_empty_row():
    with pytest.raises(ValueError, match="empty attention row"):
        tn.softmax_rows(Tensor([[0.0, 1.0], [-np.inf, -np.inf]]))


def test_softmax_gradcheck():
    rng = np.random.default_rng(3)
    w = leaf(rng.standard_normal((4, 5)))
    g = rng.standard_normal((4, 5))
    assert gradcheck(lambda: weighted_sum(tn.softmax_rows(w), g), [w]) < 1e-6


def test_causal_mask_then_softmax():
    w = Tensor(np.random.default_rng(4).standard_normal((6, 6)))
    p = tn.softmax_rows(tn.causal_mask(w)).data
    assert np.all(p[np.triu_indices(6, 1)] == 0.0)
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-12)


# ---------------------------------------------------------------------------
# prelu

def test_prelu_positive_identity():
    x = np.abs(np.random.default_rng(5).standard_normal((2, 3, 4)))
    assert np.array_equal(tn.prelu(Tensor(x), Tensor([0.25, 0.5])).data, x)


def test_prelu_negative_example():
    assert np.array_equal(tn.prelu(Tensor([-1.0]), Tensor([0.25])).data, [-0.25])


def test_prelu_slope_grad():
    a = leaf([0.25])
    tn.backward(tn.tsum(tn.prelu(Tensor([-2.0]), a)))
    assert a.grad[0] == -2.0
    assert gradcheck(lambda: tn.tsum(tn.prelu(Tensor([-2.0]), a)), [a]) < 1e-9


def test_prelu_shape_mismatch():
    with pytest.raises(ValueError):
        tn.prelu(Tensor(np.ones((3, 2))), Tensor([0.25, 0.25]))


# ---------------------------------------------------------------------------
# reshape / permute / concat

def test_reshape_round_trip():
    x = Tensor(np.arange(24.0))
    assert np.array_equal(tn.reshape(tn.reshape(x, (2, 3, 4)), (24,)).data, x.data)


def test_permute_shape_and_inverse():
    x = Tensor(np.arange(24.0).reshape(2, 3, 4))
    y = tn.permute(x, (1, 0, 2))
    assert y.shape == (3, 2, 4)
    assert np.array_equal(tn.permute(y, (1, 0, 2)).data, x.data)


def test_grad_of_sum_after_permute():
    x = leaf(np.random.default_rng(6).standard_normal((2, 3, 4)))
    tn.backward(tn.tsum(x.permute(2, 0, 1)))
    assert np.array_equal(x.grad, np.ones((2, 3, 4)))


def test_reshape_permute_errors():
    with pytest.raises(ValueError):
        tn.reshape(Tensor(np.ones(6)), (4,))
    with pytest.raises(ValueError):
        tn.permute(Tensor(np.ones((2, 3))), (0, 0))


def test_concat_single_and_pair():
    one = Tensor(np.ones((1, 2, 2)))
    assert tn.concat_channels([one]) is one
    out = tn.concat_channels([one, Tensor(np.zeros((1, 2, 2)))]).data
    assert out.shape == (2, 2, 2)
    assert np.all(out[0] == 1) and np.all(out[1] == 0)


def test_concat_mean_distributes_evenly():
    a, b = leaf(np.ones((1, 2, 2))), leaf(np.zeros((2, 2, 2)))
    tn.backward(tn.tmean(tn.concat_channels([a, b])))
    assert np.allclose(a.grad, 1 / 12) and np.allclose(b.grad, 1 / 12)
    assert gradcheck(lambda: tn.tmean(tn.concat_channels([a, b])), [a, b]) < 1e-8


def test_concat_mismatch():
    with pytest.raises(ValueError):
        tn.concat_channels([Tensor(np.ones((1, 2, 3))), Tensor(np.ones((1, 3, 2)))])


# ---------------------------------------------------------------------------
# backward and graph

def test_sum_grad_is_ones():
    x = leaf(np.arange(5.0))
    tn.backward(tn.tsum(x))
    assert np.array_equal(x.grad, np.ones(5))


def test_mse_grad_closed_form():
    rng = np.random.default_rng(7)
    x, c = leaf(rng.standard_normal(8)), rng.standard_normal(8)
    tn.backward(tn.tmean(tn.elementwise("square", x - Tensor(c))))
    assert np.allclose(x.grad, 2 * (x.data - c) / 8, rtol=1e-14)


def test_backward_rejects_non_scalar():
    x = leaf(np.ones(3))
    with pytest.raises(ValueError, match="scalar"):
        tn.backward(x * 2.0)


def test_backward_rejects_detached_loss():
    with pytest.raises(ValueError):
        tn.backward(tn.tsum(Tensor(np.ones(3))))


def test_grads_accumulate_across_calls():
    x = leaf([1.0, 2.0])
    tn.backward(tn.tsum(x))
    tn.backward(tn.tsum(x))
    assert np.array_equal(x.grad, [2.0, 2.0])


def test_shared_subexpression_visited_once():
    x = leaf([3.0])
    y = x * x
    z = y + y  # y reached through two edges
    order = tn.topological_order(tn.tsum(z))
    assert len(order) == len({id(n) for n in order})
    tn.backward(tn.tsum(z))
    assert x.grad[0] == pytest.approx(12.0)


def test_topological_order_inputs_first():
    a, b = leaf([1.0]), leaf([2.0])
    loss = tn.tsum((a * b + a).square())
    order = tn.topological_order(loss)
    pos = {id(n): i for i, n in enumerate(order)}
    for node in order:
        for p in node._parents:
            assert pos[id(p)] < pos[id(node)]
    assert order[-1] is loss


def test_deep_chain_no_recursion_limit():
    x = leaf([1.0])
    y = x
    for _ in range(5000):
        y = y * 1.0
    tn.backward(tn.tsum(y))
    assert x.grad[0] == 1.0


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with tn.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y._parents == ()


def test_graphs_in_threads_are_independent():
    results = {}

    def work(k):
        x = leaf(np.full(50, float(k)))
        for _ in range(20):
            x.grad = None
            tn.backward(tn.tsum(tn.elementwise("square", x)))
        results[k] = x.grad.copy()

    threads = [threading.Thread(target=work, args=(k,)) for k in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for k in range(4):
        assert np.array_equal(results[k], np.full(50, 2.0 * k))


@pytest.mark.parametrize("order,h", [(2, 1e-4), (4, 3e-4)])
def test_gradcheck_flags_small_gradient_error(order, h):
    # backward sees weights 3e-4 larger than the forward used for differences
    rng = np.random.default_rng(21)
    x = leaf(rng.standard_normal(6))
    w = rng.standard_normal(6)

    def fn():
        scale = 1.0 + (3e-4 if tn.grad_enabled() else 0.0)
        return weighted_sum(x * x, w * scale)
    assert gradcheck(fn, [x], h=h, order=order) > 2e-4
    assert gradcheck(lambda: weighted_sum(x * x, w), [x], h=h, order=order) < 1e-6


# ---------------------------------------------------------------------------
# framing ops and conv

def test_frame_and_ola_gradcheck():
    rng = np.random.default_rng(8)
    for m, flen, shift in [(10, 4, 2), (9, 3, 3), (13, 5, 2)]:
        y = leaf(rng.standard_normal(m))
        t = -(-m // shift)
        w = rng.standard_normal((t, flen))
        assert gradcheck(lambda: weighted_sum(tn.frame(y, flen, shift), w), [y]) < 1e-7
        f = leaf(rng.standard_normal((t, flen)))
        w2 = rng.standard_normal(m)
        assert gradcheck(lambda: weighted_sum(tn.overlap_add(f, shift, m), w2), [f]) < 1e-7


@pytest.mark.parametrize("padding", ["valid", "same", "causal_time"])
def test_conv_gradcheck_modes(padding):
    rng = np.random.default_rng(9)
    x = leaf(rng.standard_normal((2, 5, 6)))
    k = leaf(rng.standard_normal((3, 2, 2, 3)))
    b = leaf(rng.standard_normal(3))
    out = tn.conv2d(x, k, b, (1, 2), padding, 1)
    w = rng.standard_normal(out.shape)
    assert gradcheck(lambda: weighted_sum(tn.conv2d(x, k, b, (1, 2), padding, 1), w),
                     [x, k, b]) < 1e-6


def test_conv_rejects_bad_input():
    with pytest.raises(ValueError):
        tn.conv2d(Tensor(np.ones((1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))), padding="valid")
    with pytest.raises(ValueError):
        tn.conv2d(Tensor(np.ones((2, 4, 4))), Tensor(np.ones((1, 1, 1, 1))))
    with pytest.raises(ValueError):
        tn.conv2d(Tensor(np.ones((1, 4, 4))), Tensor(np.ones((1, 1, 1, 1))), padding="full")


# ---------------------------------------------------------------------------
# backend equivalence

@pytest.mark.skipif(not _accel.HAVE_NUMBA, reason="numba missing")
@pytest.mark.parametrize("stride,dil,shape", [((1, 1), 1, (3, 7, 9)), ((1, 2), 1, (2, 6, 10)),
                                              ((2, 1), 2, (2, 9, 5)), ((1, 1), 4, (4, 12, 8)),
                                              ((1, 1), 2, (40, 66, 66))])
def test_backends_agree_on_conv(stride, dil, shape):
    rng = np.random.default_rng(10)
    x = rng.standard_normal(shape)
    k = rng.standard_normal((3, shape[0], 2, 3))
    # the last case is large enough for the direct numba loops
    direct = _accel._use_direct(k, stride, shape[1], shape[2] - 2)
    assert direct == (shape[0] == 40)
    g_seed = {}
    res = {}
    prev = _accel.backend()
    try:
        for name in ("numpy", "numba"):
            _accel.set_backend(name)
            xt, kt = leaf(x), leaf(k)
            out = tn.conv2d(xt, kt, None, stride, "causal_time", dil)
            g = g_seed.setdefault("g", rng.standard_normal(out.shape))
            tn.backward(weighted_sum(out, g))
            res[name] = (out.data, xt.grad, kt.grad)
    finally:
        _accel.set_backend(prev)
    for a, b in zip(res["numpy"], res["numba"]):
        assert np.allclose(a, b, rtol=1e-12, atol=1e-12)


@pytest.mark.skipif(not _accel.HAVE_NUMBA, reason="numba missing")
def test_backends_agree_on_framing():
    y = np.random.default_rng(11).standard_normal(1001)
    prev = _accel.backend()
    out = {}
    try:
        for name in ("numpy", "numba"):
            _accel.set_backend(name)
            fr = _accel.frame_gather(y, 64, 24, 42)
            out[name] = (fr, *_accel.overlap_add_sum(fr, 24, 1001))
    finally:
        _accel.set_backend(prev)
    for a, b in zip(out["numpy"], out["numba"]):
        assert np.array_equal(a, b)


def test_set_backend_validates():
    with pytest.raises(ValueError):
        _accel.set_backend("cuda")


# ---------------------------------------------------------------------------
# property tests

finite = st.floats(-1e3, 1e3, allow_nan=False)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, max_side=6), elements=finite))
def test_ops_stay_finite(x):
    t = Tensor(x)
    outs = [tn.softmax_rows(t), tn.elementwise("square", t), tn.elementwise("abs", t),
            tn.matmul(t, t.T), tn.layer_norm(t, np.ones(x.shape[1]), np.zeros(x.shape[1])),
            tn.prelu(t, np.full(x.shape[0], 0.25))]
    for o in outs:
        assert np.all(np.isfinite(o.data))
    p = outs[0].data
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-12)
    assert np.all((p >= 0) & (p <= 1))


@settings(max_examples=40, deadline=None)
@given(st.data())
def test_permute_is_bijection(data):
    shape = data.draw(hnp.array_shapes(min_dims=1, max_dims=4, max_side=4))
    axes = tuple(data.draw(st.permutations(range(len(shape)))))
    x = Tensor(np.arange(np.prod(shape), dtype=np.float64).reshape(shape))
    y = tn.permute(x, axes)
    back = tn.permute(y, tuple(np.argsort(axes)))
    assert np.array_equal(back.data, x.data)
    assert np.array_equal(np.sort(y.data.ravel()), x.data.ravel())


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_abs_square_gradcheck_property(seed):
    rng = np.random.default_rng(seed)
    x = leaf(away_from_zero(rng, (3, 4)))
    w = rng.standard_normal((3, 4))
    assert gradcheck(lambda: weighted_sum(tn.elementwise("abs", x), w)
                     + weighted_sum(tn.elementwise("square", x), w), [x]) < 1e-6
