import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aimfas import autodiff as ad
from aimfas.autodiff import Tensor

RTOL, ATOL = 1e-4, 1e-6


def leaf(x):
    return Tensor(x, requires_grad=True)


# -- forward primitives ------------------------------------------------------


def test_mean_of_two_by_two():
    assert ad.mean(Tensor([[1.0, 2.0], [3.0, 4.0]])).item() == 2.5


def test_concat_on_channel_axis():
    out = ad.concat([Tensor(np.zeros((4, 4, 8))), Tensor(np.zeros((4, 4, 16)))], axis=-1)
    assert out.shape == (4, 4, 24)


def test_conv2d_of_zero_input_is_zero():
    rng = np.random.default_rng(0)
    out = ad.conv2d(Tensor(np.zeros((2, 5, 5, 3))), Tensor(rng.normal(size=(3, 3, 3, 4))))
    assert out.shape == (2, 5, 5, 4)
    assert np.all(out.data == 0.0)


def test_conv2d_matches_direct_loops():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 5, 4, 3))
    w = rng.normal(size=(3, 3, 3, 2))
    out = ad.conv2d(Tensor(x), Tensor(w)).data
    padded = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    expected = np.zeros((2, 5, 4, 2))
    for n in range(2):
        for i in range(5):
            for j in range(4):
                for o in range(2):
                    expected[n, i, j, o] = np.sum(padded[n, i:i + 3, j:j + 3, :] * w[..., o])
    np.testing.assert_allclose(out, expected, rtol=1e-12, atol=1e-12)


def test_max_pool_picks_window_maxima():
    x = np.arange(16.0).reshape(1, 4, 4, 1)
    out = ad.max_pool2d(Tensor(x), 2).data[0, :, :, 0]
    np.testing.assert_array_equal(out, [[5.0, 7.0], [13.0, 15.0]])


@pytest.mark.parametrize(
    "call, primitive",
    [
        (lambda: ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2)))), "matmul"),
        (lambda: ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2)))), "add"),
        (lambda: ad.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3)))], axis=1), "concat"),
        (lambda: ad.conv2d(Tensor(np.ones((1, 4, 4, 2))), Tensor(np.ones((3, 3, 3, 1)))), "conv2d"),
        (lambda: ad.max_pool2d(Tensor(np.ones((1, 3, 4, 1))), 2), "max_pool2d"),
        (lambda: ad.reshape(Tensor(np.ones(6)), (4,)), "reshape"),
    ],
)
def test_shape_errors_name_the_primitive(call, primitive):
    with pytest.raises(ad.ShapeError) as exc:
        call()
    assert exc.value.primitive == primitive
    assert primitive in str(exc.value)


def test_no_graph_without_requires_grad():
    a, b = Tensor([1.0, 2.0]), Tensor([3.0, 4.0])
    out = a * b
    assert not out.requires_grad and out.grad_fn is None


def test_trace_records_only_differentiable_ops_and_replays_exactly():
    rng = np.random.default_rng(2)
    w = leaf(rng.normal(size=(3, 3, 2, 4)))
    x = Tensor(rng.normal(size=(2, 6, 6, 2)))
    with ad.ComputationTrace() as trace:
        h = ad.relu(ad.conv2d(x, w))
        _ = ad.mean(ad.square(ad.max_pool2d(h, 2)))
        _ = x * x  # no gradient involved, not recorded
    recorded = [out.data for _, out in trace.entries]
    replayed = trace.replay()
    assert len(replayed) == len(trace) > 0
    for a, b in zip(recorded, replayed):
        assert np.array_equal(a, b)


def test_forward_is_bit_deterministic():
    rng = np.random.default_rng(3)
    w = rng.normal(size=(3, 3, 3, 5))
    x = rng.normal(size=(2, 8, 8, 3))
    a = ad.mean(ad.relu(ad.conv2d(Tensor(x), leaf(w)))).data
    b = ad.mean(ad.relu(ad.conv2d(Tensor(x), leaf(w)))).data
    assert a.tobytes() == b.tobytes()


def test_float32_option():
    ad.set_default_dtype(np.float32)
    try:
        t = leaf([1.0, 2.0])
        assert t.data.dtype == np.float32
        g = ad.grad(ad.tsum(ad.square(t)), t)
        assert g.data.dtype == np.float32
        np.testing.assert_allclose(g.data, [2.0, 4.0])
    finally:
        ad.set_default_dtype(np.float64)
    assert leaf(1.0).data.dtype == np.float64


# -- grad ---------------------------------------------------------------------


def test_grad_of_square():
    th = leaf(3.0)
    assert ad.grad(th * th, th).item() == 6.0


def test_grad_of_linear_regression_residual():
    th = leaf(0.0)
    loss = ad.square(th * 1.0 - 2.0)
    # hand-expanded: 2 * (theta * x - y) * x = 2 * (0 - 2) * 1
    assert ad.grad(loss, th).item() == -4.0


def test_second_order_of_cube():
    th = leaf(2.0)
    g = ad.grad(th * th * th, th, create_graph=True)
    assert g.requires_grad
    assert g.item() == pytest.approx(12.0)  # 3 theta^2
    # d/dtheta 3 theta^2 = 6 theta
    assert ad.grad(g, th).item() == pytest.approx(12.0)


def test_grad_structure_follows_wrt():
    a, b = leaf(1.0), leaf(2.0)
    loss = a * b
    d = ad.grad(loss, {"a": a, "b": b})
    assert set(d) == {"a", "b"} and d["a"].item() == 2.0 and d["b"].item() == 1.0
    lst = ad.grad(loss, [a, b])
    assert [t.item() for t in lst] == [2.0, 1.0]


def test_grad_rejects_non_scalar_loss():
    a = leaf([1.0, 2.0])
    with pytest.raises(ad.GradientError, match="scalar"):
        ad.grad(a * a, a)


def test_grad_rejects_detached_weight():
    a, b = leaf(1.0), leaf(2.0)
    with pytest.raises(ad.GradientError, match="not on the trace"):
        ad.grad(a * a, [a, b])
    zero = ad.grad(a * a, [a, b], allow_unused=True)[1]
    assert zero.item() == 0.0


def test_grad_rejects_tensor_without_requires_grad():
    a, c = leaf(1.0), Tensor(3.0)
    with pytest.raises(ad.GradientError, match="does not require grad"):
        ad.grad(a * c, c)


def test_gradient_wrt_nested_intermediates():
    # b depends on a; both requested: the path a -> b -> loss must count
    a = leaf(3.0)
    b = a * a
    loss = b * a
    ga, gb = ad.grad(loss, [a, b])
    assert ga.item() == pytest.approx(27.0)  # d(a^3)/da
    assert gb.item() == pytest.approx(3.0)


class _Counting(ad.Function):
    calls = 0

    def forward(self, a):
        return a * 1.0

    def backward(self, g):
        _Counting.calls += 1
        return (g,)


def test_backward_visits_each_node_once():
    _Counting.calls = 0
    a = leaf(2.0)
    mid = _Counting.apply(a)
    loss = mid * mid + mid * 3.0  # mid has three consumers
    assert ad.grad(loss, a).item() == pytest.approx(2 * 2.0 + 3.0)
    assert _Counting.calls == 1


# -- finite differences ---------------------------------------------------------


def test_finite_difference_of_square():
    g = ad.finite_difference_gradient(lambda t: t * t, leaf(3.0), epsilon=1e-4)
    assert abs(float(g) - 6.0) < 1e-6


def test_finite_difference_of_constant():
    w = {"a": leaf(np.ones(3)), "b": leaf(np.ones((2, 2)))}
    g = ad.finite_difference_gradient(lambda ws: Tensor(5.0), w)
    assert all(np.all(v == 0.0) for v in g.values())


def test_finite_difference_rejects_non_finite_value():
    with pytest.raises(ad.GradientError, match="non-finite"):
        ad.finite_difference_gradient(lambda t: ad.log(t), leaf(-1.0))


def _mlp_loss(w, x, y):
    h = ad.relu(x @ w["w1"] + w["b1"])
    out = h @ w["w2"] + w["b2"]
    return ad.mean(ad.square(out - y))


def test_two_layer_perceptron_matches_finite_differences():
    rng = np.random.default_rng(4)
    x, y = Tensor(rng.normal(size=(6, 3))), Tensor(rng.normal(size=(6, 2)))
    w = {
        "w1": leaf(rng.normal(size=(3, 5))),
        "b1": leaf(rng.normal(size=5) * 0.1),
        "w2": leaf(rng.normal(size=(5, 2))),
        "b2": leaf(np.zeros(2)),
    }
    analytic = ad.grad(_mlp_loss(w, x, y), w)
    numeric = ad.finite_difference_gradient(lambda ws: _mlp_loss(ws, x, y), w)
    ok, worst = ad.gradients_close(analytic, numeric, RTOL, ATOL)
    assert ok, worst


# -- randomized primitive checks ------------------------------------------------


def _positive(rng, shape):
    return rng.uniform(0.5, 2.0, size=shape)


# each entry: input shapes, input generator, scalar function of the inputs
PRIMITIVES = {
    "add": ([(3, 4), (3, 4)], None, lambda a, b: ad.tsum(ad.square(a + b))),
    "add_broadcast": ([(3, 4), (4,)], None, lambda a, b: ad.tsum(ad.square(a + b))),
    "sub": ([(3, 4), (3, 4)], None, lambda a, b: ad.tsum(ad.square(a - b))),
    "mul": ([(3, 4), (3, 4)], None, lambda a, b: ad.tsum(a * b * a)),
    "div": ([(3, 4), (3, 4)], _positive, lambda a, b: ad.tsum(a / b)),
    "scale_neg": ([(5,)], None, lambda a: ad.tsum(ad.square(-ad.scale(a, 2.5)))),
    "power": ([(5,)], _positive, lambda a: ad.tsum(ad.power(a, 3))),
    "exp_log": ([(5,)], _positive, lambda a: ad.tsum(ad.exp(a) + ad.log(a) * a)),
    "sigmoid": ([(6,)], None, lambda a: ad.tsum(ad.sigmoid(a) * a)),
    "softplus": ([(6,)], None, lambda a: ad.tsum(ad.softplus(a) * a)),
    "relu": ([(4, 5)], None, lambda a: ad.tsum(ad.square(ad.relu(a)))),
    "matmul": ([(3, 4), (4, 2)], None, lambda a, b: ad.tsum(ad.square(a @ b))),
    "transpose": ([(3, 4)], None, lambda a: ad.tsum(ad.square(ad.transpose(a)) @ a)),
    "reshape": ([(3, 4)], None, lambda a: ad.tsum(ad.square(ad.reshape(a, (2, 6))) * ad.reshape(a, (2, 6)))),
    "sum_axis": ([(3, 4, 2)], None, lambda a: ad.tsum(ad.square(ad.tsum(a, axis=(0, 2))))),
    "mean": ([(3, 4)], None, lambda a: ad.square(ad.mean(a * a))),
    "square": ([(4,)], None, lambda a: ad.tsum(ad.square(ad.square(a)))),
    "concat": ([(2, 3, 2), (2, 3, 4)], None, lambda a, b: ad.tsum(ad.square(ad.concat([a, b], axis=-1)) * ad.concat([b, a], axis=-1))),
    "conv2d": ([(2, 5, 5, 2), (3, 3, 2, 3), (3,)], None, lambda x, w, b: ad.tsum(ad.square(ad.conv2d(x, w, b)))),
    "max_pool2d": ([(1, 4, 4, 2)], None, lambda a: ad.tsum(ad.square(ad.max_pool2d(a * a, 2)))),
    "avg_pool2d": ([(1, 4, 4, 2)], None, lambda a: ad.tsum(ad.square(ad.avg_pool2d(a, 2)) * ad.avg_pool2d(a, 2))),
}


def _inputs(name, seed):
    shapes, gen, fn = PRIMITIVES[name]
    rng = np.random.default_rng(seed)
    gen = gen or (lambda r, s: r.normal(size=s))
    return [leaf(gen(rng, s)) for s in shapes], fn


@settings(max_examples=8, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_finite_differences(name, seed):
    inputs, fn = _inputs(name, seed)
    analytic = ad.grad(fn(*inputs), inputs)
    numeric = ad.finite_difference_gradient(lambda ts: fn(*ts), inputs)
    ok, worst = ad.gradients_close(analytic, numeric, RTOL, ATOL)
    assert ok, (name, worst)


@settings(max_examples=4, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_second_order_matches_finite_difference_of_gradients(name, seed):
    inputs, fn = _inputs(name, seed)
    rng = np.random.default_rng(seed + 1)
    probes = [Tensor(rng.normal(size=t.shape)) for t in inputs]

    def directional(ts, create_graph):
        gs = ad.grad(fn(*ts), ts, create_graph=create_graph)
        return sum((ad.tsum(g * p) for g, p in zip(gs, probes)), Tensor(0.0))

    analytic = ad.grad(directional(inputs, True), inputs, allow_unused=True)

    def first_order_only(ts):
        with ad.set_grad_enabled(True):
            ts = [leaf(t.data) for t in ts]
            return directional(ts, False)

    numeric = ad.finite_difference_gradient(first_order_only, inputs)
    ok, worst = ad.gradients_close(analytic, numeric, rtol=1e-3, atol=1e-6)
    assert ok, (name, worst)
