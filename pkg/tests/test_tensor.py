import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ash_lab import tensor as T
from ash_lab.nets import Module
from ash_lab.optim import Adam, FrozenParameterError, SGDMomentum, make_optimizer
from ash_lab.tensor import DimensionError, Tensor, grad_check


def loop_conv(x, w, b, stride, pad):
    """Nested-loop cross-correlation used as the independent oracle."""
    cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    xp = np.zeros((cin, h + 2 * pad, wd + 2 * pad))
    xp[:, pad : pad + h, pad : pad + wd] = x
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((cout, ho, wo))
    for o in range(cout):
        for i in range(ho):
            for j in range(wo):
                acc = b[o]
                for c in range(cin):
                    for di in range(k):
                        for dj in range(k):
                            acc += w[o, c, di, dj] * xp[c, i * stride + di, j * stride + dj]
                out[o, i, j] = acc
    return out


class TestConv2d:
    def test_identity_kernel(self):
        x = np.random.default_rng(0).normal(size=(1, 5, 4))
        out = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
        np.testing.assert_array_equal(out.data, x)

    def test_zero_weights(self):
        x = np.random.default_rng(1).normal(size=(2, 6, 6))
        out = T.conv2d(Tensor(x), Tensor(np.zeros((3, 2, 3, 3))), Tensor(np.zeros(3)), 1, 1)
        assert np.all(out.data == 0)

    def test_ones_3x3(self):
        out = T.conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)))
        assert out.shape == (1, 1, 1)
        assert out.data[0, 0, 0] == loop_conv(np.ones((1, 3, 3)), np.ones((1, 1, 3, 3)), np.zeros(1), 1, 0)[0, 0, 0] == 9

    @pytest.mark.parametrize("cin,cout,k,stride,pad,h", [(2, 3, 3, 1, 1, 6), (3, 2, 4, 2, 1, 8), (1, 4, 1, 1, 0, 5), (2, 2, 3, 1, 0, 7)])
    def test_matches_loop_oracle(self, cin, cout, k, stride, pad, h):
        rng = np.random.default_rng(cin * 100 + k)
        x, w, b = rng.normal(size=(cin, h, h)), rng.normal(size=(cout, cin, k, k)), rng.normal(size=cout)
        out = T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad)
        np.testing.assert_allclose(out.data, loop_conv(x, w, b, stride, pad), atol=1e-12)

    def test_channel_mismatch_names_axis(self):
        with pytest.raises(DimensionError) as ei:
            T.conv2d(Tensor(np.zeros((2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))
        assert ei.value.axis == "channel"

    def test_non_integer_output_extent(self):
        with pytest.raises(DimensionError) as ei:
            T.conv2d(Tensor(np.zeros((1, 64, 64))), Tensor(np.zeros((1, 1, 3, 3))), None, stride=2, pad=1)
        assert ei.value.axis == "height"

    @pytest.mark.parametrize("stride,pad,k", [(1, 1, 3), (2, 1, 4)])
    def test_grad_check_all_inputs(self, stride, pad, k):
        rng = np.random.default_rng(5)
        x, w, b = rng.normal(size=(2, 8, 8)), rng.normal(size=(3, 2, k, k)), rng.normal(size=3)
        probe = rng.normal(size=T.conv2d(Tensor(x), Tensor(w), Tensor(b), stride, pad).shape)
        assert grad_check(lambda t: (T.conv2d(t, Tensor(w), Tensor(b), stride, pad) * probe).sum(), x) <= 1e-6
        assert grad_check(lambda t: (T.conv2d(Tensor(x), t, Tensor(b), stride, pad) * probe).sum(), w) <= 1e-6
        assert grad_check(lambda t: (T.conv2d(Tensor(x), Tensor(w), t, stride, pad) * probe).sum(), b) <= 1e-6


class TestElementwise:
    def test_relu(self):
        np.testing.assert_array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])

    def test_matmul_channels_identity(self):
        f = np.random.default_rng(0).normal(size=(4, 3, 5))
        np.testing.assert_array_equal(T.matmul_channels(Tensor(np.eye(4)), Tensor(f)).data, f)

    def test_nearest_upsample(self):
        out = T.nearest_upsample(Tensor(np.full((1, 1, 1), 5.0)), 2)
        np.testing.assert_array_equal(out.data, np.full((1, 2, 2), 5.0))

    def test_avg_pool(self):
        x = np.arange(16.0).reshape(1, 4, 4)
        np.testing.assert_array_equal(T.avg_pool(Tensor(x), 2).data, [[[2.5, 4.5], [10.5, 12.5]]])
        with pytest.raises(DimensionError):
            T.avg_pool(Tensor(np.zeros((1, 5, 4))), 2)

    def test_broadcast_mismatch(self):
        with pytest.raises(DimensionError):
            T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 3))))

    def test_sigmoid_extremes_finite(self):
        out = T.sigmoid(Tensor([-1000.0, 0.0, 1000.0]))
        assert np.all(np.isfinite(out.data))
        np.testing.assert_allclose(out.data, [0, 0.5, 1])

    @pytest.mark.parametrize(
        "fn",
        [
            lambda t: T.relu(t),
            lambda t: T.leaky_relu(t, 0.2),
            lambda t: T.sigmoid(t),
            lambda t: T.exp(t * 0.3),
            lambda t: T.log(T.square(t) + 1.0),
            lambda t: T.sqrt(T.square(t) + 0.5),
            lambda t: T.absolute(t),
            lambda t: T.softmax(t, axis=0),
            lambda t: T.nearest_upsample(t, 2),
            lambda t: T.avg_pool(t, 2),
            lambda t: T.matmul_channels(Tensor(np.arange(9.0).reshape(3, 3) / 9), t),
            lambda t: T.concat([t, t * 2.0], axis=0),
            lambda t: t / (T.square(t) + 1.0),
            lambda t: T.clip(t, -0.5, 0.5),
            lambda t: t.mean(axis=(1, 2), keepdims=True) * t,
            lambda t: T.take_channels(t, np.arange(16).reshape(4, 4) % 3),
        ],
    )
    def test_grad_check_ops(self, fn):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(3, 4, 4))
        # keep away from relu / abs / clip kinks
        x = np.where(np.abs(x) < 0.05, 0.3, x)
        x = np.where(np.abs(np.abs(x) - 0.5) < 0.05, 0.3, x)
        probe = rng.normal(size=fn(Tensor(x)).shape)
        assert grad_check(lambda t: (fn(t) * probe).sum(), x) <= 1e-6

    def test_matmul_channels_grad_wrt_matrix(self):
        rng = np.random.default_rng(2)
        f = rng.normal(size=(3, 2, 2))
        probe = rng.normal(size=f.shape)
        assert grad_check(lambda q: (T.matmul_channels(q, Tensor(f)) * probe).sum(), rng.normal(size=(3, 3))) <= 1e-8


class TestBackward:
    def test_sum_grad_is_ones(self):
        x = Tensor(np.zeros((2, 2)), requires_grad=True)
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 2)))

    def test_square_grad(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        (x * x).sum().backward()
        np.testing.assert_array_equal(x.grad, [2.0, 4.0])

    def test_accumulates_and_zero_grad(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        (x * x).sum().backward()
        (x * x).sum().backward()
        np.testing.assert_array_equal(x.grad, [4.0, 8.0])
        x.zero_grad()
        assert x.grad is None

    def test_non_scalar_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ValueError):
            (x * 2.0).backward()

    def test_shared_leaf_two_consumers(self):
        rng = np.random.default_rng(3)
        w = rng.normal(size=(2, 2, 3, 3))

        def f(t):
            a = T.relu(T.conv2d(t, Tensor(w), None, 1, 1))
            b = T.sigmoid(t)
            return (a * b).sum() + T.square(t).mean()

        x = rng.normal(size=(2, 5, 5))
        assert grad_check(f, x) <= 1e-6

    def test_deep_chain_no_recursion_error(self):
        x = Tensor([1.0], requires_grad=True)
        y = x
        for _ in range(5000):
            y = y * 1.0
        y.sum().backward()
        assert x.grad[0] == 1.0

    def test_no_grad_records_nothing(self):
        x = Tensor([1.0], requires_grad=True)
        with T.no_grad():
            y = x * 3.0
        assert not y.requires_grad


class TestGradCheck:
    def test_linear_exact(self):
        assert grad_check(lambda t: t.sum(), np.random.default_rng(0).normal(size=(3, 3))) <= 1e-8

    def test_step_range(self):
        with pytest.raises(ValueError):
            grad_check(lambda t: t.sum(), np.zeros(2), h=1e-2)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_reports_coordinate(self):
        with pytest.raises(FloatingPointError, match="coordinate"):
            grad_check(lambda t: T.log(t).sum(), np.array([1.0, 1e-7]), h=1e-6)

    def test_detects_wrong_gradient(self):
        def bad(t):
            out = T.square(t)
            out._backward = lambda g: (g * 3.0,)
            return out.sum()

        assert grad_check(bad, np.array([1.0, 2.0])) > 0.1

    def test_tiny_segnet_loss(self):
        from ash_lab.training import seg_loss

        rng = np.random.default_rng(4)
        w1, w2 = rng.normal(size=(4, 3, 3, 3)) * 0.5, rng.normal(size=(3, 4, 1, 1)) * 0.5
        x = rng.random((3, 8, 8))
        labels = rng.integers(0, 3, (8, 8))

        def loss(w):
            h = T.relu(T.conv2d(Tensor(x), w, None, 1, 1))
            return seg_loss(T.softmax(T.conv2d(h, Tensor(w2)), 0), labels)

        assert grad_check(loss, w1) <= 1e-4


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=20, deadline=None)
def test_forward_deterministic(seed):
    rng = np.random.default_rng(seed)
    x, w = rng.normal(size=(2, 6, 6)), rng.normal(size=(3, 2, 3, 3))
    a = T.softmax(T.conv2d(Tensor(x), Tensor(w), None, 1, 1), 0).data
    b = T.softmax(T.conv2d(Tensor(x.copy()), Tensor(w.copy()), None, 1, 1), 0).data
    assert a.tobytes() == b.tobytes()


class _One(Module):
    def __init__(self, value=0.0, n=1):
        super().__init__()
        self.params["p"] = Tensor(np.full(n, value), requires_grad=True)


class TestOptimizers:
    def test_sgd_first_step_plain(self):
        m = _One(1.0)
        opt = SGDMomentum(m, 0.1, 0.9)
        m.params["p"].grad = np.ones(1)
        opt.step()
        np.testing.assert_allclose(m.params["p"].data, [0.9])

    def test_sgd_two_steps(self):
        # v1 = 1, v2 = 0.9 + 1 = 1.9 -> total 0.1 * (1 + 1.9) = 0.29
        m = _One(0.0)
        opt = SGDMomentum(m, 0.1, 0.9)
        for _ in range(2):
            m.params["p"].grad = np.ones(1)
            opt.step()
        np.testing.assert_allclose(m.params["p"].data, [-0.29], atol=1e-15)

    @pytest.mark.parametrize("kind", ["sgd_momentum", "adam"])
    def test_zero_grad_no_change(self, kind):
        m = _One(0.7, 3)
        opt = make_optimizer(kind, m, 0.1)
        m.params["p"].grad = np.zeros(3)
        opt.step()
        np.testing.assert_array_equal(m.params["p"].data, np.full(3, 0.7))

    def test_adam_first_step_is_lr_sign(self):
        m = _One(0.0, 2)
        opt = Adam(m, 0.01)
        m.params["p"].grad = np.array([3.0, -0.5])
        opt.step()
        np.testing.assert_allclose(m.params["p"].data, [-0.01, 0.01], rtol=1e-6)

    def test_missing_grads_listed(self):
        m = _One()
        with pytest.raises(RuntimeError, match="p"):
            SGDMomentum(m, 0.1).step()

    def test_frozen_module_rejected(self):
        m = _One()
        m.frozen = True
        m.params["p"].grad = np.ones(1)
        with pytest.raises(FrozenParameterError):
            SGDMomentum(m, 0.1).step()

    def test_bad_lr(self):
        with pytest.raises(ValueError):
            SGDMomentum(_One(), 0.0)
