import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import gradcheck
from lvc import tensor as T
from lvc.nn import Conv, Module, WeightFileError, parse_weights, save_weights
from lvc.tensor import ContractError, DimensionError, NonFiniteError, Tensor
from oracles import conv_loops


class TestConvExamples:
    def test_scalar_kernel_scales(self):
        out = T.conv2d(np.ones((1, 3, 3)), np.full((1, 1, 1, 1), 2.0))
        assert out.shape == (1, 3, 3)
        assert np.all(out.data == 2.0)

    def test_zero_padding_single_pixel(self):
        out = T.conv2d(np.array([[[5.0]]]), np.ones((1, 1, 3, 3)), stride=1, padding=1)
        assert out.shape == (1, 1, 1)
        assert out.data[0, 0, 0] == 5.0

    def test_random_multichannel_matches_loops(self, rng):
        x = rng.normal(size=(2, 8, 8))
        k = rng.normal(size=(4, 2, 3, 3))
        assert np.max(np.abs(T.conv2d(x, k).data - conv_loops(x, k))) < 1e-12

    def test_output_size_formula(self):
        out = T.conv2d(np.zeros((1, 9, 7)), np.zeros((1, 1, 3, 3)), stride=2, padding=1)
        assert out.shape == (1, (9 + 2 - 3) // 2 + 1, (7 + 2 - 3) // 2 + 1)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            T.conv2d(np.zeros((2, 5, 5)), np.zeros((1, 3, 3, 3)))

    def test_even_kernel_rejected(self):
        with pytest.raises(ContractError):
            T.conv2d(np.zeros((1, 5, 5)), np.zeros((1, 1, 2, 2)))


def test_conv_matches_oracle_on_random_configs():
    rng = np.random.default_rng(7)
    for case in range(120):
        cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        kh = int(rng.choice([1, 3, 5]))
        kw = kh if case % 3 else int(rng.choice([1, 3]))
        stride, pad = int(rng.integers(1, 4)), int(rng.integers(0, 3))
        h, w = int(rng.integers(kh, 10)), int(rng.integers(kw, 10))
        x = rng.normal(size=(cin, h, w))
        k = rng.normal(size=(cout, cin, kh, kw))
        got = T.conv2d(x, k, stride, pad).data
        assert np.max(np.abs(got - conv_loops(x, k, stride, pad))) < 1e-12, (case, cin, cout, kh, stride, pad)


def test_batched_conv_equals_per_sample(rng):
    x = rng.normal(size=(3, 2, 6, 6))
    k = rng.normal(size=(2, 2, 3, 3))
    out = T.conv2d(x, k, 2, 1).data
    for i in range(3):
        np.testing.assert_array_equal(out[i], T.conv2d(x[i], k, 2, 1).data)


class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        T.backward(T.sum_(x))
        np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])

    def test_square_gradient(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        T.backward(T.sum_(x * x))
        np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])

    def test_non_scalar_loss_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ContractError):
            T.backward(x * 2.0)

    def test_shared_subexpression_accumulates(self):
        x = Tensor(3.0, requires_grad=True)
        y = x * x
        T.backward(y + y)
        assert x.grad == 12.0

    def test_deep_chain_is_iterative(self):
        x = Tensor(1.0, requires_grad=True)
        y = x
        for _ in range(5000):
            y = y + 0.0
        T.backward(y)
        assert x.grad == 1.0

    def test_backward_deterministic(self, rng):
        a = rng.normal(size=(2, 5, 5))
        k = rng.normal(size=(3, 2, 3, 3))
        grads = []
        for _ in range(2):
            x = Tensor(a, requires_grad=True)
            kk = Tensor(k, requires_grad=True)
            T.backward(T.sum_(T.tanh(T.conv2d(x, kk, 1, 1))))
            grads.append((x.grad.copy(), kk.grad.copy()))
        np.testing.assert_array_equal(grads[0][0], grads[1][0])
        np.testing.assert_array_equal(grads[0][1], grads[1][1])


def test_non_finite_values_raise():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, np.nan])
    with pytest.raises(NonFiniteError):
        T.exp(Tensor([1000.0]))


def test_domain_errors():
    with pytest.raises(ContractError):
        T.log(Tensor([0.0, 1.0]))
    with pytest.raises(ContractError):
        T.sqrt(Tensor([-1.0]))


# ---------------------------------------------------------------------------
# gradient checks, one per primitive
# ---------------------------------------------------------------------------

R = np.random.default_rng(99)
A = R.normal(size=(3, 4))
B = R.normal(size=(3, 4))
POS = R.uniform(0.5, 2.0, size=(3, 4))
AWAY = np.where(np.abs(A) < 0.1, 0.3, A)  # keep kinks out of the FD stencil

OP_CASES = {
    "add": (lambda a, b: a + b, [A, B]),
    "add_broadcast": (lambda a, b: a + b, [A, B[:1]]),
    "sub": (lambda a, b: a - b, [A, B]),
    "neg": (lambda a: -a, [A]),
    "mul": (lambda a, b: a * b, [A, B]),
    "mul_broadcast": (lambda a, b: a * b, [A, B[:, :1]]),
    "div": (lambda a, b: a / b, [A, POS]),
    "matmul": (lambda a, b: a @ b, [A, B.T]),
    "leaky_relu": (lambda a: T.leaky_relu(a), [AWAY]),
    "sigmoid": (lambda a: T.sigmoid(a), [A]),
    "tanh": (lambda a: T.tanh(a), [A]),
    "exp": (lambda a: T.exp(a), [A]),
    "log": (lambda a: T.log(a), [POS]),
    "abs": (lambda a: T.abs_(a), [AWAY]),
    "sqrt": (lambda a: T.sqrt(a), [POS]),
    "power": (lambda a: T.power(a, 0.37), [POS]),
    "clamp_min": (lambda a: T.clamp_min(a, 0.0), [AWAY]),
    "sum_axis": (lambda a: T.sum_(a, axis=1), [A]),
    "sum_keepdims": (lambda a: T.sum_(a, axis=0, keepdims=True), [A]),
    "mean": (lambda a: T.mean(a, axis=(0, 1)), [A]),
    "reshape": (lambda a: T.reshape(a, (2, 6)) * np.arange(12.0).reshape(2, 6), [A]),
    "concat": (lambda a, b: T.concat([a, b], axis=1), [A, B]),
    "slice": (lambda a: a[1:, ::2], [A]),
    "softmax": (lambda a: T.softmax(a, axis=0), [A]),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_elementwise_and_shape_ops_gradcheck(name):
    fn, arrays = OP_CASES[name]
    assert gradcheck(fn, arrays) < 1e-4


def test_downsample_upsample_gradcheck(rng):
    x = rng.normal(size=(2, 5, 7))
    assert gradcheck(T.downsample2, [x]) < 1e-4
    assert gradcheck(T.upsample2, [x]) < 1e-4


@pytest.mark.parametrize("cin,cout,stride,pad,batched", [
    (1, 1, 1, 1, False), (2, 3, 1, 1, False), (2, 3, 2, 1, True), (3, 2, 2, 0, False), (1, 1, 2, 2, True),
])
def test_conv_gradcheck(cin, cout, stride, pad, batched):
    rng = np.random.default_rng(cin * 10 + cout)
    shape = (2, cin, 6, 5) if batched else (cin, 6, 5)
    x = rng.normal(size=shape)
    k = rng.normal(size=(cout, cin, 3, 3))
    assert gradcheck(lambda a, b: T.conv2d(a, b, stride, pad), [x, k]) < 1e-4


def test_rectangular_kernel_gradcheck(rng):
    x = rng.normal(size=(2, 1, 12, 12))
    assert gradcheck(lambda a, b: T.conv2d(a, b), [x, rng.normal(size=(1, 1, 1, 5))]) < 1e-4
    assert gradcheck(lambda a, b: T.conv2d(a, b), [x, rng.normal(size=(1, 1, 5, 1))]) < 1e-4


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(3, 7), st.integers(0, 2**31 - 1))
def test_composite_graph_gradcheck(cin, cout, size, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(cin, size, size))
    k = rng.normal(size=(cout, cin, 3, 3)) * 0.5

    def fn(a, b):
        h = T.tanh(T.conv2d(a, b, 1, 1))
        return T.softmax(T.concat([h, T.sigmoid(h)], axis=0), axis=0) * T.mean(T.upsample2(T.downsample2(h + 1.0)))

    assert gradcheck(fn, [x, k], seed=seed % 1000) < 1e-4


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class TestAdam:
    def test_zero_grad_leaves_params(self):
        p = {"w": Tensor(np.array([1.0, -2.0]), requires_grad=True)}
        T.adam_step(p, {"w": np.zeros(2)}, T.AdamState())
        np.testing.assert_array_equal(p["w"].data, [1.0, -2.0])

    def test_first_step_moves_by_lr(self):
        p = {"w": Tensor(np.array(1.0), requires_grad=True)}
        T.adam_step(p, {"w": np.array(1.0)}, T.AdamState(), lr=0.1)
        # bias-corrected m/sqrt(v) = 1 on the first step
        assert abs(p["w"].data - (1.0 - 0.1 / (1.0 + 1e-8))) < 1e-15

    def test_hand_evaluated_second_step(self):
        p = {"w": Tensor(np.array(0.0), requires_grad=True)}
        s = T.AdamState()
        T.adam_step(p, {"w": np.array(1.0)}, s, lr=0.01)
        T.adam_step(p, {"w": np.array(-0.5)}, s, lr=0.01)
        m = 0.9 * 0.1 + 0.1 * -0.5
        v = 0.999 * 0.001 + 0.001 * 0.25
        step2 = 0.01 * (m / (1 - 0.81)) / (np.sqrt(v / (1 - 0.999**2)) + 1e-8)
        assert abs(p["w"].data - (-0.01 / (1 + 1e-8) - step2)) < 1e-15

    def test_shape_mismatch(self):
        p = {"w": Tensor(np.zeros(3), requires_grad=True)}
        with pytest.raises(DimensionError):
            T.adam_step(p, {"w": np.zeros(2)}, T.AdamState())

    def test_identical_runs_bitwise(self):
        def run():
            rng = np.random.default_rng(5)
            conv = Conv(2, 2, rng)
            params = conv.parameters()
            state = T.AdamState()
            x = rng.normal(size=(2, 6, 6))
            for _ in range(5):
                conv.zero_grad()
                T.backward(T.mean(T.tanh(conv(Tensor(x)))))
                T.adam_step(params, {k: v.grad for k, v in params.items()}, state, lr=0.01)
            return [v.data.copy() for v in params.values()]

        for a, b in zip(run(), run()):
            np.testing.assert_array_equal(a, b)


# ---------------------------------------------------------------------------
# modules and weight files
# ---------------------------------------------------------------------------


class Pair(Module):
    def __init__(self, rng):
        self.first = Conv(2, 3, rng)
        self.rest = [Conv(3, 3, rng), [Conv(3, 1, rng, k=1)]]


def test_conv_init_range():
    conv = Conv(4, 8, np.random.default_rng(0), k=3)
    s = np.sqrt(1.0 / (4 * 9))
    assert np.abs(conv.weight.data).max() <= s
    assert np.abs(conv.weight.data).max() > 0.9 * s
    assert np.all(conv.bias.data == 0)


def test_named_parameters_cover_nested_lists():
    names = set(Pair(np.random.default_rng(0)).parameters())
    assert names == {"first.weight", "first.bias", "rest.0.weight", "rest.0.bias",
                     "rest.1.0.weight", "rest.1.0.bias"}


def test_weight_file_round_trip_bitwise(tmp_path):
    net = Pair(np.random.default_rng(3))
    arch = {"variant": "TEST", "widths": [2, 3]}
    raw = save_weights(tmp_path / "m.lvcm", arch, net.state_dict())
    assert raw[:4] == b"LVCM"
    assert (tmp_path / "m.lvcm").read_bytes() == raw
    arch2, weights = parse_weights(raw)
    assert arch2 == arch
    for k, v in net.state_dict().items():
        assert weights[k].tobytes() == v.tobytes()
    again = save_weights(io.BytesIO(), arch2, weights)
    assert again == raw


def test_weight_file_layout_by_hand():
    raw = save_weights(io.BytesIO(), {}, {"w": np.array([[1.5, -2.0]])})
    arch = b"{}"
    expected = (b"LVCM" + (1).to_bytes(4, "little") + len(arch).to_bytes(4, "little") + arch
                + (1).to_bytes(4, "little") + b"w" + bytes([2]) + (1).to_bytes(4, "little")
                + (2).to_bytes(4, "little") + np.array([1.5, -2.0], dtype="<f8").tobytes())
    assert raw == expected


def test_weight_file_errors():
    with pytest.raises(WeightFileError):
        parse_weights(b"NOPE" + bytes(8))
    raw = save_weights(io.BytesIO(), {}, {"w": np.ones(3)})
    with pytest.raises(WeightFileError):
        parse_weights(raw[:-3])
    net = Pair(np.random.default_rng(0))
    with pytest.raises(WeightFileError):
        net.load_state_dict({"first.weight": np.zeros((3, 2, 3, 3))})
