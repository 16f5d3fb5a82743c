import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from agpad import tensor as T
from agpad.tensor import DimensionError, NumericError, Tensor, grad_check, precision

import gradcases
import oracles


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


# ---------------------------------------------------------------------------
# matmul


def test_matmul_identity():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(T.matmul(np.eye(2), a).data, a)


def test_matmul_projector_selects_row():
    out = T.matmul(np.array([[1.0, 0.0], [0.0, 0.0]]), np.array([[5.0, 6.0], [7.0, 8.0]]))
    np.testing.assert_array_equal(out.data, [[5, 6], [0, 0]])


@pytest.mark.parametrize("seed", range(5))
def test_matmul_matches_triple_loop(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    np.testing.assert_allclose(T.matmul(t64(a), t64(b)).data, oracles.matmul_loops(a, b), atol=1e-12)


def test_matmul_shape_error_reports_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(np.zeros((2, 3)), np.zeros((2, 3)))


# ---------------------------------------------------------------------------
# softmax


def test_softmax_cols_uniform():
    np.testing.assert_allclose(T.softmax_cols(np.zeros((3, 2))).data, np.full((3, 2), 1 / 3), atol=1e-7)


def test_softmax_cols_exact_exponentials():
    col = np.log([[1.0], [2.0], [3.0]])
    np.testing.assert_allclose(T.softmax_cols(t64(col)).data[:, 0], [1 / 6, 2 / 6, 3 / 6], atol=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_softmax_cols_matches_direct_formula(seed):
    x = np.random.default_rng(seed).standard_normal((5, 5))
    np.testing.assert_allclose(T.softmax_cols(t64(x)).data, oracles.softmax_cols_direct(x), atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 3), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_cols_stochastic_and_shift_invariant(x, c):
    p = T.softmax_cols(t64(x)).data
    np.testing.assert_allclose(p.sum(axis=0), 1.0, atol=1e-6)
    shifted = x.copy()
    shifted[:, 1] += c
    np.testing.assert_allclose(T.softmax_cols(t64(shifted)).data, p, atol=1e-12)


def test_softmax_cols_handles_large_logits():
    out = T.softmax_cols(np.array([[1000.0], [0.0]]))
    np.testing.assert_allclose(out.data[:, 0], [1.0, 0.0])


# ---------------------------------------------------------------------------
# conv2d / pooling


def test_conv_1x1_unit_kernel_is_identity():
    x = np.random.default_rng(0).random((1, 5, 5))
    out = T.conv2d(t64(x), t64(np.ones((1, 1, 1, 1))), t64(np.zeros(1)))
    np.testing.assert_array_equal(out.data, x)


def test_conv_delta_kernel_is_identity():
    x = np.random.default_rng(1).random((1, 6, 4))
    k = np.zeros((1, 1, 3, 3))
    k[0, 0, 1, 1] = 1
    out = T.conv2d(t64(x), t64(k), t64(np.zeros(1)), padding=1)
    np.testing.assert_array_equal(out.data, x)


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv_matches_loops(stride, padding):
    rng = np.random.default_rng(stride * 10 + padding)
    x, w, b = rng.standard_normal((2, 5, 5)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)
    out = T.conv2d(t64(x), t64(w), t64(b), stride=stride, padding=padding)
    np.testing.assert_allclose(out.data, oracles.conv2d_loops(x, w, b, stride, padding), atol=1e-12)


def test_conv_output_size_formula():
    out = T.conv2d(np.zeros((1, 7, 9)), np.zeros((2, 1, 3, 2)), np.zeros(2), stride=2, padding=1)
    assert out.shape == (2, (7 + 2 - 3) // 2 + 1, (9 + 2 - 2) // 2 + 1)


def test_conv_batched_equals_per_sample():
    rng = np.random.default_rng(3)
    x, w, b = rng.standard_normal((4, 2, 6, 6)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)
    batched = T.conv2d(t64(x), t64(w), t64(b), padding=1).data
    for i in range(4):
        np.testing.assert_allclose(batched[i], T.conv2d(t64(x[i]), t64(w), t64(b), padding=1).data, atol=1e-12)


def test_conv_kernel_too_large():
    with pytest.raises(DimensionError):
        T.conv2d(np.zeros((1, 2, 2)), np.zeros((1, 1, 5, 5)), np.zeros(1))


def test_maxpool_constant():
    out = T.maxpool2d(np.full((2, 4, 4), 3.0), 2, 2)
    np.testing.assert_array_equal(out.data, np.full((2, 2, 2), 3.0))


def test_maxpool_full_window():
    x = np.arange(16.0).reshape(1, 4, 4)
    assert T.maxpool2d(x, 4, 4).data.tolist() == [[[15.0]]]


def test_maxpool_28_to_7_matches_loops():
    x = np.random.default_rng(0).standard_normal((1, 28, 28))
    out = T.maxpool2d(t64(x), 4, 4)
    assert out.shape == (1, 7, 7)
    np.testing.assert_array_equal(out.data, oracles.maxpool_loops(x, 4, 4))


def test_maxpool_gradient_goes_to_first_tie():
    x = t64(np.ones((1, 2, 2)), grad=True)
    T.sum_all(T.maxpool2d(x, 2, 2)).backward()
    np.testing.assert_array_equal(x.grad, [[[1.0, 0.0], [0.0, 0.0]]])


def test_maxpool_window_too_big():
    with pytest.raises(DimensionError):
        T.maxpool2d(np.zeros((1, 3, 3)), 4, 4)


def test_gap_examples():
    assert T.global_avg_pool(np.full((3, 2, 2), 5.0)).data.tolist() == [5.0, 5.0, 5.0]
    assert T.global_avg_pool(np.array([[[1.0, 2.0], [3.0, 4.0]]])).data.tolist() == [2.5]
    x = np.random.default_rng(0).random((4, 5, 6)).astype(np.float32)
    np.testing.assert_allclose(T.global_avg_pool(x).data, x.astype(np.float64).mean(axis=(1, 2)), atol=1e-6)


# ---------------------------------------------------------------------------
# elementwise and structural


def test_add_zeros_and_shape_check():
    x = np.random.default_rng(0).random((2, 3)).astype(np.float32)
    np.testing.assert_array_equal(T.add(x, np.zeros((2, 3), dtype=np.float32)).data, x)
    with pytest.raises(DimensionError):
        T.add(np.zeros((2, 3)), np.zeros(3))
    with pytest.raises(DimensionError):
        T.mul(np.zeros((2, 3)), np.zeros((3, 2)))


def test_transpose_and_reshape_round_trip_bitwise():
    x = np.random.default_rng(0).random((3, 4, 5)).astype(np.float32)
    np.testing.assert_array_equal(T.transpose(T.transpose(x)).data, x)
    flat = T.reshape(x, (3, 20))
    assert T.reshape(flat, (3, 4, 5)).data.tobytes() == x.tobytes()


def test_relu_subgradient_at_zero_is_zero():
    x = t64([-1.0, 0.0, 2.0], grad=True)
    T.sum_all(T.relu(x)).backward()
    np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])


def test_scale_requires_scalar():
    with pytest.raises(DimensionError):
        T.scale(np.zeros((2, 2)), np.zeros(2))


def test_fan_out_accumulates():
    x = t64([3.0], grad=True)
    T.sum_all(T.add(T.mul(x, x), x)).backward()
    np.testing.assert_allclose(x.grad, [7.0])


def test_non_finite_is_an_error():
    with pytest.raises(NumericError):
        Tensor([1.0, np.nan])
    big = Tensor(np.array([3e38], dtype=np.float32))
    with pytest.raises(NumericError), np.errstate(over="ignore"):
        T.mul(big, big)


# ---------------------------------------------------------------------------
# cross-entropy


def test_cross_entropy_examples():
    assert T.softmax_cross_entropy([0.0, 0.0], 0).item() == pytest.approx(math.log(2), abs=1e-7)
    assert T.softmax_cross_entropy(t64([20.0, -20.0]), 0).item() == pytest.approx(0.0, abs=1e-15)
    z = np.random.default_rng(0).standard_normal(2)
    expected = -math.log(math.exp(z[1]) / (math.exp(z[0]) + math.exp(z[1])))
    assert T.softmax_cross_entropy(t64(z), 1).item() == pytest.approx(expected, abs=1e-12)


def test_cross_entropy_gradient_is_softmax_minus_onehot():
    z = t64([0.3, -1.2], grad=True)
    T.softmax_cross_entropy(z, 1).backward()
    p = np.exp(z.data) / np.exp(z.data).sum()
    np.testing.assert_allclose(z.grad, p - [0, 1], atol=1e-14)


def test_cross_entropy_rejects_bad_label():
    with pytest.raises(ValueError):
        T.softmax_cross_entropy([0.0, 0.0], 2)


# ---------------------------------------------------------------------------
# gradient checks


def test_grad_check_quadratic():
    x = t64([1.0, 2.0], grad=True)
    f = lambda: T.sum_all(T.mul(x, x))
    f().backward()
    np.testing.assert_allclose(x.grad, [2.0, 4.0])
    assert grad_check(f, [x]) < 1e-9


def test_grad_check_requires_float64():
    x = Tensor([1.0], requires_grad=True)
    with pytest.raises(TypeError):
        grad_check(lambda: T.sum_all(x), [x])


@pytest.mark.parametrize("seed", range(10))
def test_every_op_passes_grad_check(seed):
    with precision(np.float64):
        for name, params, f in gradcases.op_cases(np.random.default_rng(seed)):
            assert grad_check(f, params) < 1e-4, name


# ---------------------------------------------------------------------------
# AGTD files


def test_tensor_file_round_trip_bitwise(tmp_path):
    x = np.random.default_rng(0).standard_normal((3, 4, 5)).astype(np.float32)
    T.save_tensor(tmp_path / "x.agtd", x)
    y = T.load_tensor(tmp_path / "x.agtd")
    assert y.shape == x.shape and y.tobytes() == x.tobytes()


def test_tensor_file_layout():
    buf = io.BytesIO()
    T.write_tensor(buf, np.array([[1.0, 2.0, 3.0]], dtype=np.float32))
    raw = buf.getvalue()
    assert raw[:4] == b"AGTD"
    assert raw[4:8] == (1).to_bytes(4, "little")
    assert raw[8:12] == (2).to_bytes(4, "little")
    assert raw[12:20] == (1).to_bytes(4, "little") + (3).to_bytes(4, "little")
    assert np.frombuffer(raw[20:], "<f4").tolist() == [1.0, 2.0, 3.0]


def test_tensor_file_bad_magic():
    with pytest.raises(ValueError):
        T.read_tensor(io.BytesIO(b"NOPE" + bytes(8)))
