"""Engine tests: every op pinned against the float64 oracles in oracles.py."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tlab.tensor import (
    GradientTape,
    ShapeError,
    TapeUsageError,
    Tensor,
    add,
    backward,
    conv2d,
    flatten,
    matmul,
    max_pool2d,
    mul,
    relu,
    reshape,
    softmax_cross_entropy,
    stable_softmax,
    sub,
    sum_all,
)

from oracles import (
    central_difference,
    conv2d_ref,
    cross_entropy_ref,
    grads_close,
    matmul_ref,
    max_pool2d_ref,
    relu_ref,
    softmax_ref,
)

RNG = np.random.default_rng(20260815)


def tape_grads(build_loss, arrays):
    """Run build_loss on watched tensors, return engine grads as float arrays."""
    tensors = [Tensor(a) for a in arrays]
    with GradientTape() as tape:
        for t in tensors:
            tape.watch(t)
        loss = build_loss(*tensors)
    grads = backward(tape, loss)
    return [grads[t.tid].data for t in tensors]


# ---------------------------------------------------------------- forwards


def test_conv2d_identity_kernel_is_identity():
    x = RNG.normal(size=(1, 1, 3, 3)).astype(np.float32)
    k = np.ones((1, 1, 1, 1), dtype=np.float32)
    out = conv2d(Tensor(x), Tensor(k))
    assert np.array_equal(out.data, x)


def test_conv2d_matches_reference_with_stride_and_pad():
    x = RNG.normal(size=(2, 3, 7, 6)).astype(np.float32)
    k = RNG.normal(size=(4, 3, 3, 3)).astype(np.float32)
    for stride, pad in [(1, 0), (1, 2), (2, 1), (3, 0)]:
        got = conv2d(Tensor(x), Tensor(k), stride=stride, pad=pad).data
        want = conv2d_ref(x, k, stride=stride, pad=pad)
        assert got.shape == want.shape
        assert np.allclose(got, want, atol=1e-4)


def test_conv2d_output_extent_floors_leftover_rows():
    x = Tensor(np.zeros((1, 1, 5, 5), dtype=np.float32))
    k = Tensor(np.zeros((1, 1, 2, 2), dtype=np.float32))
    assert conv2d(x, k, stride=2).shape == (1, 1, 2, 2)


def test_max_pool_matches_reference():
    x = RNG.normal(size=(2, 3, 8, 6)).astype(np.float32)
    got = max_pool2d(Tensor(x)).data
    assert np.allclose(got, max_pool2d_ref(x))


def test_relu_and_matmul_match_reference():
    x = RNG.normal(size=(4, 5)).astype(np.float32)
    w = RNG.normal(size=(5, 3)).astype(np.float32)
    assert np.allclose(relu(Tensor(x)).data, relu_ref(x))
    assert np.allclose(matmul(Tensor(x), Tensor(w)).data, matmul_ref(x, w), atol=1e-5)


def test_cross_entropy_uniform_logits_is_log_k():
    for k in (2, 10, 31):
        logits = np.zeros((5, k), dtype=np.float32)
        labels = np.arange(5) % k
        loss = softmax_cross_entropy(Tensor(logits), labels)
        assert abs(loss.item() - np.log(k)) < 1e-6


def test_cross_entropy_matches_reference():
    z = RNG.normal(size=(6, 4)).astype(np.float32) * 3
    y = RNG.integers(0, 4, size=6)
    loss = softmax_cross_entropy(Tensor(z), y)
    assert abs(loss.item() - cross_entropy_ref(z, y)) < 1e-5


def test_cross_entropy_is_finite_for_huge_logits():
    z = np.array([[1e4, -1e4, 0.0], [3e4, 3e4, 3e4]], dtype=np.float32)
    loss = softmax_cross_entropy(Tensor(z), np.array([0, 1]))
    assert np.isfinite(loss.item())
    z2 = np.array([[-1e4, 1e4]], dtype=np.float32)
    loss2 = softmax_cross_entropy(Tensor(z2), np.array([0]))
    assert np.isfinite(loss2.item()) and loss2.item() > 1000


def test_stable_softmax_rows_sum_to_one():
    z = RNG.normal(size=(8, 6)).astype(np.float32) * 50
    p = stable_softmax(z)
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-5)
    assert np.allclose(p, softmax_ref(z), atol=1e-5)


# ---------------------------------------------------------------- gradients


def test_matmul_gradients_match_finite_differences():
    a = RNG.normal(size=(3, 4))
    b = RNG.normal(size=(4, 2))
    got_a, got_b = tape_grads(lambda x, y: sum_all(matmul(x, y)), [a, b])
    f = lambda x, y: float(matmul_ref(x, y).sum())
    assert grads_close(got_a, central_difference(f, [a, b], 0))
    assert grads_close(got_b, central_difference(f, [a, b], 1))


def test_cross_entropy_of_linear_model_matches_finite_differences():
    x = RNG.normal(size=(5, 4))
    w = RNG.normal(size=(4, 3))
    y = RNG.integers(0, 3, size=5)
    build = lambda xt, wt: softmax_cross_entropy(matmul(xt, wt), y)
    got_x, got_w = tape_grads(build, [x, w])
    f = lambda xa, wa: cross_entropy_ref(matmul_ref(xa, wa), y)
    assert grads_close(got_x, central_difference(f, [x, w], 0))
    assert grads_close(got_w, central_difference(f, [x, w], 1))


def test_conv2d_gradients_match_finite_differences():
    x = RNG.normal(size=(2, 2, 5, 5))
    k = RNG.normal(size=(3, 2, 3, 3))
    for stride, pad in [(1, 1), (2, 0), (2, 2)]:
        build = lambda xt, kt: sum_all(
            mul(conv2d(xt, kt, stride=stride, pad=pad),
                conv2d(xt, kt, stride=stride, pad=pad))
        )
        got_x, got_k = tape_grads(build, [x, k])
        f = lambda xa, ka: float((conv2d_ref(xa, ka, stride, pad) ** 2).sum())
        assert grads_close(got_x, central_difference(f, [x, k], 0))
        assert grads_close(got_k, central_difference(f, [x, k], 1))


def test_max_pool_gradient_matches_finite_differences():
    # keep entries well separated so FD never crosses a max boundary
    x = RNG.permutation(np.arange(2 * 2 * 4 * 4) * 1.0).reshape(2, 2, 4, 4)
    (got,) = tape_grads(lambda t: sum_all(mul(max_pool2d(t), max_pool2d(t))), [x])
    f = lambda xa: float((max_pool2d_ref(xa) ** 2).sum())
    assert grads_close(got, central_difference(f, [x], 0))


def test_max_pool_tie_routes_gradient_to_first_max():
    x = np.array([[[[2.0, 2.0], [0.0, 2.0]]]], dtype=np.float32)
    (got,) = tape_grads(lambda t: sum_all(max_pool2d(t)), [x])
    assert np.array_equal(got, np.array([[[[1.0, 0.0], [0.0, 0.0]]]], dtype=np.float32))


def test_relu_gradient_is_zero_at_zero_and_below():
    x = np.array([[-2.0, 0.0, 3.0]])
    (got,) = tape_grads(lambda t: sum_all(relu(t)), [x])
    assert np.array_equal(got, np.array([[0.0, 0.0, 1.0]], dtype=np.float32))


def test_broadcast_add_and_mul_gradients_reduce_correctly():
    a = RNG.normal(size=(4, 3))
    b = RNG.normal(size=(3,))
    got_a, got_b = tape_grads(lambda x, y: sum_all(mul(add(x, y), add(x, y))), [a, b])
    f = lambda xa, ya: float(((xa + ya) ** 2).sum())
    assert grads_close(got_a, central_difference(f, [a, b], 0))
    assert grads_close(got_b, central_difference(f, [a, b], 1))
    assert got_b.shape == (3,)


def test_fan_out_accumulates_additively():
    x = np.array([1.5, -2.0, 0.5])
    # z = x*x + x  ->  dz/dx = 2x + 1
    (got,) = tape_grads(lambda t: sum_all(add(mul(t, t), t)), [x])
    assert np.allclose(got, 2 * x + 1, atol=1e-5)


def test_unreached_leaf_gets_zero_gradient_of_leaf_shape():
    used = np.ones((2, 2))
    unused = np.ones((3, 5))
    got_used, got_unused = tape_grads(lambda u, v: sum_all(u), [used, unused])
    assert np.array_equal(got_unused, np.zeros((3, 5), dtype=np.float32))
    assert np.array_equal(got_used, np.ones((2, 2), dtype=np.float32))


def test_sub_and_reshape_gradients():
    a = RNG.normal(size=(2, 6))
    b = RNG.normal(size=(2, 6))
    build = lambda x, y: sum_all(mul(sub(x, y), sub(x, y)))
    got_a, got_b = tape_grads(build, [a, b])
    assert grads_close(got_a, 2 * (a - b))
    assert grads_close(got_b, -2 * (a - b))
    (got,) = tape_grads(lambda t: sum_all(mul(reshape(t, (4, 3)), reshape(t, (4, 3)))),
                        [a])
    assert grads_close(got, 2 * a)


def test_flatten_preserves_batch_and_row_major_order():
    x = np.arange(24, dtype=np.float32).reshape(2, 3, 2, 2)
    out = flatten(Tensor(x))
    assert out.shape == (2, 12)
    assert np.array_equal(out.data[0], x[0].reshape(-1))


# ---------------------------------------------------------------- tape rules


def test_ops_outside_tape_do_not_record():
    t = GradientTape()
    with t:
        pass
    x = Tensor(np.ones(3))
    y = add(x, x)  # no active tape
    assert t._nodes == []
    with GradientTape() as tape:
        tape.watch(x)
        z = add(x, x)
    assert len(tape._nodes) == 1
    assert y.shape == z.shape


def test_untracked_operands_do_not_record():
    with GradientTape() as tape:
        a = Tensor(np.ones(3))
        b = Tensor(np.ones(3))
        add(a, b)  # neither watched
    assert tape._nodes == []


def test_backward_rejects_non_scalar_loss():
    with GradientTape() as tape:
        x = Tensor(np.ones((2, 2)))
        tape.watch(x)
        y = add(x, x)
    with pytest.raises(TapeUsageError):
        backward(tape, y)


def test_backward_rejects_loss_from_other_tape():
    with GradientTape() as tape1:
        x = Tensor(np.ones(2))
        tape1.watch(x)
        loss = sum_all(x)
    with GradientTape() as tape2:
        tape2.watch(x)
    with pytest.raises(TapeUsageError):
        backward(tape2, loss)


def test_watch_rejects_non_tensor():
    with GradientTape() as tape:
        with pytest.raises(TypeError):
            tape.watch(np.ones(3))


# ---------------------------------------------------------------- shape errors


def test_matmul_rejects_bad_shapes():
    with pytest.raises(ShapeError, match="inner extents"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
    with pytest.raises(ShapeError, match="2-D"):
        matmul(Tensor(np.ones((2, 3, 4))), Tensor(np.ones((4, 2))))


def test_conv2d_rejects_bad_geometry():
    x = Tensor(np.ones((1, 3, 8, 8)))
    with pytest.raises(ShapeError, match="channel"):
        conv2d(x, Tensor(np.ones((2, 4, 3, 3))))
    with pytest.raises(ShapeError, match="larger than"):
        conv2d(x, Tensor(np.ones((2, 3, 11, 11))))
    with pytest.raises(ValueError, match="pad"):
        conv2d(x, Tensor(np.ones((2, 3, 3, 3))), pad=-1)
    with pytest.raises(ValueError, match="stride"):
        conv2d(x, Tensor(np.ones((2, 3, 3, 3))), stride=0)


def test_pool_rejects_odd_extent():
    with pytest.raises(ShapeError, match="even"):
        max_pool2d(Tensor(np.ones((1, 1, 5, 4))))


def test_cross_entropy_rejects_bad_labels():
    z = Tensor(np.zeros((2, 3)))
    with pytest.raises(ValueError, match=r"\[0, 3\)"):
        softmax_cross_entropy(z, np.array([0, 3]))
    with pytest.raises(ValueError, match="integer"):
        softmax_cross_entropy(z, np.array([0.0, 1.0]))
    with pytest.raises(ShapeError):
        softmax_cross_entropy(z, np.array([0, 1, 2]))


def test_add_rejects_incompatible_broadcast():
    with pytest.raises(ShapeError, match="broadcast"):
        add(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4))))


# ---------------------------------------------------------------- determinism


def test_ops_are_bit_deterministic():
    x = RNG.normal(size=(2, 3, 8, 8)).astype(np.float32)
    k = RNG.normal(size=(4, 3, 3, 3)).astype(np.float32)
    a = conv2d(Tensor(x), Tensor(k), pad=1).data
    b = conv2d(Tensor(x), Tensor(k), pad=1).data
    assert np.array_equal(a, b)
    (g1,) = tape_grads(lambda t: sum_all(mul(t, t)), [x])
    (g2,) = tape_grads(lambda t: sum_all(mul(t, t)), [x])
    assert np.array_equal(g1, g2)


# ---------------------------------------------------------------- properties


@settings(max_examples=30, deadline=None)
@given(
    st.integers(1, 3), st.integers(1, 3), st.integers(1, 4),
    st.integers(3, 8), st.integers(3, 8),
    st.integers(1, 3), st.integers(1, 2), st.integers(0, 2),
    st.integers(0, 2 ** 31 - 1),
)
def test_conv2d_forward_matches_reference_property(n, c, f, h, w, k, stride, pad,
                                                   seed):
    if k > h + 2 * pad or k > w + 2 * pad:
        return
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, c, h, w)).astype(np.float32)
    kern = rng.normal(size=(f, c, k, k)).astype(np.float32)
    got = conv2d(Tensor(x), Tensor(kern), stride=stride, pad=pad).data
    want = conv2d_ref(x, kern, stride=stride, pad=pad)
    assert got.shape == want.shape
    assert np.allclose(got, want, atol=1e-3)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(2, 8), st.integers(0, 2 ** 31 - 1),
       st.floats(0.1, 100.0))
def test_cross_entropy_nonnegative_and_finite_property(n, k, seed, scale):
    rng = np.random.default_rng(seed)
    z = (rng.normal(size=(n, k)) * scale).astype(np.float32)
    y = rng.integers(0, k, size=n)
    loss = softmax_cross_entropy(Tensor(z), y)
    assert np.isfinite(loss.item())
    assert loss.item() >= -1e-6
    p = stable_softmax(z)
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-4)
