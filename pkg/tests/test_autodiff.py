import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import gradcases
from neif import autodiff as ad


def test_every_op_has_a_gradient_case():
    covered = set(gradcases.CASES) | gradcases.NON_DIFFERENTIABLE
    assert covered == set(ad.OPS)


@pytest.mark.parametrize("name", sorted(gradcases.CASES))
def test_op_gradient_matches_central_differences(name):
    assert gradcases.worst_error(name, 10, seed=1) < 1e-6


def test_square_gradient_by_hand():
    tape = ad.Tape()
    x = tape.leaf(3.0)
    grads = tape.backward(x * x)
    assert grads[x] == 6.0


def test_product_rule_by_hand():
    tape = ad.Tape()
    a, b = tape.leaf(2.0), tape.leaf(5.0)
    grads = tape.backward(a * b + a)
    assert grads[a] == 6.0
    assert grads[b] == 2.0


def test_shared_subexpression_accumulates():
    tape = ad.Tape()
    x = tape.leaf(1.5)
    y = ad.sin(x)
    grads = tape.backward(y * y + y)
    expected = 2 * np.sin(1.5) * np.cos(1.5) + np.cos(1.5)
    assert grads[x] == pytest.approx(expected, rel=1e-12)


def test_unreached_leaf_gets_zero():
    tape = ad.Tape()
    x, y = tape.leaf(np.ones(3)), tape.leaf(np.ones(2))
    grads = tape.backward(ad.sum_(x))
    np.testing.assert_array_equal(grads[y], np.zeros(2))


def test_constants_get_no_gradient_entry():
    tape = ad.Tape()
    x = tape.leaf(2.0)
    c = tape.constant(4.0)
    grads = tape.backward(x * c)
    assert c not in grads
    assert grads[x] == 4.0


def test_backward_rejects_non_scalar_root():
    tape = ad.Tape()
    x = tape.leaf(np.ones(3))
    with pytest.raises(ad.GradError):
        tape.backward(x * 2.0)


def test_backward_rejects_several_roots():
    tape = ad.Tape()
    x = tape.leaf(1.0)
    with pytest.raises(ad.GradError):
        tape.backward([x, x])


def test_shape_mismatch_is_an_error():
    tape = ad.Tape()
    with pytest.raises(ad.GradError):
        tape.leaf(np.ones(3)) + tape.leaf(np.ones(4))


def test_unknown_op_is_an_error():
    tape = ad.Tape()
    with pytest.raises(ad.GradError):
        tape.record("erf", tape.leaf(1.0))


def test_nodes_from_other_tapes_are_rejected():
    a, b = ad.Tape(), ad.Tape()
    with pytest.raises(ad.GradError):
        a.leaf(1.0) + b.leaf(1.0)


def test_non_finite_values_abort():
    tape = ad.Tape()
    with pytest.raises(FloatingPointError):
        tape.leaf(1.0) / tape.constant(0.0)


def test_stop_gradient_blocks_flow():
    tape = ad.Tape()
    x = tape.leaf(2.0)
    grads = tape.backward(ad.stop_gradient(x) * x)
    assert grads[x] == 2.0  # only the unstopped factor contributes


def test_norm_subgradient_at_zero_is_zero():
    tape = ad.Tape()
    x = tape.leaf(np.zeros((1, 2)))
    grads = tape.backward(ad.sum_(ad.norm(x)))
    np.testing.assert_array_equal(grads[x], np.zeros((1, 2)))


def test_conv2d_matches_direct_loop():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3, 7, 6))
    k = rng.normal(size=(4, 3, 3, 3))
    tape = ad.Tape()
    out = ad.conv2d(tape.constant(x), tape.constant(k), stride=2).value
    oh, ow = (7 - 3) // 2 + 1, (6 - 3) // 2 + 1
    ref = np.zeros((2, 4, oh, ow))
    for n in range(2):
        for o in range(4):
            for i in range(oh):
                for j in range(ow):
                    ref[n, o, i, j] = np.sum(x[n, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * k[o])
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_sigmoid_is_stable_at_extremes():
    tape = ad.Tape()
    y = ad.sigmoid(tape.constant(np.array([-800.0, 0.0, 800.0])))
    np.testing.assert_allclose(y.value, [0.0, 0.5, 1.0])


def test_float32_tape():
    tape = ad.Tape(dtype=np.float32)
    x = tape.leaf(np.ones(3))
    grads = tape.backward(ad.sum_(ad.square(x)))
    assert grads[x].dtype == np.float32
    np.testing.assert_array_equal(grads[x], 2.0)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (2, 3), elements=st.floats(-3, 3)), arrays(np.float64, (3,), elements=st.floats(-3, 3)))
def test_broadcast_adjoint_has_operand_shape(a, b):
    tape = ad.Tape()
    x, y = tape.leaf(a), tape.leaf(b)
    grads = tape.backward(ad.sum_(x * y))
    assert grads[x].shape == a.shape and grads[y].shape == b.shape
    np.testing.assert_allclose(grads[y], a.sum(axis=0))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (4,), elements=st.floats(-5, 5)))
def test_linearity_of_backward(v):
    # gradient of sum(c * x) is c everywhere
    tape = ad.Tape()
    x = tape.leaf(v)
    grads = tape.backward(ad.sum_(x * 3.5))
    np.testing.assert_array_equal(grads[x], np.full(4, 3.5))


def test_dropped_tape_is_freed_without_the_cycle_collector():
    import gc
    import weakref

    gc.disable()
    try:
        tape = ad.Tape()
        x = tape.leaf(np.ones(3))
        y = ad.sum_(x * x)
        tape.backward(y)
        alive = weakref.ref(tape)
        del tape
        assert alive() is None
    finally:
        gc.enable()
    assert float(y.value) == 3.0
    with pytest.raises(ad.GradError):
        y * 2.0
