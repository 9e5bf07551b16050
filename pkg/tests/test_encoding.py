import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from neif import autodiff as ad
from neif.encoding import (
    binarize,
    binarize_node,
    encode_node,
    encode_with_tangent,
    half_vector,
    half_vector_node,
    pixel_coordinates,
    positional_encode,
)


def test_code_of_origin():
    np.testing.assert_allclose(positional_encode([0.0], 2), [0, 1, 0, 1], atol=1e-15)


def test_code_of_half():
    np.testing.assert_allclose(positional_encode([0.5], 1), [1, 0], atol=1e-15)


def test_code_layout_is_per_dimension_blocks():
    code = positional_encode([0.25, -0.5], 3)
    assert code.shape == (12,)
    np.testing.assert_allclose(code[:6], positional_encode([0.25], 3))
    np.testing.assert_allclose(code[6:], positional_encode([-0.5], 3))


def test_code_rejects_out_of_range():
    with pytest.raises(ValueError):
        positional_encode([1.5], 4)


def test_code_rejects_zero_frequencies():
    with pytest.raises(ValueError):
        positional_encode([0.1], 0)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (5, 2), elements=st.floats(-1, 1)), st.integers(1, 6))
def test_tape_code_matches_numpy_code(p, n_freqs):
    tape = ad.Tape()
    np.testing.assert_allclose(encode_node(tape.constant(p), n_freqs).value, positional_encode(p, n_freqs), atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (5, 2), elements=st.floats(-1, 1)))
def test_code_entries_pair_to_unit_circle(p):
    code = positional_encode(p, 4).reshape(5, 2, 4, 2)
    np.testing.assert_allclose(np.sum(code**2, axis=-1), 1.0, atol=1e-12)


def test_tangent_matches_finite_difference():
    rng = np.random.default_rng(3)
    p = rng.uniform(-0.9, 0.9, (4, 2))
    d = rng.normal(size=(4, 2))
    tape = ad.Tape()
    _, dcode = encode_with_tangent(tape.constant(p), d, 3)
    h = 1e-6
    fd = (positional_encode(p + h * d, 3) - positional_encode(p - h * d, 3)) / (2 * h)
    np.testing.assert_allclose(dcode.value, fd, atol=1e-6)


def test_pixel_coordinates_corners():
    xy = pixel_coordinates([0, 0, 9, 9], [0, 9, 0, 9], 10, 10)
    np.testing.assert_array_equal(xy, [[-1, 1], [1, 1], [-1, -1], [1, -1]])


def test_half_vector_of_frontal_light_is_view():
    np.testing.assert_allclose(half_vector([0, 0, 1]), [0, 0, 1])


def test_half_vector_bisects():
    l = np.array([1.0, 0.0, 0.0])
    h = half_vector(l)
    assert np.dot(h, l) == pytest.approx(np.dot(h, [0, 0, 1]))
    assert np.linalg.norm(h) == pytest.approx(1.0)


def test_half_vector_rejects_lower_hemisphere():
    with pytest.raises(ValueError):
        half_vector([0, 0.5, -0.5])


def test_half_vector_node_agrees():
    l = np.array([[0.3, -0.2, 0.9], [0.0, 0.6, 0.8]])
    l /= np.linalg.norm(l, axis=1, keepdims=True)
    tape = ad.Tape()
    np.testing.assert_allclose(half_vector_node(tape.constant(l)).value, half_vector(l), atol=1e-15)


def test_binarize_threshold():
    np.testing.assert_array_equal(binarize([0.2, 0.5, 0.5000001, 0.9]), [0, 0, 1, 1])


def test_binarize_node_passes_adjoint_through():
    tape = ad.Tape()
    x = tape.leaf(np.array([0.1, 0.7, 0.4]))
    w = np.array([2.0, -3.0, 0.25])
    grads = tape.backward(ad.sum_(binarize_node(x) * w))
    np.testing.assert_array_equal(grads[x], w)
