"""Positional codes, half-vectors and the hard binarization layer."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad

VIEW = np.array([0.0, 0.0, 1.0])


def positional_encode(p, n_freqs: int) -> np.ndarray:
    """Sin/cos code of ``p`` (last axis = input dims, values in [-1, 1]).

    Output per input dimension d is ``[sin(2^0 pi p_d), cos(2^0 pi p_d), ...,
    sin(2^(L-1) pi p_d), cos(2^(L-1) pi p_d)]``; blocks are concatenated in
    input order, giving ``2 * L * dim`` values on the last axis.
    """
    p = np.asarray(p, dtype=np.float64)
    if n_freqs < 1:
        raise ValueError("n_freqs must be >= 1")
    if np.any(np.abs(p) > 1.0 + 1e-12):
        raise ValueError("positional_encode expects inputs in [-1, 1]")
    scales = np.pi * 2.0 ** np.arange(n_freqs)
    angles = p[..., :, None] * scales  # (..., d, L)
    code = np.stack([np.sin(angles), np.cos(angles)], axis=-1)  # (..., d, L, 2)
    return code.reshape(*p.shape[:-1], 2 * n_freqs * p.shape[-1])


def encode_node(p: ad.Node, n_freqs: int) -> ad.Node:
    """``positional_encode`` recorded on a tape (``p`` of shape (N, d))."""
    n, d = p.shape
    scales = np.pi * 2.0 ** np.arange(n_freqs)
    angles = ad.reshape(p, (n, d, 1)) * scales.reshape(1, 1, n_freqs)
    s = ad.reshape(ad.sin(angles), (n, d, n_freqs, 1))
    c = ad.reshape(ad.cos(angles), (n, d, n_freqs, 1))
    return ad.reshape(ad.concat([s, c], axis=-1), (n, 2 * n_freqs * d))


def encode_with_tangent(p: ad.Node, dp: ad.Node | np.ndarray, n_freqs: int):
    """Code of ``p`` and its directional derivative along ``dp`` (both on tape)."""
    n, d = p.shape
    scales = (np.pi * 2.0 ** np.arange(n_freqs)).reshape(1, 1, n_freqs)
    angles = ad.reshape(p, (n, d, 1)) * scales
    dangles = ad.reshape(p.tape._lift(dp), (n, d, 1)) * scales
    s, c = ad.sin(angles), ad.cos(angles)
    ds, dc = c * dangles, -(s * dangles)

    def interleave(a, b):
        a = ad.reshape(a, (n, d, n_freqs, 1))
        b = ad.reshape(b, (n, d, n_freqs, 1))
        return ad.reshape(ad.concat([a, b], axis=-1), (n, 2 * n_freqs * d))

    return interleave(s, c), interleave(ds, dc)


def pixel_coordinates(rows, cols, height: int, width: int) -> np.ndarray:
    """Map pixel indices to (x, y) in [-1, 1], x to the right and y up."""
    rows = np.asarray(rows, dtype=np.float64)
    cols = np.asarray(cols, dtype=np.float64)
    x = 2.0 * cols / max(width - 1, 1) - 1.0
    y = 1.0 - 2.0 * rows / max(height - 1, 1)
    return np.stack([x, y], axis=-1)


def half_vector(l) -> np.ndarray:
    """Bisector of light direction(s) ``l`` and the view direction +z."""
    l = np.asarray(l, dtype=np.float64)
    if np.any(l[..., 2] < 0):
        raise ValueError("light must lie in the upper hemisphere")
    s = l + VIEW
    return s / np.linalg.norm(s, axis=-1, keepdims=True)


def half_vector_node(l: ad.Node) -> ad.Node:
    return ad.l2_normalize(l + VIEW)


def binarize(x) -> np.ndarray:
    """Hard step: 1 where ``x > 0.5``, else 0."""
    x = np.asarray(x, dtype=np.float64)
    return (x > 0.5).astype(np.float64)


def binarize_node(x: ad.Node) -> ad.Node:
    """Hard step forward, identity adjoint backward."""
    return ad.step_straight_through(x)
