"""Independent reference computations used by several test modules."""

import numpy as np
from scipy import ndimage


def brute_force_shadow(depth, mask, light, n_samples=1000, tol=1e-9):
    """Dense occlusion test: 1 = lit.

    Samples every ray ``n_samples`` times up to the image border and reads
    the surface with scipy's linear interpolation. A sample counts only when
    all four interpolation neighbours are inside the mask.
    """
    depth = np.asarray(depth, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    lx, ly, lz = light
    dr, dc = -ly, lx
    out = np.zeros((h, w))
    rows, cols = np.nonzero(mask)
    # support[i, j]: the 2x2 block with top-left (i, j) is fully masked
    support = mask[:-1, :-1] & mask[1:, :-1] & mask[:-1, 1:] & mask[1:, 1:]
    for r0, c0 in zip(rows, cols):
        limits = []
        if dr > 1e-12:
            limits.append((h - 1 - r0) / dr)
        elif dr < -1e-12:
            limits.append(r0 / -dr)
        if dc > 1e-12:
            limits.append((w - 1 - c0) / dc)
        elif dc < -1e-12:
            limits.append(c0 / -dc)
        if not limits:
            out[r0, c0] = 1.0
            continue
        t = np.linspace(0, min(limits), n_samples + 1)[1:]
        r, c = r0 + t * dr, c0 + t * dc
        surface = ndimage.map_coordinates(depth, [r, c], order=1, mode="nearest")
        ri = np.clip(np.floor(r).astype(int), 0, h - 2)
        ci = np.clip(np.floor(c).astype(int), 0, w - 2)
        counted = support[ri, ci]
        height = depth[r0, c0] + t * lz
        out[r0, c0] = 0.0 if np.any(counted & (height < surface - tol)) else 1.0
    return out


def step_wall(n=64, height=20.0, cols=(30, 34)):
    depth = np.zeros((n, n))
    depth[:, cols[0]:cols[1]] = height
    return depth, np.ones((n, n), dtype=bool)


def spike(n=64, height=15.0, sigma=2.0):
    rows, cols = np.mgrid[:n, :n]
    depth = height * np.exp(-((rows - n / 2) ** 2 + (cols - n / 2) ** 2) / (2 * sigma**2))
    return depth, np.ones((n, n), dtype=bool)


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def sphere_cap(n=64, radius=60.0):
    """A shallow cap filling the whole grid (no grazing normals)."""
    rows, cols = np.mgrid[:n, :n].astype(np.float64)
    x = cols - (n - 1) / 2
    y = (n - 1) / 2 - rows
    z = np.sqrt(radius**2 - x**2 - y**2)
    normals = np.stack([x / radius, y / radius, z / radius], axis=-1)
    return z, normals, np.ones((n, n), dtype=bool)


def gaussian_bump(n=64, height=8.0, sigma=10.0):
    rows, cols = np.mgrid[:n, :n].astype(np.float64)
    x = cols - (n - 1) / 2
    y = (n - 1) / 2 - rows
    z = height * np.exp(-(x**2 + y**2) / (2 * sigma**2))
    dzdx = -z * x / sigma**2
    dzdy = -z * y / sigma**2
    normals = np.stack([-dzdx, -dzdy, np.ones_like(z)], axis=-1)
    normals /= np.linalg.norm(normals, axis=-1, keepdims=True)
    return z, normals, np.ones((n, n), dtype=bool)


def plane(n=64, a=0.3, b=-0.2):
    rows, cols = np.mgrid[:n, :n].astype(np.float64)
    x = cols
    y = -rows
    z = a * x + b * y
    normal = unit([-a, -b, 1.0])
    return z, np.broadcast_to(normal, (n, n, 3)).copy(), np.ones((n, n), dtype=bool)


def interior(mask, width=2):
    return ndimage.binary_erosion(mask, iterations=width, border_value=0)


def relative_rmse(est, ref, mask):
    """RMSE after removing the mean offset, relative to the reference range."""
    e = est[mask] - est[mask].mean()
    r = ref[mask] - ref[mask].mean()
    return float(np.sqrt(np.mean((e - r) ** 2)) / (r.max() - r.min()))
