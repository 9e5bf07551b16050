"""Silhouette normals, normal integration, and shadow maps from depth.

Image conventions used throughout the package: arrays are indexed
``[row, col]``; camera coordinates have x along increasing column, y along
decreasing row (up), z toward the viewer. Depth ``w`` is the height of the
surface along +z in pixel units, so larger ``w`` is closer to the camera.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage, sparse
from scipy.sparse.linalg import splu

# clockwise on screen (rows grow downward), starting west
_MOORE = np.array([(0, -1), (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1)])
RAY_SAMPLES = 32
SHADOW_RATIO = 0.2


@dataclass
class SilhouetteNormals:
    points: np.ndarray  # (K, 2) int rows/cols of contour pixels, traced order
    normals: np.ndarray  # (K, 2) unit outward normals in (x, y) camera axes


def trace_contour(mask: np.ndarray) -> np.ndarray:
    """Moore-neighbour trace of the outer boundary of the first component."""
    mask = np.asarray(mask, dtype=bool)
    fg = np.argwhere(mask)
    if len(fg) == 0:
        raise ValueError("mask is empty")
    padded = np.pad(mask, 1)
    start = tuple(fg[0] + 1)  # raster order: top-most, then left-most
    contour = [start]
    current, back = start, (start[0], start[1] - 1)
    first_step = None
    for _ in range(8 * padded.size):
        d0 = next(i for i, o in enumerate(_MOORE) if tuple(o) == (back[0] - current[0], back[1] - current[1]))
        for k in range(1, 9):
            d = (d0 + k) % 8
            cand = (current[0] + _MOORE[d][0], current[1] + _MOORE[d][1])
            if padded[cand]:
                break
        else:
            break  # isolated pixel
        back = (current[0] + _MOORE[(d - 1) % 8][0], current[1] + _MOORE[(d - 1) % 8][1])
        if current == start and first_step is not None and cand == first_step:
            break
        if first_step is None:
            first_step = cand
        current = cand
        contour.append(current)
    if len(contour) > 1 and contour[-1] == start:
        contour.pop()
    return np.array(contour) - 1


def fit_silhouette_normals(mask: np.ndarray, window: int = 15) -> SilhouetteNormals:
    """Outward 2D normals of the mask contour from moving-window quadratic fits.

    Each window of ``window`` traced contour pixels is parameterised by
    chord length about its centre pixel; the tangent is the linear
    coefficient of the quadratic least-squares fit.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("mask is empty")
    if not ndimage.binary_erosion(mask).any():
        raise ValueError("mask is degenerate (no interior)")
    labels, count = ndimage.label(mask, structure=np.ones((3, 3)))
    if count > 1:
        sizes = ndimage.sum(mask, labels, range(1, count + 1))
        mask = labels == (1 + int(np.argmax(sizes)))
    pts = trace_contour(mask)
    if len(pts) < 20:
        raise ValueError(f"contour too short ({len(pts)} pixels)")
    xy = np.stack([pts[:, 1], -pts[:, 0]], axis=1).astype(np.float64)
    half = window // 2
    idx = (np.arange(len(xy))[:, None] + np.arange(-half, half + 1)[None, :]) % len(xy)
    win = xy[idx]  # (K, window, 2)
    seg = np.linalg.norm(np.diff(win, axis=1), axis=2)
    t = np.concatenate([np.zeros((len(xy), 1)), np.cumsum(seg, axis=1)], axis=1)
    t -= t[:, half:half + 1]
    vander = np.stack([np.ones_like(t), t, t * t], axis=2)  # (K, window, 3)
    sol = np.linalg.solve(np.einsum("kwa,kwb->kab", vander, vander), np.einsum("kwa,kwd->kad", vander, win))
    tangent = sol[:, 1, :]
    tangent /= np.linalg.norm(tangent, axis=1, keepdims=True)
    # signed area > 0 means counter-clockwise in (x, y): outward is the right-hand side
    x, y = xy[:, 0], xy[:, 1]
    area = 0.5 * np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y)
    normals = np.stack([tangent[:, 1], -tangent[:, 0]], axis=1)
    if area < 0:
        normals = -normals
    return SilhouetteNormals(points=pts, normals=normals)


def normals_from_depth(depth: np.ndarray) -> np.ndarray:
    """Unit normals of a depth map by central differences (camera axes)."""
    dw_dr, dw_dc = np.gradient(np.asarray(depth, dtype=np.float64))
    n = np.stack([-dw_dc, dw_dr, np.ones_like(dw_dc)], axis=-1)
    return n / np.linalg.norm(n, axis=-1, keepdims=True)


def integrate_normals(normals: np.ndarray, mask: np.ndarray, min_nz: float = 0.01) -> np.ndarray:
    """Depth from a normal map by orthographic five-point plane fitting.

    For each pixel u the plane through u with normal n_u should contain u and
    its 4-neighbours; the plane offset is eliminated in closed form and the
    resulting sparse least-squares problem is solved per connected component.
    Each component is shifted to zero mean; pixels outside the mask are 0.
    """
    normals = np.asarray(normals, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    if not mask.any():
        raise ValueError("mask is empty")
    if not np.all(np.isfinite(normals[mask])):
        raise ValueError("non-finite normals inside the mask")
    n = normals.copy()
    n[..., 2] = np.maximum(n[..., 2], min_nz)
    n /= np.linalg.norm(n, axis=-1, keepdims=True)

    index = -np.ones((h, w), dtype=np.int64)
    rr, cc = np.nonzero(mask)
    index[rr, cc] = np.arange(len(rr))
    padded = np.pad(index, 1, constant_values=-1)
    offsets = [(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)]
    members = np.stack([padded[rr + 1 + dr, cc + 1 + dc] for dr, dc in offsets], axis=1)  # (P, 5)
    valid = members >= 0
    k = valid.sum(axis=1).astype(np.float64)
    nx, ny, nz = n[rr, cc, 0], n[rr, cc, 1], n[rr, cc, 2]
    # neighbour positions relative to u in camera axes: x = col, y = -row
    off = np.array(offsets, dtype=np.float64)
    ox, oy = off[:, 1], -off[:, 0]
    mean_ox = (valid * ox).sum(axis=1) / k
    mean_oy = (valid * oy).sum(axis=1) / k

    rows, cols, vals, rhs = [], [], [], []
    row_id = 0
    use = k >= 2
    for a in range(5):
        sel = use & valid[:, a]
        ids = np.nonzero(sel)[0]
        r_ids = row_id + np.arange(len(ids))
        row_id += len(ids)
        rhs.append(-(nx[ids] * (ox[a] - mean_ox[ids]) + ny[ids] * (oy[a] - mean_oy[ids])))
        for b in range(5):
            inb = valid[ids, b]
            coef = -nz[ids] / k[ids] + (nz[ids] if a == b else 0.0)
            rows.append(r_ids[inb])
            cols.append(members[ids[inb], b])
            vals.append(coef[inb])
    A = sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(row_id, len(rr))
    )
    b = np.concatenate(rhs)

    depth = np.zeros((h, w))
    z = np.zeros(len(rr))
    labels, count = ndimage.label(mask)
    comp = labels[rr, cc]
    normal_mat = (A.T @ A).tocsc()
    atb = A.T @ b
    for label in range(1, count + 1):
        ids = np.nonzero(comp == label)[0]
        if len(ids) == 1:
            continue
        # pin the first pixel to remove the constant null direction
        free = ids[1:]
        sub = normal_mat[free][:, free]
        try:
            z[free] = splu(sub.tocsc()).solve(atb[free])
        except RuntimeError as exc:
            raise np.linalg.LinAlgError(f"integration failed on component {label}: {exc}") from None
        z[ids] -= z[ids].mean()
    depth[rr, cc] = z
    return depth


def _bilinear(depth, valid, r, c):
    h, w = depth.shape
    r0 = np.clip(np.floor(r).astype(np.int64), 0, h - 2)
    c0 = np.clip(np.floor(c).astype(np.int64), 0, w - 2)
    fr, fc = r - r0, c - c0
    d00, d01 = depth[r0, c0], depth[r0, c0 + 1]
    d10, d11 = depth[r0 + 1, c0], depth[r0 + 1, c0 + 1]
    val = (1 - fr) * ((1 - fc) * d00 + fc * d01) + fr * ((1 - fc) * d10 + fc * d11)
    ok = valid[r0, c0] & valid[r0, c0 + 1] & valid[r0 + 1, c0] & valid[r0 + 1, c0 + 1]
    return val, ok


def raymarch_shadow(depth: np.ndarray, mask: np.ndarray, light, n_samples: int = RAY_SAMPLES, tol: float = 1e-9) -> np.ndarray:
    """Binary cast-shadow map (1 = lit) of a depth map under a directional light.

    From every masked pixel a ray ``x + t * l`` is sampled at ``n_samples``
    evenly spaced points until it leaves the image; the pixel is lit iff no
    sample falls below the bilinearly interpolated surface. Samples whose
    interpolation stencil touches unmasked pixels count as unoccluded.
    """
    depth = np.asarray(depth, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    l = np.asarray(light, dtype=np.float64)
    if abs(np.linalg.norm(l) - 1.0) > 1e-6 or l[2] <= 0:
        raise ValueError("light must be a unit vector with positive z")
    h, w = mask.shape
    lit = np.zeros((h, w))
    rr, cc = np.nonzero(mask)
    lit[rr, cc] = 1.0
    step_r, step_c = -l[1], l[0]
    if np.hypot(step_r, step_c) < 1e-12 or len(rr) == 0:
        return lit
    with np.errstate(divide="ignore", invalid="ignore"):
        tr = np.where(step_r > 0, (h - 1 - rr) / step_r, np.where(step_r < 0, rr / -step_r, np.inf))
        tc = np.where(step_c > 0, (w - 1 - cc) / step_c, np.where(step_c < 0, cc / -step_c, np.inf))
    t_max = np.minimum(tr, tc)
    t = t_max[:, None] * (np.arange(1, n_samples + 1) / n_samples)[None, :]
    r = rr[:, None] + t * step_r
    c = cc[:, None] + t * step_c
    height = depth[rr, cc][:, None] + t * l[2]
    surface, ok = _bilinear(depth, mask, r, c)
    below = ok & (height - surface < -tol)
    lit[rr, cc] = np.where(below.any(axis=1), 0.0, 1.0)
    return lit


def pseudo_shadow(images: np.ndarray, mask: np.ndarray, ratio: float = SHADOW_RATIO) -> np.ndarray:
    """Threshold each image at ``ratio`` times its masked mean (1 = lit)."""
    images = np.asarray(images, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("mask is empty")
    if images.ndim == 2:
        images = images[None]
    means = images[:, mask].mean(axis=1)
    lit = images >= ratio * means[:, None, None]
    return (lit & mask[None]).astype(np.float64)
