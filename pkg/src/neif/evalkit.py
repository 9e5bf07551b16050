"""Error metrics, the least-squares baseline, and diagnostics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def angular_errors(a, b) -> np.ndarray:
    """Per-entry angle in degrees between unit vectors along the last axis."""
    cos = np.sum(np.asarray(a, dtype=np.float64) * np.asarray(b, dtype=np.float64), axis=-1)
    return np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))


def normal_mae(normals, reference, mask) -> float:
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("empty mask")
    return float(angular_errors(np.asarray(normals)[mask], np.asarray(reference)[mask]).mean())


def light_dir_mae(lights, reference) -> float:
    lights = np.atleast_2d(lights)
    if len(lights) == 0:
        raise ValueError("no lights")
    return float(angular_errors(lights, np.atleast_2d(reference)).mean())


@dataclass
class IntensityMetric:
    scale: float  # eta, least-squares gain applied to the estimate
    error: float  # scale-invariant relative error


def intensity_error(estimated, reference) -> IntensityMetric:
    """Scale-invariant relative error of estimated intensities."""
    e = np.asarray(estimated, dtype=np.float64)
    ref = np.asarray(reference, dtype=np.float64)
    if e.size == 0 or e.shape != ref.shape:
        raise ValueError("need matching non-empty intensity vectors")
    if np.any(ref <= 0):
        raise ValueError("reference intensities must be positive")
    eta = float(np.dot(e, ref) / np.dot(e, e))
    return IntensityMetric(eta, float(np.mean(np.abs(eta * e - ref) / ref)))


def woodham_ls(images, lights, intensities, mask, exclude_zeros=True):
    """Per-pixel least squares for scaled normals under known lights.

    Returns unit normals (H, W, 3) and albedo (H, W). Observations equal to
    zero are dropped per pixel when at least three non-zero ones remain.
    """
    images = np.asarray(images, dtype=np.float64)
    lights = np.asarray(lights, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    gain = np.ones(len(lights)) if intensities is None else np.asarray(intensities, dtype=np.float64)
    L = lights * gain[:, None]
    if np.linalg.matrix_rank(L) < 3:
        raise np.linalg.LinAlgError("lights are coplanar")
    obs = images[:, mask].T  # (P, f)
    b = np.linalg.lstsq(L, obs.T, rcond=None)[0].T  # all-lights solution
    if exclude_zeros:
        nonzero = obs > 0
        usable = nonzero.sum(axis=1) >= 3
        partial = usable & ~nonzero.all(axis=1)
        # group pixels by their pattern of usable lights to batch the solves
        patterns, inverse = np.unique(nonzero[partial], axis=0, return_inverse=True)
        idx = np.nonzero(partial)[0]
        for k, pat in enumerate(patterns):
            sel = idx[inverse.ravel() == k]
            Lk = L[pat]
            if np.linalg.matrix_rank(Lk) < 3:
                continue
            b[sel] = np.linalg.lstsq(Lk, obs[sel][:, pat].T, rcond=None)[0].T
    albedo = np.linalg.norm(b, axis=1)
    normals = np.zeros(mask.shape + (3,))
    alb = np.zeros(mask.shape)
    safe = np.where(albedo > 0, albedo, 1.0)
    normals[mask] = b / safe[:, None]
    alb[mask] = albedo
    return normals, alb


@dataclass
class CorrelationTable:
    direction: np.ndarray  # (C,) cosine similarity of each V^f_c with V^ld
    intensity: np.ndarray  # (C,) ... with V^li
    degenerate: np.ndarray  # (C, 2) bool, True where a zero vector made it undefined

    @property
    def max_direction(self):
        return float(self.direction.max())

    @property
    def max_intensity(self):
        return float(self.intensity.max())

    def rows(self):
        out = [(f"V{c + 1}", float(d), float(i)) for c, (d, i) in enumerate(zip(self.direction, self.intensity))]
        out.append(("max", self.max_direction, self.max_intensity))
        return out


def _cosine(a, b):
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0, True
    return float(np.dot(a, b) / (na * nb)), False


def feature_light_correlation(features, lights, intensities) -> CorrelationTable:
    """Cosine similarity between pairwise distance vectors of features and lights.

    ``features`` is (f, C, h, w). For every pair i < j of images the l2
    distance between feature maps (per channel), the cosine distance between
    light directions and the l1 difference of intensities are collected.
    """
    features = np.asarray(features, dtype=np.float64)
    lights = np.asarray(lights, dtype=np.float64)
    intensities = np.asarray(intensities, dtype=np.float64)
    f = features.shape[0]
    if f < 2:
        raise ValueError("need at least two images")
    i, j = np.triu_indices(f, k=1)
    flat = features.reshape(f, features.shape[1], -1)
    vf = np.linalg.norm(flat[i] - flat[j], axis=2)  # (pairs, C)
    unit = lights / np.linalg.norm(lights, axis=1, keepdims=True)
    vld = 1.0 - np.sum(unit[i] * unit[j], axis=1)
    vli = np.abs(intensities[i] - intensities[j])
    n_ch = vf.shape[1]
    direction, intensity = np.zeros(n_ch), np.zeros(n_ch)
    degenerate = np.zeros((n_ch, 2), dtype=bool)
    for c in range(n_ch):
        direction[c], degenerate[c, 0] = _cosine(vf[:, c], vld)
        intensity[c], degenerate[c, 1] = _cosine(vf[:, c], vli)
    return CorrelationTable(direction, intensity, degenerate)


def sphere_normals(resolution: int):
    """Unit normals of a frontal hemisphere on a ``resolution`` grid, and its mask."""
    if resolution == 1:
        return np.array([[[0.0, 0.0, 1.0]]]), np.ones((1, 1), dtype=bool)
    t = (np.arange(resolution) + 0.5) / resolution * 2 - 1
    x, y = np.meshgrid(t, -t)
    r2 = x * x + y * y
    mask = r2 <= 1.0
    z = np.sqrt(np.clip(1.0 - r2, 0.0, None))
    n = np.stack([x, y, z], axis=-1)
    n[~mask] = 0.0
    return n, mask


def brdf_sphere(albedo: float, kd: float, specular, resolution: int = 64) -> np.ndarray:
    """Shade a unit sphere under a frontal light with one point's reflectance.

    ``specular`` maps arrays ``(v.h, n.h)`` to rho_s. The light and view are
    both +z, so h = v and n.h = n.l = n_z. Output is scaled to [0, 1].
    """
    n, mask = sphere_normals(resolution)
    nz = n[..., 2][mask]
    rho_s = np.asarray(specular(np.ones_like(nz), nz), dtype=np.float64)
    value = (kd * albedo + (1.0 - kd) * rho_s) * np.maximum(nz, 0.0)
    img = np.zeros(mask.shape)
    img[mask] = value
    peak = img.max()
    return img / peak if peak > 0 else img
