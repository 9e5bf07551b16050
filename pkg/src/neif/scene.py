"""Synthetic photometric-stereo scenes and their forward renderer."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .encoding import half_vector
from .geometry import raymarch_shadow


@dataclass
class Material:
    albedo: np.ndarray  # diffuse reflectance rho_d, (H, W) >= 0
    kd: np.ndarray  # diffuse weight in [0, 1]; specular weight is 1 - kd
    shininess: float = 40.0

    @property
    def ks(self):
        return 1.0 - self.kd

    @classmethod
    def uniform(cls, shape, albedo=0.8, kd=0.7, shininess=40.0):
        return cls(np.full(shape, float(albedo)), np.full(shape, float(kd)), float(shininess))


@dataclass
class Scene:
    images: np.ndarray  # (f, H, W)
    mask: np.ndarray  # (H, W) bool
    gt_normals: np.ndarray | None = None  # (H, W, 3)
    gt_depth: np.ndarray | None = None  # (H, W), pixel units
    gt_lights: np.ndarray | None = None  # (f, 3)
    gt_intensities: np.ndarray | None = None  # (f,)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.images.ndim != 3 or self.images.shape[1:] != self.mask.shape:
            raise ValueError(f"images {self.images.shape} do not match mask {self.mask.shape}")
        if self.gt_lights is not None and len(self.gt_lights) != len(self.images):
            raise ValueError("light count differs from image count")

    @property
    def n_images(self):
        return self.images.shape[0]

    @property
    def shape(self):
        return self.mask.shape

    def without_ground_truth(self) -> "Scene":
        """View with every gt_* field removed; what the trainer is allowed to see."""
        return Scene(images=self.images, mask=self.mask, meta=dict(self.meta))


def render_forward(normals, lights, intensities, material: Material, mask, depth=None, cast_shadows=True) -> np.ndarray:
    """Blinn-Phong images: e * s * (kd*rho_d + ks*(n.h)^alpha) * max(n.l, 0)."""
    normals = np.asarray(normals, dtype=np.float64)
    lights = np.atleast_2d(np.asarray(lights, dtype=np.float64))
    intensities = np.atleast_1d(np.asarray(intensities, dtype=np.float64))
    mask = np.asarray(mask, dtype=bool)
    if np.any(intensities <= 0):
        raise ValueError("light intensities must be positive")
    norms = np.linalg.norm(normals[mask], axis=-1)
    if not np.allclose(norms, 1.0, atol=1e-6):
        raise ValueError("normals must be unit length inside the mask")
    if cast_shadows and depth is None:
        raise ValueError("cast shadows need a depth map")
    halves = half_vector(lights)
    images = np.zeros((len(lights),) + mask.shape)
    n = normals[mask]
    kd, ks, rho = material.kd[mask], material.ks[mask], material.albedo[mask]
    for j, (l, h, e) in enumerate(zip(lights, halves, intensities)):
        shading = np.maximum(n @ l, 0.0)
        spec = np.maximum(n @ h, 0.0) ** material.shininess
        value = e * (kd * rho + ks * spec) * shading
        if cast_shadows:
            value = value * raymarch_shadow(depth, mask, l)[mask]
        images[j][mask] = value
    return images


def sample_lights(n_lights: int, rng: np.random.Generator, max_zenith_deg: float = 60.0) -> np.ndarray:
    """Directions uniform (by area) on the polar cap of half-angle ``max_zenith_deg``."""
    z = rng.uniform(np.cos(np.radians(max_zenith_deg)), 1.0, n_lights)
    phi = rng.uniform(0.0, 2 * np.pi, n_lights)
    r = np.sqrt(1.0 - z * z)
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def sphere_geometry(resolution: int, radius_frac: float = 0.45, bump=None):
    """Mask, depth and analytic normals of a hemisphere, optionally with Gaussian bumps.

    ``bump`` is a tuple ``(x, y, height, sigma)`` or a list of them, all in
    units of the sphere radius, centred on the image.
    """
    n = resolution
    rows, cols = np.mgrid[:n, :n].astype(np.float64)
    x = cols - (n - 1) / 2
    y = (n - 1) / 2 - rows
    radius = radius_frac * n
    mask = x * x + y * y < radius * radius
    z = np.sqrt(np.maximum(radius * radius - x * x - y * y, 1e-12))
    depth = np.where(mask, z, 0.0)
    dzdx = np.where(mask, -x / z, 0.0)
    dzdy = np.where(mask, -y / z, 0.0)
    bumps = [] if bump is None else ([bump] if np.ndim(bump[0]) == 0 else list(bump))
    for bx, by, amp, sigma in bumps:
        bx, by, amp, sigma = bx * radius, by * radius, amp * radius, sigma * radius
        g = amp * np.exp(-((x - bx) ** 2 + (y - by) ** 2) / (2 * sigma * sigma))
        depth = depth + np.where(mask, g, 0.0)
        dzdx = dzdx + np.where(mask, -g * (x - bx) / sigma**2, 0.0)
        dzdy = dzdy + np.where(mask, -g * (y - by) / sigma**2, 0.0)
    normals = np.stack([-dzdx, -dzdy, np.ones_like(dzdx)], axis=-1)
    normals /= np.linalg.norm(normals, axis=-1, keepdims=True)
    normals[~mask] = 0.0
    return mask, depth, normals


# (x, y, height, sigma) of the bump used by the CLI and the end-to-end check
DEFAULT_BUMP = (0.3, 0.2, 0.25, 0.15)


def make_sphere_scene(
    resolution: int = 64,
    n_lights: int = 20,
    material: Material | None = None,
    seed: int = 0,
    bump=None,
    intensity_range=None,
    max_zenith_deg: float = 60.0,
    cast_shadows: bool = True,
) -> Scene:
    """Rendered sphere scene with ground truth.

    Intensities are 1 unless ``intensity_range=(lo, hi)`` is given, in which
    case they are drawn uniformly from that range.
    """
    if resolution < 16:
        raise ValueError("resolution must be >= 16")
    if n_lights < 3:
        raise ValueError("need at least 3 lights")
    rng = np.random.default_rng(seed)
    mask, depth, normals = sphere_geometry(resolution, bump=bump)
    if material is None:
        material = Material.uniform(mask.shape)
    lights = sample_lights(n_lights, rng, max_zenith_deg)
    if intensity_range is None:
        intensities = np.ones(n_lights)
    else:
        intensities = rng.uniform(intensity_range[0], intensity_range[1], n_lights)
    images = render_forward(normals, lights, intensities, material, mask, depth=depth, cast_shadows=cast_shadows)
    meta = {
        "generator": "sphere",
        "seed": int(seed),
        "resolution": int(resolution),
        "bump": None if bump is None else np.asarray(bump, dtype=float).tolist(),
        "shininess": float(material.shininess),
        "intensity_range": None if intensity_range is None else [float(v) for v in intensity_range],
        "max_zenith_deg": float(max_zenith_deg),
        "cast_shadows": bool(cast_shadows),
    }
    return Scene(images, mask, normals, depth, lights, intensities, meta)


def gbr_matrix(mu: float, nu: float, lam: float) -> np.ndarray:
    if lam == 0:
        raise ValueError("GBR lambda must be non-zero")
    return np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [mu, nu, lam]])


@dataclass
class GbrResult:
    normals: np.ndarray  # (H, W, 3) unit pseudo-normals
    albedo: np.ndarray  # (H, W) pseudo-albedo
    lights: np.ndarray  # (f, 3) unit pseudo-lights
    intensities: np.ndarray  # (f,) pseudo-intensities c_j e_j |G l_j|; negative when c_j < 0
    light_scale: np.ndarray  # (f,) 1 / c_j, the per-light reflectance factor


def apply_gbr(normals, albedo, lights, intensities, G, c=None) -> GbrResult:
    """Transform a Lambertian solution by ``G`` and per-light scalars ``c``.

    Scaled normals become ``G^-T (albedo n)`` and scaled lights
    ``c_j e_j G l_j``; the reflectance keeps a factor ``1/c_j``. Rendering the
    result with ``render_lambertian`` reproduces the original images.
    """
    G = np.asarray(G, dtype=np.float64)
    if abs(np.linalg.det(G)) < 1e-12:
        raise ValueError("G is singular")
    lights = np.asarray(lights, dtype=np.float64)
    intensities = np.asarray(intensities, dtype=np.float64)
    c = np.ones(len(lights)) if c is None else np.asarray(c, dtype=np.float64)
    if np.any(c == 0):
        raise ValueError("c_j must be non-zero")
    b = np.asarray(albedo)[..., None] * np.asarray(normals)
    b_new = b @ np.linalg.inv(G)  # row-vector form of G^-T b
    rho_new = np.linalg.norm(b_new, axis=-1)
    safe = np.where(rho_new > 0, rho_new, 1.0)
    n_new = b_new / safe[..., None]
    gl = lights @ G.T
    norm = np.linalg.norm(gl, axis=1)
    return GbrResult(n_new, rho_new, gl / norm[:, None], c * intensities * norm, 1.0 / c)


def render_lambertian(normals, albedo, lights, intensities, mask, light_scale=None) -> np.ndarray:
    """Shadow-free Lambertian images ``scale_j e_j rho max(n.l, 0)``."""
    lights = np.asarray(lights, dtype=np.float64)
    gain = np.asarray(intensities, dtype=np.float64)
    if light_scale is not None:
        gain = gain * np.asarray(light_scale)
    b = np.asarray(albedo)[..., None] * np.asarray(normals)
    images = np.maximum(np.einsum("hwk,fk->fhw", b, lights), 0.0) * gain[:, None, None]
    return images * np.asarray(mask)[None]


def scale_intensities(scene: Scene, seed: int, lo: float = 0.01, hi: float = 1.0) -> Scene:
    """Multiply image j (and its gt intensity) by ``u_j ~ U(lo, hi)``."""
    if not 0 < lo <= hi:
        raise ValueError("need 0 < lo <= hi")
    rng = np.random.default_rng(seed)
    u = rng.uniform(lo, hi, scene.n_images)
    meta = dict(scene.meta, intensity_scale=[float(v) for v in u])
    return dataclasses.replace(
        scene,
        images=scene.images * u[:, None, None],
        gt_intensities=None if scene.gt_intensities is None else scene.gt_intensities * u,
        meta=meta,
    )
