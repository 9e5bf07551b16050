"""Training loop: warm-up and main phases, azimuth initializer, geometry refresh."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import fields as F
from . import losses as L
from .encoding import half_vector_node, pixel_coordinates, positional_encode
from .geometry import fit_silhouette_normals, integrate_normals, pseudo_shadow, raymarch_shadow
from .scene import Scene

log = logging.getLogger(__name__)

ABLATIONS = ("no-specular-to-light", "no-shadow-to-light", "no-azimuth-init", "no-gp")
SPARSE_FREQS = 6


class TrainingDiverged(FloatingPointError):
    """A loss went non-finite; ``snapshot`` holds the state just before the step."""

    def __init__(self, message, snapshot):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class TrainConfig:
    warmup_epochs: int = 10
    total_epochs: int = 500
    lr: float = 5e-4
    finetune_epochs: int | None = None  # None -> one fifth of total_epochs
    finetune_lr: float = 5e-5
    light_batch: int = 32
    pixel_batch: int = 256
    gp_batch: int = 256
    shadow_refresh: str = "per-epoch"
    n_freqs: int = 4
    sparse_mode: bool = False
    cut_specular_to_light: bool = False
    cut_shadow_to_light: bool = False
    skip_azimuth_init: bool = False
    skip_gp: bool = False
    seed: int = 0
    weights: L.LossWeights = field(default_factory=L.LossWeights)

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = L.LossWeights(**self.weights)
        if not 0 <= self.warmup_epochs <= self.total_epochs:
            raise ValueError("need 0 <= warmup_epochs <= total_epochs")
        if self.total_epochs < 1 or self.light_batch < 1 or self.pixel_batch < 1:
            raise ValueError("epochs and batch sizes must be >= 1")
        if self.shadow_refresh not in ("per-epoch", "per-batch"):
            raise ValueError(f"unknown shadow_refresh {self.shadow_refresh!r}")
        if self.sparse_mode:
            self.n_freqs = SPARSE_FREQS
            self.skip_azimuth_init = True

    @property
    def finetune(self) -> int:
        if self.finetune_epochs is None:
            return self.total_epochs // 5
        return min(self.finetune_epochs, self.total_epochs)

    def lr_at(self, epoch: int) -> float:
        """Learning rate for the 1-based ``epoch``."""
        return self.finetune_lr if epoch > self.total_epochs - self.finetune else self.lr

    def warmup_terms(self):
        terms = list(L.WARMUP_TERMS)
        if self.skip_azimuth_init:
            terms.remove("az")
        if self.skip_gp:
            terms.remove("gp")
        return tuple(terms)

    def apply_ablation(self, name: str):
        flag = {
            "no-specular-to-light": "cut_specular_to_light",
            "no-shadow-to-light": "cut_shadow_to_light",
            "no-azimuth-init": "skip_azimuth_init",
            "no-gp": "skip_gp",
        }.get(name)
        if flag is None:
            raise ValueError(f"unknown ablation {name!r}; choose from {ABLATIONS}")
        setattr(self, flag, True)

    def to_dict(self):
        d = dataclasses.asdict(self)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class Adam:
    def __init__(self, params: dict, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1**self.t, 1 - b2**self.t
        for name in sorted(grads):
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---- azimuth initializer ---------------------------------------------------------

def init_azimuth(scene: Scene, source=None) -> np.ndarray:
    """Unit xy azimuth per light, (f, 2).

    Default: factor the masked image matrix as pseudo normals times pseudo
    lights (rank 3), then pick the linear transform under which contour
    pixels have horizontal normals pointing along the silhouette normals.
    The xy part of a light is unchanged by the remaining bas-relief freedom,
    so its azimuth is determined. ``source`` may instead be a path to a
    text/npy file or an array of per-light directions or azimuths.
    """
    if source is not None:
        return _azimuth_from(source, scene.n_images)
    f = scene.n_images
    if f < 3:
        raise ValueError("azimuth initializer needs at least 3 images")
    M = scene.images[:, scene.mask].T  # (P, f)
    U, s, Vt = np.linalg.svd(M, full_matrices=False)
    if len(s) < 3 or s[2] <= 1e-9 * s[0]:
        raise np.linalg.LinAlgError("image matrix has rank below 3")
    root = np.sqrt(s[:3])
    B = U[:, :3] * root  # pseudo scaled normals
    S = root[:, None] * Vt[:3]  # pseudo lights (3, f)

    sil = fit_silhouette_normals(scene.mask)
    index = -np.ones(scene.mask.shape, dtype=int)
    index[scene.mask] = np.arange(scene.mask.sum())
    pr, pc = sil.points[:, 0], sil.points[:, 1]
    Bk = B[index[pr, pc]]
    nx, ny = sil.normals[:, 0], sil.normals[:, 1]

    a3 = np.linalg.svd(Bk)[2][-1]  # boundary normals have no z component
    basis = np.linalg.svd(a3[None])[2][1:].T  # (3, 2) orthogonal complement
    C = Bk @ basis
    A = np.hstack([ny[:, None] * C, -nx[:, None] * C])
    c = np.linalg.svd(A)[2][-1]
    a1, a2 = basis @ c[:2], basis @ c[2:]
    bx, by = Bk @ a1, Bk @ a2
    if np.sum(bx * nx + by * ny) < 0:
        a1, a2 = -a1, -a2
    Q = np.stack([a1, a2, a3], axis=1)
    if abs(np.linalg.det(Q)) < 1e-12:
        raise np.linalg.LinAlgError("degenerate silhouette constraint")
    lights = np.linalg.solve(Q, S).T  # (f, 3)
    return _unit_xy(lights[:, :2])


def _unit_xy(xy):
    xy = np.asarray(xy, dtype=np.float64)
    norm = np.linalg.norm(xy, axis=1, keepdims=True)
    return np.where(norm > 0, xy / np.where(norm > 0, norm, 1.0), 0.0)


def _azimuth_from(source, n):
    if isinstance(source, (str, bytes)) or hasattr(source, "__fspath__"):
        path = str(source)
        arr = np.load(path) if path.endswith(".npy") else np.loadtxt(path, ndmin=2)
    else:
        arr = np.asarray(source, dtype=np.float64)
    arr = np.atleast_2d(arr)
    if arr.shape[0] != n:
        raise ValueError(f"azimuth file has {arr.shape[0]} rows, expected {n}")
    if arr.shape[1] == 1:  # angles in radians
        arr = np.stack([np.cos(arr[:, 0]), np.sin(arr[:, 0])], axis=1)
    return _unit_xy(arr[:, :2])


# ---- model state -----------------------------------------------------------------

@dataclass
class TrainedModel:
    fields: F.NeuralFields
    normals: np.ndarray  # (H, W, 3), unit inside mask
    lights: np.ndarray  # (f, 3)
    intensities: np.ndarray  # (f,)
    depth: np.ndarray  # (H, W)
    history: list = field(default_factory=list)  # LossReport per epoch
    config: TrainConfig | None = None
    config_hash: str = ""


def _pixel_codes(mask, n_freqs):
    rows, cols = np.nonzero(mask)
    xy = pixel_coordinates(rows, cols, *mask.shape)
    return positional_encode(xy, n_freqs)


def predict_normals(fields: F.NeuralFields, mask, chunk=4096):
    codes = _pixel_codes(mask, fields.config.n_freqs)
    out = np.zeros(mask.shape + (3,))
    parts = [fields.position_eval(codes[i:i + chunk]).normal for i in range(0, len(codes), chunk)]
    out[mask] = np.concatenate(parts)
    return out


def predict_lights(fields: F.NeuralFields, images):
    state = fields.light_eval(images)
    return state.direction, state.intensity


def refresh_geometry(normals, lights, mask, previous=None):
    """Integrate depth from ``normals`` and ray-march one shadow map per light.

    On integration failure the ``previous`` (depth, shadows) pair is
    returned unchanged, or the error re-raised if there is none.
    """
    try:
        depth = integrate_normals(normals, mask)
    except (ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
        if previous is None:
            raise
        log.warning("depth integration failed, keeping previous geometry: %s", exc)
        return previous
    shadows = np.stack([raymarch_shadow(depth, mask, l) for l in np.atleast_2d(lights)])
    return depth, shadows


# ---- one optimisation step ----------------------------------------------------------

@dataclass
class Batch:
    pixels: np.ndarray  # indices into the masked-pixel list
    lights: np.ndarray  # image indices


class _Context:
    """Everything precomputed from the (ground-truth-free) scene."""

    def __init__(self, scene: Scene, config: TrainConfig, fcfg: F.FieldConfig):
        self.mask = scene.mask
        self.observed = scene.images[:, scene.mask].T  # (P, f)
        self.codes = _pixel_codes(scene.mask, fcfg.n_freqs)
        self.light_input = F.prepare_light_input(scene.images, fcfg.encoder_res)
        sil = fit_silhouette_normals(scene.mask)
        self.sil_normals = sil.normals
        xy = pixel_coordinates(sil.points[:, 0], sil.points[:, 1], *scene.mask.shape)
        self.sil_codes = positional_encode(xy, fcfg.n_freqs)
        self.pseudo = pseudo_shadow(scene.images, scene.mask)[:, scene.mask].T  # (P, f)
        self.azimuth = None if config.skip_azimuth_init else init_azimuth(scene)


def batch_terms(fields: F.NeuralFields, ctx: _Context, batch: Batch, config: TrainConfig, phase: str,
                rendered_shadows=None, rng=None):
    """Build the loss for one batch; returns (tape, bound params, total node, term nodes)."""
    cfg = fields.config
    tape = ad.Tape()
    P = fields.bind(tape)
    px, lj = batch.pixels, batch.lights

    normal, albedo, kd = position_forward_codes(P, tape, ctx.codes[px], cfg)
    direction, intensity, _ = F.light_forward(P, tape.constant(ctx.light_input[lj]), cfg)

    spec_light = ad.stop_gradient(direction) if config.cut_specular_to_light else direction
    half = half_vector_node(spec_light)
    n_pix, n_lit = len(px), len(lj)
    nh = ad.reshape(normal @ ad.transpose(half), (n_pix * n_lit, 1))
    vh = ad.reshape(ad.reshape(half[:, 2], (1, n_lit)) + np.zeros((n_pix, 1)), (n_pix * n_lit, 1))
    rho_s = ad.reshape(F.specular_forward(P, vh, nh, cfg), (n_pix, n_lit))

    shadow_light = ad.stop_gradient(direction) if config.cut_shadow_to_light else direction
    pre, lit = F.shadow_forward(P, tape.constant(ctx.codes[px]), shadow_light, cfg)

    rendered = F.render_pixels(normal, albedo, kd, direction, intensity, rho_s, lit)
    terms = {"rec": L.rec_loss(ctx.observed[np.ix_(px, lj)], rendered)}

    sil_normal, _, _ = position_forward_codes(P, tape, ctx.sil_codes, cfg)
    terms["si"], _ = L.si_loss(sil_normal, ctx.sil_normals)

    if phase == "warmup":
        include = config.warmup_terms()
        if "az" in include:
            terms["az"] = L.az_loss(direction, ctx.azimuth[lj])
        if "gp" in include:
            gp_nh = rng.uniform(0.0, 1.0, (config.gp_batch, 1))
            gp_vh = rng.uniform(1 / np.sqrt(2), 1.0, (config.gp_batch, 1))
            _, drho = F.specular_with_input_grad(P, gp_vh, gp_nh, cfg)
            terms["gp"] = L.gp_loss(drho)
        terms["shadow"] = L.shadow_loss(lit, ctx.pseudo[np.ix_(px, lj)])
        total = L.warmup_total(terms, config.weights, include)
    else:
        terms["recshadow"] = L.recshadow_loss(lit, rendered_shadows[np.ix_(px, lj)])
        total = L.main_total(terms, config.weights)
    return tape, P, total, terms


def position_forward_codes(P, tape, codes, cfg):
    return F.position_forward(P, tape.constant(codes), cfg)


# ---- training ------------------------------------------------------------------------

def _check_scene(scene: Scene):
    gt = [name for name in ("gt_normals", "gt_depth", "gt_lights", "gt_intensities") if getattr(scene, name) is not None]
    if gt:
        raise ValueError(f"train_scene must receive a scene without ground truth; found {gt}")


def _batches(rng, n_pixels, n_lights, config):
    order = rng.permutation(n_pixels)
    light_order = rng.permutation(n_lights)
    n_light_batches = -(-n_lights // config.light_batch)
    out = []
    for b, start in enumerate(range(0, n_pixels, config.pixel_batch)):
        k = b % n_light_batches
        lights = np.sort(light_order[k * config.light_batch:(k + 1) * config.light_batch])
        out.append(Batch(order[start:start + config.pixel_batch], lights))
    return out


def _current_geometry(fields, ctx, scene, previous):
    normals = predict_normals(fields, scene.mask)
    lights, _ = predict_lights(fields, scene.images)
    depth, shadows = refresh_geometry(normals, lights, scene.mask, previous)
    return depth, shadows


def train_scene(scene: Scene, config: TrainConfig | None = None, field_config: F.FieldConfig | None = None,
                callback=None, azimuth=None) -> TrainedModel:
    """Fit all four fields to an image stack.

    ``scene`` must be stripped of ground truth (``Scene.without_ground_truth``).
    ``callback(report)`` is invoked after every epoch. ``azimuth`` overrides
    the built-in initializer (array or file path).
    """
    config = config or TrainConfig()
    _check_scene(scene)
    fcfg = dataclasses.replace(field_config or F.FieldConfig(), n_freqs=config.n_freqs)
    fields = F.NeuralFields(fcfg, seed=config.seed)
    ctx = _Context(scene, dataclasses.replace(config, skip_azimuth_init=True), fcfg)
    if not config.skip_azimuth_init:
        ctx.azimuth = init_azimuth(scene, azimuth)
    rng = np.random.default_rng(config.seed)
    opt = Adam(fields.params)
    history: list[L.LossReport] = []
    geometry = None

    for epoch in range(1, config.total_epochs + 1):
        phase = "warmup" if epoch <= config.warmup_epochs else "main"
        lr = config.lr_at(epoch)
        if phase == "main" and geometry is None:
            geometry = _current_geometry(fields, ctx, scene, None)
        sums: dict[str, float] = {}
        total_sum, count = 0.0, 0
        for batch in _batches(rng, len(ctx.codes), scene.n_images, config):
            if phase == "main" and config.shadow_refresh == "per-batch" and count > 0:
                geometry = _current_geometry(fields, ctx, scene, geometry)
            shadows = geometry[1][:, scene.mask].T if geometry is not None else None
            try:
                tape, P, total, terms = batch_terms(fields, ctx, batch, config, phase, shadows, rng)
            except FloatingPointError as exc:
                raise _diverged(fields, epoch, phase, {}, str(exc)) from exc
            values = {k: L.scalar(v) for k, v in terms.items()}
            if not np.isfinite(total.value) or not all(np.isfinite(v) for v in values.values()):
                raise _diverged(fields, epoch, phase, values, "non-finite loss")
            tape.backward(total)
            grads = P.grads()
            if not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise _diverged(fields, epoch, phase, values, "non-finite gradient")
            opt.step(fields.params, grads, lr)
            for k, v in values.items():
                sums[k] = sums.get(k, 0.0) + v
            total_sum += L.scalar(total)
            count += 1
        report = L.LossReport(epoch, phase, {k: v / count for k, v in sums.items()}, total_sum / count)
        history.append(report)
        if phase == "main" or epoch == config.warmup_epochs:
            geometry = _current_geometry(fields, ctx, scene, geometry)
        if callback is not None:
            callback(report)

    normals = predict_normals(fields, scene.mask)
    lights, intensities = predict_lights(fields, scene.images)
    depth = geometry[0] if geometry is not None else integrate_normals(normals, scene.mask)
    return TrainedModel(fields, normals, lights, intensities, depth, history, config)


def _diverged(fields, epoch, phase, values, why):
    snapshot = {
        "epoch": epoch,
        "phase": phase,
        "terms": values,
        "params": {k: v.copy() for k, v in fields.params.items()},
    }
    return TrainingDiverged(f"training diverged at epoch {epoch} ({phase}): {why}", snapshot)


# ---- evaluation of a trained model ---------------------------------------------------

def intrinsics_maps(fields: F.NeuralFields, mask):
    """Normal (H,W,3), albedo (H,W) and kd (H,W) maps from PositionNet."""
    intr = fields.position_eval(_pixel_codes(mask, fields.config.n_freqs))
    normals = np.zeros(mask.shape + (3,))
    albedo = np.zeros(mask.shape)
    kd = np.zeros(mask.shape)
    normals[mask], albedo[mask], kd[mask] = intr.normal, intr.albedo, intr.kd
    return normals, albedo, kd


def render_images(fields: F.NeuralFields, images, mask, chunk=512):
    """Re-render every input image from the model (lights are inferred from ``images``)."""
    cfg = fields.config
    codes = _pixel_codes(mask, cfg.n_freqs)
    light_input = F.prepare_light_input(images, cfg.encoder_res)
    out = np.zeros((len(images), codes.shape[0]))
    for start in range(0, len(codes), chunk):
        tape = ad.Tape()
        P = fields.bind(tape, trainable=False)
        c = codes[start:start + chunk]
        normal, albedo, kd = F.position_forward(P, tape.constant(c), cfg)
        direction, intensity, _ = F.light_forward(P, tape.constant(light_input), cfg)
        half = half_vector_node(direction)
        n, f = len(c), direction.shape[0]
        nh = ad.reshape(normal @ ad.transpose(half), (n * f, 1))
        vh = tape.constant(np.broadcast_to(half.value[:, 2][None], (n, f)).reshape(-1, 1))
        rho_s = ad.reshape(F.specular_forward(P, vh, nh, cfg), (n, f))
        _, lit = F.shadow_forward(P, tape.constant(c), direction, cfg)
        out[:, start:start + chunk] = F.render_pixels(normal, albedo, kd, direction, intensity, rho_s, lit).value.T
    result = np.zeros((len(images),) + mask.shape)
    result[:, mask] = out
    return result
