"""The four neural intrinsics fields and the per-pixel renderer.

Parameters live in a flat ``dict[str, ndarray]``; every forward pass binds
them to leaves on a fresh :class:`~neif.autodiff.Tape` through
:class:`Bound`, so gradients come back keyed by the same names.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .encoding import binarize_node, encode_node, encode_with_tangent, half_vector_node, positional_encode


@dataclass
class FieldConfig:
    n_freqs: int = 4  # spatial and light-direction codes
    spec_freqs: int = 4
    pos_width: int = 128
    pos_depth: int = 8
    pos_skip: int = 4
    light_channels: tuple = (8, 16, 32, 4)
    light_width: int = 64
    encoder_res: int = 64
    spec_width: int = 64
    spec_depth: int = 4
    shadow_width: int = 128
    shadow_depth: int = 10
    shadow_light_layer: int = 9
    shadow_bias: float = 2.0  # start with every pixel lit
    visible_normals: bool = False  # keep n_z >= 0 (surface faces the camera)

    def to_dict(self):
        d = asdict(self)
        d["light_channels"] = list(self.light_channels)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "light_channels" in d:
            d["light_channels"] = tuple(d["light_channels"])
        return cls(**d)


@dataclass
class SurfaceIntrinsics:
    normal: np.ndarray  # (..., 3) unit
    albedo: np.ndarray  # rho_d >= 0
    kd: np.ndarray  # in [0, 1]

    @property
    def ks(self):
        return 1.0 - self.kd


@dataclass
class LightState:
    direction: np.ndarray  # (..., 3) unit, z > 0
    intensity: np.ndarray  # > 0
    half: np.ndarray  # bisector with the view direction


@dataclass
class ShadowIndicator:
    lit: np.ndarray  # binary
    pre: np.ndarray  # sigmoid output in [0, 1]


def _encoder_sizes(res, n_layers):
    sizes = [res]
    for _ in range(n_layers):
        sizes.append((sizes[-1] - 3) // 2 + 1)
    return sizes


def _dense(params, rng, name, fan_in, fan_out, gain=np.sqrt(2.0)):
    bound = gain * np.sqrt(3.0 / fan_in)
    params[f"{name}.W"] = rng.uniform(-bound, bound, (fan_in, fan_out))
    params[f"{name}.b"] = np.zeros(fan_out)


def init_params(config: FieldConfig, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    p: dict[str, np.ndarray] = {}
    cfg = config
    pos_in = 2 * cfg.n_freqs * 2
    width = cfg.pos_width
    for i in range(cfg.pos_depth):
        fan_in = pos_in if i == 0 else width
        if i == cfg.pos_skip:
            fan_in += pos_in
        _dense(p, rng, f"pos.{i}", fan_in, width)
    _dense(p, rng, "pos.normal", width, 3, gain=0.1)
    p["pos.normal.b"][2] = 1.0  # start near the frontal normal
    _dense(p, rng, "pos.albedo", width, 1, gain=0.1)
    _dense(p, rng, "pos.kd", width, 1, gain=0.1)
    p["pos.kd.b"][0] = 1.0

    chans = (1,) + tuple(cfg.light_channels)
    for i in range(len(cfg.light_channels)):
        fan_in = chans[i] * 9
        bound = np.sqrt(2.0) * np.sqrt(3.0 / fan_in)
        p[f"light.conv{i}.K"] = rng.uniform(-bound, bound, (chans[i + 1], chans[i], 3, 3))
        p[f"light.conv{i}.b"] = np.zeros(chans[i + 1])
    side = _encoder_sizes(cfg.encoder_res, len(cfg.light_channels))[-1]
    if side < 1:
        raise ValueError("encoder resolution too small for the conv stack")
    flat = chans[-1] * side * side
    _dense(p, rng, "light.dir0", flat, cfg.light_width)
    _dense(p, rng, "light.dir1", cfg.light_width, 3, gain=0.1)
    p["light.dir1.b"][2] = 1.0
    _dense(p, rng, "light.int0", flat, cfg.light_width)
    _dense(p, rng, "light.int1", cfg.light_width, 1, gain=0.1)
    p["light.int1.b"][0] = 0.5

    spec_in = 2 * cfg.spec_freqs * 2
    for i in range(cfg.spec_depth - 1):
        _dense(p, rng, f"spec.{i}", spec_in if i == 0 else cfg.spec_width, cfg.spec_width)
    _dense(p, rng, "spec.out", cfg.spec_width, 1, gain=0.1)

    sw = cfg.shadow_width
    light_code = 2 * cfg.n_freqs * 3
    for i in range(cfg.shadow_depth - 1):
        fan_in = pos_in if i == 0 else sw
        if i == cfg.shadow_light_layer - 1:
            _dense(p, rng, f"shadow.{i}", fan_in + light_code, sw)
        else:
            _dense(p, rng, f"shadow.{i}", fan_in, sw)
    _dense(p, rng, "shadow.out", sw, 1, gain=0.1)
    p["shadow.out.b"][0] = cfg.shadow_bias
    return p


def parameter_count(params) -> int:
    return int(sum(v.size for v in params.values()))


class Bound:
    """Lazily creates one tape leaf per parameter; ``grads`` maps names back."""

    def __init__(self, tape: ad.Tape, params: dict[str, np.ndarray], trainable=True):
        self.tape = tape
        self.params = params
        self.trainable = trainable
        self.leaves: dict[str, ad.Node] = {}

    def __getitem__(self, name) -> ad.Node:
        if name not in self.leaves:
            self.leaves[name] = self.tape.leaf(self.params[name], requires_grad=self.trainable)
        return self.leaves[name]

    def grads(self) -> dict[str, np.ndarray]:
        out = {}
        for name, leaf in self.leaves.items():
            out[name] = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value)
        return out


def _linear(P: Bound, name, x):
    return x @ P[f"{name}.W"] + P[f"{name}.b"]


# ---- PositionNet -----------------------------------------------------------------

def position_forward(P: Bound, code: ad.Node, config: FieldConfig):
    """Normals (N,3), albedo (N,1), kd (N,1) from spatial codes (N, C)."""
    x = code
    for i in range(config.pos_depth):
        if i == config.pos_skip:
            x = ad.concat([x, code], axis=1)
        x = ad.relu(_linear(P, f"pos.{i}", x))
    raw = _linear(P, "pos.normal", x)
    if config.visible_normals:
        raw = ad.concat([raw[:, :2], ad.softplus(raw[:, 2:])], axis=1)
    normal = ad.l2_normalize(raw)
    albedo = ad.softplus(_linear(P, "pos.albedo", x))
    kd = ad.sigmoid(_linear(P, "pos.kd", x))
    return normal, albedo, kd


# ---- LightNet ----------------------------------------------------------------------

def light_forward(P: Bound, images: ad.Node, config: FieldConfig):
    """Directions (F,3), intensities (F,) and last-layer feature maps from (F,1,R,R) images."""
    x = images
    for i in range(len(config.light_channels)):
        x = ad.conv2d(x, P[f"light.conv{i}.K"], stride=2)
        x = ad.leaky_relu(x + ad.reshape(P[f"light.conv{i}.b"], (1, -1, 1, 1)))
    features = x
    flat = ad.reshape(x, (x.shape[0], -1))
    d = _linear(P, "light.dir1", ad.leaky_relu(_linear(P, "light.dir0", flat)))
    d = ad.l2_normalize(d)
    # flip into the upper hemisphere; the sign is a constant w.r.t. the graph
    sign = np.where(d.value[:, 2:3] < 0, -1.0, 1.0)
    direction = d * sign
    e = ad.softplus(_linear(P, "light.int1", ad.leaky_relu(_linear(P, "light.int0", flat))))
    return direction, ad.reshape(e, (-1,)), features


def prepare_light_input(images: np.ndarray, res: int) -> np.ndarray:
    """Area-resample (F,H,W) images to (F,1,res,res), scaled by the stack maximum."""
    images = np.asarray(images, dtype=np.float64)
    f, h, w = images.shape
    peak = images.max()
    if peak <= 0:
        raise ValueError("all-zero image stack")
    if np.any(images.reshape(f, -1).max(axis=1) <= 0):
        raise ValueError("an image has no photometric content")
    ri = np.minimum((np.arange(res + 1) * h) // res, h)
    ci = np.minimum((np.arange(res + 1) * w) // res, w)
    out = np.zeros((f, res, res))
    if h >= res and w >= res:
        csum = np.pad(images, ((0, 0), (1, 0), (1, 0))).cumsum(1).cumsum(2)
        area = (ri[1:] - ri[:-1])[:, None] * (ci[1:] - ci[:-1])[None, :]
        out = (
            csum[:, ri[1:]][:, :, ci[1:]] - csum[:, ri[:-1]][:, :, ci[1:]]
            - csum[:, ri[1:]][:, :, ci[:-1]] + csum[:, ri[:-1]][:, :, ci[:-1]]
        ) / area
    else:
        rows = np.minimum((np.arange(res) + 0.5) * h / res, h - 1).astype(int)
        cols = np.minimum((np.arange(res) + 0.5) * w / res, w - 1).astype(int)
        out = images[:, rows][:, :, cols]
    return (out / peak)[:, None]


# ---- SpecularNet ------------------------------------------------------------------

def _spec_code_input(vh, nh):
    return ad.concat([vh, nh], axis=1)


def specular_forward(P: Bound, vh: ad.Node, nh: ad.Node, config: FieldConfig):
    """rho_s (N,1) from column inputs v.h and n.h."""
    x = encode_node(_spec_code_input(vh, nh), config.spec_freqs)
    for i in range(config.spec_depth - 1):
        x = ad.relu(_linear(P, f"spec.{i}", x))
    return ad.softplus(_linear(P, "spec.out", x))


def specular_with_input_grad(P: Bound, vh, nh, config: FieldConfig):
    """rho_s and d rho_s / d(n.h), both recorded on the tape.

    The derivative is carried forward as a tangent alongside the values, so
    a penalty on it back-propagates to the SpecularNet parameters.
    """
    tape = P.tape
    vh, nh = tape._lift(vh), tape._lift(nh)
    inp = _spec_code_input(vh, nh)
    direction = np.zeros(inp.shape)
    direction[:, 1] = 1.0
    x, dx = encode_with_tangent(inp, direction, config.spec_freqs)
    for i in range(config.spec_depth - 1):
        z = _linear(P, f"spec.{i}", x)
        gate = (z.value > 0).astype(np.float64)
        x = ad.relu(z)
        dx = (dx @ P[f"spec.{i}.W"]) * gate
    z = _linear(P, "spec.out", x)
    rho = ad.softplus(z)
    drho = ad.sigmoid(z) * (dx @ P["spec.out.W"])
    return rho, drho


# ---- ShadowNet --------------------------------------------------------------------

def shadow_forward(P: Bound, code: ad.Node, light: ad.Node, config: FieldConfig):
    """Pre-activation (N,F) in [0,1] and binary lit indicator (N,F).

    The light code joins at ``shadow_light_layer``; the concatenation is
    applied by splitting that layer's weight into spatial and light rows.
    """
    x = code
    join = config.shadow_light_layer - 1
    for i in range(join):
        x = ad.relu(_linear(P, f"shadow.{i}", x))
    lcode = encode_node(light, config.n_freqs)
    W = P[f"shadow.{join}.W"]
    width = x.shape[1]
    spatial = x @ W[:width]  # (N, H)
    lightpart = lcode @ W[width:]  # (F, H)
    n, f, hdim = spatial.shape[0], lightpart.shape[0], spatial.shape[1]
    x = ad.relu(
        ad.reshape(spatial, (n, 1, hdim)) + ad.reshape(lightpart, (1, f, hdim)) + P[f"shadow.{join}.b"]
    )
    x = ad.reshape(x, (n * f, hdim))
    for i in range(join + 1, config.shadow_depth - 1):
        x = ad.relu(_linear(P, f"shadow.{i}", x))
    pre = ad.reshape(ad.sigmoid(_linear(P, "shadow.out", x)), (n, f))
    return pre, binarize_node(pre)


# ---- rendering ----------------------------------------------------------------------

def render_pixels(normal, albedo, kd, direction, intensity, rho_s, lit):
    """m_ij = e_j s_ij (kd_i rho_d_i + ks_i rho_s_ij) max(n_i . l_j, 0), shape (N, F)."""
    shading = ad.clamp_min_zero(normal @ ad.transpose(direction))
    reflect = kd * albedo + (1.0 - kd) * rho_s
    return ad.reshape(intensity, (1, -1)) * lit * reflect * shading


def render_pixel(intr: SurfaceIntrinsics, light: LightState, rho_s, lit) -> np.ndarray:
    """Scalar/array version of the pixel model for already-evaluated intrinsics."""
    n_dot_l = np.sum(np.asarray(intr.normal) * np.asarray(light.direction), axis=-1)
    return light.intensity * lit * (intr.kd * intr.albedo + intr.ks * rho_s) * np.maximum(n_dot_l, 0.0)


class NeuralFields:
    """Parameters of the four fields plus convenience evaluators."""

    def __init__(self, config: FieldConfig | None = None, seed: int = 0, params=None):
        self.config = config or FieldConfig()
        self.params = params if params is not None else init_params(self.config, seed)

    def bind(self, tape, trainable=True) -> Bound:
        return Bound(tape, self.params, trainable)

    def position_eval(self, code) -> SurfaceIntrinsics:
        tape = ad.Tape()
        P = self.bind(tape, trainable=False)
        n, rho, kd = position_forward(P, tape.constant(np.atleast_2d(code)), self.config)
        return SurfaceIntrinsics(n.value, rho.value[:, 0], kd.value[:, 0])

    def light_eval(self, images) -> LightState:
        tape = ad.Tape()
        P = self.bind(tape, trainable=False)
        x = prepare_light_input(np.asarray(images, dtype=np.float64).reshape(-1, *np.shape(images)[-2:]), self.config.encoder_res)
        d, e, _ = light_forward(P, tape.constant(x), self.config)
        h = half_vector_node(d)
        return LightState(d.value, e.value, h.value)

    def specular_eval(self, vh, nh) -> np.ndarray:
        tape = ad.Tape()
        P = self.bind(tape, trainable=False)
        vh = np.asarray(vh, dtype=np.float64).reshape(-1, 1)
        nh = np.asarray(nh, dtype=np.float64).reshape(-1, 1)
        return specular_forward(P, tape.constant(vh), tape.constant(nh), self.config).value[:, 0]

    def shadow_eval(self, code, light) -> ShadowIndicator:
        tape = ad.Tape()
        P = self.bind(tape, trainable=False)
        pre, lit = shadow_forward(
            P, tape.constant(np.atleast_2d(code)), tape.constant(np.atleast_2d(light)), self.config
        )
        return ShadowIndicator(lit.value, pre.value)

    def spatial_code(self, xy) -> np.ndarray:
        return positional_encode(np.atleast_2d(xy), self.config.n_freqs)
