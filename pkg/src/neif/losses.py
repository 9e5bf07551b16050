"""Loss terms for training the intrinsics fields.

Every function takes tape nodes (or arrays, which are lifted as constants)
and returns a scalar node, so the result can be back-propagated directly.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad

WARMUP_TERMS = ("rec", "si", "az", "gp", "shadow")
MAIN_TERMS = ("rec", "si", "recshadow")


@dataclass
class LossWeights:
    si: float = 5.0
    az: float = 0.1
    gp: float = 10.0
    shadow: float = 10.0
    recshadow: float = 10.0

    def __post_init__(self):
        if min(asdict(self).values()) < 0:
            raise ValueError("loss weights must be non-negative")

    def weight(self, term):
        return 1.0 if term == "rec" else getattr(self, term)


@dataclass
class LossReport:
    epoch: int
    phase: str
    terms: dict = field(default_factory=dict)
    total: float = 0.0


def _tape_of(*xs):
    for x in xs:
        if isinstance(x, ad.Node):
            return x.tape
    return ad.Tape()


def _lift(tape, x):
    return x if isinstance(x, ad.Node) else tape.constant(x)


def rec_loss(observed, rendered):
    """Mean absolute difference over every (pixel, light) entry."""
    tape = _tape_of(rendered, observed)
    observed, rendered = _lift(tape, observed), _lift(tape, rendered)
    if observed.shape != rendered.shape:
        raise ValueError(f"shape mismatch {observed.shape} vs {rendered.shape}")
    if rendered.value.size == 0:
        raise ValueError("empty batch")
    return ad.mean(ad.absolute(observed - rendered))


def _xy_unit(v, eps):
    xy = v[:, 0:2]
    norm = np.linalg.norm(xy.value, axis=1)
    keep = np.nonzero(norm > eps)[0]
    return xy, keep


def si_loss(pred_normals, fitted_normals, eps: float = 1e-6):
    """Mean per-point l1 gap between normalised xy of the predicted normals and
    the fitted 2D silhouette normals.

    Points whose predicted normal has (near-)zero xy part are skipped; the
    number skipped is returned alongside the loss.
    """
    tape = _tape_of(pred_normals)
    pred = _lift(tape, pred_normals)
    fitted = np.asarray(fitted_normals, dtype=np.float64)
    xy, keep = _xy_unit(pred, eps)
    skipped = pred.shape[0] - len(keep)
    if len(keep) == 0:
        return tape.constant(0.0), skipped
    unit = ad.l2_normalize(xy[keep])
    per_point = ad.sum_(ad.absolute(unit - fitted[keep]), axis=1)
    return ad.mean(per_point), skipped


def az_loss(pred_lights, init_lights, eps: float = 1e-6):
    """Mean l2 distance between normalised xy projections of two light sets."""
    tape = _tape_of(pred_lights)
    pred = _lift(tape, pred_lights)
    ref = np.asarray(init_lights, dtype=np.float64)[:, :2]
    ref_norm = np.linalg.norm(ref, axis=1)
    xy, keep = _xy_unit(pred, eps)
    keep = keep[ref_norm[keep] > eps]
    if len(keep) == 0:
        return tape.constant(0.0)
    diff = ad.l2_normalize(xy[keep]) - ref[keep] / ref_norm[keep, None]
    return ad.mean(ad.norm(diff))


def gp_loss(input_grad):
    """Mean squared negative part of d rho_s / d(n.h)."""
    tape = _tape_of(input_grad)
    g = _lift(tape, input_grad)
    return ad.mean(ad.square(ad.clamp_min_zero(-g)))


def shadow_loss(predicted, target, weights=None):
    """Mean squared difference between shadow maps over the batch.

    ``weights`` (same shape, 0/1) restricts the mean to masked entries.
    """
    tape = _tape_of(predicted)
    predicted = _lift(tape, predicted)
    target = np.asarray(target, dtype=np.float64)
    if predicted.shape != target.shape:
        raise ValueError(f"shape mismatch {predicted.shape} vs {target.shape}")
    sq = ad.square(predicted - target)
    if weights is None:
        return ad.mean(sq)
    weights = np.asarray(weights, dtype=np.float64)
    return ad.sum_(sq * weights) / max(float(weights.sum()), 1.0)


def recshadow_loss(predicted, rendered, weights=None):
    """``shadow_loss`` against maps ray-marched from the integrated depth."""
    return shadow_loss(predicted, rendered, weights)


def _total(terms, weights, names):
    missing = [t for t in names if t not in terms]
    if missing:
        raise KeyError(f"missing loss terms: {missing}")
    total = None
    for name in names:
        term = terms[name]
        w = weights.weight(name)
        part = term * w if w != 1.0 else term
        total = part if total is None else total + part
    return total


def warmup_total(terms: dict, weights: LossWeights | None = None, include=WARMUP_TERMS):
    """rec + 5 si + 0.1 az + 10 gp + 10 shadow (with the default weights).

    ``include`` lets ablations drop terms; ``rec`` is always required.
    """
    weights = weights or LossWeights()
    return _total(terms, weights, [t for t in WARMUP_TERMS if t in include])


def main_total(terms: dict, weights: LossWeights | None = None):
    """rec + 5 si + 10 recshadow (with the default weights)."""
    return _total(terms, weights or LossWeights(), MAIN_TERMS)


def scalar(x) -> float:
    return float(x.value) if isinstance(x, ad.Node) else float(x)
