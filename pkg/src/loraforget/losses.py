"""Retain-preserving and forgetting objectives, plus their composites.

Every term is a scalar-valued function of tensors. Composites return the
weighted total together with each unweighted term so callers can log them.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from . import ndgrad as nd
from .ndgrad import Tensor

PROB_EPS = 1e-7
DICE_SMOOTH = 1.0
NORM_EPS = 1e-8


@dataclass
class LossWeights:
    """Scalar knobs of every objective.

    ``alpha_kd``, ``beta_guard``, ``lambda_forget`` and ``temperature`` carry
    published defaults; the ascent coefficients (``lambda_unc``,
    ``lambda_rep``, ``lambda_mean``, ``lambda_tv``, ``tc_weight``) and the
    descent pair (``gamma_des``, ``lambda_fg_guard``) are our choices.
    """

    alpha_kd: float = 1.0
    beta_guard: float = 0.05
    lambda_forget: float = 3.0
    alpha_flip: float = 1.0
    tc_weight: float = 1.0
    lambda_unc: float = 0.1
    lambda_rep: float = 0.1
    lambda_mean: float = 0.1
    lambda_tv: float = 0.01
    gamma_des: float = 1.0
    lambda_fg_guard: float = 0.05
    temperature: float = 2.0
    teacher_conf_threshold: float = 0.8

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.temperature <= 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")
        for name, value in asdict(self).items():
            if name not in ("temperature", "teacher_conf_threshold") and value < 0:
                raise ValueError(f"{name} must be >= 0, got {value}")
        if not 0.5 < self.teacher_conf_threshold < 1:
            raise ValueError(f"teacher_conf_threshold must lie in (0.5, 1), got {self.teacher_conf_threshold}")


def _const(x, like: Tensor) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=like.dtype))


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _clamped(probs: Tensor) -> Tensor:
    return nd.clamp(probs, PROB_EPS, 1 - PROB_EPS)


def bce_elementwise(probs: Tensor, target) -> Tensor:
    """-(t log p + (1 - t) log(1 - p)) with p clamped away from {0, 1}."""
    target = _const(target, probs)
    p = _clamped(probs)
    return nd.neg(target * nd.log(p) + (1 - target) * nd.log(1 - p))


def bce_logits_elementwise(logits: Tensor, target) -> Tensor:
    """softplus(z) - z*t, i.e. BCE of sigmoid(z) in log-sigmoid form.

    Matches the clamped-probability formula wherever sigmoid(z) lies inside
    [PROB_EPS, 1 - PROB_EPS], but keeps a gradient on saturated logits.
    """
    target = _const(target, logits)
    return nd.softplus(logits) - logits * target


def bce(logits: Tensor, target) -> Tensor:
    """Mean binary cross-entropy of sigmoid(logits) against ``target``."""
    target = _const(target, logits)
    _check_same(logits, target, "bce")
    return nd.mean(bce_logits_elementwise(logits, target))


def soft_dice_loss(logits: Tensor, target) -> Tensor:
    """1 - (2|P.G| + eps) / (|P| + |G| + eps), per item then averaged."""
    target = _const(target, logits)
    p = nd.sigmoid(logits)
    axes = tuple(range(1, logits.ndim))
    inter = nd.sum(p * target, axis=axes)
    denom = nd.sum(p, axis=axes) + nd.sum(target, axis=axes)
    return nd.mean(1 - (2 * inter + DICE_SMOOTH) / (denom + DICE_SMOOTH))


def dice_bce(logits: Tensor, target) -> Tensor:
    target = _const(target, logits)
    _check_same(logits, target, "dice_bce")
    if not np.isin(target.data, (0, 1)).all():
        raise ValueError("dice_bce: target mask must be binary")
    return soft_dice_loss(logits, target) + bce(logits, target)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(len(labels)), labels] = 1
    return nd.neg(nd.mean(nd.sum(nd.log_softmax(logits, axis=1) * Tensor(onehot), axis=1)))


def kd_loss(student_logits: Tensor, teacher_logits: Tensor, temperature: float = 2.0,
            kind: str = "sigmoid") -> Tensor:
    """T^2 * KL(student_T || teacher_T) on tempered probabilities.

    ``kind="sigmoid"``: per-entry Bernoulli KL, mean-reduced (segmentation).
    ``kind="softmax"``: categorical KL over axis 1, mean over rows.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    _check_same(student_logits, teacher_logits, "kd_loss")
    t = float(temperature)
    zs = nd.scalar_mul(student_logits, 1 / t)
    zt = nd.scalar_mul(teacher_logits, 1 / t)
    if kind == "softmax":
        ls, lt = nd.log_softmax(zs, axis=1), nd.log_softmax(zt, axis=1)
        kl = nd.mean(nd.sum(nd.exp(ls) * (ls - lt), axis=1))
    elif kind == "sigmoid":
        # log p = -softplus(-z), log(1 - p) = -softplus(z)
        ps = nd.sigmoid(zs)
        log_ratio_fg = nd.softplus(nd.neg(zt)) - nd.softplus(nd.neg(zs))
        log_ratio_bg = nd.softplus(zt) - nd.softplus(zs)
        kl = nd.mean(ps * log_ratio_fg + (1 - ps) * log_ratio_bg)
    else:
        raise ValueError(f"unknown kd kind {kind!r}")
    return nd.scalar_mul(kl, t * t)


def guard_loss(student_logits: Tensor, teacher_logits: Tensor) -> Tensor:
    _check_same(student_logits, teacher_logits, "guard_loss")
    diff = student_logits - teacher_logits
    return nd.mean(diff * diff)


def forget_background(logits: Tensor) -> Tensor:
    """BCE against the all-background mask."""
    return bce(logits, np.zeros(logits.shape, dtype=logits.dtype))


def flip_loss(logits: Tensor, target) -> Tensor:
    """BCE toward the complement mask ``1 - target``."""
    target = _const(target, logits)
    return bce(logits, 1 - target)


def teacher_contradiction(student_logits: Tensor, teacher_probs, threshold: float = 0.8) -> Tensor:
    """BCE toward ``1 - p_t`` on pixels where the teacher is confident."""
    pt = teacher_probs.data if isinstance(teacher_probs, Tensor) else np.asarray(teacher_probs)
    if pt.shape != student_logits.shape:
        raise ValueError(f"teacher_contradiction: shape mismatch {student_logits.shape} vs {pt.shape}")
    mask = (pt > threshold) | (pt < 1 - threshold)
    count = int(mask.sum())
    if count == 0:
        return Tensor(np.zeros((), dtype=student_logits.dtype))
    per_pixel = bce_logits_elementwise(student_logits, (1 - pt).astype(student_logits.dtype))
    return nd.scalar_mul(nd.sum(per_pixel * Tensor(mask.astype(student_logits.dtype))), 1.0 / count)


def entropy_term(probs: Tensor, categorical: bool = False, axis: int = 1) -> Tensor:
    """Mean entropy (larger = more uncertain).

    Binary by default (each entry is a Bernoulli probability); with
    ``categorical=True`` ``probs`` holds distributions along ``axis``.
    """
    p = _clamped(probs)
    if categorical:
        return nd.neg(nd.mean(nd.sum(p * nd.log(p), axis=axis)))
    return nd.mean(nd.neg(p * nd.log(p) + (1 - p) * nd.log(1 - p)))


def _l2norm(x: Tensor) -> Tensor:
    return nd.sqrt(nd.clamp(nd.sum(x * x, axis=1), NORM_EPS * NORM_EPS))


def cosine_similarity(f_s: Tensor, f_t: Tensor) -> Tensor:
    """Per-sample cosine between flattened feature maps, shape [N]."""
    _check_same(f_s, f_t, "cosine_similarity")
    n = f_s.shape[0]
    a, b = f_s.reshape(n, -1), f_t.reshape(n, -1)
    return nd.sum(a * b, axis=1) / (_l2norm(a) * _l2norm(b))


def repulsion(f_s: Tensor, f_t: Tensor) -> Tensor:
    """Mean ``1 - cos(f_s, f_t)`` over the batch."""
    return nd.mean(1 - cosine_similarity(f_s, f_t))


def mean_prob_reg(probs: Tensor) -> Tensor:
    m = nd.mean(probs) - 0.5
    return m * m


def tv_penalty(probs: Tensor) -> Tensor:
    """Anisotropic TV: mean |vertical diff| + mean |horizontal diff|."""
    if probs.ndim < 2:
        raise ValueError("tv_penalty needs at least 2-d input")
    dv = probs[..., 1:, :] - probs[..., :-1, :]
    dh = probs[..., :, 1:] - probs[..., :, :-1]
    return nd.mean(nd.abs(dv)) + nd.mean(nd.abs(dh))


def forget_cls(logits: Tensor, rng: np.random.Generator, mode: str = "random-label") -> Tensor:
    """Classification forgetting term.

    ``random-label``: cross-entropy against labels drawn uniformly from the
    C classes out of ``rng`` (fresh draw per call).
    ``entropy``: the negated posterior entropy, so minimising it pushes the
    posterior toward uniform.
    """
    c = logits.shape[-1]
    if c < 2:
        raise ValueError("forget_cls needs at least two classes")
    if mode == "random-label":
        return cross_entropy(logits, rng.integers(0, c, size=logits.shape[0]))
    if mode == "entropy":
        return nd.neg(entropy_term(nd.softmax(logits, axis=1), categorical=True))
    raise ValueError(f"unknown forget_cls mode {mode!r}")


# -- composites -------------------------------------------------------------

class Batch(NamedTuple):
    """Images plus targets, and the frozen teacher's outputs on them."""

    images: Tensor
    targets: np.ndarray  # masks [N,1,H,W] or labels [N]
    teacher_logits: Tensor
    teacher_features: Tensor | None = None


def make_batch(images, targets, teacher) -> Batch:
    """Evaluate the frozen ``teacher`` once (off the tape) and bundle."""
    images = images if isinstance(images, Tensor) else Tensor(images)
    with nd.no_grad():
        out = teacher(images)
    logits, feats = out if isinstance(out, tuple) else (out, None)
    return Batch(images, np.asarray(targets), logits, feats)


class Terms(NamedTuple):
    total: Tensor
    parts: dict


def _student_out(student, images):
    out = student(images)
    return out if isinstance(out, tuple) else (out, None)


def _supervised(logits: Tensor, targets) -> Tensor:
    if logits.ndim == 2:
        return cross_entropy(logits, targets)
    return dice_bce(logits, targets)


def _kd_kind(logits: Tensor) -> str:
    return "softmax" if logits.ndim == 2 else "sigmoid"


def retain_composite(batch: Batch, student, w: LossWeights, outputs=None) -> Terms:
    """sup/cls + alpha_kd * KD + beta_guard * guard."""
    logits, _ = outputs if outputs is not None else _student_out(student, batch.images)
    sup = _supervised(logits, batch.targets)
    kd = kd_loss(logits, batch.teacher_logits, w.temperature, _kd_kind(logits))
    guard = guard_loss(logits, batch.teacher_logits)
    total = sup + nd.scalar_mul(kd, w.alpha_kd) + nd.scalar_mul(guard, w.beta_guard)
    return Terms(total, {"sup": sup, "kd": kd, "guard": guard})


def ascent_composite(batch: Batch, student, w: LossWeights, outputs=None) -> Terms:
    """Minimised form of the forgetting composite on segmentation batches.

    alpha_flip*flip + tc_weight*tc + lambda_rep*repulsion
    + lambda_mean*mean_reg + lambda_tv*tv - lambda_unc*entropy.
    """
    logits, feats = outputs if outputs is not None else _student_out(student, batch.images)
    probs = nd.sigmoid(logits)
    teacher_probs = nd.sigmoid(batch.teacher_logits)
    parts = {
        "flip": flip_loss(logits, batch.targets),
        "tc": teacher_contradiction(logits, teacher_probs, w.teacher_conf_threshold),
        "entropy": entropy_term(probs),
        "repulsion": (repulsion(feats, batch.teacher_features)
                      if feats is not None and batch.teacher_features is not None
                      else Tensor(np.zeros((), dtype=logits.dtype))),
        "mean_reg": mean_prob_reg(probs),
        "tv": tv_penalty(probs),
    }
    total = (nd.scalar_mul(parts["flip"], w.alpha_flip)
             + nd.scalar_mul(parts["tc"], w.tc_weight)
             + nd.scalar_mul(parts["repulsion"], w.lambda_rep)
             + nd.scalar_mul(parts["mean_reg"], w.lambda_mean)
             + nd.scalar_mul(parts["tv"], w.lambda_tv)
             - nd.scalar_mul(parts["entropy"], w.lambda_unc))
    return Terms(total, parts)


def descent_composite(batch: Batch, student, w: LossWeights, supervised: bool = False, outputs=None) -> Terms:
    """gamma_des * KD + lambda_fg_guard * guard (+ sup when ``supervised``)."""
    logits, _ = outputs if outputs is not None else _student_out(student, batch.images)
    kd = kd_loss(logits, batch.teacher_logits, w.temperature, _kd_kind(logits))
    guard = guard_loss(logits, batch.teacher_logits)
    total = nd.scalar_mul(kd, w.gamma_des) + nd.scalar_mul(guard, w.lambda_fg_guard)
    parts = {"kd": kd, "guard": guard}
    if supervised:
        parts["sup"] = _supervised(logits, batch.targets)
        total = total + parts["sup"]
    return Terms(total, parts)


def forget_composite(batch: Batch, student, w: LossWeights, objective: str, rng=None, outputs=None) -> Terms:
    """lambda_forget * (chosen forgetting objective)."""
    outputs = outputs if outputs is not None else _student_out(student, batch.images)
    logits = outputs[0]
    if objective == "background":
        term = forget_background(logits)
    elif objective in ("random-label", "entropy"):
        term = forget_cls(logits, rng, objective)
    elif objective == "ascent-composite":
        term = ascent_composite(batch, student, w, outputs=outputs).total
    else:
        raise ValueError(f"unknown forget objective {objective!r}")
    return Terms(nd.scalar_mul(term, w.lambda_forget), {"forget": term})
