"""Training objectives: top-k MIL, co-activity similarity, mutual learning,
opposite and norm regularisers, and their weighted sum."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import ConfigError, DimensionError, Tensor

log = logging.getLogger(__name__)

LOSS_TERMS = ("mil", "oppo", "ml", "cas", "norm")
KL_EPS = 1e-7


class LabelError(ValueError):
    pass


class DomainError(ValueError):
    pass


@dataclass
class LossConfig:
    alpha: float = 0.5
    lambda1: float = 0.8
    lambda2: float = 0.8
    topk_divisor: int = 8
    cas_margin: float = 0.5
    delta_mode: str = "mse"
    enabled: list[str] = field(default_factory=lambda: list(LOSS_TERMS))

    def validate(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("lambda1 and lambda2 must be non-negative")
        if self.topk_divisor < 1:
            raise ConfigError(f"topk_divisor must be >= 1, got {self.topk_divisor}")
        unknown = set(self.enabled) - set(LOSS_TERMS)
        if unknown:
            raise ConfigError(f"unknown loss terms {sorted(unknown)}; known: {LOSS_TERMS}")
        if self.delta_mode not in ("mse", "mae", "kl", "js"):
            raise ConfigError(f"unknown delta_mode {self.delta_mode!r}")


def topk_k(T: int, k_divisor: int) -> int:
    return max(1, T // k_divisor)


def topk_mil_loss(tcam, labels, background_label: int, k_divisor: int = 8) -> Tensor:
    """Cross-entropy between softmaxed top-k class means and normalised labels.

    ``tcam`` is ``(..., T, C+1)``, ``labels`` ``(..., C)``; batched inputs give
    the mean over videos.
    """
    tcam = ag._as_tensor(tcam)
    labels = np.asarray(labels, dtype=np.float64)
    T = tcam.shape[-2]
    if T < 1:
        raise ag.EmptySequenceError("top-k MIL on an empty sequence")
    if labels.shape[-1] + 1 != tcam.shape[-1]:
        raise DimensionError(f"labels {labels.shape} do not match T-CAM {tcam.shape}")
    bg = np.full(labels.shape[:-1] + (1,), float(background_label))
    y = np.concatenate([labels, bg], axis=-1)
    totals = y.sum(axis=-1, keepdims=True)
    if np.any(totals <= 0):
        raise LabelError("extended label vector is all zero")
    y = y / totals
    video_logits = ag.topk_mean(tcam, topk_k(T, k_divisor), axis=-2)
    per_video = -ag.sum_(ag.log_softmax(video_logits, axis=-1) * y, axis=-1)
    return ag.mean(per_video)


def _cos_distance(u: Tensor, v: Tensor) -> tuple[Tensor, bool]:
    nu = float(np.linalg.norm(u.data))
    nv = float(np.linalg.norm(v.data))
    if nu == 0.0 or nv == 0.0:
        return ag.tensor(0.5), True
    cos = ag.sum_(u * v) / (ag.sqrt(ag.sum_(ag.square(u))) * ag.sqrt(ag.sum_(ag.square(v))))
    return (1.0 - cos) * 0.5, False


def _aggregates(x: Tensor, s: Tensor, j: int) -> tuple[Tensor, Tensor]:
    col = s[..., j]
    w_high = ag.softmax(col, axis=-1)
    w_low = ag.softmax(-col, axis=-1)
    high = ag.sum_(x * w_high[..., None], axis=-2)
    low = ag.sum_(x * w_low[..., None], axis=-2)
    return high, low


def coactivity_pair_loss(x_m, s_m, x_n, s_n, j: int, margin: float = 0.5) -> tuple[Tensor, bool]:
    """Hinge ranking loss for one pair of videos sharing class ``j``.

    Returns the loss and whether any aggregate had zero norm.
    """
    h_m, l_m = _aggregates(ag._as_tensor(x_m), ag._as_tensor(s_m), j)
    h_n, l_n = _aggregates(ag._as_tensor(x_n), ag._as_tensor(s_n), j)
    d_hh, dg1 = _cos_distance(h_m, h_n)
    d_hl, dg2 = _cos_distance(h_m, l_n)
    d_lh, dg3 = _cos_distance(l_m, h_n)
    loss = (ag.relu(d_hh - d_hl + margin) + ag.relu(d_hh - d_lh + margin)) * 0.5
    return loss, dg1 or dg2 or dg3


def coactivity_loss(pairs, margin: float = 0.5) -> Tensor:
    """Mean pair loss; ``pairs`` holds ``(out_m, out_n, j)`` with per-video outputs."""
    if not pairs:
        return ag.tensor(0.0)
    total = None
    degenerate = 0
    for out_m, out_n, j in pairs:
        term, deg = coactivity_pair_loss(out_m.fused_features, out_m.tcam_supp,
                                         out_n.fused_features, out_n.tcam_supp, j, margin)
        degenerate += deg
        total = term if total is None else total + term
    if degenerate:
        log.warning("co-activity loss: %d pair(s) had a zero-norm aggregate", degenerate)
    return total * (1.0 / len(pairs))


def _check_unit(name: str, a: Tensor) -> None:
    if np.any(a.data < 0.0) or np.any(a.data > 1.0):
        raise DomainError(f"{name} has values outside [0, 1]")


def _bernoulli_kl(p, q) -> Tensor:
    """KL(p || q) per element for Bernoulli(p), Bernoulli(q); both clamped."""
    p = ag.clip(p, KL_EPS, 1.0 - KL_EPS)
    q = ag.clip(q, KL_EPS, 1.0 - KL_EPS)
    return p * (ag.log(p) - ag.log(q)) + (1.0 - p) * (ag.log(1.0 - p) - ag.log(1.0 - q))


def delta(pred, target, mode: str) -> Tensor:
    pred, target = ag._as_tensor(pred), ag._as_tensor(target)
    if mode == "mse":
        return ag.mean(ag.square(pred - target))
    if mode == "mae":
        return ag.mean(ag.abs_(pred - target))
    if mode == "kl":
        return ag.mean(_bernoulli_kl(target, pred))
    if mode == "js":
        mid = (pred + target) * 0.5
        return ag.mean((_bernoulli_kl(pred, mid) + _bernoulli_kl(target, mid)) * 0.5)
    raise ConfigError(f"unknown delta_mode {mode!r}")


def mutual_learning_loss(a_rgb, a_flow, alpha: float = 0.5, delta_mode: str = "mse") -> Tensor:
    """Each track regresses onto a gradient-free copy of the other."""
    a_rgb, a_flow = ag._as_tensor(a_rgb), ag._as_tensor(a_flow)
    if a_rgb.shape != a_flow.shape:
        raise DimensionError(f"track shapes differ: {a_rgb.shape} vs {a_flow.shape}")
    _check_unit("a_rgb", a_rgb)
    _check_unit("a_flow", a_flow)
    first = delta(a_rgb, ag.stop_gradient(a_flow), delta_mode)
    second = delta(a_flow, ag.stop_gradient(a_rgb), delta_mode)
    return first * alpha + second * (1.0 - alpha)


def background_prob(tcam) -> Tensor:
    return ag.softmax(ag._as_tensor(tcam), axis=-1)[..., -1]


def opposite_loss(a_rgb, a_flow, a_fused, tcam) -> Tensor:
    s = background_prob(tcam)
    terms = [ag.mean(ag.abs_(a + s - 1.0)) for a in (a_rgb, a_flow, a_fused)]
    return (terms[0] + terms[1] + terms[2]) * (1.0 / 3.0)


def norm_loss(a_rgb, a_flow, a_fused) -> Tensor:
    terms = [ag.mean(ag.abs_(ag._as_tensor(a))) for a in (a_rgb, a_flow, a_fused)]
    return (terms[0] + terms[1] + terms[2]) * (1.0 / 3.0)


@dataclass
class LossBreakdown:
    total: Tensor
    mil_org: Tensor | None = None
    mil_supp: Tensor | None = None
    cas: Tensor | None = None
    ml: Tensor | None = None
    oppo: Tensor | None = None
    norm: Tensor | None = None

    def as_dict(self) -> dict:
        out = {}
        for k in ("mil_org", "mil_supp", "cas", "ml", "oppo", "norm", "total"):
            v = getattr(self, k)
            out[k] = None if v is None else float(v.data)
        return out


def total_loss(out, labels, pairs, config: LossConfig) -> LossBreakdown:
    """Weighted sum of the enabled objectives over one batch.

    ``out`` is a (possibly batched) forward output, ``labels`` the matching
    ``(..., C)`` label array and ``pairs`` a list of ``(i, j, cls)`` batch
    indices for the co-activity term.
    """
    on = set(config.enabled)
    b = LossBreakdown(total=ag.tensor(0.0))
    parts = []
    if "mil" in on:
        b.mil_org = topk_mil_loss(out.tcam, labels, 1, config.topk_divisor)
        b.mil_supp = topk_mil_loss(out.tcam_supp, labels, 0, config.topk_divisor)
        parts += [b.mil_org, b.mil_supp]
    if "cas" in on:
        views = [(out.video(i), out.video(j), c) for i, j, c in pairs] if out.tcam.ndim == 3 else pairs
        b.cas = coactivity_loss(views, config.cas_margin)
        parts.append(b.cas)
    if "ml" in on:
        b.ml = mutual_learning_loss(out.a_rgb, out.a_flow, config.alpha, config.delta_mode)
        parts.append(b.ml)
    if "oppo" in on:
        b.oppo = opposite_loss(out.a_rgb, out.a_flow, out.a_fused, out.tcam)
        parts.append(b.oppo * config.lambda1)
    if "norm" in on:
        b.norm = norm_loss(out.a_rgb, out.a_flow, out.a_fused)
        parts.append(b.norm * config.lambda2)
    if parts:
        total = parts[0]
        for p in parts[1:]:
            total = total + p
        b.total = total
    return b
