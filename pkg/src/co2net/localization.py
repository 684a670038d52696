"""From attention tracks and suppressed T-CAMs to scored proposals."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autograd import ContractError
from .evaluation import tiou


@dataclass
class Proposal:
    t_start: float
    t_end: float
    cls: int
    confidence: float = 0.0

    def __post_init__(self):
        if not self.t_start < self.t_end:
            raise ContractError(f"proposal needs t_start < t_end, got [{self.t_start}, {self.t_end})")


def default_thresholds() -> list[float]:
    return [round(0.1 + 0.05 * i, 2) for i in range(17)]


@dataclass
class LocalizeConfig:
    class_threshold: float = 0.2
    attn_thresholds: list[float] = field(default_factory=default_thresholds)
    oic_inflation: float = 0.25
    nms_sigma: float = 0.3
    min_proposal_len: int = 2

    def validate(self) -> None:
        from .autograd import ConfigError
        if not all(0.0 < t < 1.0 for t in self.attn_thresholds):
            raise ConfigError("attention thresholds must lie in (0, 1)")
        if self.oic_inflation <= 0:
            raise ConfigError("oic_inflation must be positive")
        if self.nms_sigma <= 0:
            raise ConfigError("nms_sigma must be positive")
        if self.min_proposal_len < 1:
            raise ConfigError("min_proposal_len must be >= 1")


def video_class_scores(tcam_supp: np.ndarray, k_divisor: int = 8) -> np.ndarray:
    """Foreground probabilities from the top-k mean of each T-CAM column.

    The softmax runs over all C+1 columns; the background entry is dropped
    and the rest are not renormalised.
    """
    s = np.asarray(tcam_supp, dtype=np.float64)
    T = s.shape[0]
    k = max(1, T // k_divisor)
    v = -np.sort(-s, axis=0)[:k].mean(axis=0)
    e = np.exp(v - v.max())
    return (e / e.sum())[:-1]


def _runs(mask: np.ndarray):
    """Maximal runs of True as [start, end) pairs."""
    padded = np.concatenate([[False], mask, [False]])
    edges = np.flatnonzero(padded[1:] != padded[:-1])
    return list(zip(edges[0::2].tolist(), edges[1::2].tolist()))


def generate_proposals(a_fused, selected_classes, config: LocalizeConfig) -> list[Proposal]:
    a = np.asarray(a_fused, dtype=np.float64)
    segments = set()
    for theta in sorted(set(config.attn_thresholds)):
        for s, e in _runs(a >= theta):
            if e - s >= config.min_proposal_len:
                segments.add((s, e))
    return [Proposal(float(s), float(e), int(c))
            for c in sorted(set(selected_classes)) for s, e in sorted(segments)]


def oic_score(column, proposal: Proposal, inflation: float = 0.25) -> float:
    """Inner mean minus the mean over the inflated flanks (0 if flanks are empty).

    Snippet ``i`` belongs to a region ``[a, b)`` when ``a <= i < b``.
    """
    col = np.asarray(column, dtype=np.float64)
    T = col.shape[0]
    ts, te = proposal.t_start, proposal.t_end
    if not (0 <= ts < te <= T):
        raise ContractError(f"proposal [{ts}, {te}) outside [0, {T}]")
    inner = col[math.ceil(ts):math.ceil(te)]
    if inner.size == 0:
        raise ContractError(f"proposal [{ts}, {te}) contains no snippet")
    L = te - ts
    left = col[math.ceil(max(0.0, ts - inflation * L)):math.ceil(ts)]
    right = col[math.ceil(te):math.ceil(min(float(T), te + inflation * L))]
    outer = np.concatenate([left, right])
    outer_mean = outer.mean() if outer.size else 0.0
    return float(inner.mean() - outer_mean)


def soft_nms(proposals: list[Proposal], sigma: float = 0.3, min_score: float = 1e-4) -> list[Proposal]:
    """Gaussian soft-NMS within each class; returns new proposals sorted by score."""
    by_class: dict[int, list[Proposal]] = {}
    for p in proposals:
        by_class.setdefault(p.cls, []).append(p)
    kept: list[Proposal] = []
    for cls in sorted(by_class):
        pool = [Proposal(p.t_start, p.t_end, p.cls, p.confidence)
                for p in by_class[cls] if p.confidence >= min_score]
        while pool:
            best = max(range(len(pool)), key=lambda i: (pool[i].confidence, -pool[i].t_start, -i))
            top = pool.pop(best)
            kept.append(top)
            survivors = []
            for p in pool:
                ov = tiou((top.t_start, top.t_end), (p.t_start, p.t_end))
                p.confidence *= math.exp(-(ov * ov) / sigma)
                if p.confidence >= min_score:
                    survivors.append(p)
            pool = survivors
    kept.sort(key=lambda p: (-p.confidence, p.t_start, p.t_end, p.cls))
    return kept


def localize_video(out, config: LocalizeConfig, k_divisor: int = 8) -> list[Proposal]:
    """Class selection, multi-threshold proposals, OIC + class score, soft-NMS.

    ``out`` needs ``a_fused`` and ``tcam_supp`` (tensors or arrays) for one video.
    """
    a = np.asarray(getattr(out.a_fused, "data", out.a_fused), dtype=np.float64)
    s = np.asarray(getattr(out.tcam_supp, "data", out.tcam_supp), dtype=np.float64)
    scores = video_class_scores(s, k_divisor)
    selected = [c for c in range(scores.size) if scores[c] >= config.class_threshold]
    if not selected:
        selected = [int(np.argmax(scores))]
    props = generate_proposals(a, selected, config)
    for p in props:
        p.confidence = oic_score(s[:, p.cls], p, config.oic_inflation) + float(scores[p.cls])
    return soft_nms(props, config.nms_sigma)
