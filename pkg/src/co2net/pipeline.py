"""Training loop, batch/pair sampling, evaluation and gradient checking."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tape
from .config import RunConfig
from .data import VideoRecord, sample_training_snippets
from .evaluation import EvalReport, map_report
from .localization import Proposal, localize_video
from .losses import total_loss
from .model import Co2Net, ForwardOutput, save_checkpoint

log = logging.getLogger(__name__)


class NonFiniteLossError(RuntimeError):
    def __init__(self, step: int, breakdown: dict):
        super().__init__(f"non-finite loss at step {step}: {breakdown}")
        self.step = step
        self.breakdown = breakdown


class PairingError(RuntimeError):
    pass


def greedy_pairs(label_sets: list[set[int]], n_pairs: int) -> list[tuple[int, int, int]]:
    """Pair batch members in order with the next unpaired member sharing a label."""
    used: set[int] = set()
    pairs = []
    for i, li in enumerate(label_sets):
        if len(pairs) == n_pairs:
            break
        if i in used:
            continue
        for j in range(i + 1, len(label_sets)):
            shared = li & label_sets[j]
            if j not in used and shared:
                used.update((i, j))
                pairs.append((i, j, min(shared)))
                break
    return pairs


def sample_batch(records: list[VideoRecord], batch_videos: int, n_pairs: int,
                 rng: np.random.Generator, max_tries: int = 1000):
    """Draw batch indices until greedy pairing yields ``n_pairs`` pairs."""
    label_sets = [set(np.flatnonzero(r.labels).tolist()) for r in records]
    size = min(batch_videos, len(records))
    for _ in range(max_tries):
        idx = rng.choice(len(records), size=size, replace=False)
        pairs = greedy_pairs([label_sets[i] for i in idx], n_pairs)
        if len(pairs) == n_pairs:
            return idx, pairs
    raise PairingError(f"could not find {n_pairs} same-label pairs in {max_tries} draws")


def stack_batch(records: list[VideoRecord], idx, T_fixed: int, rng):
    sampled = [sample_training_snippets(records[i], T_fixed, rng) for i in idx]
    rgb = np.stack([s.rgb for s in sampled])
    flow = np.stack([s.flow for s in sampled])
    labels = np.stack([s.labels for s in sampled])
    return rgb, flow, labels


def batch_loss(model: Co2Net, cfg: RunConfig, rgb, flow, labels, pairs, train: bool, rng):
    out = model.forward(rgb, flow, train=train, rng=rng)
    return total_loss(out, labels, pairs, cfg.loss), out


@dataclass
class TrainResult:
    model: Co2Net
    log_lines: list[str]
    steps: int


def train(cfg: RunConfig, records: list[VideoRecord], log_path=None, checkpoint_path=None,
          model: Co2Net | None = None, tag: dict | None = None) -> TrainResult:
    """Seeded Adam loop. ``tag`` entries are appended to every log line."""
    cfg.validate()
    tc = cfg.train
    rng = np.random.default_rng(tc.seed)
    if model is None:
        model = Co2Net(cfg.model, rng=np.random.default_rng([tc.seed, 1]))
    params = model.parameters()
    lines: list[str] = []
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for step in range(1, tc.max_steps + 1):
            idx, pairs = sample_batch(records, tc.batch_videos, tc.pairs_per_batch, rng)
            rgb, flow, labels = stack_batch(records, idx, tc.snippets_per_video, rng)
            with Tape():
                br, _ = batch_loss(model, cfg, rgb, flow, labels, pairs, True, rng)
                values = br.as_dict()
                if not math.isfinite(values["total"]):
                    raise NonFiniteLossError(step, values)
                ag.backward(br.total)
            ag.adam_step(params, tc.lr, tc.weight_decay)
            if step % tc.log_every == 0 or step == tc.max_steps:
                line = json.dumps({"step": step, **values, **(tag or {})})
                lines.append(line)
                if log_fh:
                    log_fh.write(line + "\n")
            if checkpoint_path and tc.checkpoint_every and step % tc.checkpoint_every == 0:
                save_checkpoint(model, checkpoint_path)
    finally:
        if log_fh:
            log_fh.close()
    if checkpoint_path:
        save_checkpoint(model, checkpoint_path)
    return TrainResult(model, lines, tc.max_steps)


def infer(model: Co2Net, record: VideoRecord) -> ForwardOutput:
    """Eval-mode forward over every snippet of one video (no tape)."""
    return model.forward(record.rgb, record.flow, train=False)


def localize_all(model: Co2Net, cfg: RunConfig, records: list[VideoRecord]):
    results = {}
    for r in sorted(records, key=lambda r: r.id):
        results[r.id] = localize_video(infer(model, r), cfg.localize, cfg.loss.topk_divisor)
    return results


def evaluate(model: Co2Net, cfg: RunConfig, records: list[VideoRecord], class_names) -> tuple[EvalReport, dict]:
    proposals = localize_all(model, cfg, records)
    flat = [(vid, p.t_start, p.t_end, p.cls, p.confidence)
            for vid, props in proposals.items() for p in props]
    gt = [(r.id, s, e, c) for r in records for s, e, c in r.gt_segments]
    report = map_report(flat, gt, class_names)
    return report, proposals


def proposal_dump(proposals: dict[str, list[Proposal]], class_names, fps_by_video=None) -> list[dict]:
    out = []
    for vid in sorted(proposals):
        fps = (fps_by_video or {}).get(vid)
        for p in proposals[vid]:
            item = {"video_id": vid, "t_start": p.t_start, "t_end": p.t_end,
                    "class_name": class_names[p.cls], "confidence": p.confidence}
            if fps:
                item["t_start_sec"] = p.t_start * 16.0 / fps
                item["t_end_sec"] = p.t_end * 16.0 / fps
            out.append(item)
    return out


def gradcheck_model(cfg: RunConfig, records: list[VideoRecord], h: float = 1e-3,
                    T_fixed: int | None = None, params=None):
    """Finite-difference check of every parameter through the total loss
    on one fixed batch (dropout off)."""
    tc = cfg.train
    rng = np.random.default_rng(tc.seed)
    model = Co2Net(cfg.model, rng=np.random.default_rng([tc.seed, 1]))
    idx, pairs = sample_batch(records, tc.batch_videos, tc.pairs_per_batch, rng)
    rgb, flow, labels = stack_batch(records, idx, T_fixed or tc.snippets_per_video, rng)

    def f():
        br, _ = batch_loss(model, cfg, rgb, flow, labels, pairs, False, None)
        return br.total

    return ag.finite_diff_check(f, params or model.parameters(), h=h)


def write_json(path, obj) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=False) + "\n", encoding="utf-8")
