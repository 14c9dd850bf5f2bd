"""Quantitative metrics: rendered views per prompt and retrieval probability.

Retrieval at desk scale scores rendered views against per-prompt text anchors
in the downsample-feature space; the anchor of a prompt is the feature of its
canonical front-view target image.  With a remote image/text encoder the same
machinery reproduces the paper-style CLIP retrieval probability.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .prompts import PromptRecord, target_scene
from .renderer import CameraPose

EVAL_POSES = [CameraPose(polar=90.0, azimuth=a, radius=3.3, fov=75.0)
              for a in (0.0, 90.0, 180.0, 270.0)]
FRONT_POSE = EVAL_POSES[0]

# softmax temperature on cosine similarities; raw cosines are too flat to
# discriminate, mirroring the logit scale of contrastive encoders
LOGIT_SCALE = 10.0


@dataclass
class EvalReport:
    views_pp: float
    clip_rp: float
    per_prompt_rank: dict = field(default_factory=dict)
    curve: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({"views_pp": self.views_pp, "clip_rp": self.clip_rp,
                           "per_prompt_rank": self.per_prompt_rank,
                           "curve": self.curve}, sort_keys=True)


def views_pp(iterations: int, batch_size: int, num_prompts: int) -> float:
    """iterations * batch_size / num_prompts, in exact rational arithmetic."""
    if num_prompts < 1:
        raise ValueError("num_prompts must be >= 1")
    return float(Fraction(int(iterations) * int(batch_size), int(num_prompts)))


def text_anchor_features(records: list[PromptRecord], feature_oracle,
                         hw: int = 64) -> np.ndarray:
    """Per-prompt anchors: features of the canonical front-view target image."""
    anchors = [np.asarray(feature_oracle.features(
        target_scene(rec, FRONT_POSE, hw, hw))) for rec in records]
    return np.stack(anchors)


def clip_rp(render_fn, records: list[PromptRecord], feature_oracle,
            views: int = 4, hw: int = 64,
            anchors: np.ndarray | None = None,
            logit_scale: float = LOGIT_SCALE) -> tuple[float, dict]:
    """Retrieval probability of the correct prompt among the query set.

    ``render_fn(record, pose, hw)`` produces a linear-RGB view image.  Per
    view, cosine similarities against all anchors go through a softmax; the
    probability mass on the correct prompt is averaged over ``views`` poses
    and all prompts.  Returns (mean probability, per-prompt retrieval rank).
    """
    if not records:
        raise ValueError("empty query set")
    if anchors is None:
        anchors = text_anchor_features(records, feature_oracle, hw)
    anchors = anchors / np.linalg.norm(anchors, axis=1, keepdims=True)
    poses = EVAL_POSES[:views]
    probs = []
    ranks = {}
    for i, rec in enumerate(records):
        p_views = []
        for pose in poses:
            img = render_fn(rec, pose, hw)
            f = np.asarray(feature_oracle.features(img), dtype=np.float64)
            f = f / max(np.linalg.norm(f), 1e-12)
            sims = anchors @ f
            z = logit_scale * (sims - sims.max())
            p = np.exp(z) / np.exp(z).sum()
            p_views.append(p[i])
        probs.append(float(np.mean(p_views)))
    # rank prompts by their mean retrieval probability (1 = best)
    order = np.argsort(-np.asarray(probs))
    for r, idx in enumerate(order):
        ranks[records[idx].id] = r + 1
    return float(np.mean(probs)), ranks


def evaluate(render_fn, records: list[PromptRecord], feature_oracle,
             iterations: int, batch_size: int, views: int = 4,
             hw: int = 64) -> EvalReport:
    rp, ranks = clip_rp(render_fn, records, feature_oracle, views=views, hw=hw)
    return EvalReport(views_pp=views_pp(iterations, batch_size, len(records)),
                      clip_rp=rp, per_prompt_rank=ranks)


def write_curve_csv(path, curve: list[tuple[float, float]]) -> None:
    """Convergence curve rows (views_pp, clip_rp)."""
    with open(path, "w", encoding="utf-8") as f:
        f.write("views_pp,clip_rp\n")
        for vpp, rp in curve:
            f.write(f"{vpp},{rp}\n")
