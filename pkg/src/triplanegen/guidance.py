"""Score-based training signals.

Forward diffusion, classifier-free guidance composition, the Perp-Neg
projection with its adaptive negation scale, the per-prompt severity cache,
the score-distillation pixel gradient, and the auxiliary cosine alignment
loss.  Score and image-feature oracles are pluggable: an in-process synthetic
oracle driven by procedural target scenes, or HTTP clients speaking the
documented wire protocol to a remote model server.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .prompts import PromptRecord, target_scene
from .renderer import CameraPose
from .wire import decode_tensor, encode_tensor


class OracleError(RuntimeError):
    """A score or feature oracle failed to produce a prediction."""


@dataclass
class DiffusionSchedule:
    """Cumulative-product alphas from linear betas over T steps."""

    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    alpha_bar: np.ndarray = field(init=False)

    def __post_init__(self):
        betas = np.linspace(self.beta_start, self.beta_end, self.T, dtype=np.float64)
        self.alpha_bar = np.cumprod(1.0 - betas)

    def at(self, t: int) -> float:
        """alpha_bar for a 1-based timestep."""
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")
        return float(self.alpha_bar[t - 1])


@dataclass
class GuidanceConfig:
    w_guidance: float = 100.0
    w_min: float = 2.0
    delta_w: float = 2.0
    t_range: tuple = (0.02, 0.98)
    cfg_only: bool = False


def forward_diffuse(img: np.ndarray, t: int, eps: np.ndarray,
                    sched: DiffusionSchedule) -> np.ndarray:
    """x_t = sqrt(abar_t) * img + sqrt(1 - abar_t) * eps."""
    if eps.shape != img.shape:
        raise ValueError(f"noise shape {eps.shape} != image shape {img.shape}")
    ab = sched.at(t)
    return np.sqrt(ab) * img + np.sqrt(1.0 - ab) * eps


def cfg_predict(eps_uncond: np.ndarray, eps_cond: np.ndarray,
                w_guidance: float) -> np.ndarray:
    """Classifier-free guidance: eps_unc + w * (eps_cond - eps_unc)."""
    return eps_uncond + w_guidance * (eps_cond - eps_uncond)


def perp_neg_predict(eps_uncond: np.ndarray, eps_cond: np.ndarray,
                     eps_neg_list: list[np.ndarray], w_guidance: float,
                     w_neg: float) -> np.ndarray:
    """Perp-Neg composition.

    The averaged negative residual is projected onto the complement of the
    positive residual direction before being subtracted with scale w_neg.
    """
    if not eps_neg_list:
        raise ValueError("perp_neg_predict requires at least one negative prediction")
    eps_pos = eps_cond - eps_uncond
    eps_neg = np.mean([e - eps_uncond for e in eps_neg_list], axis=0)
    denom = float(np.sum(eps_pos * eps_pos))
    if np.sqrt(denom) < 1e-8:
        eps_perp = eps_neg
    else:
        eps_perp = eps_neg - (np.sum(eps_neg * eps_pos) / denom) * eps_pos
    return eps_uncond + w_guidance * (eps_pos - w_neg * eps_perp)


# ----------------------------------------------------------------------
# view-dependent prompts
# ----------------------------------------------------------------------

VIEW_NAMES = ("front", "side", "back")


def view_name(azimuth: float) -> str:
    a = azimuth % 360.0
    if a <= 45.0 or a >= 315.0:
        return "front"
    if 45.0 < a < 135.0 or 225.0 < a < 315.0:
        return "side"
    return "back"


def view_prompts(text: str, azimuth: float) -> tuple[str, list[str]]:
    """Positive prompt with the view suffix, negatives for the other views."""
    v = view_name(azimuth)
    pos = f"{text}, {v} view"
    negs = [f"{text}, {o} view" for o in VIEW_NAMES if o != v]
    return pos, negs


# ----------------------------------------------------------------------
# severity cache / adaptive negation scale
# ----------------------------------------------------------------------

class SeverityState:
    """Latest (azimuth, unit feature) per prompt id."""

    def __init__(self):
        self._entries: dict[int, tuple[float, np.ndarray]] = {}

    def get(self, prompt_id: int):
        return self._entries.get(prompt_id)

    def __len__(self):
        return len(self._entries)


def severity(v: float, feat: np.ndarray,
             cached: tuple[float, np.ndarray] | None) -> float:
    """Multi-head severity C in [0, 1]; 0 on a cold cache.

    C = 1/4 * (1 - cos(v - v1)) * (1 + <feat, feat1>) with unit features and
    view angles in degrees.
    """
    if cached is None:
        return 0.0
    v1, feat1 = cached
    c = 0.25 * (1.0 - np.cos(np.radians(v - v1))) * (1.0 + float(np.dot(feat, feat1)))
    return float(np.clip(c, 0.0, 1.0))


def adaptive_w_neg(C: float, cfg: GuidanceConfig) -> float:
    if not 0.0 <= C <= 1.0:
        raise ValueError(f"severity C must be in [0,1], got {C}")
    return cfg.w_min + C * cfg.delta_w


def update_cache(state: SeverityState, prompt_id: int, v: float,
                 feat: np.ndarray) -> None:
    """Replace the entry for a prompt; capacity tracks the prompt set."""
    state._entries[prompt_id] = (float(v), np.asarray(feat, dtype=np.float32))


# ----------------------------------------------------------------------
# feature oracles
# ----------------------------------------------------------------------

class DownsampleFeature:
    """Desk-scale image feature: 16x16 grayscale average pool, L2-normalized.

    Differentiable when handed an autodiff Tensor.
    """

    grid = 16

    @property
    def dim(self):
        return self.grid * self.grid

    def features(self, image):
        if isinstance(image, Tensor):
            H, W, _ = image.data.shape
            if H % self.grid or W % self.grid:
                raise ValueError(f"image size {H}x{W} not divisible by {self.grid}")
            gray = ad.tmean(image, axis=2)
            pooled = ad.tmean(ad.reshape(gray, (self.grid, H // self.grid,
                                                self.grid, W // self.grid)),
                              axis=(1, 3))
            flat = ad.reshape(pooled, (self.dim,))
            norm = ad.sqrt(ad.tsum(flat * flat) + 1e-12)
            return flat / norm
        arr = np.asarray(image, dtype=np.float32)
        H, W = arr.shape[:2]
        gray = arr.mean(axis=2)
        pooled = gray.reshape(self.grid, H // self.grid, self.grid,
                              W // self.grid).mean(axis=(1, 3))
        flat = pooled.ravel()
        return flat / np.linalg.norm(flat)


def clip_loss(feature, sentence_embedding) -> object:
    """Cosine distance 1 - <f, s> / (|f||s|); differentiable through ``feature``
    when it is a Tensor."""
    s = np.asarray(sentence_embedding, dtype=np.float32)
    sn = np.linalg.norm(s)
    if sn == 0.0:
        raise ValueError("zero-norm sentence embedding")
    s = s / sn
    if isinstance(feature, Tensor):
        norm = ad.sqrt(ad.tsum(feature * feature) + 1e-12)
        return 1.0 - ad.tsum(feature * Tensor(s)) / norm
    f = np.asarray(feature, dtype=np.float64)
    fn = np.linalg.norm(f)
    if fn == 0.0:
        raise ValueError("zero-norm feature")
    return float(1.0 - np.dot(f / fn, s))


# ----------------------------------------------------------------------
# score oracles
# ----------------------------------------------------------------------

class SyntheticOracle:
    """Analytic in-process oracle: the conditional score pulls exactly toward
    the prompt's procedural target view; the unconditional score pulls toward
    mid-gray.  View-suffixed or unknown negative prompts carry no target and
    contribute a zero residual."""

    ignores_guidance_weight = True
    ignores_timestep_weight = True

    def __init__(self, records: list[PromptRecord], sched: DiffusionSchedule,
                 background=(1.0, 1.0, 1.0)):
        self.by_text = {r.text: r for r in records}
        self.sched = sched
        self.background = background

    def _target(self, prompt: str, pose: CameraPose, shape) -> np.ndarray | None:
        base = prompt.split(",")[0]
        rec = self.by_text.get(base)
        if rec is None:
            return None
        H, W = shape[0], shape[1]
        return target_scene(rec, pose, H, W, background=self.background)

    def denoise(self, x_t: np.ndarray, t: int, prompt: str,
                negatives: list[str], pose: CameraPose):
        ab = self.sched.at(t)
        sa, sb = np.sqrt(ab), np.sqrt(1.0 - ab)
        gray = np.full_like(x_t, 0.5)
        eps_uncond = (x_t - sa * gray) / sb
        target = self._target(prompt, pose, x_t.shape)
        if target is None:
            raise OracleError(f"no procedural target for prompt {prompt!r}")
        eps_cond = (x_t - sa * target) / sb
        eps_neg = []
        for neg in negatives:
            tneg = self._target(neg, pose, x_t.shape)
            eps_neg.append(eps_uncond.copy() if tneg is None
                           else (x_t - sa * tneg) / sb)
        return eps_uncond, eps_cond, eps_neg


def synthetic_score(x_t: np.ndarray, t: int, record: PromptRecord,
                    pose: CameraPose, sched: DiffusionSchedule) -> np.ndarray:
    """Conditional score of the synthetic oracle in closed form."""
    ab = sched.at(t)
    H, W = x_t.shape[0], x_t.shape[1]
    target = target_scene(record, pose, H, W)
    return (x_t - np.sqrt(ab) * target) / np.sqrt(1.0 - ab)


class RemoteOracle:
    """Wire client for a guidance server; timeouts and one retry per call."""

    ignores_guidance_weight = False

    def __init__(self, url: str | None = None, timeout: float = 30.0):
        import httpx
        self.url = (url or os.environ.get("INSTANT3D_ORACLE_URL", "")).rstrip("/")
        if not self.url:
            raise OracleError("no remote oracle URL configured")
        self._client = httpx.Client(timeout=timeout)

    def _post(self, path: str, payload: dict) -> dict:
        import httpx
        last = None
        for _ in range(2):
            try:
                r = self._client.post(self.url + path, json=payload)
                r.raise_for_status()
                return r.json()
            except httpx.HTTPError as e:   # retry once, then surface
                last = e
        raise OracleError(f"remote oracle call {path} failed: {last}") from last

    def info(self) -> dict:
        import httpx
        try:
            r = self._client.get(self.url + "/v1/info")
            r.raise_for_status()
            return r.json()
        except httpx.HTTPError as e:
            raise OracleError(f"remote oracle /v1/info failed: {e}") from e

    def text_embeddings(self, prompts: list[str]):
        out = self._post("/v1/text-embeddings", {"prompts": prompts})
        return ([decode_tensor(t) for t in out["token_embeddings"]],
                [decode_tensor(t) for t in out["sentence_embeddings"]])

    def denoise(self, x_t: np.ndarray, t: int, prompt: str,
                negatives: list[str], pose: CameraPose | None = None):
        out = self._post("/v1/denoise", {
            "x_t": encode_tensor(x_t), "t": int(t), "prompt": prompt,
            "negative_prompts": list(negatives)})
        return (decode_tensor(out["eps_uncond"]), decode_tensor(out["eps_cond"]),
                [decode_tensor(e) for e in out["eps_neg"]])


class RemoteImageEncoder:
    """Eval-only image features from the server; contributes no gradient."""

    def __init__(self, oracle: RemoteOracle):
        self.oracle = oracle

    def features(self, image) -> np.ndarray:
        arr = image.data if isinstance(image, Tensor) else np.asarray(image)
        out = self.oracle._post("/v1/image-features", {"image": encode_tensor(arr)})
        return decode_tensor(out["features"])


# ----------------------------------------------------------------------
# SDS gradient
# ----------------------------------------------------------------------

def weight_t(t: int, sched: DiffusionSchedule) -> float:
    """w(t) = 1 - alpha_bar_t."""
    return 1.0 - sched.at(t)


def draw_timestep(cfg: GuidanceConfig, sched: DiffusionSchedule,
                  rng: np.random.Generator) -> int:
    lo = max(1, int(np.ceil(cfg.t_range[0] * sched.T)))
    hi = min(sched.T, int(np.floor(cfg.t_range[1] * sched.T)))
    return int(rng.integers(lo, hi + 1))


@dataclass
class SdsInfo:
    t: int
    C: float
    w_neg: float


def sds_grad(rendered: np.ndarray, pose: CameraPose, record: PromptRecord,
             oracle, sched: DiffusionSchedule, cfg: GuidanceConfig,
             severity_state: SeverityState | None,
             feature_oracle, rng: np.random.Generator) -> tuple[np.ndarray, SdsInfo]:
    """Pixel-space score-distillation gradient for one rendered view.

    Draws (t, eps), diffuses the render, queries the oracle with
    view-dependent positive/negative prompts, composes the guided prediction
    (Perp-Neg with the adaptive negation scale unless cfg_only), and returns
    w(t) * (eps_predict - eps) along with the drawn bookkeeping; analytic
    oracles that declare ignores_timestep_weight get w(t) == 1.  The caller
    chains this through the renderer's backward pass.
    """
    rendered = np.asarray(rendered, dtype=np.float32)
    if not np.all(np.isfinite(rendered)):
        raise ValueError("non-finite rendered image")
    t = draw_timestep(cfg, sched, rng)
    eps = rng.normal(size=rendered.shape).astype(np.float32)
    x_t = forward_diffuse(rendered, t, eps, sched)
    pos, negs = view_prompts(record.text, pose.azimuth)
    C, w_neg = 0.0, cfg.w_min
    if severity_state is not None and not cfg.cfg_only:
        feat = feature_oracle.features(rendered)
        feat = feat.data if isinstance(feat, Tensor) else feat
        C = severity(pose.azimuth, feat, severity_state.get(record.id))
        w_neg = adaptive_w_neg(C, cfg)
    try:
        eps_uncond, eps_cond, eps_neg = oracle.denoise(x_t, t, pos, negs, pose)
    except OracleError:
        raise
    except Exception as e:
        raise OracleError(f"oracle failure for prompt {record.text!r}: {e}") from e
    w_g = 1.0 if getattr(oracle, "ignores_guidance_weight", False) else cfg.w_guidance
    if cfg.cfg_only or not eps_neg:
        eps_predict = cfg_predict(eps_uncond, eps_cond, w_g)
    else:
        eps_predict = perp_neg_predict(eps_uncond, eps_cond, eps_neg, w_g, w_neg)
    # an analytic oracle is already a calibrated pull toward its target, so
    # its gradient is used unweighted; learned denoisers get w(t)
    if getattr(oracle, "ignores_timestep_weight", False):
        grad = eps_predict - eps
    else:
        grad = weight_t(t, sched) * (eps_predict - eps)
    return grad.astype(np.float32), SdsInfo(t=t, C=C, w_neg=w_neg)
