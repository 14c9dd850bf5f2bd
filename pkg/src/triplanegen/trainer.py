"""Amortized training loop and checkpointing.

Each step: embed the batch prompts, decode triplanes with fresh style noise,
render from random cameras, compute the score-distillation pixel gradient
(plus the optional cosine alignment term), backpropagate through the renderer
and decoder, accumulate over the batch, and apply a single Adam update.  The
severity cache advances after the update so Perp-Neg always compares against
the previous iteration's view.  Steps are atomic: an oracle failure anywhere
in the batch leaves parameters untouched.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .conditioner import (DecoderConfig, TextCondition, build_decoder_params,
                          decode)
from .guidance import (DiffusionSchedule, DownsampleFeature, GuidanceConfig,
                       SeverityState, clip_loss, sds_grad, update_cache)
from .prompts import PromptRecord, SyntheticEmbedder, embed, target_scene
from .renderer import (AnnealState, CameraPose, anneal_step, build_head_params,
                       render, sample_camera)
from .rng import RngHierarchy

CHECKPOINT_MAGIC = b"IT3D"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.99
    weight_decay: float = 0.0
    eps: float = 1e-8
    batch_size: int = 8
    total_steps: int = 1000
    render_hw: int = 64
    seed: int = 0
    clip_weight: float = 0.1
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    anneal: tuple = (0.5, 0.8)
    n_uniform: int = 32
    n_importance: int = 0
    shading: str = "albedo"
    head_hidden: int = 32
    head_layers: int = 2

    def __post_init__(self):
        if self.batch_size < 1 or self.total_steps < 1:
            raise ValueError("batch_size and total_steps must be >= 1")


@dataclass
class AdamMoments:
    m: dict
    v: dict
    t: int = 0


def init_moments(params: dict) -> AdamMoments:
    return AdamMoments(m={k: np.zeros_like(p) for k, p in params.items()},
                       v={k: np.zeros_like(p) for k, p in params.items()},
                       t=0)


def adam_step(params: dict, grads: dict, moments: AdamMoments,
              cfg: TrainConfig) -> None:
    """One bias-corrected Adam update, in place."""
    moments.t += 1
    t = moments.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"grad shape {g.shape} != param shape {p.shape} "
                             f"for {name!r}")
        if cfg.weight_decay:
            g = g + cfg.weight_decay * p
        m = moments.m[name]
        v = moments.v[name]
        m *= cfg.beta1
        m += (1 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1 - cfg.beta2) * g * g
        m_hat = m / (1 - cfg.beta1 ** t)
        v_hat = v / (1 - cfg.beta2 ** t)
        p -= (cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)).astype(p.dtype)


class Trainer:
    """Owns model parameters, optimizer state, schedules, and caches."""

    def __init__(self, records: list[PromptRecord], cfg: TrainConfig,
                 decoder_cfg: DecoderConfig, oracle,
                 embedder: SyntheticEmbedder | None = None,
                 feature_oracle=None, remote_embed=None):
        self.records = records
        self.train_records = [r for r in records if r.split == "train"]
        self.cfg = cfg
        self.decoder_cfg = decoder_cfg
        self.oracle = oracle
        self.embedder = embedder or SyntheticEmbedder()
        self.feature_oracle = feature_oracle or DownsampleFeature()
        self.rng = RngHierarchy(cfg.seed)
        self.sched = DiffusionSchedule()
        self.severity = SeverityState()
        self.anneal = AnnealState(alpha=cfg.anneal[0], schedule=tuple(cfg.anneal))
        self.step = 0

        self._conditions: dict[int, TextCondition] = {}
        if remote_embed is not None:
            tokens, sentences = remote_embed([r.text for r in records])
            for r, tok, sent in zip(records, tokens, sentences):
                self._conditions[r.id] = TextCondition(tok, sent)
        else:
            for r in records:
                self._conditions[r.id] = embed(r.text, self.embedder)

        # with no records (render-only restore) size the decoder from a probe
        any_cond = (next(iter(self._conditions.values())) if self._conditions
                    else embed("a", self.embedder))
        self.params = build_decoder_params(decoder_cfg, any_cond.dim,
                                           any_cond.num_tokens, self.rng.init)
        self.params.update(build_head_params(3 * decoder_cfg.out_channels,
                                             cfg.head_hidden, self.rng.init,
                                             layers=cfg.head_layers))
        self.moments = init_moments(self.params)
        self._clip_anchors: dict[int, np.ndarray] = {}

    def condition(self, record: PromptRecord) -> TextCondition:
        return self._conditions[record.id]

    def _clip_anchor(self, record: PromptRecord) -> np.ndarray:
        """Text-side anchor for the cosine alignment term.

        If the text embedding already lives in the image-feature space (as
        with a remote contrastive encoder) it is used directly; otherwise the
        anchor is the feature of the prompt's canonical front-view target."""
        a = self._clip_anchors.get(record.id)
        if a is None:
            sent = self.condition(record).sentence_embedding
            if sent.shape[0] == self.feature_oracle.dim:
                a = np.asarray(sent, dtype=np.float32)
            else:
                pose = CameraPose(polar=90.0, azimuth=0.0, radius=3.3, fov=75.0)
                hw = self.cfg.render_hw
                a = np.asarray(self.feature_oracle.features(
                    target_scene(record, pose, hw, hw)), dtype=np.float32)
            self._clip_anchors[record.id] = a
        return a

    def sample_batch(self) -> list[PromptRecord]:
        idx = self.rng.split.integers(0, len(self.train_records),
                                      size=self.cfg.batch_size)
        return [self.train_records[i] for i in idx]

    # -- one optimization step -----------------------------------------
    def train_step(self, batch: list[PromptRecord]) -> dict:
        cfg = self.cfg
        for rec in batch:
            if rec.split != "train":
                raise ValueError(f"record {rec.id} is not in the train split")
        acc = {k: np.zeros_like(p) for k, p in self.params.items()}
        cache_updates = []
        infos = []
        mse_terms = []
        clip_terms = []
        for rec in batch:
            cond = self.condition(rec)
            noise = self.rng.style.normal(
                size=self.decoder_cfg.style_noise_dim).astype(np.float32)
            pose = sample_camera(self.rng.camera)
            g = ad.Graph()
            leaves = {k: g.leaf(k, v) for k, v in self.params.items()}
            tp = decode(cond, noise, self.decoder_cfg, leaves)
            out = render(tp, leaves, pose, cfg.render_hw, cfg.render_hw,
                         self.anneal, shading=cfg.shading,
                         n_uniform=cfg.n_uniform, n_importance=cfg.n_importance,
                         rng=self.rng.render)
            rendered = out.rgb.data
            grad_px, info = sds_grad(rendered, pose, rec, self.oracle,
                                     self.sched, cfg.guidance, self.severity,
                                     self.feature_oracle, self.rng.noise)
            infos.append(info)
            # scalar whose gradient w.r.t. the rendered image is grad_px
            total = ad.tsum(out.rgb * Tensor(grad_px))
            if cfg.clip_weight > 0:
                feat = self.feature_oracle.features(out.rgb)
                closs = clip_loss(feat, self._clip_anchor(rec))
                if isinstance(closs, Tensor):
                    clip_terms.append(float(closs.data))
                    total = total + cfg.clip_weight * closs
            grads = g.backward(total)
            for k in acc:
                acc[k] += grads[k]
            feat_now = self.feature_oracle.features(rendered)
            cache_updates.append((rec.id, pose.azimuth, feat_now))
            if hasattr(self.oracle, "_target"):
                target = self.oracle._target(rec.text, pose, rendered.shape)
                if target is not None:
                    mse_terms.append(float(np.mean((rendered - target) ** 2)))
        for k in acc:
            acc[k] /= len(batch)
        adam_step(self.params, acc, self.moments, cfg)
        # severity barrier: cache sees this iteration only from the next one on
        for pid, az, feat in cache_updates:
            update_cache(self.severity, pid, az, feat)
        metrics = {
            "step": self.step,
            "loss": float(np.mean(mse_terms)) if mse_terms else float("nan"),
            "alpha": self.anneal.alpha,
            "mean_C": float(np.mean([i.C for i in infos])),
            "mean_w_neg": float(np.mean([i.w_neg for i in infos])),
        }
        if clip_terms:
            metrics["clip_loss"] = float(np.mean(clip_terms))
        self.step += 1
        self.anneal = anneal_step(self.anneal, self.step, cfg.total_steps)
        return metrics

    def run(self, metrics_file=None, checkpoint_every: int = 0,
            checkpoint_dir=None, log_every: int = 0):
        saved = []
        while self.step < self.cfg.total_steps:
            metrics = self.train_step(self.sample_batch())
            if metrics_file is not None:
                metrics_file.write(json.dumps(metrics) + "\n")
            if log_every and metrics["step"] % log_every == 0:
                print(f"step {metrics['step']}: loss={metrics['loss']:.5f} "
                      f"alpha={metrics['alpha']:.3f}")
            if (checkpoint_every and checkpoint_dir
                    and self.step % checkpoint_every == 0):
                path = f"{checkpoint_dir}/ckpt_{self.step:06d}"
                save_checkpoint(path, self)
                saved.append(path)
        return saved

    # -- inference -----------------------------------------------------
    def decode_triplane(self, record_or_text, style_seed: int | None = None):
        if isinstance(record_or_text, PromptRecord):
            cond = self.condition(record_or_text)
        else:
            cond = embed(record_or_text, self.embedder)
        if style_seed is None:
            noise = np.zeros(self.decoder_cfg.style_noise_dim, dtype=np.float32)
        else:
            noise = np.random.default_rng(style_seed).normal(
                size=self.decoder_cfg.style_noise_dim).astype(np.float32)
        P = {k: Tensor(v) for k, v in self.params.items()}
        return decode(cond, noise, self.decoder_cfg, P).numpy(), P

    def render_view(self, record_or_text, pose: CameraPose, hw: int,
                    shading: str = "albedo", style_seed: int | None = None,
                    n_uniform: int | None = None,
                    n_importance: int | None = None) -> np.ndarray:
        tp, P = self.decode_triplane(record_or_text, style_seed)
        out = render(tp, P, pose, hw, hw, self.anneal, shading=shading,
                     n_uniform=n_uniform if n_uniform is not None else self.cfg.n_uniform,
                     n_importance=(n_importance if n_importance is not None
                                   else self.cfg.n_importance))
        return np.clip(out.rgb.data, 0.0, None)


# ----------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------

class CheckpointError(RuntimeError):
    pass


def _config_snapshot(trainer: Trainer) -> dict:
    return {
        "train": asdict(trainer.cfg),
        "decoder": asdict(trainer.decoder_cfg),
        "embedder": asdict(trainer.embedder),
    }


def save_checkpoint(path, trainer: Trainer) -> None:
    tensors = {}
    tensors.update(trainer.params)
    tensors.update({f"adam.m.{k}": v for k, v in trainer.moments.m.items()})
    tensors.update({f"adam.v.{k}": v for k, v in trainer.moments.v.items()})
    write_checkpoint(path, tensors, step=trainer.step, adam_t=trainer.moments.t,
                     alpha=trainer.anneal.alpha, config=_config_snapshot(trainer))


def write_checkpoint(path, tensors: dict, step: int, adam_t: int,
                     alpha: float, config: dict) -> None:
    manifest = []
    offset = 0
    names = sorted(tensors)
    for name in names:
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        manifest.append({"name": name, "dtype": "f32",
                         "shape": list(arr.shape), "offset": offset})
        offset += arr.nbytes
    header = {"version": CHECKPOINT_VERSION, "step": step, "adam_t": adam_t,
              "alpha": alpha, "config": config, "manifest": manifest}
    hbytes = json.dumps(header, sort_keys=True,
                        separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<Q", len(hbytes)))
        f.write(hbytes)
        for name in names:
            f.write(np.ascontiguousarray(tensors[name], dtype="<f4").tobytes())


def read_checkpoint(path) -> tuple[dict, dict]:
    """Returns (header, tensors); fully validated before anything is returned."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 16 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (hlen,) = struct.unpack_from("<Q", blob, 8)
    if len(blob) < 16 + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    except ValueError as e:
        raise CheckpointError(f"{path}: corrupt header: {e}") from e
    payload = blob[16 + hlen:]
    tensors = {}
    end = 0
    prev_end = 0
    for entry in header["manifest"]:
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = entry["offset"]
        if start != prev_end:
            raise CheckpointError(f"{path}: manifest offsets overlap or leave gaps "
                                  f"at {entry['name']!r}")
        end = start + 4 * n
        if end > len(payload):
            raise CheckpointError(f"{path}: truncated payload at {entry['name']!r}")
        tensors[entry["name"]] = np.frombuffer(
            payload[start:end], dtype="<f4").reshape(entry["shape"]).astype(np.float32)
        prev_end = end
    if end != len(payload):
        raise CheckpointError(f"{path}: {len(payload) - end} trailing payload bytes")
    return header, tensors


def load_trainer(path, records: list[PromptRecord], oracle,
                 feature_oracle=None) -> Trainer:
    """Rebuild a Trainer from a checkpoint plus the prompt set it trained on."""
    header, tensors = read_checkpoint(path)
    snap = header["config"]
    tc = snap["train"]
    tc["guidance"] = GuidanceConfig(**tc["guidance"])
    tc["anneal"] = tuple(tc["anneal"])
    cfg = TrainConfig(**tc)
    dc = dict(snap["decoder"])
    dc["channel_multipliers"] = tuple(dc["channel_multipliers"])
    dcfg = DecoderConfig(**dc)
    embedder = SyntheticEmbedder(**snap["embedder"])
    trainer = Trainer(records, cfg, dcfg, oracle, embedder=embedder,
                      feature_oracle=feature_oracle)
    trainer.step = header["step"]
    trainer.anneal = anneal_step(AnnealState(alpha=cfg.anneal[0],
                                             schedule=cfg.anneal),
                                 min(trainer.step, cfg.total_steps),
                                 cfg.total_steps)
    for name in trainer.params:
        trainer.params[name] = tensors[name].copy()
        trainer.moments.m[name] = tensors[f"adam.m.{name}"].copy()
        trainer.moments.v[name] = tensors[f"adam.v.{name}"].copy()
    trainer.moments.t = header["adam_t"]
    return trainer
