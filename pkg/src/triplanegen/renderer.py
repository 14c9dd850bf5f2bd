"""Differentiable volume rendering of a triplane field.

Camera poses are drawn in a z-up spherical frame; rays follow a pinhole model;
points along each ray come from stratified sampling optionally refined with
inverse-CDF importance sampling.  The field head maps concatenated triplane
features to one density logit (softplus) and three albedo logits
(scaled-sigmoid, annealed back to a plain sigmoid over training).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .triplane import Triplane, sample_features

# sample_camera draw ranges (degrees / scene units)
POLAR_RANGE = (25.0, 110.0)
AZIMUTH_RANGE = (0.0, 360.0)
RADIUS_RANGE = (3.0, 3.6)
FOV_RANGE = (70.0, 80.0)

SHADING_MODES = ("albedo", "lambertian", "textureless")


@dataclass
class CameraPose:
    polar: float        # degrees from +Z
    azimuth: float      # degrees around +Z from +X
    radius: float
    fov: float          # full field of view, degrees
    look_at: tuple = (0.0, 0.0, 0.0)

    def eye(self) -> np.ndarray:
        g = np.radians(self.polar)
        a = np.radians(self.azimuth)
        offset = self.radius * np.array(
            [np.sin(g) * np.cos(a), np.sin(g) * np.sin(a), np.cos(g)])
        return np.asarray(self.look_at, dtype=np.float64) + offset


@dataclass
class RaySamples:
    origins: np.ndarray      # (n_rays, 3)
    directions: np.ndarray   # (n_rays, 3), unit norm
    depths: np.ndarray | None = None   # (n_rays, S), ascending
    deltas: np.ndarray | None = None   # (n_rays, S)
    near: float = 0.0
    far: float = 0.0


@dataclass
class AnnealState:
    alpha: float = 0.5
    schedule: tuple = (0.5, 0.8)   # (alpha_start, anneal_fraction)

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")


@dataclass
class RenderOutput:
    rgb: Tensor          # (H, W, 3), values in [0, 1/alpha]
    opacity: Tensor      # (H, W) accumulated weights in [0, 1]
    normals: np.ndarray | None = None


def sample_camera(rng: np.random.Generator) -> CameraPose:
    """Uniform pose draw within the configured spherical ranges."""
    return CameraPose(polar=float(rng.uniform(*POLAR_RANGE)),
                      azimuth=float(rng.uniform(*AZIMUTH_RANGE)),
                      radius=float(rng.uniform(*RADIUS_RANGE)),
                      fov=float(rng.uniform(*FOV_RANGE)))


def generate_rays(pose: CameraPose, H: int, W: int, extent: float = 1.0) -> RaySamples:
    """Pinhole rays through pixel centers; near/far tightly cover the cube."""
    if H < 1 or W < 1:
        raise ValueError(f"invalid image size {H}x{W}")
    eye = pose.eye()
    forward = np.asarray(pose.look_at, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    up = np.array([0.0, 0.0, 1.0])
    right = np.cross(forward, up)
    nr = np.linalg.norm(right)
    if nr < 1e-9:                       # looking straight up/down
        right = np.array([1.0, 0.0, 0.0])
    else:
        right /= nr
    cam_up = np.cross(right, forward)
    t = np.tan(np.radians(pose.fov) / 2.0)
    jj, ii = np.meshgrid(np.arange(W), np.arange(H))
    x = ((jj + 0.5) / W * 2.0 - 1.0) * t
    y = (1.0 - (ii + 0.5) / H * 2.0) * t
    dirs = (forward[None, None]
            + x[..., None] * right[None, None]
            + y[..., None] * cam_up[None, None])
    dirs = dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)
    n_rays = H * W
    near = max(pose.radius - np.sqrt(3.0) * extent, 1e-3)
    far = pose.radius + np.sqrt(3.0) * extent
    return RaySamples(origins=np.broadcast_to(eye, (n_rays, 3)).astype(np.float32).copy(),
                      directions=dirs.reshape(n_rays, 3).astype(np.float32),
                      near=float(near), far=float(far))


def _importance_depths(edges: np.ndarray, weights: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draws from a piecewise-constant distribution over bins.

    edges: (n_bins+1,) shared bin edges; weights: (n_rays, n_bins) >= 0;
    u: (n_rays, n_draws) uniforms.  All-zero weight rows fall back to uniform.
    """
    w = np.maximum(weights, 0.0).astype(np.float64)
    zero = w.sum(axis=1) <= 0.0
    w[zero] = 1.0
    pdf = w / w.sum(axis=1, keepdims=True)
    cdf = np.concatenate([np.zeros((len(w), 1)), np.cumsum(pdf, axis=1)], axis=1)
    cdf[:, -1] = 1.0
    idx = np.empty(u.shape, dtype=np.int64)
    for r in range(len(w)):
        idx[r] = np.searchsorted(cdf[r], u[r], side="right") - 1
    idx = np.clip(idx, 0, w.shape[1] - 1)
    lo = cdf[np.arange(len(w))[:, None], idx]
    span = pdf[np.arange(len(w))[:, None], idx]
    frac = np.where(span > 0, (u - lo) / np.maximum(span, 1e-12), 0.5)
    widths = np.diff(edges)
    return edges[idx] + frac * widths[idx]


def sample_points(rays: RaySamples, n_uniform: int = 64, n_importance: int = 64,
                  weights: np.ndarray | None = None,
                  rng: np.random.Generator | None = None) -> RaySamples:
    """Stratified uniform samples in [near, far], plus optional importance
    samples drawn from the piecewise-constant ``weights`` distribution over the
    uniform bins; results are merged and sorted per ray.

    With ``rng=None`` the stratified draws sit at bin midpoints and importance
    draws use evenly spaced quantiles (deterministic, for gradient checks).
    """
    n_rays = len(rays.origins)
    near, far = rays.near, rays.far
    edges = np.linspace(near, far, n_uniform + 1)
    if rng is None:
        u = np.full((n_rays, n_uniform), 0.5)
    else:
        u = rng.uniform(size=(n_rays, n_uniform))
    depths = edges[:-1] + u * (far - near) / n_uniform
    if n_importance > 0:
        if weights is not None and weights.shape != (n_rays, n_uniform):
            raise ValueError(
                f"weights shape {weights.shape} != ({n_rays}, {n_uniform})")
        if weights is None:
            weights = np.ones((n_rays, n_uniform))
        if np.any(weights < 0):
            raise ValueError("importance weights must be non-negative")
        if rng is None:
            ui = np.broadcast_to((np.arange(n_importance) + 0.5) / n_importance,
                                 (n_rays, n_importance)).copy()
        else:
            ui = rng.uniform(size=(n_rays, n_importance))
        imp = _importance_depths(edges, weights, ui)
        depths = np.sort(np.concatenate([depths, imp], axis=1), axis=1)
    deltas = np.diff(depths, axis=1)
    deltas = np.concatenate([deltas, far - depths[:, -1:]], axis=1)
    return replace(rays, depths=depths.astype(np.float32),
                   deltas=deltas.astype(np.float32))


def scaled_sigmoid(x, alpha: float):
    """(1/alpha) * sigmoid(alpha * x); see autodiff.scaled_sigmoid."""
    return ad.scaled_sigmoid(x, alpha)


def anneal_step(state: AnnealState, step: int, total_steps: int) -> AnnealState:
    """Linear ramp of alpha from alpha_start to 1 over the first
    anneal_fraction of training; exactly 1 from there on."""
    if step > total_steps:
        raise ValueError(f"step {step} > total_steps {total_steps}")
    a0, frac = state.schedule
    ramp = frac * total_steps
    alpha = 1.0 if ramp <= 0 else min(1.0, a0 + (1.0 - a0) * step / ramp)
    return AnnealState(alpha=alpha, schedule=state.schedule)


# ----------------------------------------------------------------------
# field head
# ----------------------------------------------------------------------

def build_head_params(feature_dim: int, hidden: int, rng: np.random.Generator,
                      layers: int = 2) -> dict[str, np.ndarray]:
    """MLP head parameters: feature_dim -> hidden^layers -> 4 outputs."""
    values = {}
    dims = [feature_dim] + [hidden] * layers + [4]
    for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
        std = 1.0 / np.sqrt(d_in)
        values[f"head.fc{i}.weight"] = rng.normal(0, std, (d_in, d_out)).astype(np.float32)
        values[f"head.fc{i}.bias"] = np.zeros(d_out, dtype=np.float32)
    return values


def head_forward(features, P):
    """Apply the MLP head to (N, 3C) features; returns raw (N, 4) logits."""
    x = features
    i = 0
    while f"head.fc{i}.weight" in P:
        x = ad.matmul(x, P[f"head.fc{i}.weight"]) + P[f"head.fc{i}.bias"]
        if f"head.fc{i+1}.weight" in P:
            x = ad.silu(x)
        i += 1
    if x.data.shape[-1] != 4:
        raise ad.ShapeError(f"head must emit 4 channels, got {x.data.shape[-1]}")
    return x


def query_field(tp: Triplane, P, points, anneal: AnnealState):
    """Density and albedo at 3D points.

    Returns (tau, rho): tau (N,) = softplus of the density logit, rho (N, 3) =
    scaled-sigmoid of the albedo logits with the current anneal alpha.
    Differentiable through the triplane, the head, and the points.
    """
    feats = sample_features(tp, points)
    out = head_forward(feats, P)
    tau = ad.softplus(out[:, 0])
    rho = ad.scaled_sigmoid(out[:, 1:4], anneal.alpha)
    return tau, rho


def field_normals(tp: Triplane, P, points: np.ndarray, anneal: AnnealState) -> np.ndarray:
    """Unit normals as -grad(tau), from one detached reverse pass over the
    point coordinates.  Not differentiable w.r.t. model parameters (second
    derivatives are out of scope); used for shading only."""
    tp = tp.numpy()
    Pd = {k: Tensor(v.data if isinstance(v, Tensor) else v) for k, v in P.items()}
    g = ad.Graph()
    pts = g.leaf("points", np.asarray(points, dtype=np.float32))
    tau, _ = query_field(tp, Pd, pts, anneal)
    grads = g.backward(ad.tsum(tau))
    n = -grads["points"]
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    return (n / np.maximum(norm, 1e-8)).astype(np.float32)


# ----------------------------------------------------------------------
# compositing
# ----------------------------------------------------------------------

def composite(deltas, tau, color, background=(1.0, 1.0, 1.0)):
    """Volume-render per-ray samples into pixel values.

    deltas: (n_rays, S) numpy; tau: (n_rays, S) Tensor; color: (n_rays, S, 3)
    Tensor.  Weights w_k = T_k * (1 - exp(-tau_k * delta_k)) with transmittance
    T_k = exp(-sum_{j<k} tau_j delta_j); the remaining transmittance lights the
    background.  Returns (rgb (n_rays, 3), opacity (n_rays,)).
    """
    a = tau * Tensor(np.asarray(deltas, dtype=np.float32))
    ca = ad.cumsum(a, axis=1)
    transmittance = ad.exp(a - ca)                     # exp(-sum_{j<k})
    weights = transmittance * (1.0 - ad.exp(-a))
    opacity = ad.tsum(weights, axis=1)
    rgb = ad.tsum(ad.reshape(weights, weights.data.shape + (1,)) * color, axis=1)
    bg = np.asarray(background, dtype=np.float32)
    rgb = rgb + ad.reshape(1.0 - opacity, (-1, 1)) * Tensor(bg)
    return rgb, opacity


def render(tp: Triplane, P, pose: CameraPose, H: int, W: int,
           anneal: AnnealState, shading: str = "albedo",
           background=(1.0, 1.0, 1.0), n_uniform: int = 64,
           n_importance: int = 64, rng: np.random.Generator | None = None,
           with_normals: bool = False) -> RenderOutput:
    """Full render: rays -> samples -> field -> composite.

    The returned rgb/opacity are autodiff Tensors whose graph reaches the
    triplane planes and head parameters (when those are Tensors).
    """
    if shading not in SHADING_MODES:
        raise ValueError(f"unknown shading mode {shading!r}")
    rays = generate_rays(pose, H, W, extent=tp.extent)
    coarse = sample_points(rays, n_uniform, 0, rng=rng)
    if n_importance > 0:
        # detached coarse pass drives the importance distribution
        pts_c = (coarse.origins[:, None, :]
                 + coarse.depths[..., None] * coarse.directions[:, None, :])
        tp_d = tp.numpy()
        P_d = {k: (v.data if isinstance(v, Tensor) else v) for k, v in P.items()}
        tau_c, _ = query_field(tp_d, {k: Tensor(v) for k, v in P_d.items()},
                               pts_c.reshape(-1, 3), anneal)
        tau_c = tau_c.data.reshape(H * W, n_uniform)
        a = tau_c * coarse.deltas
        trans = np.exp(-(np.cumsum(a, axis=1) - a))
        w = trans * (1.0 - np.exp(-a))
        rays = sample_points(rays, n_uniform, n_importance, weights=w, rng=rng)
    else:
        rays = coarse
    n_rays, S = rays.depths.shape
    pts = (rays.origins[:, None, :]
           + rays.depths[..., None] * rays.directions[:, None, :]).reshape(-1, 3)
    tau, rho = query_field(tp, P, pts, anneal)
    tau2 = ad.reshape(tau, (n_rays, S))
    color = _shade(rho, tp, P, pts, anneal, shading, rng)
    color = ad.reshape(color, (n_rays, S, 3))
    rgb, opacity = composite(rays.deltas, tau2, color, background)
    normals = None
    if with_normals or shading in ("lambertian", "textureless"):
        normals_flat = field_normals(tp, P, pts, anneal)
        # composite normals with detached weights for visualization
        a = tau2.data * rays.deltas
        trans = np.exp(-(np.cumsum(a, axis=1) - a))
        wts = trans * (1.0 - np.exp(-a))
        normals = (wts[..., None] * normals_flat.reshape(n_rays, S, 3)).sum(axis=1)
        normals = normals.reshape(H, W, 3)
    return RenderOutput(rgb=ad.reshape(rgb, (H, W, 3)),
                        opacity=ad.reshape(opacity, (H, W)),
                        normals=normals)


def _shade(rho, tp, P, pts, anneal, shading, rng):
    if shading == "albedo":
        return rho
    # lambertian / textureless: shading term from detached normals and a
    # random point light per image
    normals = field_normals(tp, P, pts, anneal)
    if rng is None:
        light_dir = np.array([0.5, -0.5, 0.7], dtype=np.float32)
    else:
        light_pos = rng.normal(size=3) * 0.5 + np.array([0.0, 0.0, 3.0])
        light_dir = light_pos.astype(np.float32)
    light_dir = light_dir / np.linalg.norm(light_dir)
    lambert = np.maximum((normals * light_dir).sum(axis=1), 0.0)[:, None]
    ambient, diffuse = 0.1, 0.9
    term = Tensor((ambient + diffuse * lambert).astype(np.float32))
    if shading == "textureless":
        return term * Tensor(np.ones(3, dtype=np.float32))
    return rho * term
