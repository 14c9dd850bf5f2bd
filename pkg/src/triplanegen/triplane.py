"""Triplane 3D representation and its point-feature sampler.

Three axis-aligned feature planes (XY, XZ, YZ) span a cube of half-width
``extent``.  A 3D point is orthogonally projected onto each plane, bilinearly
interpolated with the align-corners convention, and the three feature vectors
are concatenated in plane order XY, XZ, YZ.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

PLANE_NAMES = ("xy", "xz", "yz")
# which world axes each plane reads, in (cx, cy) order
_PLANE_AXES = ((0, 1), (0, 2), (1, 2))


@dataclass
class Triplane:
    """Three feature planes, each (C, R, R); entries may be numpy arrays or
    autodiff Tensors (the latter during training, so gradients flow back into
    the decoder)."""

    xy: object
    xz: object
    yz: object
    extent: float = 1.0

    @property
    def planes(self):
        return (self.xy, self.xz, self.yz)

    @property
    def channels(self) -> int:
        p = self.xy.data if isinstance(self.xy, Tensor) else self.xy
        return p.shape[0]

    @property
    def resolution(self) -> int:
        p = self.xy.data if isinstance(self.xy, Tensor) else self.xy
        return p.shape[1]

    def validate(self):
        shapes = []
        for p in self.planes:
            arr = p.data if isinstance(p, Tensor) else p
            if arr.ndim != 3 or arr.shape[1] != arr.shape[2]:
                raise ValueError(f"plane must be (C,R,R), got {arr.shape}")
            shapes.append(arr.shape)
        if len(set(shapes)) != 1:
            raise ValueError(f"planes disagree in shape: {shapes}")
        return self

    def numpy(self) -> "Triplane":
        """Detach to plain arrays (for eval-time rendering)."""
        return Triplane(*[p.data if isinstance(p, Tensor) else p for p in self.planes],
                        extent=self.extent)


def init_triplane(channels: int, resolution: int, extent: float = 1.0,
                  scheme: str = "gaussian", seed: int = 0) -> Triplane:
    """Fresh triplane; ``gaussian`` draws N(0, 0.01), ``zero`` is all-zero."""
    if channels < 1 or resolution < 1:
        raise ValueError(f"invalid triplane dims C={channels}, R={resolution}")
    if scheme == "zero":
        planes = [np.zeros((channels, resolution, resolution), dtype=np.float32)
                  for _ in range(3)]
    elif scheme == "gaussian":
        rng = np.random.default_rng(seed)
        planes = [rng.normal(0.0, 0.01, (channels, resolution, resolution)).astype(np.float32)
                  for _ in range(3)]
    else:
        raise ValueError(f"unknown init scheme {scheme!r}")
    return Triplane(*planes, extent=extent)


def sample_features(tp: Triplane, points):
    """Sample concatenated triplane features at 3D points.

    points: (N, 3) array or Tensor of world coordinates.  Coordinates outside
    the cube are clamped to its boundary.  Returns an (N, 3*C) Tensor,
    differentiable w.r.t. both plane entries and the points.
    """
    p = points if isinstance(points, Tensor) else Tensor(np.asarray(points, dtype=np.float32))
    if p.data.ndim != 2 or p.data.shape[1] != 3:
        raise ad.ShapeError(f"sample_features: points must be (N,3), got {p.data.shape}")
    inv_extent = 1.0 / float(tp.extent)
    feats = []
    for plane, (ax_x, ax_y) in zip(tp.planes, _PLANE_AXES):
        pt = plane if isinstance(plane, Tensor) else Tensor(plane)
        coords = ad.stack([p[:, ax_x] * inv_extent, p[:, ax_y] * inv_extent], axis=1)
        feats.append(ad.grid_sample(pt, coords))
    return ad.concat(feats, axis=1)


def sample_features_reference(tp: Triplane, points: np.ndarray) -> np.ndarray:
    """Scalar-loop bilinear reference for testing; intentionally naive."""
    tp = tp.numpy()
    points = np.asarray(points, dtype=np.float64)
    C = tp.channels
    R = tp.resolution
    out = np.zeros((len(points), 3 * C), dtype=np.float64)
    for n, p in enumerate(points):
        for k, (plane, (ax, ay)) in enumerate(zip(tp.planes, _PLANE_AXES)):
            cx = min(max(p[ax] / tp.extent, -1.0), 1.0)
            cy = min(max(p[ay] / tp.extent, -1.0), 1.0)
            fx = (cx + 1.0) * 0.5 * (R - 1)
            fy = (cy + 1.0) * 0.5 * (R - 1)
            x0, y0 = int(np.floor(fx)), int(np.floor(fy))
            x0, y0 = min(x0, R - 1), min(y0, R - 1)
            x1, y1 = min(x0 + 1, R - 1), min(y0 + 1, R - 1)
            tx, ty = fx - x0, fy - y0
            for c in range(C):
                v = ((1 - ty) * ((1 - tx) * plane[c, y0, x0] + tx * plane[c, y0, x1])
                     + ty * ((1 - tx) * plane[c, y1, x0] + tx * plane[c, y1, x1]))
                out[n, k * C + c] = v
    return out
