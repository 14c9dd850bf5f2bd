import numpy as np
import pytest

from triplanegen.triplane import Triplane


def sphere_field(radius=0.5, sharpness=300.0, resolution=64):
    """Hand-built triplane + head whose density is a solid sphere.

    The xy plane stores x^2 + y^2 and the xz plane stores z^2, so the summed
    features reconstruct r^2 up to bilinear-interpolation error; the head turns
    sharpness * (radius^2 - r^2) into the density logit.  Albedo logits are
    zero (mid-gray).
    """
    R = resolution
    ax = np.linspace(-1.0, 1.0, R)
    gx, gy = np.meshgrid(ax, ax)          # gx varies along columns
    xy = (gx ** 2 + gy ** 2)[None].astype(np.float32)     # plane[0, y, x]
    xz = (gy ** 2)[None].astype(np.float32)               # rows are z here
    yz = np.zeros((1, R, R), dtype=np.float32)
    tp = Triplane(xy, xz, yz)
    w = np.zeros((3, 4), dtype=np.float32)
    w[:, 0] = -sharpness                   # logit = s*(radius^2 - r^2)
    b = np.array([sharpness * radius ** 2, 0, 0, 0], dtype=np.float32)
    P = {"head.fc0.weight": w, "head.fc0.bias": b}
    return tp, P


def disc_mask(pose, H, W, radius=0.5):
    """Analytic sphere-silhouette mask for the same camera."""
    from triplanegen.prompts import _ray_sphere
    from triplanegen.renderer import generate_rays
    rays = generate_rays(pose, H, W)
    hit, _ = _ray_sphere(rays.origins.astype(np.float64),
                         rays.directions.astype(np.float64),
                         np.zeros(3), radius)
    return hit.reshape(H, W)


@pytest.fixture
def sphere_scene():
    return sphere_field()
