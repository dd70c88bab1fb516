"""Child Gaussian initialization from 2D error regions.

One region proposes one child: the region centroid is back-projected to
the ray depth closest to the parent in its Mahalanobis metric, the PCA
axes are unprojected (with per-component clamping against the parent's
maximum scale) and orthonormalized, and the ground-truth centroid color
seeds the child color.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .error_partition import ErrorRegion
from .scene import Camera, Gaussian3D, covariance

DEGENERATE_DENOM = 1e-18
PARALLEL_TOL = 1e-12


class DegenerateRayError(ValueError):
    """The Mahalanobis quadratic along the ray is numerically singular."""


@dataclass
class ChildProposal:
    """A candidate child Gaussian produced from one region in one view."""

    mu: np.ndarray        # 3-vector, world
    rot: np.ndarray       # 3x3, columns (u_hat1, u_hat2, camera forward)
    scale: np.ndarray     # (s1, s2, s3) with s3 == s2
    opacity: float
    rgb: np.ndarray       # region ground-truth color
    parent: int
    view: int
    region_area: int

    def cov(self) -> np.ndarray:
        return self.rot @ np.diag(self.scale**2) @ self.rot.T


def pixel_ray(cam: Camera, x: float, y: float):
    """World-space ray through a sub-pixel coordinate.

    Returns (origin, unit direction, norm of the camera-space direction);
    the norm converts ray parameters to camera-space depth.
    """
    d_cam = np.array([(x - cam.p_x) / cam.f_x, (y - cam.p_y) / cam.f_y, 1.0])
    d_world = cam.r_c2w @ d_cam
    norm = np.linalg.norm(d_cam)
    return cam.center.copy(), d_world / np.linalg.norm(d_world), float(norm)


def optimal_t(mu_p, cov_p, origin, dir_unit, eps: float) -> float:
    """Ray parameter minimizing the Mahalanobis distance to the parent."""
    cov_p = np.asarray(cov_p, dtype=np.float64)
    prec = np.linalg.inv(cov_p)
    b = np.asarray(mu_p, dtype=np.float64) - np.asarray(origin, dtype=np.float64)
    denom = float(dir_unit @ prec @ dir_unit)
    if denom < DEGENERATE_DENOM:
        raise DegenerateRayError(f"quadratic coefficient {denom} underflows")
    return float(b @ prec @ dir_unit) / (denom + eps)


def unproject_axes(region: ErrorRegion, cam: Camera, t_star: float,
                   dir_cam_norm: float, s_max_parent: float):
    """Unproject the region PCA axes to world space with clamping.

    Each image-space component is scaled by depth over focal length and
    clamped (sign-preserving) to s_max_parent times its magnitude.
    """
    t_z = t_star / dir_cam_norm

    def clip(x, a):
        return np.sign(x) * min(abs(x), a)

    w1x = clip(region.e1[0] * region.sigma1 * t_z / cam.f_x,
               s_max_parent * abs(region.e1[0]))
    w1y = clip(region.e1[1] * region.sigma1 * t_z / cam.f_y,
               s_max_parent * abs(region.e1[1]))
    w2x = clip(region.e2[0] * region.sigma2 * t_z / cam.f_x,
               s_max_parent * abs(region.e2[0]))
    w2y = clip(region.e2[1] * region.sigma2 * t_z / cam.f_y,
               s_max_parent * abs(region.e2[1]))
    a1 = w1x * cam.right + w1y * cam.down
    a2 = w2x * cam.right + w2y * cam.down
    return a1, a2


def orthonormalize(a1, a2, fallback=None):
    """Gram-Schmidt the two in-plane axes to an orthonormal pair.

    ``fallback`` replaces u_hat2 when a2 is (near-)parallel to a1; it must
    be a unit vector orthogonal to u_hat1 (e.g. an in-image-plane axis).
    """
    a1 = np.asarray(a1, dtype=np.float64)
    a2 = np.asarray(a2, dtype=np.float64)
    u1 = a1 / np.linalg.norm(a1)
    rej = a2 - (a2 @ u1) * u1
    n = np.linalg.norm(rej)
    if n < PARALLEL_TOL:
        if fallback is None:
            raise DegenerateRayError("axes are parallel and no fallback given")
        return u1, np.asarray(fallback, dtype=np.float64)
    return u1, rej / n


def init_child(parent: Gaussian3D, parent_index: int, region: ErrorRegion,
               cam: Camera, cfg) -> ChildProposal | None:
    """Build one child proposal; returns None when the depth is non-positive."""
    origin, dir_unit, dir_cam_norm = pixel_ray(cam, *region.centroid)
    t_star = optimal_t(parent.mu, covariance(parent), origin, dir_unit, cfg.eps)
    if t_star <= 0.0:
        return None
    s_max = float(parent.scale.max())
    a1, a2 = unproject_axes(region, cam, t_star, dir_cam_norm, s_max)
    # in-image-plane substitute for degenerate rejections
    u1 = a1 / np.linalg.norm(a1)
    fb = np.cross(cam.forward, u1)
    fbn = np.linalg.norm(fb)
    fallback = fb / fbn if fbn > PARALLEL_TOL else cam.down
    u1, u2 = orthonormalize(a1, a2, fallback=fallback)
    rot = np.stack([u1, u2, cam.forward], axis=1)
    if np.linalg.det(rot) < 0:
        # flip one axis to keep a proper rotation; covariance is unchanged
        rot[:, 2] = -rot[:, 2]
    s1 = float(np.linalg.norm(a1))
    s2 = float(np.linalg.norm(a2))
    return ChildProposal(
        mu=origin + t_star * dir_unit,
        rot=rot,
        scale=np.array([s1, s2, s2]),
        opacity=parent.opacity,
        rgb=region.gt_rgb.copy(),
        parent=parent_index,
        view=region.view,
        region_area=region.area,
    )
