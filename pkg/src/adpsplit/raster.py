"""Forward alpha-compositing rasterizer and its backward pass.

The forward path is plain numpy: splats are depth-sorted globally, alpha
maps are evaluated over the full image, and pixels are composited
front-to-back, so results are independent of input order and of any
internal parallelism. The backward pass re-runs the identical math in
torch (float64 by default) and reads gradients off the autograd graph;
it is verified against finite differences in the test suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .scene import Camera, Gaussian3D, Scene, covariance, sh_to_rgb

ALPHA_CAP = 0.99        # maximum per-splat alpha
ALPHA_MIN = 1.0 / 255.0  # contributions below this are dropped
COV2D_FLOOR = 0.3        # px^2 added to the 2D covariance diagonal
PSNR_CAP = 43.0          # dB returned for identical images
DOMINANT_NONE = -1       # dominant-map sentinel: no contributor


class BehindCameraError(ValueError):
    """Gaussian center is at or behind the camera plane."""


@dataclass
class Splat2D:
    """A Gaussian projected into one view."""

    mean2d: np.ndarray   # pixels
    cov2d: np.ndarray    # 2x2, px^2, regularized
    depth: float         # camera-space z
    source_index: int = -1


@dataclass
class RenderOutput:
    image: np.ndarray         # H x W x 3 in [0,1]
    dominant_map: np.ndarray  # H x W int indices, DOMINANT_NONE where empty
    background: np.ndarray


@dataclass
class GradOutput:
    """Per-Gaussian parameter gradients plus image-space positional gradients."""

    dmu: np.ndarray          # N x 3
    dscale: np.ndarray       # N x 3
    drot: np.ndarray         # N x 4, w.r.t. raw quaternion components
    dopacity: np.ndarray     # N
    dsh_dc: np.ndarray       # N x 3
    viewspace_grad: np.ndarray  # N x 2, d loss / d projected 2D mean
    visible: np.ndarray      # N bool


def cam_space(g: Gaussian3D, cam: Camera) -> np.ndarray:
    """Gaussian center in camera coordinates (right, down, forward)."""
    return cam.r_c2w.T @ (g.mu - cam.center)


def project(g: Gaussian3D, cam: Camera, eps: float = 1e-8) -> Splat2D:
    """Perspective-project a Gaussian using the local affine Jacobian."""
    p = cam_space(g, cam)
    x, y, z = p
    if z <= eps:
        raise BehindCameraError(f"camera-space z = {z} <= {eps}")
    mean2d = np.array([cam.f_x * x / z + cam.p_x, cam.f_y * y / z + cam.p_y])
    jac = np.array(
        [
            [cam.f_x / z, 0.0, -cam.f_x * x / (z * z)],
            [0.0, cam.f_y / z, -cam.f_y * y / (z * z)],
        ]
    )
    w2c = cam.r_c2w.T
    cov2d = jac @ w2c @ covariance(g) @ w2c.T @ jac.T + COV2D_FLOOR * np.eye(2)
    return Splat2D(mean2d=mean2d, cov2d=cov2d, depth=float(z))


def _support_radius(cov2d: np.ndarray, opacity: float) -> float:
    """Radius in px beyond which alpha is guaranteed below ALPHA_MIN."""
    o = min(opacity, ALPHA_CAP)
    if o < ALPHA_MIN:
        return 0.0
    lam_max = 0.5 * (
        cov2d[0, 0] + cov2d[1, 1]
        + math.hypot(cov2d[0, 0] - cov2d[1, 1], 2 * cov2d[0, 1])
    )
    return math.sqrt(2.0 * math.log(o / ALPHA_MIN) * lam_max)


def visible_splats(scene: Scene, cam: Camera):
    """Depth-sorted splats whose alpha support intersects the image.

    Culling only removes splats with no pixel above ALPHA_MIN, so it never
    changes the rendered result. Ties in depth keep scene order.
    """
    splats = []
    for i, g in enumerate(scene.gaussians):
        if cam_space(g, cam)[2] <= 1e-8:
            continue
        s = project(g, cam)
        r = _support_radius(s.cov2d, g.opacity)
        if r <= 0.0:
            continue
        mx, my = s.mean2d
        if (mx + r < 0 or mx - r > cam.width - 1
                or my + r < 0 or my - r > cam.height - 1):
            continue
        s.source_index = i
        splats.append(s)
    splats.sort(key=lambda s: (s.depth, s.source_index))
    return splats


def _alpha_map(splat: Splat2D, opacity: float, width: int, height: int) -> np.ndarray:
    """Per-pixel alpha of one splat over the full image grid."""
    xs = np.arange(width, dtype=np.float64)
    ys = np.arange(height, dtype=np.float64)
    dx = xs[None, :] - splat.mean2d[0]
    dy = ys[:, None] - splat.mean2d[1]
    a, b, c = splat.cov2d[0, 0], splat.cov2d[0, 1], splat.cov2d[1, 1]
    det = a * c - b * b
    # conic = inverse covariance
    ia, ib, ic = c / det, -b / det, a / det
    quad = ia * dx * dx + 2.0 * ib * dx * dy + ic * dy * dy
    alpha = np.minimum(ALPHA_CAP, opacity * np.exp(-0.5 * quad))
    alpha[alpha < ALPHA_MIN] = 0.0
    return alpha


def render(scene: Scene, cam: Camera, background) -> RenderOutput:
    """Front-to-back alpha compositing plus the dominant-Gaussian map."""
    background = np.asarray(background, dtype=np.float64)
    h, w = cam.height, cam.width
    image = np.zeros((h, w, 3))
    trans = np.ones((h, w))
    dominant = np.full((h, w), DOMINANT_NONE, dtype=np.int64)
    best_w = np.zeros((h, w))
    for splat in visible_splats(scene, cam):
        g = scene.gaussians[splat.source_index]
        alpha = _alpha_map(splat, g.opacity, w, h)
        dirv = g.mu - cam.center
        rgb = sh_to_rgb(g, dirv / np.linalg.norm(dirv))
        weight = trans * alpha
        image += weight[:, :, None] * rgb
        # front-most splat wins ties: strict inequality keeps earlier winners
        win = weight > best_w
        best_w[win] = weight[win]
        dominant[win] = splat.source_index
        trans *= 1.0 - alpha
    image += trans[:, :, None] * background
    return RenderOutput(image=image, dominant_map=dominant, background=background)


def _torch_sh_basis(dirs, n_coeffs):
    """Batched differentiable SH basis, mirroring ``scene.sh_basis``."""
    import torch

    from .scene import SH_C0, SH_C1, SH_C2, SH_C3

    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    cols = [torch.full_like(x, SH_C0)]
    if n_coeffs > 1:
        cols += [-SH_C1 * y, SH_C1 * z, -SH_C1 * x]
    if n_coeffs > 4:
        xx, yy, zz = x * x, y * y, z * z
        cols += [
            SH_C2[0] * x * y,
            SH_C2[1] * y * z,
            SH_C2[2] * (2 * zz - xx - yy),
            SH_C2[3] * x * z,
            SH_C2[4] * (xx - yy),
        ]
    if n_coeffs > 9:
        xx, yy, zz = x * x, y * y, z * z
        cols += [
            SH_C3[0] * y * (3 * xx - yy),
            SH_C3[1] * x * y * z,
            SH_C3[2] * y * (4 * zz - xx - yy),
            SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy),
            SH_C3[4] * x * (4 * zz - xx - yy),
            SH_C3[5] * z * (xx - yy),
            SH_C3[6] * x * (3 * yy - xx),
        ]
    return torch.stack(cols[:n_coeffs], dim=1)


def _torch_render(scene: Scene, cam: Camera, background, dtype=None):
    """Differentiable re-implementation of ``render`` (image only).

    Runs in float64 by default; the training loop opts into float32 for
    speed, where gradient noise is far below the optimizer's step size.
    """
    import torch

    torch.set_num_threads(1)
    if dtype is None:
        dtype = torch.float64
    n = len(scene.gaussians)

    def param(arr):
        return torch.tensor(np.array(arr), dtype=dtype, requires_grad=True)

    mu = param([g.mu for g in scene.gaussians])
    scale = param([g.scale for g in scene.gaussians])
    quat = param([g.rot for g in scene.gaussians])
    opacity = param([g.opacity for g in scene.gaussians])
    sh_dc = param([g.sh_dc for g in scene.gaussians])

    order = [s.source_index for s in visible_splats(scene, cam)]
    h, w = cam.height, cam.width
    bg = torch.tensor(np.asarray(background, dtype=np.float64), dtype=dtype)
    if not order:
        image = bg.expand(h, w, 3).clone()
        return image, (mu, scale, quat, opacity, sh_dc), None, order

    idx = torch.tensor(order)
    mu_v = mu[idx]
    q = quat[idx]
    q = q / q.norm(dim=1, keepdim=True)
    qw, qx, qy, qz = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    rot = torch.stack(
        [
            torch.stack([1 - 2 * (qy * qy + qz * qz), 2 * (qx * qy - qw * qz),
                         2 * (qx * qz + qw * qy)], dim=1),
            torch.stack([2 * (qx * qy + qw * qz), 1 - 2 * (qx * qx + qz * qz),
                         2 * (qy * qz - qw * qx)], dim=1),
            torch.stack([2 * (qx * qz - qw * qy), 2 * (qy * qz + qw * qx),
                         1 - 2 * (qx * qx + qy * qy)], dim=1),
        ],
        dim=1,
    )
    s2 = scale[idx] ** 2
    sigma = rot @ torch.diag_embed(s2) @ rot.transpose(1, 2)

    w2c = torch.tensor(cam.r_c2w.T.copy(), dtype=dtype)
    center = torch.tensor(cam.center.copy(), dtype=dtype)
    p = (mu_v - center) @ w2c.T
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    mean2d = torch.stack([cam.f_x * x / z + cam.p_x, cam.f_y * y / z + cam.p_y], dim=1)
    mean2d.retain_grad()
    zero = torch.zeros_like(z)
    jac = torch.stack(
        [
            torch.stack([cam.f_x / z, zero, -cam.f_x * x / (z * z)], dim=1),
            torch.stack([zero, cam.f_y / z, -cam.f_y * y / (z * z)], dim=1),
        ],
        dim=1,
    )
    cov2d = jac @ w2c @ sigma @ w2c.T @ jac.transpose(1, 2)
    cov2d = cov2d + COV2D_FLOOR * torch.eye(2, dtype=cov2d.dtype)

    xs = torch.arange(w, dtype=dtype)
    ys = torch.arange(h, dtype=dtype)
    dx = xs[None, None, :] - mean2d[:, 0, None, None]
    dy = ys[None, :, None] - mean2d[:, 1, None, None]
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    ia = (c / det)[:, None, None]
    ib = (-b / det)[:, None, None]
    ic = (a / det)[:, None, None]
    quad = ia * dx * dx + 2.0 * ib * dx * dy + ic * dy * dy
    alpha = torch.clamp(opacity[idx][:, None, None] * torch.exp(-0.5 * quad),
                        max=ALPHA_CAP)
    alpha = torch.where(alpha < ALPHA_MIN, torch.zeros_like(alpha), alpha)

    one_minus = 1.0 - alpha
    trans = torch.cumprod(one_minus, dim=0)
    trans = torch.cat([torch.ones_like(trans[:1]), trans[:-1]], dim=0)

    dirv = mu_v - center
    dirv = dirv / dirv.norm(dim=1, keepdim=True)
    n_coeffs = 1 + max((len(scene.gaussians[i].sh_rest) for i in order), default=0)
    basis = _torch_sh_basis(dirv, n_coeffs)
    coeffs = [sh_dc[idx]]
    for j in range(n_coeffs - 1):
        rest_j = np.stack(
            [
                scene.gaussians[i].sh_rest[j]
                if j < len(scene.gaussians[i].sh_rest)
                else np.zeros(3)
                for i in order
            ]
        )
        coeffs.append(torch.tensor(rest_j, dtype=dtype))
    coeff = torch.stack(coeffs, dim=1)  # K x n_coeffs x 3
    rgb = torch.clamp(0.5 + (basis[:, :, None] * coeff).sum(dim=1), 0.0, 1.0)

    weight = trans * alpha
    image = (weight[:, :, :, None] * rgb[:, None, None, :]).sum(dim=0)
    t_final = trans[-1] * one_minus[-1]
    image = image + t_final[:, :, None] * bg
    return image, (mu, scale, quat, opacity, sh_dc), mean2d, order


def render_backward(scene: Scene, cam: Camera, background, dL_dI,
                    single_precision: bool = False) -> GradOutput:
    """Gradients of L = sum(dL_dI * image) for every Gaussian parameter."""
    import torch

    dL_dI = np.asarray(dL_dI, dtype=np.float64)
    if dL_dI.shape != (cam.height, cam.width, 3):
        raise ValueError(
            f"dL_dI shape {dL_dI.shape} does not match image "
            f"({cam.height}, {cam.width}, 3)"
        )
    dtype = torch.float32 if single_precision else torch.float64
    image, params, mean2d, order = _torch_render(scene, cam, background,
                                                 dtype=dtype)
    loss = (torch.tensor(dL_dI, dtype=dtype) * image).sum()
    if loss.requires_grad:
        loss.backward()
    mu, scale, quat, opacity, sh_dc = params

    n = len(scene.gaussians)

    def grad_of(t, shape):
        if t.grad is None:
            return np.zeros(shape)
        return np.asarray(t.grad.numpy(), dtype=np.float64)

    viewspace = np.zeros((n, 2))
    if mean2d is not None and mean2d.grad is not None:
        vg = np.asarray(mean2d.grad.numpy(), dtype=np.float64)
        for k, i in enumerate(order):
            viewspace[i] += vg[k]
    visible = np.zeros(n, dtype=bool)
    visible[list(order)] = True
    return GradOutput(
        dmu=grad_of(mu, (n, 3)),
        dscale=grad_of(scale, (n, 3)),
        drot=grad_of(quat, (n, 4)),
        dopacity=grad_of(opacity, (n,)),
        dsh_dc=grad_of(sh_dc, (n, 3)),
        viewspace_grad=viewspace,
        visible=visible,
    )


def psnr(image, gt) -> float:
    """10 log10(1/MSE), capped at PSNR_CAP dB for (near-)identical images."""
    image = np.asarray(image, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if image.shape != gt.shape:
        raise ValueError(f"shape mismatch: {image.shape} vs {gt.shape}")
    mse = np.mean((image - gt) ** 2)
    if mse <= 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))
