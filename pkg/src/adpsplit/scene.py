"""Core scene model: Gaussians, cameras, configuration, and scene file I/O.

Rotations are stored as unit quaternions (w, x, y, z) and expanded to
matrices on demand. Colors are spherical-harmonic coefficients; desk-scale
scenes normally carry only the DC term.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

# Real SH basis constants, degrees 0..3.
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.3153915652525205,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)

SCENE_HEADER = "adpsplit-scene v1"
CAMERA_HEADER = "adpsplit-cameras v1"


class InvariantError(ValueError):
    """A domain-type invariant was violated."""


class SceneFormatError(ValueError):
    """A scene or camera file could not be parsed."""


def _as_vec(x, n, name):
    a = np.asarray(x, dtype=np.float64)
    if a.shape != (n,):
        raise InvariantError(f"{name} must be a {n}-vector, got shape {a.shape}")
    return a


@dataclass(frozen=True)
class Gaussian3D:
    """One anisotropic splat: mean, scale, rotation, opacity, SH color."""

    mu: np.ndarray
    scale: np.ndarray
    rot: np.ndarray  # unit quaternion (w, x, y, z)
    opacity: float
    sh_dc: np.ndarray
    sh_rest: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "mu", _as_vec(self.mu, 3, "mu"))
        object.__setattr__(self, "scale", _as_vec(self.scale, 3, "scale"))
        object.__setattr__(self, "rot", _as_vec(self.rot, 4, "rot"))
        object.__setattr__(self, "sh_dc", _as_vec(self.sh_dc, 3, "sh_dc"))
        object.__setattr__(
            self, "sh_rest", tuple(_as_vec(c, 3, "sh_rest") for c in self.sh_rest)
        )
        object.__setattr__(self, "opacity", float(self.opacity))
        if abs(np.linalg.norm(self.rot) - 1.0) > 1e-9:
            raise InvariantError(f"rot quaternion not unit: {self.rot}")
        if not np.all(self.scale > 0):
            raise InvariantError(f"scale components must be > 0: {self.scale}")
        if not (0.0 < self.opacity < 1.0):
            raise InvariantError(f"opacity must lie in (0,1): {self.opacity}")
        if len(self.sh_rest) > 15:
            raise InvariantError("sh_rest exceeds degree-3 coefficient count")


@dataclass(frozen=True)
class Camera:
    """Pinhole view: camera-to-world rotation, center, intrinsics, image size.

    Columns of ``r_c2w`` are the camera right, down, and forward axes in
    world coordinates.
    """

    r_c2w: np.ndarray
    center: np.ndarray
    f_x: float
    f_y: float
    p_x: float
    p_y: float
    width: int
    height: int

    def __post_init__(self):
        r = np.asarray(self.r_c2w, dtype=np.float64)
        if r.shape != (3, 3):
            raise InvariantError(f"r_c2w must be 3x3, got {r.shape}")
        if np.max(np.abs(r.T @ r - np.eye(3))) >= 1e-8:
            raise InvariantError("r_c2w is not orthonormal")
        object.__setattr__(self, "r_c2w", r)
        object.__setattr__(self, "center", _as_vec(self.center, 3, "center"))
        for name in ("f_x", "f_y", "p_x", "p_y"):
            object.__setattr__(self, name, float(getattr(self, name)))
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        if self.f_x <= 0 or self.f_y <= 0:
            raise InvariantError("focal lengths must be positive")
        if not (0 <= self.p_x < self.width and 0 <= self.p_y < self.height):
            raise InvariantError("principal point outside image")

    @property
    def right(self) -> np.ndarray:
        return self.r_c2w[:, 0]

    @property
    def down(self) -> np.ndarray:
        return self.r_c2w[:, 1]

    @property
    def forward(self) -> np.ndarray:
        return self.r_c2w[:, 2]


@dataclass
class Scene:
    """An ordered list of Gaussians plus the bounding-sphere radius."""

    gaussians: list
    extent: float

    def __post_init__(self):
        self.extent = float(self.extent)
        if self.extent <= 0:
            raise InvariantError("scene extent must be > 0")

    def __len__(self):
        return len(self.gaussians)


@dataclass
class AdpSplitConfig:
    """Hyperparameters of the adaptive split operator."""

    tau_l1: float = 0.1        # normalized L1 threshold
    r_erode: int = 2           # erosion footprint side, pixels
    m_min: int = 5             # minimum error-region area, pixels
    l_bands: int = 3           # number of error-level bands
    n_max: int = 19            # child cap per parent
    v_views: int = 20          # sampled views per densify step
    gamma_d: float = 2.0       # merge distance threshold
    gamma_c: float = 0.15      # merge color threshold
    tau_g: float = 0.0002      # densification gradient threshold
    tau_s: float = 0.01        # split scale threshold, fraction of extent
    eta: float = 1.6           # vanilla split shrink factor
    t_interval: int = 100      # densification interval, iterations
    eps: float = 1e-9          # numerical-stability constant

    def __post_init__(self):
        if not (0.0 < self.tau_l1 < 1.0):
            raise InvariantError("tau_l1 must lie in (0,1)")
        if self.l_bands < 1 or self.n_max < 1 or self.v_views < 1:
            raise InvariantError("l_bands, n_max, v_views must be >= 1")
        if self.gamma_d < 0 or self.gamma_c < 0:
            raise InvariantError("gamma_d, gamma_c must be >= 0")
        if self.eta <= 0 or self.eps <= 0:
            raise InvariantError("eta and eps must be > 0")

    def with_overrides(self, overrides: dict) -> "AdpSplitConfig":
        known = {f.name for f in fields(self)}
        bad = set(overrides) - known
        if bad:
            raise KeyError(f"unknown config fields: {sorted(bad)}")
        return replace(self, **overrides)


def quat_to_rot(q) -> np.ndarray:
    """Rotation matrix from a quaternion (w, x, y, z); normalizes first."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def rot_to_quat(r) -> np.ndarray:
    """Unit quaternion (w, x, y, z) from a proper rotation matrix."""
    r = np.asarray(r, dtype=np.float64)
    tr = np.trace(r)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = np.array(
            [0.25 * s, (r[2, 1] - r[1, 2]) / s, (r[0, 2] - r[2, 0]) / s,
             (r[1, 0] - r[0, 1]) / s]
        )
    else:
        i = int(np.argmax(np.diag(r)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(1.0 + r[i, i] - r[j, j] - r[k, k]) * 2
        q = np.empty(4)
        q[0] = (r[k, j] - r[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (r[j, i] + r[i, j]) / s
        q[1 + k] = (r[k, i] + r[i, k]) / s
    return q / np.linalg.norm(q)


def quat_multiply(q1, q2) -> np.ndarray:
    w1, x1, y1, z1 = q1
    w2, x2, y2, z2 = q2
    return np.array(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ]
    )


def covariance(g: Gaussian3D) -> np.ndarray:
    """3D covariance R diag(s^2) R^T of a Gaussian."""
    r = quat_to_rot(g.rot)
    return r @ np.diag(g.scale**2) @ r.T


def sh_basis(dir: np.ndarray, n_coeffs: int) -> np.ndarray:
    """Real SH basis values for the first ``n_coeffs`` coefficients."""
    x, y, z = dir
    basis = np.empty(16)
    basis[0] = SH_C0
    if n_coeffs > 1:
        basis[1] = -SH_C1 * y
        basis[2] = SH_C1 * z
        basis[3] = -SH_C1 * x
    if n_coeffs > 4:
        xx, yy, zz = x * x, y * y, z * z
        basis[4] = SH_C2[0] * x * y
        basis[5] = SH_C2[1] * y * z
        basis[6] = SH_C2[2] * (2 * zz - xx - yy)
        basis[7] = SH_C2[3] * x * z
        basis[8] = SH_C2[4] * (xx - yy)
    if n_coeffs > 9:
        xx, yy, zz = x * x, y * y, z * z
        basis[9] = SH_C3[0] * y * (3 * xx - yy)
        basis[10] = SH_C3[1] * x * y * z
        basis[11] = SH_C3[2] * y * (4 * zz - xx - yy)
        basis[12] = SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
        basis[13] = SH_C3[4] * x * (4 * zz - xx - yy)
        basis[14] = SH_C3[5] * z * (xx - yy)
        basis[15] = SH_C3[6] * x * (3 * yy - xx)
    return basis[:n_coeffs]


def sh_to_rgb(g: Gaussian3D, dir) -> np.ndarray:
    """View-dependent color clamp(0.5 + sum_k basis_k(dir) coeff_k, 0, 1)."""
    dir = np.asarray(dir, dtype=np.float64)
    coeffs = np.vstack([g.sh_dc, *g.sh_rest]) if g.sh_rest else g.sh_dc[None, :]
    basis = sh_basis(dir, coeffs.shape[0])
    rgb = 0.5 + basis @ coeffs
    return np.clip(rgb, 0.0, 1.0)


def rgb_to_dc(rgb) -> np.ndarray:
    """DC SH coefficient reproducing ``rgb`` exactly (pre-clamp)."""
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0


def _fmt(values) -> str:
    return " ".join(repr(float(v)) for v in values)


def save_scene(scene: Scene, path) -> None:
    """Write a scene as the self-describing v1 text format."""
    lines = [SCENE_HEADER, f"extent {scene.extent!r}"]
    for g in scene.gaussians:
        rest = [c for coeff in g.sh_rest for c in coeff]
        lines.append(_fmt([*g.mu, *g.scale, *g.rot, g.opacity, *g.sh_dc, *rest]))
    Path(path).write_text("\n".join(lines) + "\n")


def load_scene(path) -> Scene:
    """Read a v1 scene file; raises on malformed or invariant-violating data."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != SCENE_HEADER:
        raise SceneFormatError(f"{path}: missing '{SCENE_HEADER}' header")
    if len(lines) < 2 or not lines[1].startswith("extent "):
        raise SceneFormatError(f"{path}: line 2 must declare the scene extent")
    try:
        extent = float(lines[1].split()[1])
    except (IndexError, ValueError) as exc:
        raise SceneFormatError(f"{path}: bad extent line: {lines[1]!r}") from exc
    gaussians = []
    for lineno, line in enumerate(lines[2:], start=3):
        if not line.strip():
            continue
        try:
            vals = [float(t) for t in line.split()]
        except ValueError as exc:
            raise SceneFormatError(f"{path}:{lineno}: non-numeric token") from exc
        if len(vals) < 14 or (len(vals) - 14) % 3 != 0:
            raise SceneFormatError(
                f"{path}:{lineno}: record has {len(vals)} values, "
                "expected 14 + 3k (truncated record?)"
            )
        rest = tuple(
            np.array(vals[14 + 3 * i : 17 + 3 * i]) for i in range((len(vals) - 14) // 3)
        )
        try:
            gaussians.append(
                Gaussian3D(
                    mu=vals[0:3],
                    scale=vals[3:6],
                    rot=vals[6:10],
                    opacity=vals[10],
                    sh_dc=vals[11:14],
                    sh_rest=rest,
                )
            )
        except InvariantError as exc:
            raise InvariantError(
                f"{path}:{lineno}: Gaussian {len(gaussians)}: {exc}"
            ) from exc
    if not gaussians:
        raise SceneFormatError(f"{path}: scene contains no Gaussians")
    return Scene(gaussians=gaussians, extent=extent)


def save_cameras(cameras, path) -> None:
    """Write a camera set as the v1 text format, one record per camera."""
    lines = [CAMERA_HEADER]
    for c in cameras:
        lines.append(
            _fmt([*c.r_c2w.ravel(), *c.center, c.f_x, c.f_y, c.p_x, c.p_y])
            + f" {c.width} {c.height}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def load_cameras(path) -> list:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != CAMERA_HEADER:
        raise SceneFormatError(f"{path}: missing '{CAMERA_HEADER}' header")
    cameras = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            vals = [float(t) for t in line.split()]
        except ValueError as exc:
            raise SceneFormatError(f"{path}:{lineno}: non-numeric token") from exc
        if len(vals) != 18:
            raise SceneFormatError(
                f"{path}:{lineno}: camera record has {len(vals)} values, expected 18"
            )
        try:
            cameras.append(
                Camera(
                    r_c2w=np.array(vals[0:9]).reshape(3, 3),
                    center=vals[9:12],
                    f_x=vals[12],
                    f_y=vals[13],
                    p_x=vals[14],
                    p_y=vals[15],
                    width=int(vals[16]),
                    height=int(vals[17]),
                )
            )
        except InvariantError as exc:
            raise InvariantError(f"{path}:{lineno}: camera {len(cameras)}: {exc}") from exc
    return cameras
