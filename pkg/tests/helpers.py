"""Shared fixtures and independent oracles for the test suite.

Oracles here deliberately use naive per-pixel / brute-force formulations
so they stay independent of the library's vectorized implementations.
"""

import numpy as np

from adpsplit.raster import ALPHA_CAP, ALPHA_MIN, visible_splats
from adpsplit.scene import Camera, Gaussian3D, Scene, sh_to_rgb


def random_unit_quat(rng):
    q = rng.standard_normal(4)
    return q / np.linalg.norm(q)


def random_gaussian(rng, mu_range=1.0, scale_range=(0.05, 0.5),
                    opacity_range=(0.2, 0.9), color_range=(0.1, 0.9)):
    from adpsplit.scene import rgb_to_dc

    return Gaussian3D(
        mu=rng.uniform(-mu_range, mu_range, 3),
        scale=rng.uniform(*scale_range, 3),
        rot=random_unit_quat(rng),
        opacity=rng.uniform(*opacity_range),
        sh_dc=rgb_to_dc(rng.uniform(*color_range, 3)),
    )


def raw_gaussian(mu, scale, rot, opacity, sh_dc, sh_rest=()):
    """Bypass invariant validation (needed for finite-difference probes
    that perturb raw quaternion components off the unit sphere)."""
    g = object.__new__(Gaussian3D)
    object.__setattr__(g, "mu", np.asarray(mu, dtype=np.float64))
    object.__setattr__(g, "scale", np.asarray(scale, dtype=np.float64))
    object.__setattr__(g, "rot", np.asarray(rot, dtype=np.float64))
    object.__setattr__(g, "opacity", float(opacity))
    object.__setattr__(g, "sh_dc", np.asarray(sh_dc, dtype=np.float64))
    object.__setattr__(g, "sh_rest",
                       tuple(np.asarray(c, dtype=np.float64) for c in sh_rest))
    return g


def simple_camera(width=16, height=16, f=40.0, dist=3.0):
    """Axis-aligned camera at -z looking toward +z (forward = +z)."""
    return Camera(
        r_c2w=np.eye(3),
        center=np.array([0.0, 0.0, -dist]),
        f_x=f,
        f_y=f,
        p_x=(width - 1) / 2.0,
        p_y=(height - 1) / 2.0,
        width=width,
        height=height,
    )


def random_scene(rng, n, mu_range=0.5, **kw):
    gaussians = [random_gaussian(rng, mu_range=mu_range, **kw) for _ in range(n)]
    return Scene(gaussians=gaussians, extent=1.0)


def render_oracle(scene, cam, background):
    """Literal per-pixel front-to-back compositing, one python loop per pixel."""
    splats = visible_splats(scene, cam)
    h, w = cam.height, cam.width
    bg = np.asarray(background, dtype=np.float64)
    image = np.zeros((h, w, 3))
    dominant = np.full((h, w), -1, dtype=np.int64)
    for py in range(h):
        for px in range(w):
            trans = 1.0
            best_w, best_i = 0.0, -1
            for s in splats:
                g = scene.gaussians[s.source_index]
                d = np.array([px, py], dtype=np.float64) - s.mean2d
                quad = d @ np.linalg.inv(s.cov2d) @ d
                alpha = min(ALPHA_CAP, g.opacity * np.exp(-0.5 * quad))
                if alpha < ALPHA_MIN:
                    alpha = 0.0
                dirv = g.mu - cam.center
                rgb = sh_to_rgb(g, dirv / np.linalg.norm(dirv))
                weight = trans * alpha
                image[py, px] += weight * rgb
                if weight > best_w:
                    best_w, best_i = weight, s.source_index
                trans *= 1.0 - alpha
            image[py, px] += trans * bg
            dominant[py, px] = best_i
    return image, dominant


def erode_oracle(m, r):
    """Brute-force erosion checking the full footprint at each pixel."""
    m = np.asarray(m, dtype=bool)
    if r <= 1:
        return m.copy()
    h, w = m.shape
    lo = -(r // 2)
    hi = r - r // 2 - 1
    out = np.zeros_like(m)
    for y in range(h):
        for x in range(w):
            ok = True
            for dy in range(lo, hi + 1):
                for dx in range(lo, hi + 1):
                    yy, xx = y + dy, x + dx
                    if not (0 <= yy < h and 0 <= xx < w and m[yy, xx]):
                        ok = False
                        break
                if not ok:
                    break
            out[y, x] = ok
    return out


def partition_oracle(m, dominant, bands, candidates, m_min):
    """BFS flood fill over the (metric, dominance, band) triple predicate.

    Returns a set of frozensets of (x, y) pixels with their candidate/band.
    """
    h, w = m.shape
    candidates = set(int(c) for c in candidates)
    seen = np.zeros_like(m, dtype=bool)
    regions = []
    for y in range(h):
        for x in range(w):
            if seen[y, x] or not m[y, x] or int(dominant[y, x]) not in candidates:
                continue
            cand, band = int(dominant[y, x]), int(bands[y, x])
            stack = [(x, y)]
            seen[y, x] = True
            pix = []
            while stack:
                cx, cy = stack.pop()
                pix.append((cx, cy))
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        nx, ny = cx + dx, cy + dy
                        if (0 <= nx < w and 0 <= ny < h and not seen[ny, nx]
                                and m[ny, nx] and int(dominant[ny, nx]) == cand
                                and int(bands[ny, nx]) == band):
                            seen[ny, nx] = True
                            stack.append((nx, ny))
            if len(pix) >= m_min:
                regions.append((cand, band, frozenset(pix)))
    return regions


def mahalanobis_objective(mu_p, cov_p, origin, dir_unit):
    prec = np.linalg.inv(cov_p)

    def f(t):
        d = origin + t * dir_unit - mu_p
        return d @ prec @ d

    return f


def golden_min(f, lo, hi, tol=1e-12, iters=200):
    """Golden-section minimum of a unimodal function on [lo, hi]."""
    gr = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - gr * (b - a)
    d = a + gr * (b - a)
    for _ in range(iters):
        if abs(b - a) < tol:
            break
        if f(c) < f(d):
            b = d
        else:
            a = c
        c = b - gr * (b - a)
        d = a + gr * (b - a)
    return 0.5 * (a + b)


def grid_golden_tstar(mu_p, cov_p, origin, dir_unit, n_grid=400):
    """Dense grid scan plus golden-section refinement of the objective."""
    f = mahalanobis_objective(mu_p, cov_p, origin, dir_unit)
    span = 4.0 * np.linalg.norm(np.asarray(mu_p) - np.asarray(origin))
    ts = np.linspace(0.0, span, n_grid)
    vals = [f(t) for t in ts]
    i = int(np.argmin(vals))
    lo = ts[max(0, i - 1)]
    hi = ts[min(n_grid - 1, i + 1)]
    return golden_min(f, lo, hi)


def random_spd(rng, dim=3, cond_range=(0.05, 1.0)):
    q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    lam = rng.uniform(*cond_range, dim)
    return q @ np.diag(lam**2) @ q.T
