"""Synthetic-scene experiment harness: scene generation, a desk-scale
training loop with adaptive density control, and the split-operator
comparison experiment.

Ground truth is rendered with the package's own rasterizer, so the
model class is realizable and reconstruction quality is limited only by
optimization and densification.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adc import (
    DensifyStats,
    accumulate_stats,
    adpsplit_step,
    remap_stats,
    vanilla_densify,
)
from .raster import PSNR_CAP, psnr, render, render_backward
from .scene import AdpSplitConfig, Camera, Gaussian3D, Scene, rgb_to_dc

TEST_EVERY = 4      # every 4th camera is held out
LOG_EVERY = 50      # metrics logging interval, iterations

# desk-scale defaults
DESK_IMAGE_SIZE = 48
DESK_CAMERAS = 12
DESK_K = 32
DESK_ITERS = 3000
DESK_DENSIFY_UNTIL = 1200
DESK_V_VIEWS = 6


class DivergenceError(RuntimeError):
    """Training loss became non-finite."""


@dataclass
class Schedule:
    """Iteration budget and densification plan for one training run."""

    total_iters: int
    densify_from: int
    densify_until: int
    t_interval: int = 100
    split_mode: str = "adpsplit"  # vanilla-binary | vanilla-n(N) | adpsplit
    seed: int = 0

    def __post_init__(self):
        if not (0 <= self.densify_from <= self.densify_until <= self.total_iters):
            raise ValueError("need densify_from <= densify_until <= total_iters")
        if self.t_interval < 1:
            raise ValueError("t_interval must be >= 1")

    def vanilla_n(self):
        """Child count for vanilla-n(N) modes, else None."""
        if self.split_mode == "vanilla-binary":
            return 2
        if self.split_mode.startswith("vanilla-n(") and self.split_mode.endswith(")"):
            return int(self.split_mode[len("vanilla-n(") : -1])
        if self.split_mode == "adpsplit":
            return None
        raise ValueError(f"unknown split mode: {self.split_mode}")


@dataclass
class MetricsLog:
    rows: list = field(default_factory=list)          # per-log-event rows
    densify_rows: list = field(default_factory=list)  # per-densify-step rows

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            # wall-clock seconds stay in memory only: the CSV must be
            # bitwise reproducible for equal seeds and configs
            w.writerow(["iteration", "loss", "psnr", "gaussians", "rounds"])
            for r in self.rows:
                w.writerow([r["iteration"], repr(r["loss"]), repr(r["psnr"]),
                            r["gaussians"], r["rounds"]])

    def write_densify_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["iteration", "round", "mode", "count_before",
                        "count_after", "splits", "fallbacks", "resets", "clones"])
            for r in self.densify_rows:
                w.writerow([r[k] for k in
                            ("iteration", "round", "mode", "count_before",
                             "count_after", "splits", "fallbacks", "resets",
                             "clones")])


def _look_at(eye, target, world_up):
    forward = target - eye
    forward = forward / np.linalg.norm(forward)
    down0 = -np.asarray(world_up, dtype=np.float64)
    right = np.cross(down0, forward)
    right = right / np.linalg.norm(right)
    down = np.cross(forward, right)
    return np.stack([right, down, forward], axis=1)


def synth_scene(seed: int, k: int, cam_count: int, image_size: int):
    """Random ground-truth scene, a camera ring, and self-rendered gt images.

    Gaussians are scattered in a flat slab and the cameras circle above
    it, so every blob is visible from every view; a deep isotropic cloud
    seen from a ring of side-on cameras is instead full of occlusion
    ambiguities that stall any densification strategy in translucent
    local minima.
    """
    rng = np.random.default_rng(seed)
    gaussians = []
    for _ in range(k):
        mu = np.array(
            [
                rng.uniform(-0.75, 0.75),
                rng.uniform(-0.75, 0.75),
                rng.uniform(-0.12, 0.12),
            ]
        )
        base = rng.uniform(0.04, 0.10)
        aniso = rng.uniform(0.4, 1.0, 3)
        quat = rng.standard_normal(4)
        quat = quat / np.linalg.norm(quat)
        gaussians.append(
            Gaussian3D(
                mu=mu,
                scale=base * aniso,
                rot=quat,
                opacity=rng.uniform(0.65, 0.95),
                sh_dc=rgb_to_dc(rng.uniform(0.15, 0.85, 3)),
            )
        )
    radii = [np.linalg.norm(g.mu) + g.scale.max() for g in gaussians]
    extent = max(1.0, float(max(radii)))
    scene = Scene(gaussians=gaussians, extent=extent)

    cameras = []
    dist = 2.6 * extent
    f = 0.55 * image_size * dist / extent
    elev = 0.9
    for i in range(cam_count):
        ang = 2 * np.pi * i / cam_count
        eye = dist * np.array(
            [np.cos(ang) * np.cos(elev), np.sin(ang) * np.cos(elev), np.sin(elev)]
        )
        cameras.append(
            Camera(
                r_c2w=_look_at(eye, np.zeros(3), (0.0, 0.0, 1.0)),
                center=eye,
                f_x=f,
                f_y=f,
                p_x=(image_size - 1) / 2.0,
                p_y=(image_size - 1) / 2.0,
                width=image_size,
                height=image_size,
            )
        )
    background = np.zeros(3)
    gt_images = [render(scene, c, background).image for c in cameras]
    return scene, cameras, gt_images


def init_from_gt(gt_scene: Scene, seed: int, fraction: float = 0.5,
                 inflate: float = 2.0, cover: bool = True) -> Scene:
    """Perturbed random subset of the ground truth as the training init.

    Inflated scales make the survivors cover the missing structure, which
    leaves them both high-gradient and large: exactly the split regime.
    With ``cover`` a large dim neutral Gaussian spanning the scene is
    appended so that every pixel has some contributor; error at pixels
    nothing else explains is then attributed to a splittable Gaussian
    instead of going unclaimed.
    """
    rng = np.random.default_rng((seed, 0xC0FFEE))
    k = len(gt_scene.gaussians)
    n = max(1, int(round(fraction * k)))
    chosen = sorted(rng.choice(k, size=n, replace=False))
    gaussians = []
    for i in chosen:
        g = gt_scene.gaussians[i]
        gaussians.append(
            Gaussian3D(
                mu=g.mu + rng.normal(0.0, 0.01 * gt_scene.extent, 3),
                scale=g.scale * inflate,
                rot=g.rot,
                opacity=g.opacity,
                sh_dc=g.sh_dc,
                sh_rest=g.sh_rest,
            )
        )
    if cover:
        gaussians.append(
            Gaussian3D(
                mu=np.zeros(3),
                scale=np.full(3, 0.6 * gt_scene.extent),
                rot=np.array([1.0, 0.0, 0.0, 0.0]),
                opacity=0.3,
                sh_dc=np.zeros(3),
            )
        )
    return Scene(gaussians=gaussians, extent=gt_scene.extent)


def _logit(p):
    return np.log(p / (1.0 - p))


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


class _Params:
    """Trainer-side parameterization keeping scene invariants satisfied."""

    def __init__(self, scene: Scene):
        self.extent = scene.extent
        self.mu = np.array([g.mu for g in scene.gaussians])
        self.log_scale = np.log(np.array([g.scale for g in scene.gaussians]))
        self.quat = np.array([g.rot for g in scene.gaussians])
        self.logit_op = _logit(np.array([g.opacity for g in scene.gaussians]))
        self.sh_dc = np.array([g.sh_dc for g in scene.gaussians])

    def to_scene(self) -> Scene:
        q = self.quat / np.linalg.norm(self.quat, axis=1, keepdims=True)
        op = np.clip(_sigmoid(self.logit_op), 1e-6, 1.0 - 1e-6)
        gaussians = [
            Gaussian3D(
                mu=self.mu[i],
                scale=np.exp(np.clip(self.log_scale[i], -20.0, 20.0)),
                rot=q[i],
                opacity=op[i],
                sh_dc=self.sh_dc[i],
            )
            for i in range(len(self.mu))
        ]
        return Scene(gaussians=gaussians, extent=self.extent)

    def groups(self):
        return ("mu", "log_scale", "quat", "logit_op", "sh_dc")


DEFAULT_LRS = {
    "mu": 2e-3,        # multiplied by scene extent
    "log_scale": 5e-3,
    "quat": 1e-3,
    "logit_op": 2e-2,
    "sh_dc": 5e-3,
}


class _Adam:
    """Per-group first-order moment optimizer with index remapping."""

    def __init__(self, params: _Params, lrs=None):
        self.lrs = dict(DEFAULT_LRS if lrs is None else lrs)
        self.beta1, self.beta2, self.eps = 0.9, 0.999, 1e-12
        self.t = 0
        self.m = {g: np.zeros_like(getattr(params, g)) for g in params.groups()}
        self.v = {g: np.zeros_like(getattr(params, g)) for g in params.groups()}

    def step(self, params: _Params, grads: dict):
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for g in params.groups():
            lr = self.lrs[g] * (params.extent if g == "mu" else 1.0)
            gr = grads[g]
            self.m[g] = self.beta1 * self.m[g] + (1 - self.beta1) * gr
            self.v[g] = self.beta2 * self.v[g] + (1 - self.beta2) * gr * gr
            mhat = self.m[g] / bc1
            vhat = self.v[g] / bc2
            arr = getattr(params, g)
            arr -= lr * mhat / (np.sqrt(vhat) + self.eps)
        params.quat /= np.linalg.norm(params.quat, axis=1, keepdims=True)

    def remap(self, params: _Params, index_map, reset_indices):
        reset = set(int(i) for i in reset_indices)
        for g in params.groups():
            new_m = np.zeros_like(getattr(params, g))
            new_v = np.zeros_like(getattr(params, g))
            for new_i, old_i in enumerate(index_map):
                if old_i >= 0 and old_i not in reset:
                    new_m[new_i] = self.m[g][old_i]
                    new_v[new_i] = self.v[g][old_i]
            self.m[g] = new_m
            self.v[g] = new_v


def _chain_grads(params: _Params, grads) -> dict:
    """Chain raw-field gradients to the trainer parameterization."""
    op = np.clip(_sigmoid(params.logit_op), 1e-6, 1.0 - 1e-6)
    return {
        "mu": grads.dmu,
        "log_scale": grads.dscale * np.exp(np.clip(params.log_scale, -20.0, 20.0)),
        "quat": grads.drot,
        "logit_op": grads.dopacity * op * (1.0 - op),
        "sh_dc": grads.dsh_dc,
    }


def split_cameras(n: int):
    """Train/test camera indices: every TEST_EVERY-th camera is held out."""
    test = [i for i in range(n) if i % TEST_EVERY == 0]
    train = [i for i in range(n) if i % TEST_EVERY != 0]
    return train, test


PRUNE_OPACITY = 0.005   # faded-out Gaussians are dropped at densify steps


def _prune(params: _Params, opt: _Adam, stats: DensifyStats,
           threshold: float):
    """Drop Gaussians whose opacity collapsed below ``threshold``.

    Keeps at least one Gaussian. Optimizer moments and densification
    statistics are carried over for the survivors.
    """
    keep = _sigmoid(params.logit_op) >= threshold
    if keep.all() or not keep.any():
        return params, opt, stats
    scene = params.to_scene()
    scene.gaussians = [g for g, k in zip(scene.gaussians, keep) if k]
    new_params = _Params(scene)
    new_opt = _Adam(new_params, lrs=opt.lrs)
    new_opt.t = opt.t
    for g in new_params.groups():
        new_opt.m[g] = opt.m[g][keep]
        new_opt.v[g] = opt.v[g][keep]
    new_stats = DensifyStats(grad_accum=stats.grad_accum[keep],
                             denom=stats.denom[keep])
    return new_params, new_opt, new_stats


def train(init_scene: Scene, cameras: list, gt_images: list,
          schedule: Schedule, cfg: AdpSplitConfig,
          lrs=None, background=None, prune_opacity: float = PRUNE_OPACITY):
    """Optimize a scene against its ground-truth views with periodic ADC.

    Returns the trained scene and a MetricsLog whose per-event rows hold
    iteration, loss, held-out PSNR, Gaussian count, and wall-clock time.
    """
    background = np.zeros(3) if background is None else np.asarray(background)
    train_ids, test_ids = split_cameras(len(cameras))
    params = _Params(init_scene)
    opt = _Adam(params, lrs=lrs)
    stats = DensifyStats.zeros(len(init_scene.gaussians))
    log = MetricsLog()
    rounds = 0
    t0 = time.perf_counter()

    def eval_psnr(scene):
        vals = [psnr(render(scene, cameras[i], background).image, gt_images[i])
                for i in test_ids]
        return float(np.mean(vals))

    def log_row(iteration, loss, scene):
        log.rows.append(
            {
                "iteration": iteration,
                "loss": loss,
                "psnr": eval_psnr(scene),
                "gaussians": len(scene.gaussians),
                "seconds": time.perf_counter() - t0,
                "rounds": rounds,
            }
        )

    scene = params.to_scene()
    log_row(0, float("nan"), scene)
    for it in range(1, schedule.total_iters + 1):
        cam_id = train_ids[(it - 1) % len(train_ids)]
        cam, gt = cameras[cam_id], gt_images[cam_id]
        scene = params.to_scene()
        out = render(scene, cam, background)
        diff = out.image - gt
        loss = float(np.abs(diff).mean())
        if not np.isfinite(loss):
            raise DivergenceError(f"non-finite loss at iteration {it}")
        dL_dI = np.sign(diff) / diff.size
        # float32 gradients: ~2x faster and far below Adam's step noise
        grads = render_backward(scene, cam, background, dL_dI,
                                single_precision=True)
        accumulate_stats(stats, grads)
        opt.step(params, _chain_grads(params, grads))

        if (schedule.densify_from <= it <= schedule.densify_until
                and it % schedule.t_interval == 0):
            scene = params.to_scene()
            n_children = schedule.vanilla_n()
            rng = np.random.default_rng((schedule.seed, it))
            if n_children is None:
                train_cams = [cameras[i] for i in train_ids]
                train_gts = [gt_images[i] for i in train_ids]
                scene, report = adpsplit_step(scene, train_cams, train_gts,
                                              stats, cfg, rng)
            else:
                scene, report = vanilla_densify(scene, stats, cfg, n_children, rng)
            rounds += 1
            params = _Params(scene)
            opt_new = _Adam(params, lrs=opt.lrs)
            opt_new.t = opt.t
            opt_new.m, opt_new.v = opt.m, opt.v
            opt_new.remap(params, report.index_map, report.reset_indices)
            opt = opt_new
            stats = remap_stats(stats, report)
            if prune_opacity > 0.0:
                params, opt, stats = _prune(params, opt, stats, prune_opacity)
            log.densify_rows.append(
                {
                    "iteration": it,
                    "round": rounds,
                    "mode": schedule.split_mode,
                    "count_before": report.count_before,
                    "count_after": report.count_after,
                    "splits": sum(1 for c in report.candidates
                                  if c.children_inserted > 0),
                    "fallbacks": sum(1 for c in report.candidates if c.fallback),
                    "resets": len(report.reset_indices),
                    "clones": len(report.clones),
                }
            )

        if it % LOG_EVERY == 0 or it == schedule.total_iters:
            log_row(it, loss, params.to_scene())
    return params.to_scene(), log


def rounds_to_target(log: MetricsLog, target: float):
    """Densification rounds executed before held-out PSNR first hit target."""
    for r in log.rows:
        if r["psnr"] >= target:
            return r["rounds"]
    return None


def compare_experiment(seeds: list, k: int, budget: Schedule,
                       cfg: AdpSplitConfig, out_dir=None,
                       cam_count: int = DESK_CAMERAS,
                       image_size: int = DESK_IMAGE_SIZE,
                       modes=("vanilla-binary", "vanilla-n(5)", "adpsplit")):
    """Run the split-mode comparison over seeds with a shared budget.

    For each seed, all modes start from the identical init scene and get
    the same iteration budget. Returns rows with final PSNR, Gaussian
    count, and densification rounds to first reach the target PSNR
    (ground-truth self-PSNR, i.e. the cap, minus 3 dB).
    """
    if len(seeds) < 2:
        raise ValueError("need at least 2 seeds")
    target = PSNR_CAP - 3.0
    rows = []
    out_dir = Path(out_dir) if out_dir is not None else None
    for seed in seeds:
        gt_scene, cameras, gt_images = synth_scene(seed, k, cam_count, image_size)
        init = init_from_gt(gt_scene, seed)
        for mode in modes:
            sched = Schedule(
                total_iters=budget.total_iters,
                densify_from=budget.densify_from,
                densify_until=budget.densify_until,
                t_interval=budget.t_interval,
                split_mode=mode,
                seed=seed,
            )
            scene, log = train(init, cameras, gt_images, sched, cfg)
            final = log.rows[-1]
            rtt = rounds_to_target(log, target)
            rows.append(
                {
                    "seed": seed,
                    "mode": mode,
                    "final_psnr": final["psnr"],
                    "final_gaussians": final["gaussians"],
                    "rounds_total": final["rounds"],
                    "rounds_to_target": rtt,
                    "target_psnr": target,
                }
            )
            if out_dir is not None:
                out_dir.mkdir(parents=True, exist_ok=True)
                log.write_csv(out_dir / f"metrics_seed{seed}_{_slug(mode)}.csv")
                from .images import write_image

                _, test_ids = split_cameras(len(cameras))
                img = render(scene, cameras[test_ids[0]], np.zeros(3)).image
                write_image(out_dir / f"render_seed{seed}_{_slug(mode)}.png", img)
    if out_dir is not None:
        write_comparison_csv(rows, out_dir / "comparison.csv")
    return rows


def _slug(mode: str) -> str:
    return mode.replace("(", "").replace(")", "")


def write_comparison_csv(rows, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["seed", "mode", "final_psnr", "final_gaussians",
                    "rounds_total", "rounds_to_target", "target_psnr"])
        for r in rows:
            w.writerow(
                [r["seed"], r["mode"], repr(r["final_psnr"]),
                 r["final_gaussians"], r["rounds_total"],
                 "" if r["rounds_to_target"] is None else r["rounds_to_target"],
                 repr(r["target_psnr"])]
            )


def desk_config(**overrides) -> AdpSplitConfig:
    """Desk-scale AdpSplit configuration.

    Fewer sampled views than the full-scale default; the erosion
    footprint, minimum region area and band count are scaled down to
    match the much smaller images (error regions that span dozens of
    pixels at megapixel resolution span only a handful at 32-48 px
    across); and the gradient threshold is lowered because the
    mean-normalized loss over a few thousand pixels yields viewspace
    gradients orders of magnitude smaller than at production
    resolution -- without this, the Gaussians responsible for small
    residual error blobs never qualify as split candidates.
    """
    base = dict(v_views=DESK_V_VIEWS, r_erode=1, m_min=2, l_bands=2,
                tau_g=1.25e-4)
    base.update(overrides)
    return AdpSplitConfig(**base)
