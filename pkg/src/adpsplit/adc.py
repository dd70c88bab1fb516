"""Adaptive density control: gradient statistics, candidate selection,
clone / vanilla split, and the full error-driven adaptive split step.

The step mutates the scene under a single-writer contract with a
deterministic candidate order (ascending Gaussian index); the returned
report carries the old-to-new index map so a trainer can remap its
per-Gaussian optimizer state.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .child_init import init_child
from .cross_view_merge import cap_children, merge_groups
from .error_partition import compute_maps, partition, region_stats
from .raster import GradOutput, render
from .scene import (
    Gaussian3D,
    Scene,
    quat_multiply,
    quat_to_rot,
    rgb_to_dc,
    rot_to_quat,
)


@dataclass
class DensifyStats:
    """Accumulated viewspace gradient norms and visibility counts."""

    grad_accum: np.ndarray
    denom: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "DensifyStats":
        return cls(grad_accum=np.zeros(n), denom=np.zeros(n))

    def g(self) -> np.ndarray:
        """Average gradient statistic; zero where never visible."""
        out = np.zeros_like(self.grad_accum)
        seen = self.denom > 0
        out[seen] = self.grad_accum[seen] / self.denom[seen]
        return out


@dataclass
class CandidateRecord:
    index: int
    regions_per_view: list
    proposals: int = 0
    merged: int = 0
    children_inserted: int = 0
    fallback: bool = False
    reset: bool = False


@dataclass
class SplitReport:
    count_before: int
    count_after: int = 0
    clones: list = field(default_factory=list)
    candidates: list = field(default_factory=list)
    sampled_views: list = field(default_factory=list)
    merge_edges: int = 0
    # index_map[new_index] = old index carried over, or -1 for new Gaussians
    index_map: np.ndarray = None
    reset_indices: list = field(default_factory=list)


def accumulate_stats(stats: DensifyStats, grads: GradOutput) -> None:
    """Add one view's positional gradient norms for visible Gaussians."""
    if len(stats.grad_accum) != len(grads.visible):
        raise ValueError("stats dimensions do not match gradient output")
    norms = np.linalg.norm(grads.viewspace_grad, axis=1)
    stats.grad_accum[grads.visible] += norms[grads.visible]
    stats.denom[grads.visible] += 1.0


def select(stats: DensifyStats, scene: Scene, tau_g: float, tau_s_abs: float):
    """Split/clone candidate sets: high gradient, split large, clone small."""
    g = stats.g()
    max_scale = np.array([gs.scale.max() for gs in scene.gaussians])
    high = g >= tau_g
    split_set = np.nonzero(high & (max_scale > tau_s_abs))[0]
    clone_set = np.nonzero(high & (max_scale <= tau_s_abs))[0]
    return split_set, clone_set


def vanilla_split(parent: Gaussian3D, n: int, eta: float, rng) -> list:
    """n children sampled from the parent distribution; scale shrunk by eta*n."""
    r = quat_to_rot(parent.rot)
    children = []
    for _ in range(n):
        delta = rng.standard_normal(3) * parent.scale
        children.append(
            Gaussian3D(
                mu=parent.mu + r @ delta,
                scale=parent.scale / (eta * n),
                rot=parent.rot,
                opacity=parent.opacity,
                sh_dc=parent.sh_dc,
                sh_rest=parent.sh_rest,
            )
        )
    return children


def clone(parent: Gaussian3D) -> Gaussian3D:
    """Exact copy; the caller appends it and keeps the parent."""
    return Gaussian3D(
        mu=parent.mu,
        scale=parent.scale,
        rot=parent.rot,
        opacity=parent.opacity,
        sh_dc=parent.sh_dc,
        sh_rest=parent.sh_rest,
    )


def _clamp_opacity(o: float) -> float:
    return min(max(o, 1e-6), 1.0 - 1e-6)


def _group_to_gaussian(group, opacity=None) -> Gaussian3D:
    """Convert a merged group to a Gaussian via eigendecomposition."""
    evals, evecs = np.linalg.eigh(group.merged_cov)
    if np.linalg.det(evecs) < 0:
        evecs[:, 0] = -evecs[:, 0]
    scale = np.sqrt(np.maximum(evals, 1e-16))
    return Gaussian3D(
        mu=group.merged_mu,
        scale=scale,
        rot=rot_to_quat(evecs),
        opacity=_clamp_opacity(group.merged_opacity if opacity is None else opacity),
        sh_dc=rgb_to_dc(group.merged_rgb),
        sh_rest=(),
    )


def adpsplit_step(scene: Scene, cameras: list, gt_images: list,
                  stats: DensifyStats, cfg, rng) -> tuple:
    """One error-driven densification pass over the scene.

    Per split candidate: partition error regions in V sampled views,
    initialize one child per region, merge across views, cap at n_max,
    then insert the children plus a reduced-opacity parent copy. A
    candidate that was never dominant in the sampled views falls back to
    the vanilla binary split; one with dominance but no surviving region
    keeps its parent and is flagged for an optimizer reset.
    """
    if cfg.v_views > len(cameras):
        raise ValueError(
            f"v_views={cfg.v_views} exceeds available cameras ({len(cameras)})"
        )
    n_before = len(scene.gaussians)
    report = SplitReport(count_before=n_before)

    view_ids = sorted(rng.choice(len(cameras), size=cfg.v_views, replace=False))
    report.sampled_views = [int(v) for v in view_ids]
    renders = {v: render(scene, cameras[v], np.zeros(3)) for v in view_ids}

    split_set, clone_set = select(stats, scene, cfg.tau_g, cfg.tau_s * scene.extent)
    split_set = set(int(i) for i in split_set)

    maps = {
        v: compute_maps(renders[v].image, gt_images[v], cfg) for v in view_ids
    }
    regions_by_cand = {i: {v: [] for v in view_ids} for i in split_set}
    for v in view_ids:
        for reg in partition(maps[v], renders[v].dominant_map, split_set,
                             cfg.m_min, view=v):
            region_stats(reg, gt_images[v])
            regions_by_cand[reg.candidate][v].append(reg)
    ever_dominant = {
        i: any((renders[v].dominant_map == i).any() for v in view_ids)
        for i in split_set
    }

    removed = set()
    inserted = []           # (list of Gaussian3D, carried_old_index or -1)
    for i in sorted(split_set):
        parent = scene.gaussians[i]
        rec = CandidateRecord(
            index=i,
            regions_per_view=[len(regions_by_cand[i][v]) for v in view_ids],
        )
        proposals = []
        for v in view_ids:
            for reg in regions_by_cand[i][v]:
                child = init_child(parent, i, reg, cameras[v], cfg)
                if child is not None:
                    proposals.append(child)
        rec.proposals = len(proposals)

        if not ever_dominant[i]:
            # never dominant in any sampled view: vanilla binary fallback
            rec.fallback = True
            removed.add(i)
            for g in vanilla_split(parent, 2, cfg.eta, rng):
                inserted.append((g, -1))
        elif not proposals:
            # dominance but no usable error region: keep parent, reset it
            rec.reset = True
            report.reset_indices.append(i)
        else:
            groups = merge_groups(proposals, cfg.gamma_d, cfg.gamma_c)
            report.merge_edges += sum(len(gr.members) - 1 for gr in groups)
            groups = cap_children(groups, cfg.n_max)
            rec.merged = len(groups)
            n_i = len(groups)
            removed.add(i)
            for gr in groups:
                inserted.append((_group_to_gaussian(gr, opacity=parent.opacity), -1))
            parent_copy = Gaussian3D(
                mu=parent.mu,
                scale=parent.scale,
                rot=parent.rot,
                opacity=_clamp_opacity(parent.opacity / (n_i + 1)),
                sh_dc=parent.sh_dc,
                sh_rest=parent.sh_rest,
            )
            inserted.append((parent_copy, -1))
            rec.children_inserted = n_i
        report.candidates.append(rec)

    for i in sorted(int(c) for c in clone_set):
        inserted.append((clone(scene.gaussians[i]), -1))
        report.clones.append(i)

    new_gaussians = []
    index_map = []
    for i, g in enumerate(scene.gaussians):
        if i not in removed:
            new_gaussians.append(g)
            index_map.append(i)
    for g, carried in inserted:
        new_gaussians.append(g)
        index_map.append(carried)
    scene.gaussians = new_gaussians
    report.count_after = len(new_gaussians)
    report.index_map = np.array(index_map, dtype=np.int64)
    return scene, report


def vanilla_densify(scene: Scene, stats: DensifyStats, cfg, n_children: int,
                    rng) -> tuple:
    """Fixed-cardinality densification: split large candidates into
    ``n_children`` randomly placed children, clone the small ones."""
    n_before = len(scene.gaussians)
    report = SplitReport(count_before=n_before)
    split_set, clone_set = select(stats, scene, cfg.tau_g, cfg.tau_s * scene.extent)
    removed = set()
    inserted = []
    for i in sorted(int(c) for c in split_set):
        parent = scene.gaussians[i]
        removed.add(i)
        inserted.extend(vanilla_split(parent, n_children, cfg.eta, rng))
        report.candidates.append(
            CandidateRecord(index=i, regions_per_view=[], fallback=True,
                            children_inserted=n_children)
        )
    for i in sorted(int(c) for c in clone_set):
        inserted.append(clone(scene.gaussians[i]))
        report.clones.append(i)
    new_gaussians = []
    index_map = []
    for i, g in enumerate(scene.gaussians):
        if i not in removed:
            new_gaussians.append(g)
            index_map.append(i)
    for g in inserted:
        new_gaussians.append(g)
        index_map.append(-1)
    scene.gaussians = new_gaussians
    report.count_after = len(new_gaussians)
    report.index_map = np.array(index_map, dtype=np.int64)
    return scene, report


def remap_stats(stats: DensifyStats, report: SplitReport) -> DensifyStats:
    """Fresh stats for the post-step scene; everything touched starts at zero.

    Carried Gaussians keep their accumulators except candidates flagged
    for reset; new Gaussians start at zero.
    """
    n = report.count_after
    out = DensifyStats.zeros(n)
    reset = set(report.reset_indices) | set(report.clones)
    for new_i, old_i in enumerate(report.index_map):
        if old_i >= 0 and old_i not in reset:
            out.grad_accum[new_i] = stats.grad_accum[old_i]
            out.denom[new_i] = stats.denom[old_i]
    return out
