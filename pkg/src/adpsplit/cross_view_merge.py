"""Cross-view merging of child proposals belonging to one parent.

Proposals that explain the same underfit portion of a parent from
different views are grouped transitively and replaced by one enclosing
Gaussian; the per-parent child count is then capped.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .child_init import ChildProposal


@dataclass
class MergeGroup:
    """One connected group of proposals and its enclosing merged Gaussian."""

    members: list              # indices into the proposal list
    merged_mu: np.ndarray
    merged_cov: np.ndarray     # 3x3 SPD
    merged_rgb: np.ndarray
    merged_opacity: float

    @property
    def extent(self) -> float:
        """Largest eigenvalue of the merged covariance (used by the cap)."""
        return float(np.linalg.eigvalsh(self.merged_cov)[-1])


def mergeable(a: ChildProposal, b: ChildProposal,
              gamma_d: float, gamma_c: float) -> bool:
    """Symmetric-Mahalanobis and color gates; both thresholds inclusive."""
    assert a.parent == b.parent, "cross-parent proposals are never compared"
    delta = b.mu - a.mu
    d = np.sqrt(delta @ np.linalg.inv(a.cov()) @ delta) + np.sqrt(
        delta @ np.linalg.inv(b.cov()) @ delta
    )
    return d <= gamma_d and np.max(np.abs(a.rgb - b.rgb)) <= gamma_c


def merge_params(members: list) -> MergeGroup:
    """Enclosing Gaussian of a member set (indices resolved by caller).

    The merged axes are the eigenvectors of the mean member covariance;
    each merged variance is the squared maximum member reach (center
    offset plus 1-sigma extent) along that axis.
    """
    mus = np.array([m.mu for m in members])
    covs = np.array([m.cov() for m in members])
    merged_mu = mus.mean(axis=0)
    merged_rgb = np.array([m.rgb for m in members]).mean(axis=0)
    merged_opacity = float(np.mean([m.opacity for m in members]))
    _, evecs = np.linalg.eigh(covs.mean(axis=0))
    lam = np.empty(3)
    for r in range(3):
        e = evecs[:, r]
        reach = np.abs((mus - merged_mu) @ e) + np.sqrt(covs @ e @ e)
        lam[r] = reach.max() ** 2
    merged_cov = evecs @ np.diag(lam) @ evecs.T
    return MergeGroup(
        members=[],
        merged_mu=merged_mu,
        merged_cov=merged_cov,
        merged_rgb=merged_rgb,
        merged_opacity=merged_opacity,
    )


def merge_groups(proposals: list, gamma_d: float, gamma_c: float) -> list:
    """Connected components of the pairwise mergeable graph, merged.

    Output groups are ordered by their smallest member index; members are
    ascending, so results are invariant to input permutation up to that
    deterministic ordering.
    """
    n = len(proposals)
    parent_ids = {p.parent for p in proposals}
    assert len(parent_ids) <= 1, "merge_groups operates on a single parent"
    # union-find over the pairwise predicate
    root = list(range(n))

    def find(i):
        while root[i] != i:
            root[i] = root[root[i]]
            i = root[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            if mergeable(proposals[i], proposals[j], gamma_d, gamma_c):
                ri, rj = find(i), find(j)
                if ri != rj:
                    root[max(ri, rj)] = min(ri, rj)

    comps = {}
    for i in range(n):
        comps.setdefault(find(i), []).append(i)
    groups = []
    for r in sorted(comps):
        members = comps[r]
        group = merge_params([proposals[i] for i in members])
        group.members = members
        groups.append(group)
    return groups


def cap_children(groups: list, n_max: int) -> list:
    """Keep the n_max groups with the largest covariance extent.

    Ties keep construction order (stable sort on descending extent).
    """
    ordered = sorted(groups, key=lambda g: -g.extent)
    return ordered[: min(n_max, len(ordered))]
