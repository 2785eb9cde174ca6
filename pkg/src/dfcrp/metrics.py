"""Partition comparison metrics and posterior summaries.

Works on retained partition draws: chance-corrected similarity to a
reference partition, annotator-pair overlap, consensus-cluster counts by
diameter band, per-annotator singleton and near-complete-cluster shares,
and the fraction of clusters whose members are further apart than a
spatial radius.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .mixture import features_matrix


def _labels_of(draw) -> Sequence[int]:
    return draw.labels if hasattr(draw, "labels") else draw


def adjusted_rand_index(first: Sequence[int], second: Sequence[int]) -> float:
    """Chance-corrected pair-counting agreement between two partitions.

    1 means identical partitions, 0 agreement at the level expected by
    chance under the permutation model; slightly negative values are
    possible.  Invariant to relabeling of either argument.
    """
    a = np.asarray(first)
    b = np.asarray(second)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    n = a.size
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    n_rows = int(ai.max()) + 1
    n_cols = int(bi.max()) + 1
    cont = np.bincount(ai * n_cols + bi, minlength=n_rows * n_cols).astype(float)

    def comb2(v):
        return v * (v - 1.0) / 2.0

    cont_mat = cont.reshape(n_rows, n_cols)
    sum_cells = comb2(cont_mat).sum()
    sum_rows = comb2(cont_mat.sum(axis=1)).sum()
    sum_cols = comb2(cont_mat.sum(axis=0)).sum()
    total = comb2(float(n))
    expected = sum_rows * sum_cols / total
    max_index = 0.5 * (sum_rows + sum_cols)
    if max_index == expected:
        return 1.0
    return float((sum_cells - expected) / (max_index - expected))


def jaccard_expert_pair(draw, families, family_a, family_b) -> float:
    """Cluster-level overlap of two annotators within one partition.

    Clusters are the set elements: the intersection counts clusters
    holding a member of both annotators, the union counts clusters
    holding a member of either.
    """
    labels = _labels_of(draw)
    families = list(families)
    present = set(families)
    if family_a not in present or family_b not in present:
        raise ValueError(f"unknown family id {family_a!r} or {family_b!r}")
    clusters_a = {lab for lab, fam in zip(labels, families) if fam == family_a}
    clusters_b = {lab for lab, fam in zip(labels, families) if fam == family_b}
    union = clusters_a | clusters_b
    return len(clusters_a & clusters_b) / len(union)


def pairwise_jaccard_matrix(draws, families) -> tuple[list, np.ndarray]:
    """Draw-averaged annotator-pair overlaps.

    Returns the sorted family ids and a symmetric matrix of mean pairwise
    coefficients (diagonal 1).
    """
    families = list(families)
    fam_ids = sorted(set(families))
    idx = {f: i for i, f in enumerate(fam_ids)}
    j = len(fam_ids)
    accum = np.zeros((j, j))
    draws = list(draws)
    for draw in draws:
        labels = _labels_of(draw)
        clusters: list[set] = [set() for _ in range(j)]
        for lab, fam in zip(labels, families):
            clusters[idx[fam]].add(lab)
        for a in range(j):
            for b in range(a, j):
                union = clusters[a] | clusters[b]
                accum[a, b] += len(clusters[a] & clusters[b]) / len(union)
    accum /= len(draws)
    accum = np.triu(accum) + np.triu(accum, 1).T
    return fam_ids, accum


@dataclass(frozen=True)
class SizeBands:
    """Diameter thresholds (original pixel scale) splitting clusters into
    bands; defaults give small (<50), medium (50-100), large (>=100)."""

    thresholds: tuple[float, ...] = (50.0, 100.0)
    labels: tuple[str, ...] = ("small", "medium", "large")

    def __post_init__(self):
        t = tuple(float(v) for v in self.thresholds)
        if any(b <= a for a, b in zip(t, t[1:])):
            raise ValueError("thresholds must be strictly increasing")
        if len(self.labels) != len(t) + 1:
            raise ValueError("need one label per band")
        object.__setattr__(self, "thresholds", t)

    @property
    def num_bands(self) -> int:
        return len(self.thresholds) + 1

    def band_of(self, diameter: float) -> int:
        for i, thr in enumerate(self.thresholds):
            if diameter < thr:
                return i
        return len(self.thresholds)


def consensus_counts(draw, data, min_size: int, bands: SizeBands) -> np.ndarray:
    """Number of clusters of size >= ``min_size`` per diameter band.

    A cluster's diameter is the arithmetic mean of its members'
    original-scale diameters (exp of the log-diameter feature).
    """
    if min_size < 1:
        raise ValueError("min_size must be >= 1")
    labels = np.asarray(_labels_of(draw))
    diam = np.exp(features_matrix(data)[:, 2])
    out = np.zeros(bands.num_bands, dtype=np.int64)
    _, inverse, sizes = np.unique(labels, return_inverse=True, return_counts=True)
    sums = np.bincount(inverse, weights=diam)
    for k in range(sizes.size):
        if sizes[k] >= min_size:
            out[bands.band_of(sums[k] / sizes[k])] += 1
    return out


def singleton_and_excluded_stats(draws, families):
    """Per-annotator shares of singleton and all-but-one clusters.

    For each draw, the share (in percent) of size-1 clusters belonging
    to each annotator, and of size-(J-1) clusters excluding each
    annotator, where J is the number of annotators.  Returns two dicts
    mapping family id to ``(mean, lower, upper)`` with an equal-tailed
    95% interval over the draws that contain such clusters.
    """
    draws = list(draws)
    if not draws:
        raise ValueError("need at least one draw")
    families = list(families)
    fam_ids = sorted(set(families))
    n_fam = len(fam_ids)
    idx = {f: i for i, f in enumerate(fam_ids)}
    single_shares: list[np.ndarray] = []
    excluded_shares: list[np.ndarray] = []
    for draw in draws:
        labels = _labels_of(draw)
        members: dict[int, list] = {}
        for i, lab in enumerate(labels):
            members.setdefault(lab, []).append(i)
        singles = np.zeros(n_fam)
        excls = np.zeros(n_fam)
        n_single = 0
        n_excl = 0
        for items in members.values():
            if len(items) == 1:
                singles[idx[families[items[0]]]] += 1
                n_single += 1
            elif len(items) == n_fam - 1:
                missing = set(fam_ids) - {families[i] for i in items}
                excls[idx[missing.pop()]] += 1
                n_excl += 1
        if n_single:
            single_shares.append(100.0 * singles / n_single)
        if n_excl:
            excluded_shares.append(100.0 * excls / n_excl)

    def summarize(shares: list[np.ndarray]) -> dict:
        out = {}
        if not shares:
            return {f: (0.0, 0.0, 0.0) for f in fam_ids}
        arr = np.vstack(shares)
        lo, hi = np.percentile(arr, [2.5, 97.5], axis=0)
        mean = arr.mean(axis=0)
        for f in fam_ids:
            i = idx[f]
            out[f] = (float(mean[i]), float(lo[i]), float(hi[i]))
        return out

    return summarize(single_shares), summarize(excluded_shares)


@dataclass(frozen=True)
class ExpertSummary:
    """One annotator's posterior clustering summary."""

    family: object
    count: int
    jaccard: float
    singleton_pct: float
    singleton_interval: tuple[float, float]
    excluded_pct: float
    excluded_interval: tuple[float, float]


def expert_summaries(draws, families) -> list[ExpertSummary]:
    """Per-annotator table ordered by annotation count: mean pairwise
    overlap with the other annotators plus singleton and excluded
    shares with 95% intervals."""
    families = list(families)
    fam_ids, jac = pairwise_jaccard_matrix(draws, families)
    singles, excls = singleton_and_excluded_stats(draws, families)
    counts = {f: families.count(f) for f in fam_ids}
    rows = []
    for i, f in enumerate(fam_ids):
        others = [jac[i, k] for k in range(len(fam_ids)) if k != i]
        mean_jac = float(np.mean(others)) if others else 1.0
        s_mean, s_lo, s_hi = singles[f]
        e_mean, e_lo, e_hi = excls[f]
        rows.append(
            ExpertSummary(
                family=f,
                count=counts[f],
                jaccard=mean_jac,
                singleton_pct=s_mean,
                singleton_interval=(s_lo, s_hi),
                excluded_pct=e_mean,
                excluded_interval=(e_lo, e_hi),
            )
        )
    rows.sort(key=lambda r: (r.count, str(r.family)))
    return rows


def _draw_violating_proportion(labels, coords, rho: float) -> float:
    members: dict[int, list] = {}
    for i, lab in enumerate(labels):
        members.setdefault(lab, []).append(i)
    violating = 0
    for items in members.values():
        if len(items) < 2:
            continue
        if rho == 0:
            violating += 1
            continue
        pts = coords[items]
        diff = pts[:, None, :] - pts[None, :, :]
        if np.sqrt((diff**2).sum(axis=2)).max() > rho:
            violating += 1
    return violating / len(members)


def violating_cluster_proportion(draws, data, rho: float) -> float:
    """Mean fraction of clusters whose members are spatially further
    apart than ``rho``; at radius zero every multi-member cluster counts."""
    if rho < 0:
        raise ValueError(f"radius must be >= 0, got {rho}")
    coords = features_matrix(data)[:, :2]
    draws = list(draws)
    if not draws:
        raise ValueError("need at least one draw")
    vals = [_draw_violating_proportion(_labels_of(d), coords, rho) for d in draws]
    return float(np.mean(vals))


def cluster_size_counts(draw, max_min_size: int = 6) -> np.ndarray:
    """Number of clusters of size >= s for s = 1..max_min_size."""
    labels = np.asarray(_labels_of(draw))
    _, sizes = np.unique(labels, return_counts=True)
    return np.array([(sizes >= s).sum() for s in range(1, max_min_size + 1)])


def duplicate_family_fraction(draw, families) -> float:
    """Fraction of clusters holding two or more items of one family."""
    labels = _labels_of(draw)
    seen: dict[int, set] = {}
    dup: set[int] = set()
    for lab, fam in zip(labels, families):
        fams = seen.setdefault(lab, set())
        if fam in fams:
            dup.add(lab)
        fams.add(fam)
    return len(dup) / len(seen)
